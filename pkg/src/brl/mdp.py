"""Exact tabular episodic MDPs.

Steps are indexed ``0 .. H-1`` throughout the package. Action-value
tables are arrays of shape ``(H, S, A)``; the value after the last step is
identically zero.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

ATOL = 1e-12


class AssumptionViolation(ValueError):
    """Raised when a coverage assumption needed by a bound does not hold."""


@dataclass(frozen=True)
class TabularMdp:
    """Finite-horizon MDP with deterministic rewards.

    Parameters
    ----------
    transitions : ndarray, shape (H, S, A, S)
        ``transitions[h, s, a, s']`` is the probability of moving to ``s'``.
    rewards : ndarray, shape (H, S, A)
        Rewards in ``[0, 1]``.
    initial_state : int
        Fixed start state of every episode.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    initial_state: int = 0

    def __post_init__(self):
        P = np.array(self.transitions, dtype=np.float64)
        r = np.array(self.rewards, dtype=np.float64)
        if P.ndim != 4 or P.shape[1] != P.shape[3]:
            raise ValueError(f"transitions must have shape (H, S, A, S), got {P.shape}")
        H, S, A, _ = P.shape
        if H < 1 or S < 1 or A < 1:
            raise ValueError("horizon, states and actions must all be positive")
        if r.shape != (H, S, A):
            raise ValueError(f"rewards must have shape {(H, S, A)}, got {r.shape}")
        if np.any(P < 0):
            raise ValueError("transition probabilities must be nonnegative")
        if np.max(np.abs(P.sum(axis=-1) - 1.0)) > ATOL:
            raise ValueError("transition rows must sum to 1")
        if np.any(r < 0) or np.any(r > 1):
            raise ValueError("rewards must lie in [0, 1]")
        if not 0 <= int(self.initial_state) < S:
            raise ValueError("initial_state out of range")
        P.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "initial_state", int(self.initial_state))

    @property
    def horizon(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.transitions.shape[:3]

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "initial_state": self.initial_state,
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularMdp":
        mdp = cls(
            transitions=np.asarray(data["transitions"], dtype=np.float64),
            rewards=np.asarray(data["rewards"], dtype=np.float64),
            initial_state=int(data.get("initial_state", 0)),
        )
        for key, value in (("horizon", mdp.horizon), ("num_states", mdp.num_states),
                           ("num_actions", mdp.num_actions)):
            if key in data and int(data[key]) != value:
                raise ValueError(f"{key}={data[key]} disagrees with array shapes ({value})")
        return mdp


@dataclass(frozen=True)
class BatchDistribution:
    """Per-step sampling distributions over state-action pairs, shape (H, S, A)."""

    mu: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64)
        if mu.ndim != 3:
            raise ValueError(f"mu must have shape (H, S, A), got {mu.shape}")
        if np.any(mu < 0):
            raise ValueError("mu must be nonnegative")
        if np.max(np.abs(mu.sum(axis=(1, 2)) - 1.0)) > ATOL:
            raise ValueError("each mu_h must sum to 1")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)

    @property
    def horizon(self) -> int:
        return self.mu.shape[0]

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "BatchDistribution":
        return cls(np.asarray(data["mu"], dtype=np.float64))


@dataclass(frozen=True)
class Policy:
    """Deterministic Markov policy; ``actions[h, s]`` is the chosen action."""

    actions: np.ndarray
    num_actions: int | None = None

    def __post_init__(self):
        acts = np.array(self.actions, dtype=np.int64)
        if acts.ndim != 2:
            raise ValueError("actions must have shape (H, S)")
        if np.any(acts < 0) or (self.num_actions is not None and np.any(acts >= self.num_actions)):
            raise ValueError("selected action out of range")
        acts.setflags(write=False)
        object.__setattr__(self, "actions", acts)

    def __call__(self, h: int, s: int) -> int:
        return int(self.actions[h, s])


@dataclass(frozen=True)
class ConcentrabilityReport:
    """Coefficient (``math.inf`` when coverage fails) and the (h, s, a) attaining it."""

    coefficient: float
    witness: tuple[int, int, int] | None = field(default=None)

    @property
    def is_finite(self) -> bool:
        return math.isfinite(self.coefficient)


def as_tables(f) -> np.ndarray:
    """Return the dense ``(H, S, A)`` tables of ``f`` (an array or a QFunction)."""
    if hasattr(f, "tables"):
        return np.asarray(f.tables(), dtype=np.float64)
    return np.asarray(f, dtype=np.float64)


def _check_step(mdp: TabularMdp, h: int) -> int:
    if not 0 <= h < mdp.horizon:
        raise IndexError(f"step {h} out of range for horizon {mdp.horizon}")
    return int(h)


def bellman_apply(mdp: TabularMdp, h: int, f_next) -> np.ndarray:
    """Optimal Bellman backup ``r_h + P_h max_a f_next`` at step ``h``.

    ``f_next`` is the ``(S, A)`` table at step ``h + 1`` (zeros after the
    last step).
    """
    h = _check_step(mdp, h)
    f_next = np.asarray(f_next, dtype=np.float64)
    if f_next.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"f_next must have shape {(mdp.num_states, mdp.num_actions)}, got {f_next.shape}")
    return mdp.rewards[h] + mdp.transitions[h] @ f_next.max(axis=1)


def bellman_images(mdp: TabularMdp, f) -> np.ndarray:
    """Stack of ``T_h f_{h+1}`` for every step, shape (H, S, A)."""
    tables = as_tables(f)
    H, S, A = mdp.shape
    out = np.empty((H, S, A))
    for h in range(H):
        nxt = tables[h + 1] if h + 1 < H else np.zeros((S, A))
        out[h] = bellman_apply(mdp, h, nxt)
    return out


def optimal_q(mdp: TabularMdp) -> np.ndarray:
    """Optimal action values by backward induction, shape (H, S, A)."""
    H, S, A = mdp.shape
    q = np.zeros((H + 1, S, A))
    for h in range(H - 1, -1, -1):
        q[h] = bellman_apply(mdp, h, q[h + 1])
    return q[:H]


def greedy(tables) -> Policy:
    """Greedy policy of dense tables, ties toward the lowest action."""
    tables = as_tables(tables)
    return Policy(np.argmax(tables, axis=2), tables.shape[2])


def policy_q(mdp: TabularMdp, pi: Policy) -> np.ndarray:
    """Action values of a deterministic policy, shape (H, S, A)."""
    H, S, A = mdp.shape
    q = np.zeros((H, S, A))
    v_next = np.zeros(S)
    for h in range(H - 1, -1, -1):
        q[h] = mdp.rewards[h] + mdp.transitions[h] @ v_next
        v_next = q[h][np.arange(S), pi.actions[h]]
    return q


def policy_value(mdp: TabularMdp, pi: Policy) -> float:
    """Expected return of ``pi`` from the initial state."""
    s1 = mdp.initial_state
    return float(policy_q(mdp, pi)[0, s1, pi(0, s1)])


def state_action_marginals(mdp: TabularMdp, pi: Policy) -> np.ndarray:
    """Forward marginals ``P(s_h = s, a_h = a)`` under ``pi``, shape (H, S, A)."""
    H, S, A = mdp.shape
    out = np.zeros((H, S, A))
    d = np.zeros(S)
    d[mdp.initial_state] = 1.0
    for h in range(H):
        out[h, np.arange(S), pi.actions[h]] = d
        d = np.einsum("sa,sat->t", out[h], mdp.transitions[h])
    return out


def next_state_marginal(mdp: TabularMdp, mu: BatchDistribution, h: int) -> np.ndarray:
    """Distribution of ``s'`` when ``(s, a) ~ mu_h``."""
    h = _check_step(mdp, h)
    return np.einsum("sa,sat->t", mu.mu[h], mdp.transitions[h])


def _max_reach_to(mdp: TabularMdp, t: int) -> list[np.ndarray]:
    """``W[tau][x, s]``: best probability of being in ``s`` at step ``t`` from ``x`` at ``tau``.

    Returned list is indexed by ``tau`` for ``tau <= t``.
    """
    S = mdp.num_states
    W = [None] * (t + 1)
    W[t] = np.eye(S)
    for tau in range(t - 1, -1, -1):
        W[tau] = np.einsum("xay,ys->xas", mdp.transitions[tau], W[tau + 1]).max(axis=1)
    return W


def _ratio_sup(reach: np.ndarray, mu_t: np.ndarray):
    """Sup over (s, a) of reach[s] / mu_t[s, a]; returns (value, (s, a))."""
    # the policy puts its whole step-t mass on whichever action is being tested
    num = np.broadcast_to(reach[:, None], mu_t.shape)
    bad = (num > 0) & (mu_t <= 0)
    if np.any(bad):
        s, a = np.argwhere(bad)[0]
        return math.inf, (int(s), int(a))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(mu_t > 0, num / np.where(mu_t > 0, mu_t, 1.0), 0.0)
    idx = np.unravel_index(np.argmax(ratio), ratio.shape)
    return float(ratio[idx]), (int(idx[0]), int(idx[1]))


def _check_shapes(mdp: TabularMdp, mu: BatchDistribution):
    if mu.mu.shape != mdp.shape:
        raise ValueError(f"mu has shape {mu.mu.shape}, expected {mdp.shape}")


def concentrability(mdp: TabularMdp, mu: BatchDistribution) -> ConcentrabilityReport:
    """Worst-case ratio of any policy's reach probability to the batch distribution.

    Deterministic Markov policies attain the maximal reach probability, so
    the numerator is an exact backward induction per target step.
    """
    _check_shapes(mdp, mu)
    best, witness = -math.inf, None
    for t in range(mdp.horizon):
        reach = _max_reach_to(mdp, t)[0][mdp.initial_state]
        val, (s, a) = _ratio_sup(reach, mu.mu[t])
        if val > best:
            best, witness = val, (t, s, a)
        if math.isinf(best):
            break
    return ConcentrabilityReport(best, witness)


def concentrability_tilde(mdp: TabularMdp, mu: BatchDistribution) -> ConcentrabilityReport:
    """Restarted concentrability: worst ratio at step ``t > h`` after restarting at ``h``.

    Two restarts are considered for every ``h``: ``(s, a) ~ mu_h`` at step
    ``h``, and ``s ~ nu_h`` with a uniform action at step ``h + 1``. For a
    one-step horizon the supremum is empty and the neutral value 1 is
    returned.
    """
    _check_shapes(mdp, mu)
    H, S, A = mdp.shape
    best, witness = -math.inf, None
    for t in range(1, H):
        W = _max_reach_to(mdp, t)
        for h in range(t):
            nu = next_state_marginal(mdp, mu, h)
            reach = nu @ W[h + 1]
            if h + 1 == t:
                uniform_start = nu / A
            else:
                U = np.einsum("xay,ys->xs", mdp.transitions[h + 1], W[h + 2]) / A
                uniform_start = nu @ U
            for cand in (reach, uniform_start):
                val, (s, a) = _ratio_sup(cand, mu.mu[t])
                if val > best:
                    best, witness = val, (t, s, a)
            if math.isinf(best):
                return ConcentrabilityReport(best, witness)
    if witness is None:
        return ConcentrabilityReport(1.0, None)
    return ConcentrabilityReport(best, witness)


def suboptimality_check(mdp: TabularMdp, mu: BatchDistribution, f) -> tuple[float, float]:
    """Value gap of the greedy policy of ``f`` and the Bellman-error bound on it.

    Returns ``(gap, bound)`` with ``bound = 2 H sqrt(C * E(f))``.
    """
    from .risk import bellman_error

    report = concentrability(mdp, mu)
    if not report.is_finite:
        raise AssumptionViolation(
            f"batch distribution misses reachable pair {report.witness}; concentrability is infinite"
        )
    q_star = optimal_q(mdp)
    s1 = mdp.initial_state
    gap = float(q_star[0, s1].max()) - policy_value(mdp, greedy(as_tables(f)))
    err = bellman_error(mdp, mu, f)
    bound = 2.0 * mdp.horizon * math.sqrt(report.coefficient * max(err, 0.0))
    return gap, bound


def all_policies(mdp: TabularMdp):
    """Iterate over every deterministic Markov policy (A ** (S * H) of them)."""
    H, S, A = mdp.shape
    for choice in itertools.product(range(A), repeat=H * S):
        yield Policy(np.array(choice).reshape(H, S), A)


def random_mdp(num_states: int, num_actions: int, horizon: int, rng: np.random.Generator,
               initial_state: int = 0, sparsity: float = 0.0) -> TabularMdp:
    """Random instance with Dirichlet transitions and uniform rewards.

    ``sparsity`` is the probability that a transition entry is zeroed
    (at least one entry per row is kept).
    """
    P = rng.dirichlet(np.ones(num_states), size=(horizon, num_states, num_actions))
    if sparsity > 0:
        keep = rng.random(P.shape) >= sparsity
        keep[..., 0] |= ~keep.any(axis=-1)
        P = np.where(keep, P, 0.0)
        P /= P.sum(axis=-1, keepdims=True)
    r = rng.random((horizon, num_states, num_actions))
    return TabularMdp(P, r, initial_state)


def random_batch_distribution(mdp: TabularMdp, rng: np.random.Generator,
                              floor: float = 0.0) -> BatchDistribution:
    """Random full-support batch distribution mixed with the uniform one by ``floor``."""
    H, S, A = mdp.shape
    mu = rng.dirichlet(np.ones(S * A), size=H).reshape(H, S, A)
    mu = (1 - floor) * mu + floor / (S * A)
    return BatchDistribution(mu / mu.sum(axis=(1, 2), keepdims=True))
