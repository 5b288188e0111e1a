"""Single-action three-step instances where one hidden sign is hard to learn.

State layout (``S + 6`` states): ``0`` is the start state, ``1 .. S`` are
the middle states, ``S + 1 .. S + 4`` are the terminal-side states
``t(j, k)`` in the order ``(-1, -1), (-1, 1), (1, -1), (1, 1)`` and
``S + 5`` is the absorbing end state. From middle state ``i`` the chain
moves to ``t(j, k)`` with probability ``(1 + eps * k * max(-c, j) * sigma_i) / 4``.

The two candidate value functions ``f(c')`` are worth ``1/2`` before the
last step and ``(k * max(c', j) + 1) / 2`` on ``t(j, k)``; ``f(c)`` has the
smaller Bellman error, by ``eps**2 / 12``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .func_approx import FunctionFamily
from .learners import erm_double_sampling
from .mdp import BatchDistribution, TabularMdp
from .risk import Dataset, generate_dataset
from .seeding import as_generator, stream

T_STATES = ((-1, -1), (-1, 1), (1, -1), (1, 1))
_J = np.array([j for j, _ in T_STATES])
_K = np.array([k for _, k in T_STATES])
HORIZON = 3
CLASSIFIERS = ("bayes", "double")


def _check_sign(c: int, name: str) -> int:
    if c not in (1, -1):
        raise ValueError(f"{name} must be +1 or -1")
    return int(c)


def step2_probabilities(epsilon: float, c: int, sigma_i: int) -> np.ndarray:
    """Next-state probabilities over the four ``t(j, k)`` states from one middle state."""
    return 0.25 * (1.0 + epsilon * _K * np.maximum(-c, _J) * sigma_i)


def family_values(c_prime: int) -> np.ndarray:
    """Values of ``f(c')`` on the four ``t(j, k)`` states."""
    return (_K * np.maximum(c_prime, _J) + 1) / 2.0


@dataclass(frozen=True)
class HardInstance:
    epsilon: float
    S: int
    c: int
    sigma: np.ndarray

    def __post_init__(self):
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        if self.S < 2:
            raise ValueError("S must be at least 2")
        _check_sign(self.c, "c")
        sigma = np.array(self.sigma, dtype=np.int64)
        if sigma.shape != (self.S,) or not np.all(np.isin(sigma, (-1, 1))):
            raise ValueError("sigma must be a vector of S entries in {-1, +1}")
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)

    @property
    def num_states(self) -> int:
        return self.S + 6

    @property
    def start(self) -> int:
        return 0

    @property
    def end(self) -> int:
        return self.S + 5

    def middle(self, i: int) -> int:
        return 1 + i

    def t_state(self, j: int, k: int) -> int:
        return self.S + 1 + T_STATES.index((j, k))

    @property
    def mdp(self) -> TabularMdp:
        n_states = self.num_states
        P = np.zeros((n_states, 1, n_states))
        r = np.zeros((n_states, 1))
        P[self.start, 0, 1:self.S + 1] = 1.0 / self.S
        for i in range(self.S):
            P[self.middle(i), 0, self.S + 1:self.S + 5] = step2_probabilities(self.epsilon, self.c, self.sigma[i])
        for q, (j, _) in enumerate(T_STATES):
            P[self.S + 1 + q, 0, self.end] = 1.0
            r[self.S + 1 + q, 0] = (j + 1) / 2.0
        P[self.end, 0, self.end] = 1.0
        return TabularMdp(np.broadcast_to(P, (HORIZON,) + P.shape), np.broadcast_to(r, (HORIZON,) + r.shape),
                          self.start)

    @property
    def mu(self) -> BatchDistribution:
        mu = np.zeros((HORIZON, self.num_states, 1))
        mu[0, self.start, 0] = 1.0
        mu[1, 1:self.S + 1, 0] = 1.0 / self.S
        mu[2, self.S + 1:self.S + 5, 0] = 0.25
        return BatchDistribution(mu)

    def member_table(self, c_prime: int) -> np.ndarray:
        """Dense ``(3, S + 6, 1)`` tables of ``f(c')``, identical at every step."""
        _check_sign(c_prime, "c_prime")
        v = np.zeros(self.num_states)
        v[self.start] = 0.5
        v[1:self.S + 1] = 0.5
        v[self.S + 1:self.S + 5] = family_values(c_prime)
        return np.broadcast_to(v[None, :, None], (HORIZON, self.num_states, 1)).copy()

    @property
    def family(self) -> FunctionFamily:
        """Tied two-member family; member 0 is ``f(+1)``, member 1 is ``f(-1)``."""
        return FunctionFamily.finite(np.stack([self.member_table(1), self.member_table(-1)]),
                                     bound=float(HORIZON), tied=True)

    @property
    def minimizer_index(self) -> int:
        return 0 if self.c == 1 else 1


def build_hard_instance(epsilon: float, S: int, c: int, sigma) -> HardInstance:
    return HardInstance(float(epsilon), int(S), int(c), np.asarray(sigma))


def hard_bellman_error(epsilon: float, c: int, c_prime: int) -> float:
    """Closed-form Bellman error of ``f(c')`` on any instance with hidden sign ``c``."""
    if not 0 < epsilon < 0.5:
        raise ValueError("epsilon must lie in (0, 0.5)")
    _check_sign(c, "c")
    _check_sign(c_prime, "c_prime")
    return (0.5 + (epsilon**2 / 4.0) * (c != c_prime)) / 3.0


def sample_sigma(S: int, balanced: bool = False, rng_seed=0) -> np.ndarray:
    """Independent uniform signs, or a uniformly random vector with zero sum."""
    rng = as_generator(rng_seed)
    if balanced:
        if S % 2:
            raise ValueError("balanced sign vectors need an even S")
        return rng.permutation(np.repeat(np.array([1, -1]), S // 2))
    return rng.choice(np.array([-1, 1]), size=S)


def sample_hard_dataset(instance: HardInstance, n: int, double: bool = False, rng_seed=0,
                        trial: int = 0) -> Dataset:
    """Full three-step dataset drawn from the instance and its batch distribution."""
    return generate_dataset(instance.mdp, instance.mu, n, double=double, rng_seed=rng_seed, trial=trial)


@dataclass(frozen=True)
class Step2Sample:
    """Middle-state tuples reduced to ``(i, q)`` with ``q`` indexing ``T_STATES``."""

    middle: np.ndarray
    t_index: np.ndarray
    t_index2: np.ndarray | None = None

    def prefix(self, n: int) -> "Step2Sample":
        return Step2Sample(self.middle[:n], self.t_index[:n], None if self.t_index2 is None else self.t_index2[:n])


def sample_step2(epsilon: float, c: int, sigma: np.ndarray, n: int, double: bool, seed: int,
                 trial: int) -> Step2Sample:
    """Only the informative step. Each column uses its own stream, so shorter samples are prefixes."""
    sigma = np.asarray(sigma)
    S = len(sigma)
    middle = stream(seed, trial, 2).integers(S, size=n)
    # cumulative probabilities of the four t-states for every middle state
    probs = 0.25 * (1.0 + epsilon * (_K * np.maximum(-c, _J))[None, :] * sigma[:, None])
    cdf = np.cumsum(probs, axis=1)[middle]

    def draw(key):
        u = stream(seed, trial, key).random(n)
        return np.minimum((u[:, None] >= cdf).sum(axis=1), 3)

    return Step2Sample(middle, draw(3), draw(4) if double else None)


def step2_from_dataset(dataset: Dataset, num_middle: int | None = None) -> Step2Sample:
    s = np.asarray(dataset.s[1])
    sn = np.asarray(dataset.s_next[1])
    if num_middle is None:
        if len(s) == 0:
            return Step2Sample(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                               np.zeros(0, dtype=np.int64) if getattr(dataset, "double", False) else None)
        lo = int(sn.max()) - 4
        hi = int(sn.min()) - 1
        if dataset.double:
            lo = max(lo, int(dataset.s_next2[1].max()) - 4)
            hi = min(hi, int(dataset.s_next2[1].min()) - 1)
        lo = max(lo, int(s.max()))
        if lo != hi:
            raise ValueError("cannot infer the number of middle states; pass num_middle")
        num_middle = lo
    t2 = None
    if getattr(dataset, "double", False):
        t2 = np.asarray(dataset.s_next2[1]) - num_middle - 1
    return Step2Sample(s - 1, sn - num_middle - 1, t2)


def _as_step2(data, num_middle) -> Step2Sample:
    return data if isinstance(data, Step2Sample) else step2_from_dataset(data, num_middle)


def _log_mixture(plus: np.ndarray, minus: np.ndarray, epsilon: float) -> np.ndarray:
    """``log(0.5 (1+e)^p (1-e)^m + 0.5 (1-e)^p (1+e)^m)`` per state."""
    lp, lm = math.log1p(epsilon), math.log1p(-epsilon)
    return np.logaddexp(plus * lp + minus * lm, plus * lm + minus * lp) - math.log(2.0)


def _bayes_loglik(sample: Step2Sample, epsilon: float, num_states: int):
    """Log-likelihoods of ``c = +1`` and ``c = -1`` under independent uniform signs."""
    idx = [sample.t_index] + ([sample.t_index2] if sample.t_index2 is not None else [])
    mids = np.concatenate([sample.middle] * len(idx))
    q = np.concatenate(idx)
    jk = (_J * _K)[q]
    k = _K[q]
    out = []
    for x in (jk, k):
        plus = np.bincount(mids, weights=(x > 0), minlength=num_states)
        minus = np.bincount(mids, weights=(x < 0), minlength=num_states)
        out.append(math.fsum(_log_mixture(plus, minus, epsilon)))
    return out


def bayes_classify_c(dataset, epsilon: float, num_middle: int | None = None) -> tuple[int, float]:
    """Maximum-likelihood guess of ``c`` from the middle-step tuples.

    Signs are integrated out under the independent uniform prior and ``c``
    has a uniform prior. Ties go to ``+1``. Returns the guess and its
    posterior probability. With double-sampled data both next states are
    used.
    """
    sample = _as_step2(dataset, num_middle)
    n_mid = int(sample.middle.max()) + 1 if len(sample.middle) else 1
    ll_plus, ll_minus = _bayes_loglik(sample, epsilon, n_mid)
    post_plus = 1.0 / (1.0 + math.exp(min(ll_minus - ll_plus, 700.0)))
    if ll_plus >= ll_minus:
        return 1, post_plus
    return -1, 1.0 - post_plus


def double_sample_classify_c(dataset, epsilon: float | None = None, num_middle: int | None = None) -> int:
    """Histogram test comparing same-state pair correlations of ``j*k`` and of ``k``.

    All next states observed from the same middle state are pooled (both
    samples of every double tuple plus repeated visits); the statistic for
    each hypothesis is the sum over same-state pairs of the products of
    their labels. The larger correlation wins, ties go to ``+1``.
    ``epsilon`` is accepted for interface symmetry and does not affect
    the decision.
    """
    sample = _as_step2(dataset, num_middle)
    if len(sample.middle) == 0:
        return 1
    idx = [sample.t_index] + ([sample.t_index2] if sample.t_index2 is not None else [])
    mids = np.concatenate([sample.middle] * len(idx))
    q = np.concatenate(idx)
    n_mid = int(mids.max()) + 1
    counts = np.bincount(mids, minlength=n_mid)
    stats = []
    for x in ((_J * _K)[q], _K[q]):
        sums = np.bincount(mids, weights=x, minlength=n_mid)
        # sum_{p<q} x_p x_q = (sum^2 - count) / 2 since x = +-1
        stats.append(int(np.sum(np.rint(sums).astype(np.int64) ** 2 - counts)) // 2)
    return 1 if stats[0] >= stats[1] else -1


def information_regime(epsilon: float, S: int, n: int) -> bool:
    """Whether ``n <= 0.1 sqrt(S) / eps**2`` (with a relative slack of 1e-12 for rounding)."""
    return n <= 0.1 * math.sqrt(S) / epsilon**2 * (1 + 1e-12)


@dataclass(frozen=True)
class HardnessSummary:
    epsilon: float
    S: int
    n: int
    balanced: bool
    classifier: str
    trials: int
    avg_error: float
    avg_excess: float
    regime_flag: bool
    seed: int
    avg_excess_per_step: float = 0.0
    std_error: float = 0.0
    prior: str = "independent"

    CSV_COLUMNS = ("epsilon", "S", "n", "balanced", "classifier", "trials", "avg_error", "avg_excess",
                   "regime_flag", "seed")

    def as_row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in self.CSV_COLUMNS}


def _trial_setup(epsilon, S, balanced, seed, t):
    # keys 10 and 11 stay clear of the per-step data streams (t, h)
    c = 1 if stream(seed, t, 10).random() < 0.5 else -1
    sigma = sample_sigma(S, balanced, stream(seed, t, 11))
    return c, sigma


def lower_bound_experiment(epsilon: float, S: int, n: int, trials: int, balanced: bool = False,
                           classifier: str = "bayes", rng_seed: int = 0) -> HardnessSummary:
    """Misclassification rate of ``c`` over independent ``(c, sigma, data)`` draws.

    Each error costs ``eps**2 / 12`` of Bellman error (``eps**2 / 4`` on the
    middle step alone).
    """
    if classifier not in CLASSIFIERS:
        raise ValueError(f"classifier must be one of {CLASSIFIERS}")
    if trials < 1 or n < 0:
        raise ValueError("trials must be positive and n nonnegative")
    double = classifier == "double"
    errors = np.zeros(trials)
    for t in range(trials):
        c, sigma = _trial_setup(epsilon, S, balanced, rng_seed, t)
        sample = sample_step2(epsilon, c, sigma, n, double, rng_seed, t)
        if double:
            guess = double_sample_classify_c(sample, epsilon)
        else:
            guess, _ = bayes_classify_c(sample, epsilon)
        errors[t] = guess != c
    avg = float(errors.mean())
    se = float(errors.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return HardnessSummary(epsilon, S, n, bool(balanced), classifier, trials, avg, avg * epsilon**2 / 12.0,
                           information_regime(epsilon, S, n), int(rng_seed), avg * epsilon**2 / 4.0, se)


def bayes_error_curve(epsilon: float, S: int, ns, trials: int, rng_seed: int = 0) -> list[float]:
    """Bayes error at several sample sizes with shared ``(c, sigma)`` and nested data."""
    ns = sorted(int(n) for n in ns)
    errors = np.zeros((len(ns), trials))
    for t in range(trials):
        c, sigma = _trial_setup(epsilon, S, False, rng_seed, t)
        full = sample_step2(epsilon, c, sigma, ns[-1], False, rng_seed, t)
        for a, n in enumerate(ns):
            errors[a, t] = bayes_classify_c(full.prefix(n), epsilon)[0] != c
    return [float(e) for e in errors.mean(axis=1)]


def erm_selection_rate(epsilon: float, S: int, n: int, trials: int, rng_seed: int = 0,
                       balanced: bool = False) -> float:
    """Fraction of trials in which double-sampling ERM picks the Bellman-error minimizer."""
    hits = 0
    for t in range(trials):
        c, sigma = _trial_setup(epsilon, S, balanced, rng_seed, t)
        inst = build_hard_instance(epsilon, S, c, sigma)
        data = sample_hard_dataset(inst, n, double=True, rng_seed=rng_seed, trial=t)
        result = erm_double_sampling(inst.family, data)
        hits += result.diagnostics["indices"][0] == inst.minimizer_index
    return hits / trials
