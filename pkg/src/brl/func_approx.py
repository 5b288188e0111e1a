"""Function families over a finite state-action grid.

Every member is evaluated densely on the ``(S, A)`` grid, so a
:class:`QFunction` is always backed by an ``(H, S, A)`` table. The per-step
family objects know how to fit, project and sample their members:

``FiniteStep``
    explicit list of tables.
``LinearStep``
    ``w . phi(s, a)`` with ``||w|| <= radius``.
``KernelStep``
    RKHS ball of radius ``rkhs_bound`` for a Gram matrix on the grid.
``SparseLinearStep``
    linear members with at most ``sparsity`` nonzero weights.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .mdp import BatchDistribution, Policy, TabularMdp, as_tables, bellman_apply

SUPPORT_CAP = 10_000
N_PROBE = 256
PINV_RCOND = 1e-10
KERNEL_RIDGE = 1e-8


def _clip(values: np.ndarray, bound: float) -> np.ndarray:
    return np.clip(values, -bound, bound)


def _ball_project(w: np.ndarray, radius: float) -> np.ndarray:
    norm = np.linalg.norm(w)
    if norm > radius:
        return w * (radius / norm)
    return w


def _sample_ball(rng: np.random.Generator, d: int, radius: float) -> np.ndarray:
    direction = rng.standard_normal(d)
    direction /= max(np.linalg.norm(direction), 1e-300)
    return direction * radius * rng.random() ** (1.0 / d)


def _ball_weighted_projection(X: np.ndarray, y: np.ndarray, weights: np.ndarray, radius: float):
    """Minimize ``sum_i weights_i (X_i w - y_i)^2`` over ``||w|| <= radius`` exactly.

    Uses the eigendecomposition of the weighted normal matrix; the active
    constraint is handled by bisection on the secular equation.
    """
    Xw = X * weights[:, None]
    G = X.T @ Xw
    b = Xw.T @ y
    evals, evecs = np.linalg.eigh(G)
    tol = PINV_RCOND * max(evals.max(initial=0.0), 1e-300)
    beta = evecs.T @ b
    keep = evals > tol
    w = evecs[:, keep] @ (beta[keep] / evals[keep])
    if np.linalg.norm(w) > radius:
        # ||w(lam)|| = ||beta / (evals + lam)|| is decreasing in lam
        def norm_at(lam):
            return np.linalg.norm(beta / (np.maximum(evals, 0.0) + lam))

        lo, hi = 0.0, max(np.linalg.norm(b) / radius, 1e-300)
        while norm_at(hi) > radius:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if norm_at(mid) > radius:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * max(hi, 1e-300):
                break
        w = evecs @ (beta / (np.maximum(evals, 0.0) + hi))
    return w


@dataclass(frozen=True)
class StepMember:
    """One fitted or enumerated member of a per-step family."""

    table: np.ndarray
    param: object = None


class FiniteStep:
    """Explicit finite family of ``(S, A)`` tables."""

    variant = "finite"

    def __init__(self, members, bound: float, value_range: tuple[float, float] | None = None):
        members = np.array(members, dtype=np.float64)
        if members.ndim != 3 or members.shape[0] < 1:
            raise ValueError("finite family needs at least one (S, A) member table")
        self.members = members
        self.members.setflags(write=False)
        self.bound = float(bound)
        if np.any(np.abs(members) > self.bound + 1e-12):
            raise ValueError("finite family member outside [-bound, bound]")
        self.value_range = value_range or (-self.bound, self.bound)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.members.shape[1:]

    @property
    def size(self) -> int:
        return self.members.shape[0]

    def member(self, k: int) -> StepMember:
        return StepMember(self.members[k], int(k))

    def table(self, param) -> np.ndarray:
        return self.members[int(param)]

    def losses(self, s, a, y) -> np.ndarray:
        """Mean squared residual of every member against targets ``y``."""
        pred = self.members[:, s, a]
        return kernels.pairwise_mean_sq_residual(pred, y, np.zeros((1, len(y))))[:, 0]

    def fit(self, s, a, y) -> StepMember:
        return self.member(int(np.argmin(self.losses(s, a, y))))

    def project(self, target: np.ndarray, weights: np.ndarray):
        dist = np.einsum("ksa,sa->k", (self.members - target) ** 2, weights)
        k = int(np.argmin(dist))
        return float(dist[k]), self.member(k), True

    def sample(self, rng: np.random.Generator) -> StepMember:
        return self.member(int(rng.integers(self.size)))

    def to_dict(self) -> dict:
        return {"variant": self.variant, "members": self.members.tolist(), "bound": self.bound,
                "value_range": list(self.value_range)}


class LinearStep:
    """Linear members ``w . phi`` with ``||w|| <= radius``; outputs clipped to ``[-bound, bound]``."""

    variant = "linear"

    def __init__(self, features, radius: float, bound: float | None = None):
        phi = np.array(features, dtype=np.float64)
        if phi.ndim != 3:
            raise ValueError("features must have shape (S, A, d)")
        if np.max(np.linalg.norm(phi, axis=-1)) > 1 + 1e-9:
            raise ValueError("feature norms must not exceed 1")
        self.features = phi
        self.features.setflags(write=False)
        self.radius = float(radius)
        self.bound = float(radius if bound is None else bound)
        self.value_range = (-self.bound, self.bound)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.features.shape[:2]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def table(self, w) -> np.ndarray:
        return _clip(self.features @ np.asarray(w, dtype=np.float64), self.bound)

    def member(self, w) -> StepMember:
        w = np.asarray(w, dtype=np.float64)
        return StepMember(self.table(w), w)

    def _lstsq(self, X, y):
        w, *_ = np.linalg.lstsq(X, y, rcond=PINV_RCOND)
        return _ball_project(w, self.radius)

    def fit(self, s, a, y) -> StepMember:
        return self.member(self._lstsq(self.features[s, a], np.asarray(y, dtype=np.float64)))

    def project(self, target, weights):
        S, A, d = self.features.shape
        X = self.features.reshape(S * A, d)
        w = _ball_weighted_projection(X, target.ravel(), weights.ravel(), self.radius)
        m = self.member(w)
        return float(np.sum(weights * (m.table - target) ** 2)), m, True

    def sample(self, rng) -> StepMember:
        return self.member(_sample_ball(rng, self.dim, self.radius))

    def to_dict(self) -> dict:
        return {"variant": self.variant, "features": self.features.tolist(),
                "ball_radius": self.radius, "bound": self.bound}


class SparseLinearStep(LinearStep):
    """Linear members with at most ``sparsity`` nonzero weights.

    ``kappa`` is the restricted condition number used by the complexity
    bounds; it is stored, not computed.
    """

    variant = "sparse"

    def __init__(self, features, radius: float, sparsity: int, kappa: float = 1.0,
                 bound: float | None = None):
        super().__init__(features, radius, bound)
        if not 1 <= sparsity <= self.dim:
            raise ValueError("sparsity must lie in [1, d]")
        self.sparsity = int(sparsity)
        self.kappa = float(kappa)

    def supports(self):
        """Candidate supports in lexicographic order; ``None`` when above the cap."""
        if math.comb(self.dim, self.sparsity) > SUPPORT_CAP:
            return None
        return itertools.combinations(range(self.dim), self.sparsity)

    def _fit_support(self, X, y, support):
        w = np.zeros(self.dim)
        w[list(support)] = self._lstsq(X[:, list(support)], y)
        return w

    def _iht(self, X, y, iters: int = 500):
        # iterative hard thresholding with a 1 / ||X||^2 step
        step = 1.0 / max(np.linalg.norm(X, 2) ** 2, 1e-300)
        w = np.zeros(self.dim)
        for _ in range(iters):
            w = w + step * X.T @ (y - X @ w)
            keep = np.argsort(-np.abs(w), kind="stable")[: self.sparsity]
            mask = np.zeros(self.dim, dtype=bool)
            mask[keep] = True
            w[~mask] = 0.0
        return self._fit_support(X, y, sorted(np.flatnonzero(w))[: self.sparsity] or [0])

    def fit(self, s, a, y) -> StepMember:
        X = self.features[s, a]
        y = np.asarray(y, dtype=np.float64)
        supports = self.supports()
        if supports is None:
            return self.member(self._iht(X, y))
        best, best_loss = None, math.inf
        for support in supports:
            w = self._fit_support(X, y, support)
            loss = kernels.mean_sq_residual(_clip(X @ w, self.bound), y, np.zeros(len(y)))
            if loss < best_loss - 1e-15:
                best, best_loss = w, loss
        return self.member(best)

    def project(self, target, weights):
        S, A, d = self.features.shape
        X = self.features.reshape(S * A, d)
        supports = self.supports()
        exact = supports is not None
        if supports is None:
            s, a = np.nonzero(weights > 0)
            m = self.fit(s, a, target[s, a])
            return float(np.sum(weights * (m.table - target) ** 2)), m, False
        best = (math.inf, None)
        for support in supports:
            w = np.zeros(d)
            cols = list(support)
            w[cols] = _ball_weighted_projection(X[:, cols], target.ravel(), weights.ravel(), self.radius)
            m = self.member(w)
            dist = float(np.sum(weights * (m.table - target) ** 2))
            if dist < best[0] - 1e-15:
                best = (dist, m)
        return best[0], best[1], exact

    def sample(self, rng) -> StepMember:
        w = np.zeros(self.dim)
        support = rng.choice(self.dim, size=self.sparsity, replace=False)
        w[support] = _sample_ball(rng, self.sparsity, self.radius)
        return self.member(w)

    def to_dict(self) -> dict:
        out = super().to_dict()
        out.update(sparsity=self.sparsity, kappa=self.kappa)
        return out


class KernelStep:
    """RKHS ball on the grid: members ``K @ beta`` with ``beta' K beta <= rkhs_bound**2``.

    ``eigenvalues`` are those of the integral operator under a designated
    distribution ``rho`` (see :meth:`from_gram`).
    """

    variant = "kernel"

    def __init__(self, gram, rkhs_bound: float, eigenvalues=None, bound: float | None = None,
                 grid_shape: tuple[int, int] | None = None):
        K = np.array(gram, dtype=np.float64)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError("gram must be square")
        self.gram = 0.5 * (K + K.T)
        self.gram.setflags(write=False)
        self.rkhs_bound = float(rkhs_bound)
        self.bound = float(rkhs_bound if bound is None else bound)
        self.value_range = (-self.bound, self.bound)
        self._grid_shape = grid_shape or (K.shape[0], 1)
        if self._grid_shape[0] * self._grid_shape[1] != K.shape[0]:
            raise ValueError("grid_shape does not match gram size")
        if eigenvalues is None:
            eigenvalues = np.sort(np.clip(np.linalg.eigvalsh(self.gram), 0, None))[::-1] / K.shape[0]
        eig = np.asarray(eigenvalues, dtype=np.float64)
        if np.any(eig < 0) or np.any(np.diff(eig) > 0):
            raise ValueError("eigenvalues must be nonnegative and nonincreasing")
        self.eigenvalues = eig
        evals, evecs = np.linalg.eigh(self.gram)
        evals = np.clip(evals, 0.0, None)
        # features whose Euclidean ball is the RKHS ball
        self._features = evecs * np.sqrt(evals)
        self._evals, self._evecs = evals, evecs

    @classmethod
    def from_gram(cls, gram, rkhs_bound: float, rho, bound: float | None = None,
                  grid_shape=None) -> "KernelStep":
        """Build with the spectrum of ``f -> E_rho[k(., x) f(x)]``."""
        rho = np.asarray(rho, dtype=np.float64).ravel()
        root = np.sqrt(rho)
        M = root[:, None] * np.asarray(gram, dtype=np.float64) * root[None, :]
        eig = np.sort(np.clip(np.linalg.eigvalsh(0.5 * (M + M.T)), 0, None))[::-1]
        return cls(gram, rkhs_bound, eig, bound, grid_shape)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self._grid_shape

    def table(self, beta) -> np.ndarray:
        return _clip(self.gram @ np.asarray(beta, dtype=np.float64), self.bound).reshape(self._grid_shape)

    def member(self, beta) -> StepMember:
        beta = np.asarray(beta, dtype=np.float64)
        return StepMember(self.table(beta), beta)

    def rkhs_norm(self, beta) -> float:
        beta = np.asarray(beta, dtype=np.float64)
        return math.sqrt(max(float(beta @ self.gram @ beta), 0.0))

    def fit(self, s, a, y) -> StepMember:
        A = self._grid_shape[1]
        idx = np.asarray(s) * A + np.asarray(a)
        y = np.asarray(y, dtype=np.float64)
        n = len(y)
        uniq, inv, counts = np.unique(idx, return_inverse=True, return_counts=True)
        ybar = np.bincount(inv, weights=y) / counts
        # ridge regression on the raw points, collapsed onto distinct grid points
        lam = KERNEL_RIDGE * n
        K_uu = self.gram[np.ix_(uniq, uniq)]
        beta_u = np.linalg.solve(K_uu + np.diag(lam / counts), ybar)
        beta = np.zeros(self.gram.shape[0])
        beta[uniq] = beta_u
        norm = self.rkhs_norm(beta)
        if norm > self.rkhs_bound:
            beta *= self.rkhs_bound / norm
        return self.member(beta)

    def _beta_from_w(self, w):
        keep = self._evals > PINV_RCOND * max(self._evals.max(), 1e-300)
        return self._evecs[:, keep] @ (w[keep] / np.sqrt(self._evals[keep]))

    def project(self, target, weights):
        w = _ball_weighted_projection(self._features, target.ravel(), weights.ravel(), self.rkhs_bound)
        m = self.member(self._beta_from_w(w))
        return float(np.sum(weights * (m.table - target) ** 2)), m, True

    def sample(self, rng) -> StepMember:
        w = _sample_ball(rng, self._features.shape[1], self.rkhs_bound)
        return self.member(self._beta_from_w(w))

    def to_dict(self) -> dict:
        return {"variant": self.variant, "gram": self.gram.tolist(), "eigenvalues": self.eigenvalues.tolist(),
                "rkhs_bound": self.rkhs_bound, "bound": self.bound, "grid_shape": list(self._grid_shape)}


STEP_TYPES = {"finite": FiniteStep, "linear": LinearStep, "kernel": KernelStep, "sparse": SparseLinearStep}


def step_from_dict(data: dict):
    variant = data["variant"]
    if variant == "finite":
        return FiniteStep(data["members"], data.get("bound", 1.0), tuple(data.get("value_range", ())) or None)
    if variant == "linear":
        return LinearStep(data["features"], data["ball_radius"], data.get("bound"))
    if variant == "sparse":
        return SparseLinearStep(data["features"], data["ball_radius"], data["sparsity"],
                                data.get("kappa", 1.0), data.get("bound"))
    if variant == "kernel":
        return KernelStep(data["gram"], data["rkhs_bound"], data.get("eigenvalues"), data.get("bound"),
                          tuple(data["grid_shape"]) if "grid_shape" in data else None)
    raise ValueError(f"unknown family variant {variant!r}")


@dataclass
class FunctionFamily:
    """Product of per-step families ``F_0 x ... x F_{H-1}``.

    With ``tied=True`` (finite steps of equal size only) member ``k`` uses
    index ``k`` at every step, so the family has ``K`` members instead of
    ``K ** H``.
    """

    steps: list
    tied: bool = False

    def __post_init__(self):
        if not self.steps:
            raise ValueError("family needs at least one step")
        shapes = {tuple(st.grid_shape) for st in self.steps}
        if len(shapes) != 1:
            raise ValueError("all steps must share the (S, A) grid")
        if self.tied:
            if not all(isinstance(st, FiniteStep) for st in self.steps):
                raise ValueError("tied families must be finite at every step")
            if len({st.size for st in self.steps}) != 1:
                raise ValueError("tied finite steps must have equal sizes")

    @property
    def horizon(self) -> int:
        return len(self.steps)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.steps[0].grid_shape)

    @property
    def variant(self) -> str:
        kinds = {st.variant for st in self.steps}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    @property
    def is_finite(self) -> bool:
        return all(isinstance(st, FiniteStep) for st in self.steps)

    @property
    def size(self) -> int | None:
        if not self.is_finite:
            return None
        if self.tied:
            return self.steps[0].size
        return math.prod(st.size for st in self.steps)

    def members(self):
        """Iterate over all members of a finite family in lexicographic index order."""
        if not self.is_finite:
            raise TypeError("only finite families can be enumerated")
        if self.tied:
            index_iter = ((k,) * self.horizon for k in range(self.steps[0].size))
        else:
            index_iter = itertools.product(*(range(st.size) for st in self.steps))
        for idx in index_iter:
            yield self.from_indices(idx)

    def from_indices(self, idx) -> "QFunction":
        return QFunction(tuple(st.member(k) for st, k in zip(self.steps, idx)), self)

    def from_params(self, params) -> "QFunction":
        return QFunction(tuple(st.member(p) for st, p in zip(self.steps, params)), self)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "tied": self.tied, "steps": [st.to_dict() for st in self.steps]}

    @classmethod
    def from_dict(cls, data: dict) -> "FunctionFamily":
        return cls([step_from_dict(st) for st in data["steps"]], bool(data.get("tied", False)))

    @classmethod
    def finite(cls, members, bound: float, tied: bool = False) -> "FunctionFamily":
        """From a ``(K, H, S, A)`` stack of whole members (tied) or per-step lists."""
        if tied:
            members = np.asarray(members, dtype=np.float64)
            return cls([FiniteStep(members[:, h], bound) for h in range(members.shape[1])], tied=True)
        return cls([FiniteStep(m, bound) for m in members])

    @classmethod
    def linear(cls, features, radius: float, horizon: int | None = None, bound: float | None = None):
        """Per-step linear family; ``features`` is (S, A, d) shared or (H, S, A, d)."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 3:
            features = np.broadcast_to(features, (horizon or 1,) + features.shape)
        return cls([LinearStep(phi, radius, bound) for phi in features])


@dataclass(frozen=True)
class QFunction:
    """A member of a :class:`FunctionFamily`; ``f_H`` after the last step is zero."""

    step_members: tuple
    family: FunctionFamily | None = field(default=None, compare=False, repr=False)

    @classmethod
    def from_tables(cls, tables) -> "QFunction":
        tables = np.asarray(tables, dtype=np.float64)
        return cls(tuple(StepMember(t) for t in tables))

    @property
    def horizon(self) -> int:
        return len(self.step_members)

    def tables(self) -> np.ndarray:
        return np.stack([m.table for m in self.step_members])

    def step_table(self, h: int) -> np.ndarray:
        if h == self.horizon:
            return np.zeros_like(self.step_members[0].table)
        return self.step_members[h].table

    def params(self) -> list:
        return [m.param for m in self.step_members]

    def to_dict(self) -> dict:
        out = {"variant": self.family.variant if self.family is not None else "table",
               "tables": self.tables().tolist(), "steps": []}
        for m in self.step_members:
            if isinstance(m.param, (int, np.integer)):
                out["steps"].append({"member": int(m.param)})
            elif m.param is None:
                out["steps"].append({})
            else:
                out["steps"].append({"weights": np.asarray(m.param).tolist()})
        return out

    @classmethod
    def from_dict(cls, data: dict, family: FunctionFamily | None = None) -> "QFunction":
        if family is None:
            return cls.from_tables(data["tables"])
        params = []
        for st in data["steps"]:
            params.append(st["member"] if "member" in st else st["weights"])
        return family.from_params(params)


def eval(f, h: int, s: int, a: int) -> float:  # noqa: A001 - mirrors the mathematical name
    """Value of ``f_h(s, a)``."""
    tables = as_tables(f)
    H, S, A = tables.shape
    if not (0 <= h < H and 0 <= s < S and 0 <= a < A):
        raise IndexError(f"index (h={h}, s={s}, a={a}) out of range for shape {tables.shape}")
    return float(tables[h, s, a])


def value_reduce(f, h: int, s: int) -> float:
    """``max_a f_h(s, a)``; zero after the last step."""
    tables = as_tables(f)
    if h == tables.shape[0]:
        return 0.0
    return float(tables[h, s].max())


def value_tables(f) -> np.ndarray:
    """``V_{f_h}(s)`` for ``h = 0 .. H`` (the last row is the zero terminal value)."""
    tables = as_tables(f)
    H, S, _ = tables.shape
    out = np.zeros((H + 1, S))
    out[:H] = tables.max(axis=2)
    return out


def greedy_policy(f) -> Policy:
    """Greedy policy with ties broken toward the lowest action index."""
    tables = as_tables(f)
    return Policy(np.argmax(tables, axis=2), tables.shape[2])


def _pairs_to_arrays(pairs):
    if isinstance(pairs, tuple) and len(pairs) == 3:
        s, a, y = (np.asarray(x) for x in pairs)
    else:
        pairs = list(pairs)
        s = np.array([p[0][0] for p in pairs], dtype=np.int64)
        a = np.array([p[0][1] for p in pairs], dtype=np.int64)
        y = np.array([p[1] for p in pairs], dtype=np.float64)
    return s.astype(np.int64), a.astype(np.int64), y.astype(np.float64)


def least_squares_fit(family_h, pairs) -> StepMember:
    """Member of a per-step family minimizing the mean squared error to the targets.

    ``pairs`` is a list of ``((s, a), target)`` or a tuple of arrays
    ``(states, actions, targets)``.
    """
    s, a, y = _pairs_to_arrays(pairs)
    if len(y) == 0:
        raise ValueError("least_squares_fit needs at least one target")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    return family_h.fit(s, a, y)


@dataclass(frozen=True)
class CompletenessReport:
    gap: float
    witness: tuple | None
    is_exact: bool


def completeness_gap(mdp: TabularMdp, mu: BatchDistribution, family_F: FunctionFamily,
                     family_G: FunctionFamily | None = None, num_probe: int = N_PROBE,
                     rng: np.random.Generator | None = None) -> CompletenessReport:
    """Worst squared ``mu_h``-distance from a Bellman image ``T_h f_{h+1}`` to ``G_h``.

    The supremum over ``f_{h+1}`` is exact for finite ``F``; for continuous
    families it is the maximum over ``num_probe`` random members and hence
    a lower estimate (``is_exact=False``).
    """
    family_G = family_F if family_G is None else family_G
    rng = np.random.default_rng(0) if rng is None else rng
    H = mdp.horizon
    S, A = mdp.num_states, mdp.num_actions
    gap, witness, exact = 0.0, None, True
    for h in range(H):
        if h + 1 < H:
            nxt_family = family_F.steps[h + 1]
            if isinstance(nxt_family, FiniteStep):
                candidates = [(k, nxt_family.member(k)) for k in range(nxt_family.size)]
            else:
                candidates = [(i, nxt_family.sample(rng)) for i in range(num_probe)]
                exact = False
        else:
            candidates = [(None, StepMember(np.zeros((S, A))))]
        for label, m in candidates:
            target = bellman_apply(mdp, h, m.table)
            dist, _, proj_exact = family_G.steps[h].project(target, mu.mu[h])
            exact = exact and proj_exact
            if dist > gap or witness is None:
                gap, witness = max(dist, 0.0), (h, label)
    return CompletenessReport(gap, witness, exact)
