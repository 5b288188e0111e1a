"""Rademacher complexity estimates, critical radii and closed-form bounds.

Monte-Carlo estimates average an exact inner supremum over sign draws:

* finite families enumerate their members,
* linear balls use ``R * ||(1/n) sum_i sigma_i phi(x_i)||``,
* kernel balls use ``(D / n) * sqrt(sigma' K sigma)``,
* sparse balls keep the ``s`` largest coordinates of ``(1/n) sum_i sigma_i phi(x_i)``.

Sign patterns are enumerated exhaustively when ``n <= 12``; otherwise
they come in antithetic pairs ``(sigma, -sigma)``.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .func_approx import FiniteStep, KernelStep, LinearStep, SparseLinearStep, StepMember
from .seeding import as_generator, stream

DEFAULT_SIGN_DRAWS = 2000
EXACT_SIGN_LIMIT = 12
SUBROOT_PROBES = 16


class UnsupportedFamily(TypeError):
    """The requested estimate has no exact inner supremum for this family."""


class SparseRegimeWarning(UserWarning):
    """Sample size below the regime where the sparse bound applies."""


@dataclass(frozen=True)
class RademacherEstimate:
    mean: float
    std_error: float
    num_sign_draws: int
    num_data_redraws: int = 0
    flags: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class SubRootSolveResult:
    fixed_point: float
    iterations: int
    residual: float


@dataclass(frozen=True)
class BoundQuery:
    """Inputs shared by the excess-risk bound formulas."""

    n: int
    delta: float
    H: int
    epsilon: float = 0.0
    C_tilde: float = 1.0
    min_bellman_error: float = 0.0

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.n < 1:
            raise ValueError("n must be positive")


# sign patterns


def sign_matrix(n: int, num_draws: int, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Rows of Rademacher signs; ``(matrix, exhaustive)``."""
    if n <= EXACT_SIGN_LIMIT:
        return np.array(list(itertools.product((-1.0, 1.0), repeat=n))).reshape(-1, n), True
    half = max(1, num_draws // 2)
    base = rng.choice((-1.0, 1.0), size=(half, n))
    return np.concatenate([base, -base]), False


def _average(sups: np.ndarray, exhaustive: bool) -> tuple[float, float]:
    if exhaustive:
        return float(np.mean(sups)), 0.0
    half = len(sups) // 2
    pairs = 0.5 * (sups[:half] + sups[half:])
    se = float(np.std(pairs, ddof=1) / math.sqrt(half)) if half > 1 else 0.0
    return float(np.mean(pairs)), se


# inner suprema


def _features(step, s, a):
    return step.features[s, a]


def _sup_values(step, s: np.ndarray, a: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """``sup_f (1/n) sum_i sigma_i f(x_i)`` for every sign row."""
    n = len(s)
    if isinstance(step, FiniteStep):
        vals = step.members[:, s, a]
        return (signs @ vals.T).max(axis=1) / n
    if isinstance(step, SparseLinearStep):
        v = signs @ _features(step, s, a) / n
        top = -np.sort(-np.abs(v), axis=1)[:, : step.sparsity]
        return step.radius * np.linalg.norm(top, axis=1)
    if isinstance(step, LinearStep):
        v = signs @ _features(step, s, a) / n
        return step.radius * np.linalg.norm(v, axis=1)
    if isinstance(step, KernelStep):
        A = step.grid_shape[1]
        idx = s * A + a
        K = step.gram[np.ix_(idx, idx)]
        quad = np.einsum("ri,ij,rj->r", signs, K, signs)
        return step.rkhs_bound * np.sqrt(np.maximum(quad, 0.0)) / n
    raise UnsupportedFamily(f"no exact supremum for {type(step).__name__}")


def _points(points) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    return pts[:, 0], pts[:, 1]


def empirical_rademacher(family_h, points, num_draws: int = DEFAULT_SIGN_DRAWS,
                         rng_seed=0) -> RademacherEstimate:
    """Conditional Rademacher complexity at fixed ``(s, a)`` points."""
    s, a = _points(points)
    if len(s) == 0:
        raise ValueError("need at least one point")
    if num_draws < 1:
        raise ValueError("num_draws must be positive")
    signs, exhaustive = sign_matrix(len(s), num_draws, as_generator(rng_seed))
    mean, se = _average(_sup_values(family_h, s, a, signs), exhaustive)
    return RademacherEstimate(mean, se, len(signs), 0, {"exhaustive": exhaustive})


def _sample_points(rho: np.ndarray, n: int, rng: np.random.Generator):
    rho = np.asarray(rho, dtype=np.float64)
    flat = rng.choice(rho.size, size=n, p=rho.ravel() / rho.sum())
    return np.divmod(flat, rho.shape[1])


def _two_level(sup_fn, rho, n, num_data_redraws, num_sign_draws, rng_seed, flags=None):
    """Average ``sup_fn(s, a, signs)`` over data redraws; per-redraw means give the error bar."""
    if num_data_redraws < 1 or num_sign_draws < 1:
        raise ValueError("draw counts must be positive")
    means, inner_se = [], []
    draws = 0
    for r in range(num_data_redraws):
        s, a = _sample_points(rho, n, stream(rng_seed, r, 0))
        signs, exhaustive = sign_matrix(n, num_sign_draws, stream(rng_seed, r, 1))
        m, se = _average(sup_fn(s, a, signs), exhaustive)
        means.append(m)
        inner_se.append(se)
        draws = len(signs)
    means = np.array(means)
    if num_data_redraws > 1:
        se = float(np.std(means, ddof=1) / math.sqrt(num_data_redraws))
    else:
        se = inner_se[0]
    return RademacherEstimate(float(means.mean()), se, draws, num_data_redraws, flags or {})


def population_rademacher(family_h, rho, n: int, num_data_redraws: int = 20,
                          num_sign_draws: int = DEFAULT_SIGN_DRAWS, rng_seed=0) -> RademacherEstimate:
    """Rademacher complexity under ``(s, a) ~ rho`` with ``n`` points.

    Redraw ``r`` uses the streams ``(seed, r, 0)`` for points and
    ``(seed, r, 1)`` for signs, so nested families share random numbers.
    """
    return _two_level(lambda s, a, sg: _sup_values(family_h, s, a, sg), rho, n,
                      num_data_redraws, num_sign_draws, rng_seed)


def _anchor_table(anchor) -> np.ndarray:
    return np.asarray(anchor.table if isinstance(anchor, StepMember) else anchor, dtype=np.float64)


def local_rademacher(family_h, anchor, radius: float, rho, n: int, num_data_redraws: int = 20,
                     num_sign_draws: int = DEFAULT_SIGN_DRAWS, rng_seed=0) -> RademacherEstimate:
    """Rademacher complexity of ``{f : ||f - anchor||_rho^2 <= radius}``, centered at the anchor.

    Finite families filter members exactly. Linear families use the
    ellipsoid supremum ``sqrt(radius) * ||v||_{Sigma^+}`` with ``Sigma`` the
    ``rho`` second-moment matrix; the outer weight ball is ignored and
    ``flags['outer_ball_active']`` reports whether it would have bound.
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    rho = np.asarray(rho, dtype=np.float64)
    if isinstance(family_h, FiniteStep):
        f0 = _anchor_table(anchor)
        dist = np.einsum("ksa,sa->k", (family_h.members - f0) ** 2, rho)
        kept = family_h.members[dist <= radius + 1e-15] - f0

        def sup_fn(s, a, signs):
            if len(kept) == 0:
                return np.zeros(len(signs))
            return np.maximum((signs @ kept[:, s, a].T).max(axis=1), 0.0) / len(s)

        return _two_level(sup_fn, rho, n, num_data_redraws, num_sign_draws, rng_seed,
                          {"members_kept": int(len(kept))})
    if isinstance(family_h, LinearStep) and not isinstance(family_h, SparseLinearStep):
        phi = family_h.features
        X = phi.reshape(-1, phi.shape[2])
        sigma = X.T @ (rho.ravel()[:, None] * X)
        sigma_pinv = np.linalg.pinv(sigma, rcond=1e-10, hermitian=True)
        if isinstance(anchor, StepMember) and anchor.param is not None:
            w0 = np.asarray(anchor.param, dtype=np.float64)
        else:
            w0 = np.linalg.lstsq(X, _anchor_table(anchor).ravel(), rcond=1e-10)[0]
        flags = {"outer_ball_active": False}

        def sup_fn(s, a, signs):
            v = signs @ phi[s, a] / len(s)
            quad = np.maximum(np.einsum("rd,de,re->r", v, sigma_pinv, v), 0.0)
            vals = math.sqrt(radius) * np.sqrt(quad)
            with np.errstate(divide="ignore", invalid="ignore"):
                direction = (v @ sigma_pinv) / np.where(quad > 0, np.sqrt(quad), 1.0)[:, None]
            reach = np.linalg.norm(w0 + math.sqrt(radius) * direction, axis=1)
            if np.any(reach > family_h.radius + 1e-12):
                flags["outer_ball_active"] = True
            return vals

        return _two_level(sup_fn, rho, n, num_data_redraws, num_sign_draws, rng_seed, flags)
    raise UnsupportedFamily(f"local complexity is not estimated for {type(family_h).__name__}")


# critical radius


def _check_subroot(psi, r_init: float):
    probes = r_init * np.logspace(-4, 4, SUBROOT_PROBES)
    vals = np.array([float(psi(r)) for r in probes])
    if np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise ValueError("psi must be finite and nonnegative")
    slack = 1e-12 * np.maximum(1.0, np.abs(vals))
    if np.any(np.diff(vals) < -slack[1:]):
        raise ValueError("psi is not nondecreasing on the probe grid")
    ratio = vals / np.sqrt(probes)
    if np.any(np.diff(ratio) > 1e-12 * np.maximum(1.0, ratio[:-1])):
        raise ValueError("psi(r)/sqrt(r) is not nonincreasing on the probe grid")


def critical_radius(psi: Callable[[float], float], r_init: float = 1.0, max_iter: int = 10_000,
                    rtol: float = 1e-12) -> SubRootSolveResult:
    """Positive fixed point of a sub-root function by the iteration ``r <- psi(r)``.

    The iterates move monotonically toward the fixed point; a step in the
    wrong direction means ``psi`` is not sub-root and raises ``ValueError``.
    """
    if r_init <= 0:
        raise ValueError("r_init must be positive")
    _check_subroot(psi, r_init)
    r = float(r_init)
    nxt = float(psi(r))
    if nxt == 0.0:
        return SubRootSolveResult(0.0, 1, 0.0)
    direction = math.copysign(1.0, nxt - r)
    for it in range(1, max_iter + 1):
        if abs(nxt - r) <= rtol * abs(nxt) or nxt == r:
            return SubRootSolveResult(nxt, it, abs(float(psi(nxt)) - nxt))
        if (nxt - r) * direction < -1e-15 * max(1.0, r):
            raise ValueError("fixed-point iterates are not monotone; psi is not sub-root")
        r, nxt = nxt, float(psi(nxt))
    raise RuntimeError(f"no convergence after {max_iter} iterations (residual {abs(nxt - r):.3g})")


def critical_radius_from_estimates(local_fn: Callable[[float], float], r_max: float,
                                   tol: float = 1e-6, num_grid: int = 120, decades: float = 8.0) -> float:
    """Fixed point of the least sub-root majorant of ``local_fn`` on ``(0, r_max]``.

    Local complexities of finite families are step functions that vanish
    near zero, so ``local_fn(r) <= r`` alone can hold at tiny ``r``. The
    majorant ``psi(r) = sqrt(r) * sup_{r' >= r} local_fn(r') / sqrt(r')`` is
    sub-root; it is formed on a geometric grid over ``decades`` decades
    below ``r_max`` and the crossing is refined by bisection to ``tol``.
    Returns ``inf`` when ``psi(r_max) > r_max``.
    """
    r_max = float(r_max)
    grid = r_max * np.logspace(-decades, 0.0, num_grid)
    ratio = np.array([local_fn(r) / math.sqrt(r) for r in grid])
    envelope = np.maximum.accumulate(ratio[::-1])[::-1]
    ok = envelope <= np.sqrt(grid)
    if not ok[-1]:
        return math.inf
    # ok is monotone because the envelope is nonincreasing and sqrt(r) increasing
    i = int(np.argmax(ok))
    if i == 0:
        return float(grid[0]) if envelope[0] > 0 else 0.0
    lo, hi, tail = float(grid[i - 1]), float(grid[i]), float(envelope[i])
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if max(local_fn(mid) / math.sqrt(mid), tail) <= math.sqrt(mid):
            hi = mid
        else:
            lo = mid
    return hi


# closed-form bounds


def bound_finite(D: float, family_size: int, n: int) -> tuple[float, float]:
    """Complexity and critical-radius bounds for a finite family with range ``[0, D]``."""
    if family_size < 1 or n < 1:
        raise ValueError("family_size and n must be positive")
    L = math.log(family_size)
    rad = 2.0 * D * max(math.sqrt(L / n), L / n)
    crit = 2.0 * max(D, 2.0) * L / n
    return rad, crit


def finite_local_psi(D: float, family_size: int, n: int) -> Callable[[float], float]:
    """The sub-root majorant ``2 max(sqrt(r L / n), D L / n)`` of the finite local complexity."""
    L = math.log(family_size)
    return lambda r: 2.0 * max(math.sqrt(r * L / n), D * L / n)


def bound_linear(H: float, d: int, n: int) -> tuple[float, float]:
    if d < 1 or n < 1:
        raise ValueError("d and n must be positive")
    return H * math.sqrt(2.0 * d / n), 2.0 * d / n


def bound_kernel(H: float, eigenvalues, n: int) -> tuple[float, float]:
    """Bounds from the spectrum of the kernel integral operator (nonincreasing)."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("eigenvalues must be nonnegative")
    if np.any(np.diff(lam) > 0):
        raise ValueError("eigenvalues must be nonincreasing")
    rad = H * math.sqrt(2.0 / n * math.fsum(np.minimum(1.0, 4.0 * lam)))
    # tails[j] = sum_{i > j} lambda_i with 1-based i, j = 0 .. len
    tails = np.concatenate([np.cumsum(lam[::-1])[::-1], [0.0]])
    j = np.arange(len(tails))
    crit = 2.0 * float(np.min(j / n + H * np.sqrt(2.0 / n * np.maximum(tails, 0.0))))
    return rad, crit


def sparse_regime_ok(s: int, d: int, n: int, constant_c: float) -> bool:
    return n >= constant_c * s * math.log(d)


def bound_sparse(H: float, s: int, d: int, n: int, kappa_s: float, constant_c: float) -> tuple[float, float]:
    """Sparse-linear bounds with a caller-supplied absolute constant.

    Warns with :class:`SparseRegimeWarning` when ``n < c s log d``.
    """
    if not 1 <= s <= d:
        raise ValueError("need 1 <= s <= d")
    if constant_c <= 0:
        raise ValueError("constant_c must be positive")
    if not sparse_regime_ok(s, d, n, constant_c):
        warnings.warn(f"n={n} is below c*s*log(d)={constant_c * s * math.log(d):.4g}", SparseRegimeWarning,
                      stacklevel=2)
    slog = s * math.log(d) / n
    return constant_c * H * math.sqrt(kappa_s) * math.sqrt(slog), constant_c**2 * kappa_s * slog


# value-reduced families


class VFCheck(NamedTuple):
    lhs: RademacherEstimate
    rhs: float
    rhs_estimate: RademacherEstimate
    holds: bool


def _vf_sup_fn(family_next, num_probe: int, rng_seed):
    if isinstance(family_next, FiniteStep):
        values = family_next.members.max(axis=2)

        def sup_fn(states, signs):
            return (signs @ values[:, states].T).max(axis=1) / len(states)

        return sup_fn, {"exact": True}
    if isinstance(family_next, LinearStep) and not isinstance(family_next, SparseLinearStep):
        rng = as_generator(rng_seed, 99)
        probes = np.stack([family_next.sample(rng).table.max(axis=1) for _ in range(num_probe)])

        def sup_fn(states, signs):
            return (signs @ probes[:, states].T).max(axis=1) / len(states)

        return sup_fn, {"exact": False, "note": "probe-net lower estimate"}
    raise UnsupportedFamily(f"no value-reduced supremum for {type(family_next).__name__}")


def vf_complexity_bound_check(family_next, rho_states, A: int, n: int, num_data_redraws: int = 20,
                              num_sign_draws: int = DEFAULT_SIGN_DRAWS, rng_seed=0,
                              num_probe: int = 512) -> VFCheck:
    """Compare the complexity of ``{max_a f(., a)}`` with ``sqrt(2) A`` times that of the family.

    The right side is estimated under ``rho_states x Unif(A)``.
    """
    rho_states = np.asarray(rho_states, dtype=np.float64)
    sup_fn, flags = _vf_sup_fn(family_next, num_probe, rng_seed)
    rho_col = rho_states[:, None]
    lhs = _two_level(lambda s, a, sg: sup_fn(s, sg), rho_col, n, num_data_redraws, num_sign_draws,
                     rng_seed, flags)
    rho_sa = np.repeat(rho_col, A, axis=1) / A
    rhs_est = population_rademacher(family_next, rho_sa, n, num_data_redraws, num_sign_draws, rng_seed + 1)
    factor = math.sqrt(2.0) * A
    rhs = factor * rhs_est.mean
    slack = 3.0 * math.hypot(lhs.std_error, factor * rhs_est.std_error)
    return VFCheck(lhs, rhs, rhs_est, lhs.mean <= rhs + slack)


# excess-risk bound formulas


def _total(inputs: dict, key: str, H: int) -> float:
    if key not in inputs:
        raise KeyError(f"missing complexity input {key!r}")
    vals = np.broadcast_to(np.asarray(inputs[key], dtype=np.float64), (H,))
    return math.fsum(vals)


def theorem_rhs(which: str, query: BoundQuery, complexity_inputs: dict, c: float = 1.0) -> float:
    """Right-hand side of an excess-risk bound.

    ``which`` is one of:

    ``thm1``  double-sampling ERM; needs ``rad_F`` and ``rad_VF`` per step.
    ``thm3``  fitted Q-iteration, global complexity; needs ``rad_F``.
    ``thm4``  fitted Q-iteration, local complexity; needs ``crit`` per step.
    ``thm5``  minimax, global; needs ``rad_F``, ``rad_G``, ``rad_VF``.
    ``thm6``  minimax, local; needs ``crit_f``, ``crit_g``, ``crit_f_tilde``.

    Per-step inputs may be scalars (broadcast over the horizon) or length-H
    sequences. ``c`` is the unspecified absolute constant.
    """
    H, n, delta, eps = query.H, query.n, query.delta, query.epsilon
    min_err = query.min_bellman_error
    inputs = complexity_inputs
    if which == "thm1":
        return (min_err + c * H**2 * math.sqrt(math.log(1 / delta) / n)
                + c * (_total(inputs, "rad_F", H) + _total(inputs, "rad_VF", H)))
    if which == "thm3":
        return eps + c * _total(inputs, "rad_F", H) + c * H**2 * math.sqrt(math.log(H / delta) / n)
    if which == "thm4":
        big_delta = H * _total(inputs, "crit", H) + H**2 * math.log(H / delta) / n
        return eps + c * math.sqrt(eps * big_delta) + c * big_delta
    if which == "thm5":
        return (min_err + eps + c * H**2 * math.sqrt(math.log(1 / delta) / n)
                + c * (_total(inputs, "rad_F", H) + _total(inputs, "rad_G", H) + _total(inputs, "rad_VF", H)))
    if which == "thm6":
        ct = query.C_tilde
        rf = np.broadcast_to(np.asarray(inputs["crit_f"], dtype=np.float64), (H,))
        rg = np.broadcast_to(np.asarray(inputs["crit_g"], dtype=np.float64), (H,))
        rt = np.broadcast_to(np.asarray(inputs["crit_f_tilde"], dtype=np.float64), (H,))
        per_step = ct * (rf + rg + rt) + np.sqrt(ct * rg * eps)
        big_delta = H**3 * math.fsum(per_step) + H**2 * math.log(H / delta) / n
        base = min_err + eps
        return base + c * math.sqrt(base * big_delta) + c * big_delta
    raise ValueError(f"unknown bound {which!r}")
