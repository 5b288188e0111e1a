"""Double-sampling ERM, fitted Q-iteration and the minimax estimator.

All three losses are sums over steps of terms that only involve
``(f_h, f_{h+1})``. For finite families each term is precomputed as a
matrix over member indices and the global minimum is found exactly, by
enumeration when the product family is small and by dynamic programming
over the step chain otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .func_approx import FiniteStep, FunctionFamily, QFunction
from .mdp import BatchDistribution, TabularMdp, bellman_apply
from .risk import Dataset, bellman_error, empirical_lb, empirical_lds, empirical_lmm, fqi_step_loss
from .seeding import as_generator

ENUMERATION_CAP = 100_000
SWEEP_TOL = 1e-9
MAX_SWEEPS = 100


@dataclass
class LearnerResult:
    f_hat: QFunction
    achieved_empirical_loss: float
    excess_risk: float = math.nan
    diagnostics: dict = field(default_factory=dict)
    g_hat: QFunction | None = None

    def to_dict(self) -> dict:
        out = {
            "f_hat": self.f_hat.to_dict(),
            "empirical_loss": self.achieved_empirical_loss,
            "excess_risk": None if math.isnan(self.excess_risk) else self.excess_risk,
            "diagnostics": self.diagnostics,
        }
        if self.g_hat is not None:
            out["g_hat"] = self.g_hat.to_dict()
        return out


def _member_values(step: FiniteStep) -> np.ndarray:
    """``V`` of every member, shape (K, S)."""
    return step.members.max(axis=2)


def _next_boot(family: FunctionFamily, h: int, s_next: np.ndarray) -> np.ndarray:
    """Bootstrapped next values for every member of ``F_{h+1}``, shape (K_{h+1}, n)."""
    if h + 1 == family.horizon:
        return np.zeros((1, len(s_next)))
    return np.ascontiguousarray(_member_values(family.steps[h + 1])[:, s_next])


def minimize_chain(mats: list[np.ndarray], tied: bool = False, cap: int = ENUMERATION_CAP):
    """Exact minimizer of ``sum_h mats[h][k_h, k_{h+1}]`` (last matrix has one column).

    Ties go to the lexicographically smallest index tuple. Returns
    ``(indices, value, diagnostics)``.
    """
    H = len(mats)
    sizes = [m.shape[0] for m in mats]
    if tied:
        K = sizes[0]
        totals = np.array([math.fsum(mats[h][k, k if h + 1 < H else 0] for h in range(H)) for k in range(K)])
        k = int(np.argmin(totals))
        return (k,) * H, float(totals[k]), {"method": "enumeration", "evaluated": K}
    product = math.prod(sizes)
    if product <= cap:
        total = np.zeros(sizes)
        for h, m in enumerate(mats):
            shape = [1] * H
            shape[h] = m.shape[0]
            if h + 1 < H:
                shape[h + 1] = m.shape[1]
                total = total + m.reshape(shape)
            else:
                total = total + m[:, 0].reshape(shape)
        flat = int(np.argmin(total))
        idx = tuple(int(i) for i in np.unravel_index(flat, total.shape))
        return idx, float(total.ravel()[flat]), {"method": "enumeration", "evaluated": product}
    # cost-to-go from each member of step h
    togo = [None] * (H + 1)
    togo[H] = np.zeros(1)
    for h in range(H - 1, -1, -1):
        togo[h] = (mats[h] + togo[h + 1][None, :]).min(axis=1)
    idx = [int(np.argmin(togo[0]))]
    for h in range(H - 1):
        idx.append(int(np.argmin(mats[h][idx[-1]] + togo[h + 1])))
    value = math.fsum(mats[h][idx[h], idx[h + 1] if h + 1 < H else 0] for h in range(H))
    return tuple(idx), value, {"method": "chain_dp", "product_size": product}


def _lds_matrices(family: FunctionFamily, data) -> list[np.ndarray]:
    mats = []
    for h in range(family.horizon):
        st = data.step(h)
        pred = np.ascontiguousarray(family.steps[h].members[:, st.s, st.a])
        b1 = _next_boot(family, h, st.s_next)
        b2 = _next_boot(family, h, st.s_next2)
        sq = kernels.pairwise_mean_sq_residual(pred, st.r, b1)
        mats.append(sq - kernels.half_sq_diff_mean(b1, b2)[None, :])
    return mats


def _zero_start(family: FunctionFamily, data: Dataset) -> list:
    """Members nearest to zero on the observed pairs."""
    out = []
    for h, step in enumerate(family.steps):
        st = data.step(h)
        out.append(step.fit(st.s, st.a, np.zeros(len(st))))
    return out


def _blockwise(family: FunctionFamily, data: Dataset, objective, max_sweeps: int = MAX_SWEEPS,
               tol: float = SWEEP_TOL):
    """Backward sweeps of per-step least-squares refits, accepting only improvements."""
    members = _zero_start(family, data)
    f = QFunction(tuple(members), family)
    best = objective(f)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        start = best
        for h in range(family.horizon - 1, -1, -1):
            st = data.step(h)
            nxt = f.step_table(h + 1)
            targets = st.r + nxt.max(axis=1)[st.s_next]
            cand_members = list(f.step_members)
            cand_members[h] = family.steps[h].fit(st.s, st.a, targets)
            cand = QFunction(tuple(cand_members), family)
            val = objective(cand)
            if val < best - tol:
                f, best = cand, val
        if start - best <= tol:
            break
    return f, best, {"method": "blockwise", "sweeps": sweeps}


def erm_double_sampling(family: FunctionFamily, data) -> LearnerResult:
    """Minimize the double-sampling loss over ``family``."""
    if not getattr(data, "double", False):
        raise TypeError("erm_double_sampling needs a double-sampled dataset")
    if family.horizon != data.horizon:
        raise ValueError("family and dataset horizons differ")
    if family.is_finite:
        idx, value, diag = minimize_chain(_lds_matrices(family, data), family.tied)
        f_hat = family.from_indices(idx)
        diag["indices"] = list(idx)
        return LearnerResult(f_hat, empirical_lds(data, f_hat), diagnostics=diag)
    f_hat, value, diag = _blockwise(family, data, lambda f: empirical_lds(data, f))
    return LearnerResult(f_hat, value, diagnostics=diag)


def fqi(family: FunctionFamily, data: Dataset) -> LearnerResult:
    """Fitted Q-iteration: backward per-step least squares on bootstrapped targets."""
    if family.tied:
        raise ValueError("fitted Q-iteration needs a product family; got a tied family")
    if family.horizon != data.horizon:
        raise ValueError("family and dataset horizons differ")
    H = family.horizon
    members = [None] * H
    step_losses = [0.0] * H
    nxt = None
    for h in range(H - 1, -1, -1):
        st = data.step(h)
        if len(st) == 0:
            raise ValueError(f"no tuples at step {h}")
        boot = np.zeros(len(st)) if nxt is None else nxt.max(axis=1)[st.s_next]
        members[h] = family.steps[h].fit(st.s, st.a, st.r + boot)
        step_losses[h] = fqi_step_loss(st, members[h].table, nxt)
        nxt = members[h].table
    f_hat = QFunction(tuple(members), family)
    diag = {"method": "backward_least_squares", "step_losses": step_losses}
    return LearnerResult(f_hat, empirical_lb(data, f_hat), diagnostics=diag)


def _inner_fit(family_G: FunctionFamily, data: Dataset, f: QFunction):
    """Per-step empirical regression of ``r + V_{f_{h+1}}(s')`` onto ``G_h``."""
    members = []
    for h in range(family_G.horizon):
        st = data.step(h)
        targets = st.r + f.step_table(h + 1).max(axis=1)[st.s_next]
        members.append(family_G.steps[h].fit(st.s, st.a, targets))
    return QFunction(tuple(members), family_G)


def _inner_losses(step_G, h: int, family_F: FunctionFamily, data: Dataset) -> tuple[np.ndarray, list]:
    """``min_g`` loss on step ``h`` for every member of ``F_{h+1}`` and the minimizing ``g``."""
    st = data.step(h)
    boot = _next_boot(family_F, h, st.s_next)
    if isinstance(step_G, FiniteStep):
        pred = np.ascontiguousarray(step_G.members[:, st.s, st.a])
        L = kernels.pairwise_mean_sq_residual(pred, st.r, boot)
        best = np.argmin(L, axis=0)
        return L[best, np.arange(L.shape[1])], [step_G.member(int(k)) for k in best]
    losses, fits = [], []
    for row in boot:
        m = step_G.fit(st.s, st.a, st.r + row)
        fits.append(m)
        losses.append(kernels.mean_sq_residual(m.table[st.s, st.a], st.r, row))
    return np.array(losses), fits


def minimax(family_F: FunctionFamily, family_G: FunctionFamily, data: Dataset) -> LearnerResult:
    """Minimize over ``F`` the minimax loss with the helper maximized over ``G``.

    The inner maximum is the per-step least-squares fit onto ``G_h``.
    """
    if family_F.horizon != data.horizon or family_G.horizon != data.horizon:
        raise ValueError("family and dataset horizons differ")
    if family_F.is_finite:
        mats = []
        for h in range(family_F.horizon):
            st = data.step(h)
            pred = np.ascontiguousarray(family_F.steps[h].members[:, st.s, st.a])
            LF = kernels.pairwise_mean_sq_residual(pred, st.r, _next_boot(family_F, h, st.s_next))
            inner, _ = _inner_losses(family_G.steps[h], h, family_F, data)
            mats.append(LF - inner[None, :])
        idx, value, diag = minimize_chain(mats, family_F.tied)
        f_hat = family_F.from_indices(idx)
        diag["indices"] = list(idx)
    else:
        def objective(f):
            return empirical_lmm(data, f, _inner_fit(family_G, data, f))

        f_hat, value, diag = _blockwise(family_F, data, objective)
    g_hat = _inner_fit(family_G, data, f_hat)
    return LearnerResult(f_hat, empirical_lmm(data, f_hat, g_hat), diagnostics=diag, g_hat=g_hat)


def _bellman_error_matrices(mdp: TabularMdp, mu: BatchDistribution, family: FunctionFamily):
    mats = []
    H, S, A = mdp.shape
    for h in range(H):
        cur = family.steps[h].members
        nxt = family.steps[h + 1].members if h + 1 < H else np.zeros((1, S, A))
        images = np.stack([bellman_apply(mdp, h, t) for t in nxt])
        diff = cur[:, None] - images[None, :]
        mats.append(np.einsum("kjsa,sa->kj", diff**2, mu.mu[h]))
    return mats


def min_bellman_error(mdp: TabularMdp, mu: BatchDistribution, family: FunctionFamily,
                      num_probe: int = 256, rng_seed: int = 0, extra=()) -> tuple[float, bool]:
    """Smallest Bellman error over the family and whether it is exact.

    Finite families are minimized exactly. Other families use the
    population fitted-Q solution (exact weighted projections backward in
    ``h``), random probes and ``extra`` candidates, so the value is an upper
    estimate of the true minimum.
    """
    if family.is_finite:
        idx, value, _ = minimize_chain(_bellman_error_matrices(mdp, mu, family), family.tied)
        return bellman_error(mdp, mu, family.from_indices(idx)), True
    H, S, A = mdp.shape
    members = [None] * H
    nxt = np.zeros((S, A))
    for h in range(H - 1, -1, -1):
        _, members[h], _ = family.steps[h].project(bellman_apply(mdp, h, nxt), mu.mu[h])
        nxt = members[h].table
    best = bellman_error(mdp, mu, QFunction(tuple(members), family))
    rng = as_generator(rng_seed)
    for _ in range(num_probe):
        probe = QFunction(tuple(st.sample(rng) for st in family.steps), family)
        best = min(best, bellman_error(mdp, mu, probe))
    for f in extra:
        best = min(best, bellman_error(mdp, mu, f))
    return best, False


def report_excess_risk(mdp: TabularMdp, mu: BatchDistribution, family: FunctionFamily,
                       result: LearnerResult) -> float:
    """Bellman error of ``result.f_hat`` above the family minimum; stored on ``result``."""
    err = bellman_error(mdp, mu, result.f_hat)
    best, exact = min_bellman_error(mdp, mu, family, extra=(result.f_hat,))
    result.excess_risk = err - best
    result.diagnostics["bellman_error"] = err
    result.diagnostics["min_bellman_error"] = best
    result.diagnostics["min_is_exact"] = exact
    return result.excess_risk


LEARNERS = {"erm_ds": erm_double_sampling, "fqi": fqi, "minimax": minimax}
