"""Bellman-error functionals: exact values and their empirical estimators.

Exact quantities enumerate every ``(h, s, a, s'[, s''])`` weighted by the
batch distribution and the transition kernel. Empirical losses are means
over per-step tuples computed with compensated summation.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .func_approx import value_tables
from .mdp import BatchDistribution, TabularMdp, as_tables, bellman_images
from .seeding import stream


@dataclass(frozen=True)
class StepData:
    """Tuples of one step; ``s_next2`` is present for double-sampled data."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    s_next2: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.s)


@dataclass(frozen=True)
class Dataset:
    """Per-step tuples ``(s, a, r, s')``; arrays have shape (H, n)."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("s", "a", "s_next"):
            arrays[name] = np.atleast_2d(np.asarray(getattr(self, name), dtype=np.int64))
        arrays["r"] = np.atleast_2d(np.asarray(self.r, dtype=np.float64))
        if len({v.shape for v in arrays.values()}) != 1:
            raise ValueError("dataset columns must share the shape (H, n)")
        if np.any(arrays["r"] < 0) or np.any(arrays["r"] > 1):
            raise ValueError("rewards must lie in [0, 1]")
        for name, v in arrays.items():
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    double = False

    @property
    def horizon(self) -> int:
        return self.s.shape[0]

    @property
    def n(self) -> int:
        return self.s.shape[1]

    def step(self, h: int) -> StepData:
        return StepData(self.s[h], self.a[h], self.r[h], self.s_next[h])

    def validate(self, mdp: TabularMdp) -> None:
        H, S, A = mdp.shape
        if self.horizon != H:
            raise ValueError(f"dataset horizon {self.horizon} != MDP horizon {H}")
        for name, hi in (("s", S), ("a", A), ("s_next", S)) + ((("s_next2", S),) if self.double else ()):
            v = getattr(self, name)
            if v.size and (v.min() < 0 or v.max() >= hi):
                raise ValueError(f"column {name} has out-of-range indices")

    def columns(self) -> list[str]:
        return ["h", "s", "a", "r", "s_next"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns())
        for h in range(self.horizon):
            cols = [self.s[h], self.a[h], self.r[h], self.s_next[h]]
            if self.double:
                cols.append(self.s_next2[h])
            for row in zip(*cols):
                writer.writerow([h, int(row[0]), int(row[1]), repr(float(row[2]))] + [int(x) for x in row[3:]])
        return buf.getvalue()


@dataclass(frozen=True)
class DoubleDataset(Dataset):
    """Dataset with an independent second next state per tuple."""

    s_next2: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        s2 = np.atleast_2d(np.asarray(self.s_next2, dtype=np.int64))
        if s2.shape != self.s.shape:
            raise ValueError("s_next2 must have the same shape as s_next")
        s2.setflags(write=False)
        object.__setattr__(self, "s_next2", s2)

    double = True

    def step(self, h: int) -> StepData:
        return StepData(self.s[h], self.a[h], self.r[h], self.s_next[h], self.s_next2[h])

    def columns(self) -> list[str]:
        return super().columns() + ["s_next2"]

    def single(self) -> Dataset:
        """Drop the second next state."""
        return Dataset(self.s, self.a, self.r, self.s_next)


def dataset_from_csv(text: str) -> Dataset:
    """Parse the ``h,s,a,r,s_next[,s_next2]`` format (rows grouped by ``h``)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise ValueError("empty dataset file")
    header = [c.strip() for c in header]
    if header not in (["h", "s", "a", "r", "s_next"], ["h", "s", "a", "r", "s_next", "s_next2"]):
        raise ValueError(f"unexpected dataset header {header}")
    double = len(header) == 6
    rows = [r for r in reader if r]
    hs = [int(r[0]) for r in rows]
    H = max(hs) + 1 if hs else 0
    per = [[] for _ in range(H)]
    for r, h in zip(rows, hs):
        per[h].append(r)
    if len({len(p) for p in per}) > 1:
        raise ValueError("every step must have the same number of tuples")

    def col(i, dtype):
        return np.array([[p[i] for p in step] for step in per], dtype=dtype).reshape(H, -1)

    s, a, rr, sn = col(1, np.int64), col(2, np.int64), col(3, np.float64), col(4, np.int64)
    if double:
        return DoubleDataset(s, a, rr, sn, col(5, np.int64))
    return Dataset(s, a, rr, sn)


def _sample_next(P_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(P_rows, axis=1)
    u = rng.random(P_rows.shape[0])
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, P_rows.shape[1] - 1)


def generate_dataset(mdp: TabularMdp, mu: BatchDistribution, n: int, double: bool = False,
                     rng_seed: int = 0, trial: int = 0) -> Dataset:
    """Draw ``n`` i.i.d. tuples per step from ``mu_h`` and the transition kernel.

    Step ``h`` of trial ``t`` uses the stream ``(rng_seed, t, h)``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    H, S, A = mdp.shape
    cols = {k: np.zeros((H, n), dtype=np.int64) for k in ("s", "a", "s_next", "s_next2")}
    r = np.zeros((H, n))
    for h in range(H):
        rng = stream(rng_seed, trial, h)
        flat = rng.choice(S * A, size=n, p=mu.mu[h].ravel())
        s, a = np.divmod(flat, A)
        rows = mdp.transitions[h, s, a]
        cols["s"][h], cols["a"][h] = s, a
        cols["s_next"][h] = _sample_next(rows, rng)
        if double:
            cols["s_next2"][h] = _sample_next(rows, rng)
        r[h] = mdp.rewards[h, s, a]
    if double:
        return DoubleDataset(cols["s"], cols["a"], r, cols["s_next"], cols["s_next2"])
    return Dataset(cols["s"], cols["a"], r, cols["s_next"])


# exact functionals


def bellman_error(mdp: TabularMdp, mu: BatchDistribution, f) -> float:
    """Horizon-averaged ``mu_h``-weighted squared Bellman residual."""
    tables = as_tables(f)
    resid = tables - bellman_images(mdp, tables)
    return float(np.sum(mu.mu * resid**2) / mdp.horizon)


def bellman_error_per_step(mdp: TabularMdp, mu: BatchDistribution, f) -> np.ndarray:
    tables = as_tables(f)
    resid = tables - bellman_images(mdp, tables)
    return np.sum(mu.mu * resid**2, axis=(1, 2))


def expected_lb_decomposition(mdp: TabularMdp, mu: BatchDistribution, f) -> tuple[float, float]:
    """Exact ``(E[L_B(f)], variance term)`` by enumeration over next states.

    Their difference is the Bellman error.
    """
    tables = as_tables(f)
    V = value_tables(tables)
    H = mdp.horizon
    expected, variance = 0.0, 0.0
    for h in range(H):
        P = mdp.transitions[h]
        v = V[h + 1]
        resid = tables[h][:, :, None] - mdp.rewards[h][:, :, None] - v[None, None, :]
        expected += np.sum(mu.mu[h][:, :, None] * P * resid**2)
        mean = P @ v
        var = P @ (v**2) - mean**2
        variance += np.sum(mu.mu[h] * np.maximum(var, 0.0))
    return float(expected / H), float(variance / H)


def expected_lds(mdp: TabularMdp, mu: BatchDistribution, f) -> float:
    """Exact expectation of the double-sampling loss, enumerating ``(s', s'')`` pairs."""
    tables = as_tables(f)
    V = value_tables(tables)
    H = mdp.horizon
    total = 0.0
    for h in range(H):
        P = mdp.transitions[h]
        v = V[h + 1]
        resid = tables[h][:, :, None] - mdp.rewards[h][:, :, None] - v[None, None, :]
        joint = P[:, :, :, None] * P[:, :, None, :]
        term = resid[:, :, :, None] ** 2 - 0.5 * (v[:, None] - v[None, :])[None, None] ** 2
        total += np.sum(mu.mu[h][:, :, None, None] * joint * term)
    return float(total / H)


def expected_lmm(mdp: TabularMdp, mu: BatchDistribution, f, g) -> float:
    """Exact expectation of the minimax loss for fixed ``f`` and helper ``g``."""
    tables, gt = as_tables(f), as_tables(g)
    V = value_tables(tables)
    H = mdp.horizon
    total = 0.0
    for h in range(H):
        P = mdp.transitions[h]
        base = mdp.rewards[h][:, :, None] + V[h + 1][None, None, :]
        term = (tables[h][:, :, None] - base) ** 2 - (gt[h][:, :, None] - base) ** 2
        total += np.sum(mu.mu[h][:, :, None] * P * term)
    return float(total / H)


# empirical losses


def _bootstrap(V_next: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    return V_next[s_next]


def fqi_step_loss(data_h: StepData, f_h, f_next) -> float:
    """Mean of ``(f_h(s, a) - r - max_a' f_next(s', a'))**2`` over one step's tuples.

    ``f_next`` is an ``(S, A)`` table, or ``None`` after the last step.
    """
    if len(data_h) == 0:
        raise ValueError("empty step data")
    f_h = np.asarray(f_h, dtype=np.float64)
    boot = np.zeros(len(data_h)) if f_next is None else np.asarray(f_next).max(axis=1)[data_h.s_next]
    return kernels.mean_sq_residual(f_h[data_h.s, data_h.a], data_h.r, boot)


def _check_data(data: Dataset, tables: np.ndarray):
    if data.n == 0:
        raise ValueError("dataset is empty")
    if data.horizon != tables.shape[0]:
        raise ValueError(f"dataset horizon {data.horizon} != function horizon {tables.shape[0]}")


def empirical_lb(data: Dataset, f) -> float:
    """Squared temporal-difference loss averaged over all tuples and steps."""
    tables = as_tables(f)
    _check_data(data, tables)
    V = value_tables(tables)
    per_step = [kernels.mean_sq_residual(tables[h][data.s[h], data.a[h]], data.r[h], V[h + 1][data.s_next[h]])
                for h in range(data.horizon)]
    return math.fsum(per_step) / data.horizon


def empirical_lds(data: DoubleDataset, f) -> float:
    """Double-sampling loss: the squared TD loss minus half the squared next-value gap."""
    if not getattr(data, "double", False):
        raise TypeError("empirical_lds needs a double-sampled dataset")
    tables = as_tables(f)
    _check_data(data, tables)
    V = value_tables(tables)
    per_step = []
    for h in range(data.horizon):
        b1 = V[h + 1][data.s_next[h]]
        b2 = V[h + 1][data.s_next2[h]]
        sq = kernels.mean_sq_residual(tables[h][data.s[h], data.a[h]], data.r[h], b1)
        corr = kernels.half_sq_diff_mean(b1[None, :], b2[None, :])[0]
        per_step.append(sq - corr)
    return math.fsum(per_step) / data.horizon


def empirical_lmm(data: Dataset, f, g) -> float:
    """Minimax loss: squared TD loss of ``f`` minus that of ``g`` on the same targets."""
    tables, gt = as_tables(f), as_tables(g)
    _check_data(data, tables)
    V = value_tables(tables)
    per_step = []
    for h in range(data.horizon):
        boot = V[h + 1][data.s_next[h]]
        lf = kernels.mean_sq_residual(tables[h][data.s[h], data.a[h]], data.r[h], boot)
        lg = kernels.mean_sq_residual(gt[h][data.s[h], data.a[h]], data.r[h], boot)
        per_step.append(lf - lg)
    return math.fsum(per_step) / data.horizon
