"""Instance generators, experiment orchestration and reporting.

An experiment config is one JSON document. Two experiment kinds exist:

``risk_sweep``
    run a learner over an ``n``-grid and a list of seeds on one instance;
    each row holds the empirical loss, the exact Bellman error, the excess
    risk and the matching excess-risk bound (absolute constant 1).
``hardness``
    the hidden-sign separation suite, one summary row per ``(n, seed)``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import complexity, hardness, learners
from .func_approx import FiniteStep, FunctionFamily, LinearStep, completeness_gap
from .mdp import BatchDistribution, TabularMdp, bellman_apply, optimal_q, random_batch_distribution, random_mdp
from .risk import generate_dataset
from .seeding import stream

__all__ = ["generate_dataset", "ExperimentConfig", "ExperimentRecord", "run_experiment", "report",
           "parse_report", "closed_linear_instance", "closed_finite_instance"]

RISK_COLUMNS = ("n", "seed", "empirical_loss", "bellman_error", "excess_risk", "theorem_rhs")
HARDNESS_COLUMNS = hardness.HardnessSummary.CSV_COLUMNS


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


# instance generators


def closed_linear_instance(num_states: int = 8, num_actions: int = 2, dim: int = 4, horizon: int = 2,
                           seed: int = 0, reward_scale: float = 0.2, mu_floor: float = 0.3):
    """Linear MDP whose linear family is exactly closed under the Bellman operator.

    Features lie on the probability simplex, transitions are
    ``sum_k phi_k(s, a) psi_k(s')`` and rewards ``phi . theta_h`` with
    ``theta_h`` in ``[0, reward_scale]``. Step radii grow backward as
    ``R_h = sqrt(d) (reward_scale + R_{h+1})`` so every Bellman image of a
    step-``h+1`` member is a step-``h`` member; no output is ever clipped.

    Returns ``(mdp, mu, family)``.
    """
    rng = stream(seed, 0)
    phi = rng.dirichlet(np.ones(dim), size=(num_states, num_actions))
    psi = rng.dirichlet(np.ones(num_states), size=(horizon, dim))
    theta = rng.uniform(0, reward_scale, size=(horizon, dim))
    P = np.einsum("sak,hkt->hsat", phi, psi)
    r = np.einsum("sak,hk->hsa", phi, theta)
    mdp = TabularMdp(P, np.clip(r, 0, 1), 0)
    mu = random_batch_distribution(mdp, stream(seed, 1), floor=mu_floor)
    radii = [0.0] * horizon
    nxt = 0.0
    for h in range(horizon - 1, -1, -1):
        radii[h] = math.sqrt(dim) * (reward_scale + nxt)
        nxt = radii[h]
    bound = float(horizon)
    if max(radii) > bound:
        raise ConfigError("reward_scale too large for a closed family within [-H, H]")
    family = FunctionFamily([LinearStep(phi, radii[h], bound) for h in range(horizon)])
    return mdp, mu, family


def closed_finite_instance(num_states: int = 5, num_actions: int = 2, horizon: int = 2, size: int = 4,
                           seed: int = 0, mu_floor: float = 0.3):
    """Random MDP with a finite family ``F`` and a helper family ``G`` that contains every Bellman image.

    Members of ``F_h`` take values in ``[0, H - h]``; ``G_h`` is the set of
    ``T_h f`` over ``f`` in ``F_{h+1}`` (the reward table at the last step),
    so the helper completeness gap is zero. Returns ``(mdp, mu, F, G)``.
    """
    mdp = random_mdp(num_states, num_actions, horizon, stream(seed, 0))
    mu = random_batch_distribution(mdp, stream(seed, 1), floor=mu_floor)
    rng = stream(seed, 2)
    bound = float(horizon)
    F_steps, G_steps = [], []
    for h in range(horizon):
        F_steps.append(FiniteStep(rng.uniform(0, horizon - h, size=(size, num_states, num_actions)), bound))
    for h in range(horizon):
        if h + 1 < horizon:
            images = [bellman_apply(mdp, h, m) for m in F_steps[h + 1].members]
        else:
            images = [mdp.rewards[h]]
        G_steps.append(FiniteStep(np.stack(images), bound))
    return mdp, mu, FunctionFamily(F_steps), FunctionFamily(G_steps)


def random_instance(num_states: int = 4, num_actions: int = 2, horizon: int = 2, seed: int = 0,
                    mu_floor: float = 0.3):
    mdp = random_mdp(num_states, num_actions, horizon, stream(seed, 0))
    return mdp, random_batch_distribution(mdp, stream(seed, 1), floor=mu_floor)


# config


@dataclass
class ExperimentConfig:
    name: str
    experiment: str = "risk_sweep"
    instance: dict = field(default_factory=dict)
    learner: str = "fqi"
    family: dict = field(default_factory=dict)
    n_grid: list = field(default_factory=lambda: [100])
    seeds: list = field(default_factory=lambda: [0])
    delta: float = 0.1
    output_dir: str = "."
    hardness: dict = field(default_factory=dict)
    threads: int = 1
    raw: str = ""

    def __post_init__(self):
        if self.experiment not in ("risk_sweep", "hardness"):
            raise ConfigError(f"unknown experiment kind {self.experiment!r}")
        if not self.n_grid:
            raise ConfigError("n_grid must be nonempty")
        if any(int(n) < 1 for n in self.n_grid):
            raise ConfigError("every n must be positive")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("seeds must be nonempty and distinct")
        if self.learner not in learners.LEARNERS:
            raise ConfigError(f"unknown learner {self.learner!r}")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")

    @classmethod
    def from_dict(cls, data: dict, raw: str = "", master_seed: int | None = None) -> "ExperimentConfig":
        data = dict(data)
        if "name" not in data:
            raise ConfigError("config needs a name")
        seeds = data.pop("seeds", None)
        master = data.pop("master_seed", None)
        count = data.pop("num_seeds", None)
        if master_seed is not None:
            master = master_seed
            if seeds is not None and count is None:
                count = len(seeds)
            seeds = None
        if seeds is None:
            master = 0 if master is None else int(master)
            count = 1 if count is None else int(count)
            # derived seeds: distinct 63-bit values from the master stream
            seeds = [int(x) for x in np.random.SeedSequence(master).generate_state(count, dtype=np.uint64) >> 1]
        known = {f for f in cls.__dataclass_fields__} - {"raw", "seeds"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        try:
            return cls(seeds=[int(s) for s in seeds], raw=raw, **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, master_seed: int | None = None) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if master_seed is None and os.environ.get("BRL_SEED"):
            master_seed = int(os.environ["BRL_SEED"])
        return cls.from_dict(data, raw=text, master_seed=master_seed)

    def echo(self) -> str:
        if self.raw:
            return self.raw
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "raw"}
        return json.dumps(d, indent=2, sort_keys=True)


@dataclass
class ExperimentRecord:
    config_echo: str
    columns: tuple
    rows: list
    wall_clock: list = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, ExperimentRecord):
            return NotImplemented
        return (self.config_echo == other.config_echo and tuple(self.columns) == tuple(other.columns)
                and self.rows == other.rows)


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def build_instance(params: dict, base_dir: str = "."):
    """Return ``(mdp, mu, F, G)`` from an ``instance`` block (``G`` may be ``None``)."""
    params = dict(params)
    gen = params.pop("generator", None)
    if "path" in params:
        data = _load_json(Path(base_dir) / params["path"])
        mdp = TabularMdp.from_dict(data["mdp"] if "mdp" in data else data)
        mu = BatchDistribution.from_dict(data) if "mu" in data else None
        if mu is None:
            raise ConfigError("instance file needs a 'mu' field")
        family = FunctionFamily.from_dict(data["family"]) if "family" in data else None
        return mdp, mu, family, None
    if gen == "closed_linear":
        mdp, mu, fam = closed_linear_instance(**params)
        return mdp, mu, fam, fam
    if gen == "closed_finite":
        return closed_finite_instance(**params)
    if gen == "random":
        mdp, mu = random_instance(**params)
        return mdp, mu, None, None
    if gen == "hard":
        eps, S = params["epsilon"], params["S"]
        sigma = hardness.sample_sigma(S, params.get("balanced", False), stream(params.get("seed", 0), 11))
        inst = hardness.build_hard_instance(eps, S, params.get("c", 1), sigma)
        return inst.mdp, inst.mu, inst.family, None
    raise ConfigError(f"unknown instance generator {gen!r}")


def build_family(params: dict, mdp: TabularMdp, default, base_dir: str = "."):
    kind = params.get("kind", "instance")
    if kind == "instance":
        if default is None:
            raise ConfigError("instance provides no family; set family.kind")
        return default
    if kind == "singleton_qstar":
        return FunctionFamily.finite([[q] for q in optimal_q(mdp)], bound=float(mdp.horizon))
    if kind == "path":
        return FunctionFamily.from_dict(_load_json(Path(base_dir) / params["path"]))
    raise ConfigError(f"unknown family kind {kind!r}")


def _rad_bound(step, n: int) -> float:
    if isinstance(step, FiniteStep):
        lo = min(step.value_range[0], float(step.members.min()))
        hi = max(step.value_range[1], float(step.members.max()))
        return complexity.bound_finite(hi - lo, step.size, n)[0]
    if isinstance(step, LinearStep):
        return complexity.bound_linear(step.radius, step.dim, n)[0]
    return complexity.bound_kernel(step.rkhs_bound, step.eigenvalues, n)[0]


def _theorem_value(learner: str, mdp, mu, F, G, n: int, delta: float, eps: float, min_err: float) -> float:
    H, A = mdp.horizon, mdp.num_actions
    rad_F = [_rad_bound(st, n) for st in F.steps]
    # value-reduced complexity through the sqrt(2) A factor, zero after the last step
    rad_VF = [math.sqrt(2) * A * rad_F[h + 1] if h + 1 < H else 0.0 for h in range(H)]
    q = complexity.BoundQuery(n=n, delta=delta, H=H, epsilon=eps, min_bellman_error=min_err)
    if learner == "erm_ds":
        return complexity.theorem_rhs("thm1", q, {"rad_F": rad_F, "rad_VF": rad_VF})
    if learner == "fqi":
        return complexity.theorem_rhs("thm3", q, {"rad_F": rad_F})
    rad_G = [_rad_bound(st, n) for st in G.steps]
    return complexity.theorem_rhs("thm5", q, {"rad_F": rad_F, "rad_G": rad_G, "rad_VF": rad_VF})


def _risk_rows(config: ExperimentConfig, base_dir: str):
    mdp, mu, F_default, G_default = build_instance(config.instance, base_dir)
    F = build_family(config.family, mdp, F_default, base_dir)
    G = F
    if config.learner == "minimax":
        G = build_family(config.family.get("helper", {"kind": "instance"}), mdp, G_default or F, base_dir)
    gap = completeness_gap(mdp, mu, F, G).gap
    min_err, _ = learners.min_bellman_error(mdp, mu, F)
    grid = [(int(n), int(seed)) for n in config.n_grid for seed in config.seeds]
    double = config.learner == "erm_ds"

    def run(point):
        n, seed = point
        start = time.perf_counter()
        data = generate_dataset(mdp, mu, n, double=double, rng_seed=seed)
        if config.learner == "minimax":
            result = learners.minimax(F, G, data)
        else:
            result = learners.LEARNERS[config.learner](F, data)
        excess = learners.report_excess_risk(mdp, mu, F, result)
        rhs = _theorem_value(config.learner, mdp, mu, F, G, n, config.delta, gap, min_err)
        row = {"n": n, "seed": seed, "empirical_loss": result.achieved_empirical_loss,
               "bellman_error": result.diagnostics["bellman_error"], "excess_risk": excess, "theorem_rhs": rhs}
        return row, time.perf_counter() - start

    return _map(run, grid, config.threads)


def _hardness_rows(config: ExperimentConfig):
    hp = config.hardness
    try:
        eps, S, trials = float(hp["epsilon"]), int(hp["S"]), int(hp["trials"])
    except KeyError as exc:
        raise ConfigError(f"hardness block needs {exc}") from exc
    classifiers = hp.get("classifiers", [hp.get("classifier", "bayes")])
    balanced = bool(hp.get("balanced", False))
    grid = [(int(n), int(seed), clf) for n in config.n_grid for seed in config.seeds for clf in classifiers]

    def run(point):
        n, seed, clf = point
        start = time.perf_counter()
        summary = hardness.lower_bound_experiment(eps, S, n, trials, balanced, clf, seed)
        return summary.as_row(), time.perf_counter() - start

    return _map(run, grid, config.threads)


def _map(fn, grid, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(fn, grid))
    else:
        out = [fn(p) for p in grid]
    return [r for r, _ in out], [t for _, t in out]


def run_experiment(config: ExperimentConfig, base_dir: str = ".", write: bool = True) -> ExperimentRecord:
    """Execute the whole grid; rows come back in grid order whatever the thread count."""
    if config.experiment == "hardness":
        rows, clock = _hardness_rows(config)
        columns = HARDNESS_COLUMNS
    else:
        rows, clock = _risk_rows(config, base_dir)
        columns = RISK_COLUMNS
    record = ExperimentRecord(config.echo(), tuple(columns), rows, clock)
    if write:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{config.name}.csv").write_text(report(record, "csv"))
        (out / f"{config.name}.json").write_text(report(record, "text"))
    return record


# reporting


def _fmt(value) -> str:
    if isinstance(value, bool) or isinstance(value, (np.bool_,)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return "nan"
        return f"{float(value):.12g}"
    return str(value)


def report(record: ExperimentRecord, fmt: str = "csv") -> str:
    """Serialize a record. CSV rows use 12 significant digits and omit timings."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(record.columns)
        for row in record.rows:
            writer.writerow([_fmt(row[c]) for c in record.columns])
        return buf.getvalue()
    if fmt == "text":
        doc = {"config": record.config_echo, "columns": list(record.columns), "rows": record.rows,
               "wall_clock": record.wall_clock}
        return json.dumps(doc, indent=2, default=_json_default) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _parse_cell(text: str):
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_report(text: str, fmt: str = "text") -> ExperimentRecord:
    if fmt == "text":
        doc = json.loads(text)
        return ExperimentRecord(doc["config"], tuple(doc["columns"]), doc["rows"], doc.get("wall_clock", []))
    if fmt == "csv":
        reader = csv.reader(io.StringIO(text))
        columns = tuple(next(reader))
        rows = [dict(zip(columns, (_parse_cell(c) for c in r))) for r in reader if r]
        return ExperimentRecord("", columns, rows)
    raise ValueError(f"unknown report format {fmt!r}")
