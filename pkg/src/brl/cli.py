"""Command-line entry point: ``brl {generate,fit,complexity,hardness,report}``.

Every subcommand reads one JSON config (``--config``). The master seed is
taken from ``--seed`` if given, else from ``BRL_SEED``, else from the config
file. Exit codes: 0 success, 2 invalid config, 3 assumption violation,
4 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import complexity, harness, hardness, learners
from .func_approx import FiniteStep, KernelStep, LinearStep, SparseLinearStep
from .mdp import AssumptionViolation, concentrability
from .risk import dataset_from_csv, generate_dataset

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_IO = 0, 2, 3, 4

COMPLEXITY_COLUMNS = ("family", "variant", "n", "estimate", "std_error", "bound", "critical_radius",
                      "critical_radius_bound")


def _resolve_seed(cli_seed, file_seed):
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get("BRL_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise harness.ConfigError(f"BRL_SEED must be an integer, got {env!r}") from exc
    return int(file_seed) if file_seed is not None else 0


def _read_config(path) -> tuple[dict, str]:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise harness.ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise harness.ConfigError("config must be a JSON object")
    return data, text


def _out_dir(args, data) -> Path:
    out = Path(args.out or data.get("output_dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([harness._fmt(row[c]) for c in columns])
    return buf.getvalue()


def cmd_generate(args) -> int:
    data, _ = _read_config(args.config)
    seed = _resolve_seed(args.seed, data.get("seed"))
    base = Path(args.config).parent
    mdp, mu, family, _ = harness.build_instance(data.get("instance", {}), base)
    n = int(data.get("n", 100))
    if n < 1:
        raise harness.ConfigError("n must be positive")
    dataset = generate_dataset(mdp, mu, n, double=bool(data.get("double", False)), rng_seed=seed)
    out = _out_dir(args, data)
    (out / "dataset.csv").write_text(dataset.to_csv())
    doc = {"mdp": mdp.to_dict(), "mu": mu.mu.tolist()}
    if family is not None:
        doc["family"] = family.to_dict()
    (out / "instance.json").write_text(json.dumps(doc) + "\n")
    return EXIT_OK


def _require_coverage(mdp, mu):
    rep = concentrability(mdp, mu)
    if not rep.is_finite:
        raise AssumptionViolation(f"concentrability is infinite (uncovered pair {rep.witness})")


def _fit_single(args, data, base: Path) -> int:
    mdp, mu, F_default, G_default = harness.build_instance(data.get("instance", {}), base)
    if data.get("check_coverage", False):
        _require_coverage(mdp, mu)
    F = harness.build_family(data.get("family", {}), mdp, F_default, base)
    dataset = dataset_from_csv((base / data["dataset"]).read_text())
    learner = args.learner or data.get("learner", "fqi")
    if learner == "erm_ds" and not hasattr(dataset, "s_next2"):
        raise harness.ConfigError("erm_ds needs a double-sample dataset (s_next2 column)")
    if learner == "minimax":
        G = harness.build_family(data.get("helper", {"kind": "instance"}), mdp, G_default or F, base)
        result = learners.minimax(F, G, dataset)
    else:
        result = learners.LEARNERS[learner](F, dataset)
    learners.report_excess_risk(mdp, mu, F, result)
    out = _out_dir(args, data)
    doc = {"learner": learner, **result.to_dict()}
    (out / "fit.json").write_text(json.dumps(doc, indent=2, default=harness._json_default) + "\n")
    return EXIT_OK


def cmd_fit(args) -> int:
    data, text = _read_config(args.config)
    base = Path(args.config).parent
    if "dataset" in data:
        return _fit_single(args, data, base)
    if args.learner:
        data["learner"] = args.learner
    if args.threads:
        data["threads"] = args.threads
    if args.out:
        data["output_dir"] = args.out
    master = args.seed
    if master is None and os.environ.get("BRL_SEED"):
        master = _resolve_seed(None, None)
    check = bool(data.pop("check_coverage", False))
    config = harness.ExperimentConfig.from_dict(data, raw=text, master_seed=master)
    if check:
        mdp, mu, _, _ = harness.build_instance(config.instance, base)
        _require_coverage(mdp, mu)
    harness.run_experiment(config, base_dir=str(base))
    return EXIT_OK


def _closed_bound(step, n: int) -> tuple[float, float]:
    if isinstance(step, FiniteStep):
        lo, hi = step.value_range
        return complexity.bound_finite(hi - lo, step.size, n)
    if isinstance(step, SparseLinearStep):
        return complexity.bound_sparse(step.radius, step.sparsity, step.dim, n, step.kappa, 1.0)
    if isinstance(step, LinearStep):
        return complexity.bound_linear(step.radius, step.dim, n)
    if isinstance(step, KernelStep):
        return complexity.bound_kernel(step.rkhs_bound, step.eigenvalues, n)
    raise complexity.UnsupportedFamily(type(step).__name__)


def complexity_rows(family, rho, n_grid, name: str, seed: int, num_sign_draws: int = 500,
                    num_data_redraws: int = 10, local: bool = True) -> list[dict]:
    """One row per ``(step, n)``: population estimate, closed-form bound and critical radius."""
    rows = []
    for h, step in enumerate(family.steps):
        for n in n_grid:
            est = complexity.population_rademacher(step, rho[h], n, num_data_redraws, num_sign_draws,
                                                   rng_seed=seed)
            bound, crit_bound = _closed_bound(step, n)
            crit = math.nan
            if local and isinstance(step, (FiniteStep, LinearStep)) and not isinstance(step, SparseLinearStep):
                anchor = step.member(0) if isinstance(step, FiniteStep) else step.member(np.zeros(step.dim))

                def local_fn(r, step=step, anchor=anchor, n=n, h=h):
                    return complexity.local_rademacher(step, anchor, r, rho[h], n, num_data_redraws,
                                                       num_sign_draws, rng_seed=seed).mean

                crit = complexity.critical_radius_from_estimates(local_fn, r_max=4.0 * step.bound**2, tol=1e-3)
            rows.append({"family": f"{name}[{h}]", "variant": step.variant, "n": int(n), "estimate": est.mean,
                         "std_error": est.std_error, "bound": bound, "critical_radius": crit,
                         "critical_radius_bound": crit_bound})
    return rows


def cmd_complexity(args) -> int:
    data, _ = _read_config(args.config)
    seed = _resolve_seed(args.seed, data.get("seed"))
    base = Path(args.config).parent
    mdp, mu, F_default, _ = harness.build_instance(data.get("instance", {}), base)
    family = harness.build_family(data.get("family", {}), mdp, F_default, base)
    n_grid = [int(n) for n in data.get("n_grid", [100])]
    if not n_grid or min(n_grid) < 1:
        raise harness.ConfigError("n_grid must hold positive integers")
    rows = complexity_rows(family, mu.mu, n_grid, data.get("name", "F"), seed,
                           int(data.get("num_sign_draws", 500)), int(data.get("num_data_redraws", 10)),
                           bool(data.get("local", True)))
    out = _out_dir(args, data)
    (out / "complexity.csv").write_text(_csv_text(COMPLEXITY_COLUMNS, rows))
    return EXIT_OK


def cmd_hardness(args) -> int:
    data, _ = _read_config(args.config)
    seed = _resolve_seed(args.seed, data.get("seed"))
    try:
        eps, S, trials = float(data["epsilon"]), int(data["S"]), int(data["trials"])
    except KeyError as exc:
        raise harness.ConfigError(f"hardness config needs {exc}") from exc
    n_grid = [int(n) for n in data.get("n_grid", [data.get("n", 25)])]
    classifiers = data.get("classifiers", [data.get("classifier", "bayes")])
    for clf in classifiers:
        if clf not in hardness.CLASSIFIERS:
            raise harness.ConfigError(f"unknown classifier {clf!r}")
    if not 0 < eps <= 0.5 or S < 1 or trials < 1:
        raise harness.ConfigError("need 0 < epsilon <= 0.5, S >= 1, trials >= 1")
    rows = [hardness.lower_bound_experiment(eps, S, n, trials, bool(data.get("balanced", False)), clf, seed).as_row()
            for n in n_grid for clf in classifiers]
    out = _out_dir(args, data)
    (out / "hardness.csv").write_text(_csv_text(hardness.HardnessSummary.CSV_COLUMNS, rows))
    return EXIT_OK


def cmd_report(args) -> int:
    text = Path(args.input).read_text()
    try:
        record = harness.parse_report(text, "text")
    except (json.JSONDecodeError, KeyError) as exc:
        raise harness.ConfigError(f"not a structured-text record: {exc}") from exc
    output = harness.report(record, args.format)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        suffix = "csv" if args.format == "csv" else "json"
        (out / f"report.{suffix}").write_text(output)
    else:
        sys.stdout.write(output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brl", description="Bellman-residual offline RL experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides BRL_SEED and the file)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None, help="worker threads for grid points")

    common(sub.add_parser("generate", help="emit a dataset CSV"))
    fit = sub.add_parser("fit", help="run a learner on a dataset or an n-grid sweep")
    common(fit)
    fit.add_argument("--learner", choices=sorted(learners.LEARNERS), default=None)
    common(sub.add_parser("complexity", help="complexity estimates and bounds"))
    common(sub.add_parser("hardness", help="hidden-sign lower-bound suite"))
    rep = sub.add_parser("report", help="reformat a structured-text record")
    common(rep, config_required=False)
    rep.add_argument("input", help="structured-text record (JSON)")
    rep.add_argument("--format", choices=("csv", "text"), default="csv")
    return parser


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "complexity": cmd_complexity, "hardness": cmd_hardness,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except AssumptionViolation as exc:
        print(f"assumption violation: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (harness.ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
