"""Command-line pipeline: predict -> design -> simulate -> report.

Every subcommand takes one JSON config file plus optional --seed/--out/
--backend overrides, prints a machine-readable JSON summary to stdout, and
writes human-facing tables to files.  Exit codes: 0 success, 2 config
error, 3 backend error, 4 design infeasibility.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .data import Dataset, load_dataset, render_unit_description
from .errors import BackendError, ConfigError, DataError, DesignError, InvalidProbability, StratkitError
from .harness import (
    DGPSource,
    EmpiricalSource,
    MethodComparison,
    aggregate_results,
    emit_report,
    impute_counterfactuals,
    read_replications_csv,
    run_simulation,
    write_replications_csv,
)
from .predictor import PredictionCache, predict_dataset
from .randomization import assign_within_strata, simple_randomization, write_assignments_csv
from .scoring import ScoredUnit, read_scores_csv, score_units, write_scores_csv
from .stratification import (
    HybridCostParams,
    StratumSet,
    categorical_strata,
    default_lambda,
    estimate_covariance,
    paired_design_strata,
    sorted_block_strata,
)

SCORE_METHODS = ("sorted-pair", "sorted-block", "hybrid-pair")


def cmd_predict(cfg: RunConfig) -> dict:
    schema = cfg.schema()
    dataset = load_dataset(cfg.dataset_path, schema)
    ctx = cfg.context()
    backend = cfg.backend(schema)
    outdir = cfg.output_dir
    outdir.mkdir(parents=True, exist_ok=True)

    limit = cfg.max_description_chars
    if limit is not None:
        for unit in dataset.units:
            length = len(render_unit_description(unit, schema))
            if length > limit:
                raise ConfigError(
                    f"unit {unit.unit_id!r}: rendered description is {length} chars, over the configured "
                    f"limit of {limit}; shorten the covariate text or raise prompt.max_description_chars"
                )

    cache = PredictionCache(outdir / "predictions.jsonl", outdir / "failures.jsonl")
    pairs, stats = predict_dataset(dataset, ctx, backend, cache, parallelism=cfg.parallelism)
    scored = score_units(pairs, cfg.allocation)
    scores_path = outdir / "scores.csv"
    write_scores_csv(scored, scores_path, cfg.header_comment)
    return {
        "command": "predict",
        "units": stats.units,
        "cache_hits": stats.cache_hits,
        "network_calls": stats.backend_calls,
        "failures": stats.failures,
        "scores_csv": str(scores_path),
        "cache": str(cache.path),
        "config_hash": cfg.config_hash,
    }


def _aligned_scores(dataset: Dataset, path: Path) -> list[ScoredUnit]:
    scored = read_scores_csv(path)
    by_id = {s.unit_id: s for s in scored}
    missing = [uid for uid in dataset.unit_ids if uid not in by_id]
    if missing:
        raise ConfigError(f"scores file {path} is missing unit(s): {missing[:5]}")
    return [by_id[uid] for uid in dataset.unit_ids]


def _write_strata_csv(dataset: Dataset, strata: StratumSet | None, method: str, path: Path, header: str) -> None:
    stratum_of = {}
    if strata is not None:
        for stratum in strata.strata:
            for uid in stratum.member_unit_ids:
                stratum_of[uid] = stratum.stratum_id
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {header}\n")
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "stratum_id", "method_tag"])
        for uid in dataset.unit_ids:
            sid = stratum_of.get(uid)
            writer.writerow([uid, "" if sid is None else sid, method])


def cmd_design(cfg: RunConfig) -> dict:
    schema = cfg.schema()
    dataset = load_dataset(cfg.dataset_path, schema)
    design = cfg.design()
    method = design["method"]
    p = cfg.allocation
    seed = cfg.seed
    outdir = cfg.output_dir
    outdir.mkdir(parents=True, exist_ok=True)

    scored = None
    scores_path = outdir / "scores.csv"
    if method in SCORE_METHODS:
        if not scores_path.exists():
            raise ConfigError(f"design method {method!r} needs {scores_path}; run `stratkit predict` first")
        scored = _aligned_scores(dataset, scores_path)
    elif scores_path.exists():
        scored = _aligned_scores(dataset, scores_path)

    resolved_lambda = None
    if method == "simple":
        strata = None
        assignments = simple_randomization(dataset, p, seed)
    elif method == "sorted-pair":
        strata = paired_design_strata(scored, None, "sorted-pair")
    elif method == "sorted-block":
        strata = sorted_block_strata(scored, int(design.get("block_size", 2)))
    elif method in ("mahalanobis-pair", "hybrid-pair"):
        covariates = tuple(design.get("covariates", ()))
        if not covariates:
            covariates = tuple(
                v.name for v in schema.variables if v.kind in ("numeric", "categorical")
            )
        ridge = float(design.get("ridge_epsilon", 1e-8))
        if method == "hybrid-pair":
            resolved_lambda = design.get("lambda")
            if resolved_lambda is None:
                k = estimate_covariance(dataset, covariates, ridge).dim
                resolved_lambda = default_lambda(k)
        params = HybridCostParams(
            lambda_=0.0 if method == "mahalanobis-pair" else float(resolved_lambda),
            covariate_subset=covariates,
            ridge_epsilon=ridge,
        )
        strata = paired_design_strata(scored, dataset, method, params)
    elif method == "categorical":
        variables = tuple(design.get("categorical", ())) or schema.categorical_names()
        strata = categorical_strata(dataset, variables)
    else:
        raise ConfigError(f"unknown design method {method!r}")

    if strata is not None:
        assignments = assign_within_strata(strata, p, seed)
    order = {uid: i for i, uid in enumerate(dataset.unit_ids)}
    assignments = sorted(assignments, key=lambda a: order[a.unit_id])

    strata_path = outdir / "strata.csv"
    assignments_path = outdir / "assignments.csv"
    _write_strata_csv(dataset, strata, method, strata_path, cfg.header_comment)
    write_assignments_csv(assignments, method, assignments_path, cfg.header_comment)

    treated = sum(a.treatment for a in assignments)
    summary = {
        "command": "design",
        "method": method,
        "n_units": len(dataset),
        "n_strata": len(strata.strata) if strata is not None else 0,
        "treated": treated,
        "leftover_unit": strata.leftover_unit_id if strata is not None else None,
        "strata_csv": str(strata_path),
        "assignments_csv": str(assignments_path),
        "config_hash": cfg.config_hash,
    }
    if resolved_lambda is not None:
        summary["lambda"] = resolved_lambda
    if strata is not None and strata.total_cost is not None:
        summary["total_cost"] = strata.total_cost
    return summary


def _simulation_source(cfg: RunConfig, specs) -> tuple[object, Path]:
    outdir = cfg.output_dir
    dgp = cfg.dgp()
    if dgp is not None:
        return DGPSource(dgp[0], dgp[1]), outdir
    schema = cfg.schema()
    dataset = load_dataset(cfg.dataset_path, schema)
    if not dataset.has_observed_outcomes():
        raise ConfigError(
            "dataset has no observed outcomes/treatments and the config names no synthetic dgp; "
            "nothing to simulate"
        )
    sample = impute_counterfactuals(dataset)
    scores = None
    scores_path = outdir / "scores.csv"
    needs_scores = any(s.method in SCORE_METHODS for s in specs)
    if scores_path.exists():
        scores = np.asarray([s.g_hat for s in _aligned_scores(dataset, scores_path)])
    elif needs_scores:
        raise ConfigError(f"simulation methods need {scores_path}; run `stratkit predict` first")
    return EmpiricalSource(sample, scores), outdir


def cmd_simulate(cfg: RunConfig) -> dict:
    sim = cfg.simulation()
    specs = cfg.simulation_specs()
    reps = int(sim.get("reps", 3000))
    threads = int(sim.get("threads", 1))
    n = sim.get("n")
    boot = int(sim.get("bootstrap_resamples", 1000))
    baselines = sim.get("baselines")
    source, outdir = _simulation_source(cfg, specs)
    outdir.mkdir(parents=True, exist_ok=True)

    comparison = run_simulation(
        source,
        specs,
        reps=reps,
        master_seed=cfg.seed,
        n=int(n) if n is not None else None,
        p=cfg.allocation,
        threads=threads,
        bootstrap_resamples=boot,
    )
    return _emit_all(cfg, comparison, baselines, outdir)


def _emit_all(cfg: RunConfig, comparison: MethodComparison, baselines, outdir: Path) -> dict:
    report_csv = outdir / "report.csv"
    report_md = outdir / "report.md"
    replications = outdir / "replications.csv"
    emit_report(comparison, "csv", report_csv, baselines, cfg.header_comment)
    emit_report(comparison, "markdown", report_md, baselines, cfg.header_comment)
    rep_header = (
        f"{cfg.header_comment} true_tau={comparison.true_tau!r} n={comparison.n} "
        f"master_seed={comparison.master_seed}"
    )
    write_replications_csv(comparison, replications, rep_header)
    return {
        "command": "simulate",
        "reps": comparison.reps,
        "n": comparison.n,
        "true_tau": comparison.true_tau,
        "methods": [
            {
                "name": m.name,
                "mse": m.mse,
                "mse_ci": [m.mse_ci_low, m.mse_ci_high],
                "mean_se": m.mean_se,
            }
            for m in comparison.methods
            if m.ok
        ],
        "failed_methods": [{"name": m.name, "error": m.error} for m in comparison.methods if not m.ok],
        "report_csv": str(report_csv),
        "report_md": str(report_md),
        "replications_csv": str(replications),
        "config_hash": cfg.config_hash,
    }


def cmd_report(cfg: RunConfig) -> dict:
    outdir = cfg.output_dir
    replications = outdir / "replications.csv"
    if not replications.exists():
        raise ConfigError(f"{replications} not found; run `stratkit simulate` first")
    names, taus, ses, meta = read_replications_csv(replications)
    if "true_tau" not in meta:
        raise ConfigError(f"{replications} header lacks true_tau; regenerate it with `stratkit simulate`")
    true_tau = float(meta["true_tau"])
    reps = len(next(iter(taus.values())))
    sim = cfg.simulation()
    boot = int(sim.get("bootstrap_resamples", 1000))
    results = aggregate_results(names, taus, ses, {}, true_tau, reps, cfg.seed, boot)
    comparison = MethodComparison(
        methods=results,
        true_tau=true_tau,
        reps=reps,
        n=int(meta.get("n", 0)),
        master_seed=cfg.seed,
        replication_taus=taus,
        replication_ses=ses,
    )
    summary = _emit_all(cfg, comparison, sim.get("baselines"), outdir)
    summary["command"] = "report"
    return summary


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stratkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("predict", "render prompts, query the backend, cache predictions, export scores"),
        ("design", "form strata and assign treatment for the configured design"),
        ("simulate", "run the seeded design comparison and emit report tables"),
        ("report", "re-render report tables from a saved replications file"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="path to the JSON run configuration")
        cmd.add_argument("--seed", type=int, default=None, help="override the master seed")
        cmd.add_argument("--out", default=None, help="override the output directory")
        cmd.add_argument("--backend", default=None, help="override the backend name")
    return parser


_COMMANDS = {
    "predict": cmd_predict,
    "design": cmd_design,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, backend=args.backend)
        summary = _COMMANDS[args.command](cfg)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3
    except (DesignError, InvalidProbability) as exc:
        print(f"design error: {exc}", file=sys.stderr)
        return 4
    except StratkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
