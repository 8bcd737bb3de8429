"""Command-line entry point.

Subcommands:
  synth      generate a synthetic cohort file from a generator config or preset
  run        run the full protocol for one configuration or baseline
  compare    paired comparison of several configurations and baselines
  interpret  per-time-point feature rankings and cross-time trajectories

Each command reads one JSON config file, writes its artifacts into --out,
and drops a manifest.json recording the fully resolved config, seeds,
artifact paths, tool version and wall-clock timings.  A manifest can be
passed back as --config to rerun the exact same computation; reports are
byte-identical whatever --threads (or LONGSTACK_THREADS) says.

Exit codes: 0 success, 1 config/validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .cohort import export_cohort, load_cohort, load_schema, save_schema, schema_of
from .harness import (ExperimentConfig, _regime_and_head, compare_configurations,
                      load_experiment_cohort, run_baseline_early_fusion, run_experiment,
                      write_report_summary, write_report_table)
from .interpret import (ImportanceTable, build_trajectories, rank_features_at_time,
                        write_importance_table, write_trajectory_links)
from .base_predictors import PredictorSpec
from .harness import default_predictor_specs
from .preprocess import FittedPreprocessor, PreprocessPlan
from .synth import GeneratorConfig, generate, interaction_preset, table1_preset, trend_preset

PRESETS = {
    "table1": (table1_preset, ("seed", "n_samples", "missing_rate")),
    "trend": (trend_preset, ("seed", "n_samples", "noise_scale")),
    "interaction": (interaction_preset, ("seed", "n_samples", "noise_scale")),
}


def _load_config(path: str) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if "resolved_config" in data:  # a manifest; rerun what it records
        data = data["resolved_config"]
    return data


def _generator_from(data: dict) -> GeneratorConfig:
    if "preset" in data:
        name = data["preset"]
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        builder, allowed = PRESETS[name]
        kwargs = {k: data[k] for k in allowed if k in data}
        return builder(**kwargs)
    return GeneratorConfig.from_dict(data)


def _resolve_threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("LONGSTACK_THREADS")
    if env:
        return max(1, int(env))
    return 1


def _write_manifest(out_dir: Path, command: str, resolved: dict, artifacts: dict,
                    seconds: float) -> Path:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "resolved_config": resolved,
        "seed": resolved.get("seed"),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "timings": {"total_seconds": round(seconds, 3)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _cmd_synth(args) -> int:
    started = time.monotonic()
    data = _load_config(args.config)
    generator = _generator_from(data.get("generator", data))
    cohort = generate(generator)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort_path = out / "cohort.csv"
    schema_path = out / "schema.json"
    export_cohort(cohort, cohort_path)
    save_schema(schema_of(cohort), schema_path)
    resolved = {"generator": generator.to_dict(), "seed": generator.seed}
    _write_manifest(out, "synth", resolved,
                    {"cohort": cohort_path, "schema": schema_path},
                    time.monotonic() - started)
    print(f"wrote {cohort_path} ({cohort.n_samples} samples, "
          f"{len(cohort.modalities)} modalities)")
    return 0


def _cmd_run(args) -> int:
    started = time.monotonic()
    config = ExperimentConfig.from_dict(_load_config(args.config))
    threads = _resolve_threads(args)
    regime, _ = _regime_and_head(config.configuration)
    runner = run_experiment if regime is not None else run_baseline_early_fusion
    report = runner(config, threads=threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "report.csv"
    summary_path = out / "summary.csv"
    write_report_table(report, table_path)
    write_report_summary(report, summary_path)
    _write_manifest(out, "run", config.to_dict(),
                    {"report": table_path, "summary": summary_path},
                    time.monotonic() - started)
    print(f"configuration {config.configuration}: median macro F per visit "
          + " ".join(f"{name}={m:.3f}" for name, m in
                     zip(report.time_point_names, report.medians)))
    return 0


def _cmd_compare(args) -> int:
    started = time.monotonic()
    data = _load_config(args.config)
    configurations = data.get("configurations", [1, 2, 3, 4])
    baselines = data.get("baselines", [])
    config = ExperimentConfig.from_dict(data)
    threads = _resolve_threads(args)
    cohort = load_experiment_cohort(config)
    reports = compare_configurations(cohort, config, configurations=configurations,
                                     baselines=baselines, threads=threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "report.csv"
    summary_path = out / "summary.csv"
    ordered = [reports[label] for label in list(configurations) + list(baselines)]
    write_report_table(ordered, table_path)
    write_report_summary(ordered, summary_path)
    resolved = config.to_dict()
    resolved["configurations"] = list(configurations)
    resolved["baselines"] = list(baselines)
    _write_manifest(out, "compare", resolved,
                    {"report": table_path, "summary": summary_path},
                    time.monotonic() - started)
    for rep in ordered:
        print(f"{rep.configuration}: " + " ".join(
            f"{name}={m:.3f}" for name, m in zip(rep.time_point_names, rep.medians)))
    return 0


def _cmd_interpret(args) -> int:
    started = time.monotonic()
    data = _load_config(args.config)
    if data.get("generator"):
        cohort = generate(_generator_from(data["generator"]))
    elif data.get("cohort_path"):
        cohort = load_cohort(data["cohort_path"], load_schema(data["schema_path"]))
    else:
        raise ValueError("interpret config needs a generator or a cohort_path")
    plan = PreprocessPlan.from_dict(data.get("plan", {}))
    _, processed = FittedPreprocessor.fit(cohort, plan)
    times = data.get("times")
    if times is None:
        times = list(range(processed.n_times))
    top_k = args.top_k if args.top_k is not None else data.get("top_k", 10)
    seed = data.get("seed", 0)
    inner_folds = data.get("inner_folds", 5)
    repeats = data.get("permutation_repeats", 10)
    specs = tuple(PredictorSpec.from_dict(s) for s in data.get("predictor_specs", [])) \
        or default_predictor_specs()
    rankings = {t: rank_features_at_time(processed, t, list(specs), seed=seed,
                                         inner_folds=inner_folds,
                                         permutation_repeats=repeats)
                for t in times}
    names = tuple(processed.time_point_names[t] for t in sorted(times))
    if len(times) >= 2:
        table = build_trajectories(rankings, top_k=top_k, time_point_names=names)
    else:
        only = next(iter(rankings))
        table = ImportanceTable(time_point_names=names,
                                rankings={only: rankings[only][:top_k]},
                                top_k=top_k, links=[])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    imp_path = out / "importance.csv"
    links_path = out / "trajectories.csv"
    write_importance_table(table, imp_path)
    write_trajectory_links(table, links_path)
    resolved = {"generator": data.get("generator"), "cohort_path": data.get("cohort_path"),
                "schema_path": data.get("schema_path"), "plan": plan.to_dict(),
                "times": list(times), "top_k": top_k, "seed": seed,
                "inner_folds": inner_folds, "permutation_repeats": repeats,
                "predictor_specs": [s.to_dict() for s in specs]}
    _write_manifest(out, "interpret", resolved,
                    {"importance": imp_path, "trajectories": links_path},
                    time.monotonic() - started)
    print(f"ranked {len(times)} time points, {len(table.links)} trajectory links")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="longstack",
        description="Longitudinal stacked ensembles over multimodal visit sequences.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic cohort file")
    p_synth.add_argument("--config", required=True, help="generator config or manifest (JSON)")
    p_synth.add_argument("--out", default=".", help="output directory")

    for name, help_text in (("run", "run one configuration end to end"),
                            ("compare", "compare configurations and baselines on shared folds")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config or manifest (JSON)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="parallel repeat workers (default LONGSTACK_THREADS or 1)")

    p_int = sub.add_parser("interpret", help="rank features per time point")
    p_int.add_argument("--config", required=True, help="interpretation config or manifest (JSON)")
    p_int.add_argument("--out", default=".", help="output directory")
    p_int.add_argument("--top-k", type=int, default=None, help="ranking length (default 10)")

    args = parser.parse_args(argv)
    commands = {"synth": _cmd_synth, "run": _cmd_run,
                "compare": _cmd_compare, "interpret": _cmd_interpret}
    try:
        return commands[args.command](args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
