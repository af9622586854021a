"""Command line: ``mgprnn {simulate,train,evaluate,score,bench} --config PATH``.

Every command writes ``resolved_config.json`` into the output directory and
exits with the code `exit_code_for` assigns to the error it failed with.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import pandas as pd

from mgprnn.bench import run_bench
from mgprnn.checkpoint import load_checkpoint, save_checkpoint
from mgprnn.config import VARIANTS, RunConfig, load_run_config, parse_horizons
from mgprnn.data import load_cohort, save_cohort
from mgprnn.exceptions import ConfigError, MgpRnnError, exit_code_for
from mgprnn.metrics import ThresholdScoreTable, horizon_sweep, threshold_scorer, write_sweep_csv
from mgprnn.synthetic import generate_cohort
from mgprnn.training import fit, make_scorer, risk_score_trajectory

__all__ = ["main", "build_parser"]

logger = logging.getLogger(__name__)

TARGET_SENSITIVITY = 0.85


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.synthetic.seed = args.seed
    if args.threads is not None:
        cfg.train.threads = args.threads
    if args.variant is not None:
        cfg.train.model_variant = args.variant
    if args.horizons is not None:
        cfg.horizons = parse_horizons(args.horizons)
    if args.out is not None:
        cfg.paths.output_dir = args.out
    cfg.validate()
    return cfg


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    return out


def cmd_simulate(cfg: RunConfig) -> int:
    out = _output_dir(cfg)
    cohort = generate_cohort(cfg.synthetic)
    cohort_path = cfg.paths.resolve("cohort")
    save_cohort(cohort.records, cohort_path)
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(cohort.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    summary = {
        "cohort": str(cohort_path),
        "num_encounters": len(cohort.records),
        "prevalence": cohort.prevalence,
        "observation_counts": cohort.manifest["observation_counts"],
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def _load_training_cohort(cfg: RunConfig):
    return load_cohort(cfg.paths.resolve("cohort"), log_transform=cfg.train.log_transform)


def cmd_train(cfg: RunConfig) -> int:
    out = _output_dir(cfg)
    cohort = _load_training_cohort(cfg)
    result = fit(
        cohort.split("train"),
        cohort.split("valid"),
        cfg.train,
        stats=cohort.stats,
        num_vars=cohort.num_vars,
        num_meds=cohort.num_meds,
    )
    save_checkpoint(result.model, cfg.paths.resolve("checkpoint"))
    log_path = out / "training_log.jsonl"
    log_path.write_text("".join(record.to_json() + "\n" for record in result.log), encoding="utf-8")
    logger.info("best epoch %d of %d", result.best_epoch, len(result.log))
    return 0


def _test_records(cfg: RunConfig, model):
    cohort = load_cohort(cfg.paths.resolve("cohort"), num_meds=model.num_meds, stats=model.stats)
    records = cohort.split("test")
    if not records:
        raise ConfigError("the cohort has no test-split encounters")
    return records


def cmd_evaluate(cfg: RunConfig) -> int:
    out = _output_dir(cfg)
    model = load_checkpoint(cfg.paths.resolve("checkpoint"))
    records = _test_records(cfg, model)
    sweep = horizon_sweep(
        records,
        make_scorer(model, cfg.train),
        cfg.horizons,
        target_sens=TARGET_SENSITIVITY,
        threads=cfg.train.threads,
    )
    write_sweep_csv(sweep, out / "horizon_sweep.csv", TARGET_SENSITIVITY)
    if cfg.score_table is not None:
        table = ThresholdScoreTable.from_dict(cfg.score_table)
        baseline = horizon_sweep(
            records, threshold_scorer(table), cfg.horizons, target_sens=TARGET_SENSITIVITY, threads=cfg.train.threads
        )
        write_sweep_csv(baseline, out / "threshold_sweep.csv", TARGET_SENSITIVITY)
    for row in sweep.itertuples(index=False):
        logger.info(
            "horizon %gh: n=%d auroc=%s aupr=%s",
            row.horizon_hours,
            row.n_encounters,
            row.auroc,
            row.aupr,
        )
    return 0


def cmd_score(cfg: RunConfig) -> int:
    out = _output_dir(cfg)
    model = load_checkpoint(cfg.paths.resolve("checkpoint"))
    rows = []
    for enc in sorted(_test_records(cfg, model), key=lambda e: e.id):
        for hour, score in risk_score_trajectory(enc, model, cfg.train):
            rows.append({"id": enc.id, "hour": hour, "risk_score": score, "label": enc.label})
    pd.DataFrame(rows, columns=["id", "hour", "risk_score", "label"]).to_csv(out / "scores.csv", index=False)
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    out = _output_dir(cfg)
    rows = run_bench(cfg.bench, seed=cfg.train.seed)
    (out / "bench.json").write_text(
        json.dumps([row.to_dict() for row in rows], indent=2) + "\n", encoding="utf-8"
    )
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "score": cmd_score,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgprnn", description="MGP-RNN early-warning classifier")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, type=Path, help="JSON run configuration")
        cmd.add_argument("--seed", type=int, help="overrides train.seed and synthetic.seed")
        cmd.add_argument("--threads", type=int, help="worker threads")
        cmd.add_argument("--variant", choices=VARIANTS, help="model variant")
        cmd.add_argument("--horizons", help='prediction horizons, e.g. "0..12" or "0,6,12"')
        cmd.add_argument("--out", help="output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_run_config(args.config), args)
        return COMMANDS[args.command](cfg)
    except MgpRnnError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
