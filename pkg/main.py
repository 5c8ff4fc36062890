"""
Federated sCT Simulator - Main Application

Batch CLI for phantom-scale federated MRI-to-CT experiments:

    gen-data            Generate phantom cohorts for every configured centre
    preprocess          Run the preprocessing pipeline over generated cohorts
    train               Run one federated experiment and write its logs and checkpoint
    evaluate            Score a checkpoint on one centre
    compare-strategies  Repeat each aggregation strategy and tabulate best round / best MAE
    compare-paradigms   Compare the four 2D training paradigms on the unseen centre
    status              Print configuration diagnostics and stored runs
    init-config         Write the desk-scale experiment preset as JSON

Usage:
    python3 main.py init-config --out experiment.json
    python3 main.py train --config experiment.json --rounds 3
    python3 main.py evaluate --checkpoint runs/default/checkpoint.fsct --centre E

Exit codes: 0 success, 2 configuration error or missing files, 3 runtime failure.
"""

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

import config
import metrics
import storage
import utils
from federation import (
    FederatedDataset,
    RoundRecord,
    build_federated_dataset,
    compare_paradigms,
    compare_strategies,
    evaluate_patients,
    models_for_evaluation,
    prepare_cohort,
    run_experiment,
    split_tracks,
    track_names,
)
from phantom import generate_centre
from preprocess import preprocess_pair
from schemas import (
    ExperimentConfig,
    desk_experiment_config,
    dump_experiment_config,
    load_experiment_config,
)

logger = utils.logger

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

CONFIG_NAME = "experiment.json"
CHECKPOINT_NAME = "checkpoint.fsct"
ROUNDS_NAME = "rounds.csv"
SUMMARY_NAME = "summary.json"


class ConfigurationError(Exception):
    """Bad CLI input that is not a schema error (missing directory, unknown centre)."""


# ============================================================================
# Helpers
# ============================================================================


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config from ``--config`` (desk preset when omitted) with CLI overrides applied."""
    path = getattr(args, "config", None)
    if path:
        cfg = load_experiment_config(Path(path))
    else:
        logger.info("No --config given; using the desk-scale preset")
        cfg = desk_experiment_config()
    updates = {}
    rounds = getattr(args, "rounds", None)
    if rounds is not None:
        updates["rounds"] = rounds
    if updates:
        # Re-validate so overrides obey the same constraints as the file.
        payload = cfg.model_dump(mode="json")
        payload["federation"].update(updates)
        cfg = ExperimentConfig.model_validate(payload)
    return cfg


def _output_dir(cfg: ExperimentConfig) -> Path:
    out = config.resolve_output_dir(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_prepared(root: Path, cfg: ExperimentConfig) -> Dict[str, storage.CohortTuple]:
    if not root.is_dir():
        raise ConfigurationError(f"data directory not found: {root}")
    found = storage.list_cohorts(root, "prepared")
    cohorts = {}
    for spec in list(cfg.centres) + [cfg.unseen]:
        if spec.centre_id not in found:
            raise ConfigurationError(f"no prepared cohort for centre {spec.centre_id} under {root}")
        centre_id, cohort = storage.load_prepared_cohort(found[spec.centre_id])
        cohorts[centre_id] = cohort
    return cohorts


def _dataset(args: argparse.Namespace, cfg: ExperimentConfig) -> FederatedDataset:
    data = getattr(args, "data", None)
    cohorts = _load_prepared(Path(data), cfg) if data else None
    return build_federated_dataset(cfg, cohorts)


def _summary_cells(cohort) -> List[str]:
    summary = metrics.summarize(cohort)
    return [
        f"{summary['mae'].median:.1f} ({summary['mae'].q1:.1f}-{summary['mae'].q3:.1f})",
        f"{summary['ssim'].median:.3f}",
        f"{summary['psnr'].median:.2f}",
    ]


def _mean_std(mean: float, std: float, digits: int = 1) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


# ============================================================================
# Data Commands
# ============================================================================


def mode_gen_data(args: argparse.Namespace) -> Tuple[bool, str]:
    """Generate every centre's phantom cohort and store it as raw volumes."""
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for spec in list(cfg.centres) + [cfg.unseen]:
        storage.save_raw_cohort(out / spec.centre_id, generate_centre(spec, cfg.seed))
    dump_experiment_config(cfg, out / CONFIG_NAME)
    return True, f"Generated {len(cfg.centres) + 1} centres in {out}"


def mode_preprocess(args: argparse.Namespace) -> Tuple[bool, str]:
    """Preprocess every raw cohort under ``--in`` into ``--out``."""
    source = Path(args.input)
    if not source.is_dir():
        raise ConfigurationError(f"input directory not found: {source}")
    cfg_path = Path(args.config) if args.config else source / CONFIG_NAME
    cfg = load_experiment_config(cfg_path)
    cohorts = storage.list_cohorts(source, "raw")
    if not cohorts:
        raise ConfigurationError(f"no raw cohorts under {source}")

    out = Path(args.out)
    for centre_id, directory in cohorts.items():
        manifest, pairs = storage.load_raw_cohort(directory)
        prepared = [preprocess_pair(mri, ct, mask, cfg.preprocess, patient_id=pid) for pid, mri, ct, mask in pairs]
        storage.save_prepared_cohort(out / centre_id, centre_id, prepared, manifest.train, manifest.val, manifest.test)
    dump_experiment_config(cfg, out / CONFIG_NAME)
    return True, f"Preprocessed {len(cohorts)} centres into {out}"


# ============================================================================
# Training and Evaluation
# ============================================================================


def mode_train(args: argparse.Namespace) -> Tuple[bool, str]:
    """Run one experiment; write the config copy, round log, summary and checkpoint."""
    cfg = _load_config(args)
    out = _output_dir(cfg)
    dump_experiment_config(cfg, out / CONFIG_NAME)
    dataset = _dataset(args, cfg)

    records: List[RoundRecord] = []

    def on_round(record: RoundRecord) -> None:
        records.append(record)
        storage.write_rounds_csv(out / ROUNDS_NAME, records)

    result = run_experiment(cfg, dataset, on_round=on_round)
    storage.write_summary(out / SUMMARY_NAME, result)
    last = result.records[-1].round_index
    storage.save_checkpoint(out / CHECKPOINT_NAME, cfg, result.global_parameters(), last, rng_cursor=last + 1)

    final = result.records[-1]
    cohorts = list(final.validation.items()) + [(final.unseen_centre_id, final.unseen)]
    rows = [[centre_id] + _summary_cells(cohort) for centre_id, cohort in cohorts]
    utils.ui_print(format_round_table(rows))
    return True, f"Best round {result.best_round} (unseen MAE {result.best_mae:.1f} HU); outputs in {out}"


def format_round_table(rows: Sequence[Sequence[str]]) -> str:
    return utils.format_table_to_markdown(rows, ["Centre", "MAE HU (IQR)", "SSIM", "PSNR dB"])


def mode_evaluate(args: argparse.Namespace) -> Tuple[bool, str]:
    """Score a checkpoint's global model on one centre."""
    checkpoint = storage.load_checkpoint(Path(args.checkpoint))
    cfg = checkpoint.config
    centre_id = args.centre or cfg.unseen.centre_id
    specs = {s.centre_id: s for s in list(cfg.centres) + [cfg.unseen]}
    if centre_id not in specs:
        raise ConfigurationError(f"unknown centre {centre_id!r}; config has {sorted(specs)}")

    if args.data:
        patients, _train, val, test = _load_prepared(Path(args.data), cfg)[centre_id]
    else:
        patients, _train, val, test = prepare_cohort(specs[centre_id], cfg)
    if centre_id != cfg.unseen.centre_id:
        patients = [patients[i] for i in (val if args.split == "val" else test)]

    models = models_for_evaluation(cfg, split_tracks(checkpoint.params, track_names(cfg.paradigm)))
    cohort = evaluate_patients(models, patients, cfg)

    rows = [[m.patient_id, f"{m.mae:.1f}", f"{m.ssim:.3f}", f"{m.psnr:.2f}"] for m in cohort]
    utils.ui_print(utils.format_table_to_markdown(rows, ["Patient", "MAE HU", "SSIM", "PSNR dB"]))
    summary = metrics.summarize(cohort)
    if args.json:
        payload = {
            "centre_id": centre_id,
            "round_index": checkpoint.round_index,
            "patients": [dataclasses.asdict(m) for m in cohort],
            "summary": {k: v.to_dict() for k, v in summary.items()},
        }
        text = json.dumps(storage.json_safe(payload), indent=2, sort_keys=True) + "\n"
        utils.atomic_write_text(Path(args.json), text)
    return True, (
        f"Centre {centre_id} (round {checkpoint.round_index}): median MAE {summary['mae'].median:.1f} HU, "
        f"SSIM {summary['ssim'].median:.3f}, PSNR {summary['psnr'].median:.2f} dB"
    )


# ============================================================================
# Comparisons
# ============================================================================


def mode_compare_strategies(args: argparse.Namespace) -> Tuple[bool, str]:
    """Best round and best unseen MAE per strategy, mean ± std over repeats."""
    cfg = _load_config(args)
    out = _output_dir(cfg)
    rows = compare_strategies(cfg, repeats=args.repeats, local_epochs=args.local_epochs, dataset=_dataset(args, cfg))

    table = [
        [r["strategy"], _mean_std(r["round_mean"], r["round_std"]), _mean_std(r["mae_mean"], r["mae_std"])]
        for r in rows
    ]
    utils.ui_print(utils.format_table_to_markdown(table, ["Strategy", "Round", "MAE (HU)"]))

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["strategy", "repeat", "best_round", "best_mae"])
    for r in rows:
        for repeat, (best_round, best_mae) in enumerate(zip(r["best_rounds"], r["best_maes"])):
            writer.writerow([r["strategy"], repeat, best_round, repr(float(best_mae))])
    utils.atomic_write_text(out / "strategies.csv", buffer.getvalue(), newline="")
    utils.atomic_write_text(out / "strategies.json", json.dumps(storage.json_safe(rows), indent=2) + "\n")
    return True, f"Compared {len(rows)} strategies x {args.repeats} repeats; results in {out}"


def mode_compare_paradigms(args: argparse.Namespace) -> Tuple[bool, str]:
    """Unseen-centre metrics per training paradigm under one budget."""
    cfg = _load_config(args)
    out = _output_dir(cfg)
    rows, wins = compare_paradigms(cfg, repeats=args.repeats, dataset=_dataset(args, cfg))

    table = [[r["paradigm"], f"{r['mae']:.1f}", f"{r['ssim']:.3f}", f"{r['psnr']:.2f}"] for r in rows]
    utils.ui_print(utils.format_table_to_markdown(table, ["Paradigm", "MAE (HU)", "SSIM", "PSNR (dB)"]))
    payload = {"paradigms": rows, "random_multi_2d_wins": wins, "repeats": args.repeats}
    utils.atomic_write_text(out / "paradigms.json", json.dumps(storage.json_safe(payload), indent=2) + "\n")
    return True, f"Random Multi-2D matched or beat Multi-2D in {wins}/{args.repeats} repeats"


# ============================================================================
# Status
# ============================================================================


def mode_status(args: argparse.Namespace) -> Tuple[bool, str]:
    """Display runtime settings and stored runs (read-only)."""
    out = utils.ui_print
    out("\n" + "=" * 60)
    out(f"  FEDERATED sCT SIMULATOR v{config.VERSION} - STATUS")
    out("=" * 60 + "\n")

    out("Configuration:")
    out(f"  * Log level: {config.LOG_LEVEL}")
    out(f"  * Processing log file: {'Enabled' if config.SAVE_PROCESSING_LOGS else 'Disabled'}")
    out(f"  * Client workers: {config.MAX_CLIENT_WORKERS}")
    out(f"  * Prediction batch size: {config.PREDICT_BATCH_SIZE}")
    out(f"  * Output override: {config.OUTPUT_DIR_OVERRIDE or 'not set'}")
    out(f"  * Runs directory: {config.RUNS_DIR}")
    out()

    issues = config.validate_configuration()
    out("Diagnostics:")
    for issue in issues or ["  All settings valid"]:
        out(f"  {issue}")
    out()

    runs = sorted(config.RUNS_DIR.glob(f"*/{SUMMARY_NAME}")) if config.RUNS_DIR.is_dir() else []
    out(f"Stored runs: {len(runs)}")
    for path in runs:
        try:
            summary = json.loads(path.read_text(encoding="utf-8"))
            out(
                f"  * {path.parent.name}: {summary.get('strategy')} / {summary.get('paradigm')}, "
                f"best round {summary.get('best_round')}, unseen MAE {summary.get('best_unseen_mae')}"
            )
        except (OSError, ValueError) as e:
            out(f"  * {path.parent.name}: unreadable summary ({e})")
    out("\n" + "=" * 60 + "\n")
    return True, "Status displayed"


def mode_init_config(args: argparse.Namespace) -> Tuple[bool, str]:
    """Write the desk preset so it can be edited and passed back with ``--config``."""
    cfg = desk_experiment_config(seed=args.seed, rounds=args.rounds, shape=args.shape)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    dump_experiment_config(cfg, path)
    return True, f"Wrote desk preset to {path}"


_MODE_DISPATCH: Dict[str, Callable[[argparse.Namespace], Tuple[bool, str]]] = {
    "gen-data": mode_gen_data,
    "preprocess": mode_preprocess,
    "train": mode_train,
    "evaluate": mode_evaluate,
    "compare-strategies": mode_compare_strategies,
    "compare-paradigms": mode_compare_paradigms,
    "status": mode_status,
    "init-config": mode_init_config,
}


# ============================================================================
# Entry Point
# ============================================================================


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsynth",
        description=f"Federated sCT Simulator v{config.VERSION}",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  fedsynth init-config --out experiment.json
  fedsynth gen-data --config experiment.json --out data/raw
  fedsynth preprocess --in data/raw --out data/prepared
  fedsynth train --config experiment.json --data data/prepared --rounds 3
  fedsynth evaluate --checkpoint runs/default/checkpoint.fsct --centre E
  fedsynth compare-strategies --config experiment.json --repeats 5
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser, required: bool = False) -> argparse.ArgumentParser:
        p.add_argument("--config", required=required, help="Experiment JSON file (desk preset when omitted)")
        return p

    def with_data(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--data", default=None, help="Prepared cohorts from `preprocess` (regenerated when omitted)")
        return p

    def with_rounds(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--rounds", type=_non_negative_int, default=None, help="Override federation.rounds")
        return p

    p = with_config(sub.add_parser("gen-data", help="Generate phantom cohorts"))
    p.add_argument("--out", required=True, help="Directory receiving one sub-directory per centre")

    p = sub.add_parser("preprocess", help="Preprocess generated cohorts")
    p.add_argument("--in", dest="input", required=True, help="Output directory of gen-data")
    p.add_argument("--out", required=True, help="Directory for prepared cohorts")
    p.add_argument("--config", default=None, help="Experiment JSON (defaults to the copy written by gen-data)")

    with_rounds(with_data(with_config(sub.add_parser("train", help="Run one federated experiment"))))

    p = with_data(sub.add_parser("evaluate", help="Evaluate a checkpoint on one centre"))
    p.add_argument("--checkpoint", required=True, help="Checkpoint written by train")
    p.add_argument("--centre", default=None, help="Centre id (unseen centre when omitted)")
    p.add_argument("--split", choices=["val", "test"], default="val", help="Patients scored for a training centre")
    p.add_argument("--json", default=None, help="Also write per-patient metrics to this JSON file")

    p = with_rounds(with_data(with_config(sub.add_parser("compare-strategies", help="Aggregation strategy study"))))
    p.add_argument("--repeats", type=_positive_int, default=5, help="Repeats per strategy (default 5)")
    p.add_argument("--local-epochs", type=_positive_int, default=None, help="Override federation.local_epochs")

    p = with_rounds(with_data(with_config(sub.add_parser("compare-paradigms", help="Training paradigm study"))))
    p.add_argument("--repeats", type=_positive_int, default=5, help="Repeats per paradigm (default 5)")

    sub.add_parser("status", help="Show configuration diagnostics")

    p = sub.add_parser("init-config", help="Write the desk preset experiment file")
    p.add_argument("--out", required=True, help="Destination JSON file")
    p.add_argument("--seed", type=_non_negative_int, default=0)
    p.add_argument("--rounds", type=_non_negative_int, default=10)
    p.add_argument("--shape", type=_positive_int, default=64, help="Phantom extent per axis")
    return parser


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {raw}")
    return value


def _non_negative_int(raw: str) -> int:
    value = int(raw)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {raw}")
    return value


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)

    issues = config.initialize()
    for issue in issues:
        logger.debug(issue)

    if config.SAVE_PROCESSING_LOGS:
        utils.setup_logging(log_file=str(config.LOGS_DIR / "processing.log"))

    handler = _MODE_DISPATCH[args.command]
    start_time = time.time()
    try:
        success, message = handler(args)
    except ValidationError as e:
        utils.ui_print(f"Invalid configuration ({e.error_count()} errors):")
        for error in e.errors():
            location = ".".join(str(part) for part in error["loc"]) or "<root>"
            utils.ui_print(f"  {location}: {error['msg']}")
        return EXIT_CONFIG
    except (ConfigurationError, FileNotFoundError, json.JSONDecodeError, storage.VolumeFormatError) as e:
        utils.ui_print(f"Error: {e}")
        return EXIT_CONFIG
    except storage.CheckpointError as e:
        utils.ui_print(f"Checkpoint error: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error("%s failed: %s", args.command, e, exc_info=logger.isEnabledFor(logging.DEBUG))
        utils.ui_print(f"Error: {e}")
        return EXIT_RUNTIME

    utils.ui_print(f"\n{message}")
    logger.info("%s finished in %.2f seconds", args.command, time.time() - start_time)
    return EXIT_OK if success else EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
