"""Command-line entry point: ``nfsubspace <command> [--config FILE] [options]``.

Exit status is 0 on success, 1 when a stage fails and 2 for invalid
configuration. Failures leave ``error_manifest.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import torch

from . import harness, plotting
from .array_signal import ConfigError
from .localizers import write_metrics_csv

logger = logging.getLogger("nfsubspace")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="experiment JSON (defaults are used if omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", type=Path, default=Path("report"), help="output directory")
    p.add_argument("--checkpoint", type=Path,
                   help="checkpoint directory (default: <out-dir>/checkpoints)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nfsubspace",
                                     description="Near-field subspace localization experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", help="generate and store datasets")
    _common(p)
    p = sub.add_parser("train", help="train a learned method")
    _common(p)
    p.add_argument("--method", required=True, choices=harness.LEARNED)
    p = sub.add_parser("evaluate", help="run the configured sweep and write the report")
    _common(p)
    p = sub.add_parser("spectrum", help="dump spectra of one test sample")
    _common(p)
    p.add_argument("--index", type=int, default=0, help="test sample index")
    p = sub.add_parser("beampattern", help="Bartlett and MVDR maps of one test sample")
    _common(p)
    p.add_argument("--index", type=int, default=0, help="test sample index")
    p = sub.add_parser("complexity", help="symbolic cost table and inference timing")
    _common(p)
    p.add_argument("--no-timing", action="store_true", help="skip wall-clock measurement")
    sub.add_parser("schema", help="print the experiment config JSON schema")
    return parser


def _test_sample(cfg: harness.ExperimentConfig, index: int):
    dcfg = cfg.dataset_config("test", cfg.sweep_values[0])
    if not 0 <= index < dcfg.num_samples:
        raise ConfigError(f"sample index {index} outside the test set of {dcfg.num_samples}")
    dcfg.num_samples = index + 1
    return harness.generate_dataset(dcfg, harness.test_seed(cfg, 0)).samples[index]


def _checkpoints(args, out: Path) -> Path:
    return args.checkpoint if args.checkpoint is not None else out / "checkpoints"


def run(args) -> harness.Report:
    cfg = harness.ExperimentConfig.load(args.config).with_seed(args.seed)
    out: Path = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "simulate":
        return harness.simulate(cfg, out)
    if args.command == "evaluate":
        return harness.run_experiment(cfg, out, _checkpoints(args, out), "evaluate")
    if args.command == "complexity":
        return harness.complexity_report(cfg, out, measure=not args.no_timing)
    report = harness.Report(out)
    if args.command == "train":
        result, trained = harness.train_or_load(cfg, args.method, None, _checkpoints(args, out))
        logger.info("%s %s", args.method, "trained" if trained else "loaded from checkpoint")
        if result.trace:
            p = write_metrics_csv(result.trace, out / f"training_{args.method}.csv")
            report.artifacts += [p.name, plotting.plot_training(
                result.trace, p.with_suffix(".png"), harness._tag(cfg)).name]
    elif args.command == "spectrum":
        x, scene = _test_sample(cfg, args.index)
        trained = {}
        for spec in cfg.methods:
            if spec["name"] in harness.LEARNED:
                trained[spec["name"]] = harness.load_trained(cfg, spec["name"],
                                                             _checkpoints(args, out))
        report.artifacts += [str(p.relative_to(out)) for p in
                             harness.dump_spectra(cfg, trained, x, scene, out / "spectra")]
    elif args.command == "beampattern":
        x, scene = _test_sample(cfg, args.index)
        report.artifacts += [str(p.relative_to(out)) for p in
                             harness.dump_beampatterns(cfg, x, scene, out / "beampattern")]
    harness.write_manifest(report, cfg, args.command)
    return report


def _fail(out_dir: Path | None, command: str, exc: BaseException) -> None:
    print(f"error: {exc}", file=sys.stderr)
    if out_dir is None:
        return
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "error_manifest.json").write_text(json.dumps(
            {"command": command, "status": "failed",
             "errors": [{"stage": command, "type": type(exc).__name__, "message": str(exc),
                         "traceback": traceback.format_exc()}]}, indent=2))
    except OSError:
        pass


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(harness.CONFIG_SCHEMA, indent=2))
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)  # fixed reduction order for reproducible output
    try:
        report = run(args)
    except ConfigError as exc:
        _fail(args.out_dir, args.command, exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        _fail(args.out_dir, args.command, exc)
        return 1
    if not report.ok:
        for err in report.errors:
            print(f"error in {err['stage']}: {err['message']}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
