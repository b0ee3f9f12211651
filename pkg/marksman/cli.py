"""Command-line entry point: ``marksman train|eval|defend|sweep|transfer|report``."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from colorama import Fore, Style
from colorama import init as colorama_init

from . import __version__
from .config import ExperimentConfig, parse_config
from .exceptions import ConfigurationError, MarksmanError, StageError
from .experiment import ExperimentRunner
from .models import RunManifest
from .reports import emit_report
from .utils import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_FAILED = 1
EXIT_BAD_CONFIG = 2

STAGES_BY_COMMAND = {
    "train": ("train", "evaluate", "defend"),
    "eval": ("evaluate",),
    "defend": ("defend",),
}


def _error(stage: str, message: str):
    print(f"{Fore.RED}[{stage}] error:{Style.RESET_ALL} {message}", file=sys.stderr)


def _ok(message: str):
    print(f"{Fore.GREEN}{message}{Style.RESET_ALL}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marksman",
        description="Train, evaluate and defend arbitrary-target backdoor attacks.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-c", "--config", type=Path, help="YAML experiment configuration"
    )
    common.add_argument(
        "--dataset", help="dataset name when the config does not give one"
    )
    common.add_argument("--method", choices=["marksman", "patchmt", "benign"])
    common.add_argument("--output-dir", type=Path, help="experiment directory")
    common.add_argument("--seeds", type=int, nargs="+", help="seed list")
    common.add_argument("--device", help="auto, cpu or cuda[:n]")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key, e.g. --set train.alpha=0.5 (repeatable)",
    )
    common.add_argument(
        "--no-resume",
        action="store_true",
        help="ignore existing checkpoints and manifest",
    )
    common.add_argument("--no-progress", action="store_true", help="hide progress bars")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser(
        "train",
        parents=[common],
        help="train, evaluate and (if enabled) defend every seed",
    )
    sub.add_parser("eval", parents=[common], help="evaluate trained checkpoints")
    sub.add_parser(
        "defend", parents=[common], help="run the defense suite on trained checkpoints"
    )
    sub.add_parser(
        "sweep", parents=[common], help="poisoning-rate and alpha/beta sweeps"
    )
    sub.add_parser(
        "transfer",
        parents=[common],
        help="retrain other classifiers against frozen generators",
    )

    report = sub.add_parser(
        "report", help="tables, plots and image grids from an experiment directory"
    )
    report.add_argument(
        "manifest_dir", type=Path, help="directory holding manifest.json"
    )
    report.add_argument(
        "--output-dir",
        type=Path,
        help="report directory (default <manifest_dir>/report)",
    )
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file, then ``--set`` overrides, then the dedicated flags."""
    overrides: List[str] = list(args.overrides)
    if args.method:
        overrides.append(f"method={args.method}")
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if args.seeds:
        overrides.append(f"seeds=[{', '.join(str(s) for s in args.seeds)}]")
    if args.device:
        overrides.append(f"device={args.device}")
    return parse_config(args.config, dataset=args.dataset, overrides=overrides)


def _report_failures(manifest: RunManifest) -> int:
    for failure in manifest.failures:
        _error(failure.stage, f"{failure.run or 'experiment'}: {failure.message}")
    return EXIT_STAGE_FAILED if manifest.failures else EXIT_OK


def run_command(args: argparse.Namespace) -> int:
    if args.command == "report":
        bundle = emit_report(args.manifest_dir, args.output_dir)
        _ok(f"Report written to {bundle.directory} ({len(bundle.sections)} sections)")
        for name in bundle.absent:
            print(f"  absent: {name}")
        return EXIT_OK

    config = load_config(args)
    logging_config = config.logging.to_dict()
    if not logging_config.get("file"):
        logging_config["file"] = str(Path(config.output_dir) / "run.log")
    setup_logging({"logging": logging_config})

    with ExperimentRunner(
        config, resume=not args.no_resume, show_progress=not args.no_progress
    ) as runner:
        if args.command in STAGES_BY_COMMAND:
            manifest = runner.run(STAGES_BY_COMMAND[args.command])
        elif args.command == "sweep":
            runner.sweep()
            manifest = runner.manifest
        else:
            runner.transfer()
            manifest = runner.manifest

    status = _report_failures(manifest)
    if status == EXIT_OK:
        _ok(f"{args.command} finished; manifest at {runner.manifest_path}")
    return status


def main(argv: Optional[Sequence[str]] = None) -> int:
    colorama_init()
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except ConfigurationError as e:
        _error("config", str(e))
        return EXIT_BAD_CONFIG
    except StageError as e:
        _error(e.stage, str(e))
        return EXIT_STAGE_FAILED
    except MarksmanError as e:
        _error(args.command, str(e))
        return EXIT_STAGE_FAILED


if __name__ == "__main__":
    sys.exit(main())
