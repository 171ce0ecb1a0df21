"""
Command line interface of the audit toolkit.

Verbs:
    validate: Check a config and list its grid cells.
    audit: Run every enabled stage of every grid cell.
    intrinsic, probe, extrinsic: Run a single metric stage.
    report: Re-render structured report documents.

Exit codes: 0 on success, 2 on a validation failure, 3 when a stage fails.
"""

import argparse
import logging
import logging.config
import sys
from pathlib import Path

from decouple import config
from pydantic import ValidationError

import database
from audit import ArtifactCache, load_config, run_grid, validate_config
from exceptions import VALIDATION_EXIT_CODE, AuditError
from report import FORMATS, emit_comparison, emit_report, load_report

LOGGING_CONFIG = config("LOGGING_CONFIG", default=str(Path(__file__).resolve().parent.parent / "logging.ini"))

STAGE_VERBS = {
    "intrinsic": {"seat": True, "attribute_lpbs": True, "target_lpbs": True, "probe": False, "extrinsic": False},
    "probe": {"seat": False, "attribute_lpbs": False, "target_lpbs": False, "probe": True, "extrinsic": False},
    "extrinsic": {"seat": False, "attribute_lpbs": False, "target_lpbs": False, "probe": False, "extrinsic": True},
}

logger = logging.getLogger(__name__)


def configure_logging(path: str = LOGGING_CONFIG) -> None:
    if Path(path).is_file():
        logging.config.fileConfig(path, disable_existing_loggers=False)
    else:
        logging.basicConfig(level=logging.INFO, format="%(levelname)-5.5s [%(name)s] %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bias-audit", description="Gender bias audits of masked language models.")
    commands = parser.add_subparsers(dest="command", required=True)

    for verb, description in (
        ("validate", "check a config without running it"),
        ("audit", "run every enabled stage"),
        ("intrinsic", "run SEAT and the LPBS variants only"),
        ("probe", "run the gender information probe only"),
        ("extrinsic", "run the downstream evaluation only"),
    ):
        command = commands.add_parser(verb, help=description)
        command.add_argument("--config", required=True, type=Path, help="audit config (JSON)")
        command.add_argument("--out", type=Path, help="output directory; overrides the config")
        command.add_argument("--seed", type=int, help="root seed; overrides the config")
        command.add_argument("--jobs", type=int, default=1, help="grid cells run in parallel")
        command.add_argument("--cache-dir", type=Path, help="artifact cache and registry location")
        command.add_argument("--formats", nargs="+", choices=FORMATS, help="report formats; overrides the config")
        command.add_argument("--progress", action="store_true", help="show progress bars")

    command = commands.add_parser("report", help="re-render structured report documents")
    command.add_argument("reports", nargs="+", type=Path, help="report.json files")
    command.add_argument("--out", type=Path, required=True, help="output directory")
    command.add_argument("--formats", nargs="+", choices=FORMATS, default=["tabular", "plots"])
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.formats:
        overrides["formats"] = args.formats
    if args.command in STAGE_VERBS:
        overrides["metrics"] = STAGE_VERBS[args.command]
    return overrides


def use_cache_dir(cache_dir) -> ArtifactCache:
    """Points the registry database and the artifact files at ``cache_dir``."""
    if cache_dir is None:
        return ArtifactCache()
    database.configure_database(f"sqlite:///{Path(cache_dir).resolve() / database.REGISTRY_FILE}")
    return ArtifactCache(cache_dir)


def command_validate(args: argparse.Namespace) -> int:
    cells = validate_config(args.config, _overrides(args))
    for cell in cells:
        print(f"{cell.mitigations[0]}/{cell.intervention} -> {cell.output_dir}")
    return 0


def command_run(args: argparse.Namespace) -> int:
    try:
        audit_config = load_config(args.config, _overrides(args))
    except ValidationError as e:
        logger.error("Invalid config %s:\n%s", args.config, e)
        return VALIDATION_EXIT_CODE
    cache = use_cache_dir(args.cache_dir)
    reports = run_grid(audit_config, jobs=args.jobs, cache=cache, progress=args.progress)
    if audit_config.is_grid:
        emit_comparison(reports, audit_config.output_dir)
    failed = [report for report in reports if report.failed]
    for report in failed:
        for failure in report.failures:
            logger.error("%s: stage %s failed with %s: %s", report.provenance.cell, failure.stage,
                         failure.error, failure.detail)
    if failed:
        return max(f.exit_code for report in failed for f in report.failures)
    return 0


def command_report(args: argparse.Namespace) -> int:
    reports = [load_report(path) for path in args.reports]
    if len(reports) == 1:
        emit_report(reports[0], args.formats, args.out)
    else:
        emit_comparison(reports, args.out)
    return 0


COMMANDS = {
    "validate": command_validate,
    "audit": command_run,
    "intrinsic": command_run,
    "probe": command_run,
    "extrinsic": command_run,
    "report": command_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        return COMMANDS[args.command](args)
    except AuditError as e:
        logger.error("%s: %s", type(e).__name__, e.detail)
        return e.exit_code
    except ValidationError as e:
        logger.error("Invalid input:\n%s", e)
        return VALIDATION_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
