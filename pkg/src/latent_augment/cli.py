"""Command line entry point.

    latent-augment pipeline --config cfg.json --out runs/a/
    latent-augment stage encode --config cfg.json --in runs/a --out runs/a
    latent-augment stage sweep --config cfg.json --in runs/a --out runs/a --ratios 0,0.1,0.2,0.4,0.8
    latent-augment --print-default-config

Exit codes: 0 success, 2 config error, 3 artifact validation error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ExperimentConfig
from .errors import ArtifactError, ConfigError, FormatError, NumericError
from .pipeline import DEFAULT_RATIOS, STAGES, cmd_pipeline, cmd_stage

log = logging.getLogger("latent_augment")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4


def _ratios(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad ratio list {text!r}") from exc
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("ratios must be a non-empty list of non-negative numbers")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-augment", description=__doc__.split("\n\n")[0])
    parser.add_argument("--print-default-config", action="store_true", help="print the default config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="JSON config (defaults are used for omitted keys)")
        p.add_argument("--seed", type=int, help="override the config's global seed")

    p = sub.add_parser("pipeline", help="run every stage and evaluate baseline vs. augmented")
    common(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("stage", help="run a single stage")
    p.add_argument("name", choices=STAGES)
    common(p)
    p.add_argument("--in", dest="in_dir", required=True, help="directory holding upstream artifacts")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ratios", type=_ratios, default=list(DEFAULT_RATIOS), help="comma list for the sweep stage")
    p.add_argument("--test", help="eval stage: alternative LDMF test file")

    sub.add_parser("print-default-config", help="print the default config")
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.print_default_config or args.command == "print-default-config":
        sys.stdout.write(ExperimentConfig().dumps())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        cfg = _load_config(args)
        if args.command == "pipeline":
            manifest = cmd_pipeline(cfg, args.out)
        else:
            options = {}
            if args.name == "sweep":
                options["ratios"] = args.ratios
            if args.name == "eval" and args.test:
                options["test_path"] = args.test
            manifest = cmd_stage(args.name, cfg, args.in_dir, args.out, **options)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (ArtifactError, FormatError) as exc:
        log.error("artifact error: %s", exc)
        return EXIT_ARTIFACT
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    json.dump({"status": manifest.status, "artifacts": sorted(manifest.artifacts)}, sys.stdout)
    sys.stdout.write("\n")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
