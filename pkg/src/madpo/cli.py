"""Command-line surface: generate, run, sweep, verify, report.

Configuration comes from (lowest to highest precedence) built-in
defaults, a JSON config file, MADPO_* environment variables, and CLI
flags. Exit codes: 0 success, 1 check or run failure, 2 config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment, verify
from .experiment import ConfigError, ExperimentConfig

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    parser.add_argument("--out", dest="out_dir", default=None, help="output directory")
    parser.add_argument("--seeds", default=None, help="comma-separated run seeds")
    parser.add_argument("--methods", default=None, help="comma-separated methods")
    parser.add_argument("--tiers", default=None, help="comma-separated tiers")
    parser.add_argument("--parallel", type=int, default=1, help="worker processes for grid cells")


def _split_list(raw, cast=str):
    if raw is None:
        return None
    return tuple(cast(part.strip()) for part in str(raw).split(",") if part.strip())


def _load_config(args) -> ExperimentConfig:
    overrides = {
        "out_dir": args.out_dir,
        "seeds": _split_list(getattr(args, "seeds", None), int),
        "methods": _split_list(getattr(args, "methods", None)),
        "tiers": _split_list(getattr(args, "tiers", None)),
    }
    return ExperimentConfig.from_sources(config_path=args.config, overrides=overrides)


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    manifest = experiment.generate_datasets(cfg)
    for tier, info in manifest["tiers"].items():
        print(f"wrote {info['path']} ({info['n']} records, sha {info['sha']})")
    print(f"manifest at {Path(cfg.out_dir) / 'manifest.json'} (config {manifest['config_hash']})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    results = experiment.run_grid(cfg, parallel=args.parallel, write_artifacts=True)
    expected = len(cfg.methods) * len(cfg.tiers) * len(cfg.seeds)
    experiment.write_results(results, cfg.out_dir, cfg)
    print(experiment.format_table(experiment.aggregate(results)))
    print(f"results written to {Path(cfg.out_dir) / 'results.csv'}")
    return EXIT_OK if len(results) == expected else EXIT_CHECK_FAILED


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    rows = experiment.run_sweep(cfg, parallel=args.parallel)
    path = experiment.write_sweep(rows, cfg.out_dir)
    print(f"{len(rows)} sweep rows written to {path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    checks = verify.run_full_suite()
    width = max(len(c.name) for c in checks)
    ok = True
    for check in checks:
        status = "pass" if check.passed else "FAIL"
        print(f"{check.name:<{width}}  {status}  [{check.seconds:6.2f}s]  {check.detail}")
        ok &= check.passed
    if getattr(args, "json_out", None):
        payload = [{"name": c.name, "passed": c.passed, "detail": c.detail, "seconds": c.seconds}
                   for c in checks]
        Path(args.json_out).write_text(json.dumps(payload, indent=2))
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_report(args) -> int:
    cfg = _load_config(args)
    results = experiment.read_results(cfg.out_dir)
    if not results:
        print("no results found")
        return EXIT_CHECK_FAILED
    print(experiment.format_table(experiment.aggregate(results)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="madpo",
                                     description="margin-adaptive preference optimization lab")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, doc in [
        ("generate", cmd_generate, "build the quality-tier datasets"),
        ("run", cmd_run, "train and evaluate the configured method grid"),
        ("sweep", cmd_sweep, "threshold and amplification sweeps"),
        ("report", cmd_report, "print the aggregate results table"),
    ]:
        p = sub.add_parser(name, help=doc)
        _add_common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("verify", help="run the numerical certification suite")
    p.add_argument("--json-out", default=None, help="also write results as JSON")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
