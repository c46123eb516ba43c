"""Command-line entry point: ``python -m freeep <command> [options]``.

Exit codes: 0 on success, 2 on configuration or input errors, 3 on
numerical failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .errors import ConfigError, DimensionMismatch, FreeEPError, InvalidParameter, ParseError
from .experiments import COMMANDS, RUNNERS, ExperimentRecord

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("freeep")


def load_config_file(path) -> dict:
    """Read a flat key-value config: JSON object, or ``key = value`` lines with ``#`` comments."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {str(path)!r}: {exc.strerror}") from None
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {str(path)!r}: invalid JSON ({exc.msg})") from None
        if any(isinstance(v, dict) for v in data.values()):
            raise ConfigError("config file must be flat (no nested objects)")
        return data
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else (":" if ":" in line else None)
        if sep is None:
            raise ConfigError(f"config file {str(path)!r} line {lineno}: expected 'key = value'")
        k, v = (part.strip() for part in line.split(sep, 1))
        out[k] = v.strip().strip('"').strip("'")
    return out


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freeep", description="Diagonal/scalar EP and free-probability checks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base random seed (default 0)")
    common.add_argument("--config", default=None, help="flat key-value config file (JSON or key = value)")
    common.add_argument("--out-dir", default=None, help="directory for CSV side files")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (default 1)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a single config key; may be repeated")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=(RUNNERS[name].__doc__ or "").strip().split("\n")[0])
    return parser


def run(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        overrides = load_config_file(args.config) if args.config else {}
        overrides.update(_parse_set(args.set))
        for key, val in (("seed", args.seed), ("out_dir", args.out_dir), ("threads", args.threads)):
            if val is not None:
                overrides[key] = val
        threads = int(overrides.get("threads", 1))
        if threads < 1:
            raise ConfigError("config key 'threads': must be >= 1")
        with threadpool_limits(threads):
            record: ExperimentRecord = RUNNERS[args.command](overrides)
    except (ConfigError, ParseError, InvalidParameter, DimensionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FreeEPError, ArithmeticError, FloatingPointError) as exc:
        rec = {"command": args.command, "status": "error", "error": f"{type(exc).__name__}: {exc}"}
        print(json.dumps(rec), file=stdout)
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(record.to_json(), file=stdout)
    return EXIT_OK


def main(argv=None) -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
