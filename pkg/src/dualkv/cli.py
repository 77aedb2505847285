"""Command-line entry point: ``dualkv run|compare|snapshot``.

Exit codes: 0 success, 1 config/validation error, 2 invariant breach, 3 I/O error.
Every invocation with an ``--out`` path also writes ``<out>.manifest.json``.
Set ``SOURCE_DATE_EPOCH`` to pin manifest timestamps for reproducible reruns.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from . import __version__
from .simulator import (
    ConfigError,
    InvariantError,
    MetricsIOError,
    Stream,
    StreamConfig,
    compare_policies,
    emit_metrics,
    parse_config,
)

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_IO = 0, 1, 2, 3


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    command: str
    started_at: str
    finished_at: str | None = None
    exit_status: int | None = None


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config: StreamConfig) -> str:
    return hashlib.sha256(canonical_json(config.to_dict()).encode()).hexdigest()


def _now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def validate_config(raw: str) -> StreamConfig | list[str]:
    """Parse and validate config JSON text. Returns the config, or every violation found."""
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        return [f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"]
    try:
        return parse_config(data)
    except ConfigError as exc:
        return exc.errors


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="stream config JSON")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--validate-only", action="store_true", help="validate the config and exit")

    p = _Parser(prog="dualkv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dualkv {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", parents=[common], help="run one stream and write per-step metrics")
    run.add_argument("--out")
    run.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")

    cmp_ = sub.add_parser("compare", parents=[common], help="run policy variants on one seed/schedule")
    cmp_.add_argument("--policies", default="dual_memory,sliding_only,single_sink",
                      help="comma list of policy, recache mode, or policy:mode")
    cmp_.add_argument("--out")

    snap = sub.add_parser("snapshot", parents=[common], help="serialize the cache after a given step")
    snap.add_argument("--at", type=int, required=True)
    snap.add_argument("--out")
    return p


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise MetricsIOError(f"cannot write {path}: {exc}") from exc


def _execute(args, config: StreamConfig) -> None:
    if args.command == "run":
        if not args.out:
            raise ConfigError(["--out is required"])
        records = Stream(config).run()
        emit_metrics(records, args.out, args.format)
    elif args.command == "compare":
        if not args.out:
            raise ConfigError(["--out is required"])
        names = [p for p in args.policies.split(",") if p.strip()]
        report = compare_policies(config, names)
        _write(Path(args.out), json.dumps(report, indent=2, sort_keys=True) + "\n")
    elif args.command == "snapshot":
        if not args.out:
            raise ConfigError(["--out is required"])
        if not 0 <= args.at < config.horizon:
            raise ConfigError([f"--at {args.at} outside [0, horizon={config.horizon})"])
        stream = Stream(config)
        stream.run_until(args.at + 1)
        _write(Path(args.out), stream.cache.to_json() + "\n")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = Path(args.config).read_text()
    except OSError as exc:
        print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
        return EXIT_IO
    result = validate_config(raw)
    if isinstance(result, list):
        for msg in result:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    config = result if args.seed is None else replace(result, seed=args.seed)
    if args.validate_only:
        print(f"config ok: {config_hash(config)}")
        return EXIT_OK

    manifest = RunManifest(config_hash(config), __version__, args.command, _now())
    try:
        _execute(args, config)
        status = EXIT_OK
    except ConfigError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=sys.stderr)
        status = EXIT_CONFIG
    except InvariantError as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        status = EXIT_INVARIANT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        status = EXIT_IO
    manifest.finished_at = _now()
    manifest.exit_status = status
    if getattr(args, "out", None):
        try:
            Path(f"{args.out}.manifest.json").write_text(
                json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n"
            )
        except OSError as exc:
            print(f"I/O error: cannot write manifest: {exc}", file=sys.stderr)
            status = status or EXIT_IO
    return status
