"""Command line entry points: replay, serve, validate, build, filter, stats."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .dataset import (
    DatasetFormatError,
    build_multiturn,
    dataset_stats,
    filter_records,
    load_templates,
    read_records,
    read_samples,
    write_records,
)
from .orchestrator import TranscriptError, read_transcript, run_transcript
from .tokens import MalformedToken, parse, segment_to_json_dict, validate


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unitask")
    sub = parser.add_subparsers(dest="command", required=True)

    replay = sub.add_parser("replay", help="run a model-output transcript through the pipeline")
    replay.add_argument("--transcript", required=True)
    replay.add_argument("--config", default=None)
    replay.add_argument("--out", default=None, help="report path (stdout when omitted)")
    replay.add_argument("--state-dir", default=None)
    replay.add_argument("--seed", type=int, default=None)

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--config", default=None)
    serve.add_argument("--listen", default=None, help="host:port")
    serve.add_argument("--state-dir", default=None)

    val = sub.add_parser("validate", help="check one message against the token grammar")
    val.add_argument("--text", required=True)

    build = sub.add_parser("build", help="synthesize conversation records from annotated samples")
    build.add_argument("--input", required=True, help="annotated samples JSONL")
    build.add_argument("--templates", default=None, help="directory of extra template JSON files")
    build.add_argument("--turns", type=int, default=3)
    build.add_argument("--seed", type=int, default=0)
    build.add_argument("--out", required=True)

    filt = sub.add_parser("filter", help="apply the format filter to a record file")
    filt.add_argument("--input", required=True)
    filt.add_argument("--report", default=None, help="report path (stdout when omitted)")

    stats = sub.add_parser("stats", help="summarize a record file")
    stats.add_argument("--input", required=True)

    return parser


def _emit(text: str, out: "str | None") -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _cmd_replay(args) -> int:
    overrides = {"state_dir": args.state_dir, "seed": args.seed}
    config = load_config(args.config, overrides=overrides)
    transcript = read_transcript(args.transcript)
    report = run_transcript(transcript, config)
    _emit(report.to_json(), args.out)
    return 0


def _cmd_serve(args) -> int:
    from .service import serve

    config = load_config(args.config, overrides={"listen": args.listen, "state_dir": args.state_dir})
    serve(config)
    return 0


def _cmd_validate(args) -> int:
    try:
        msg = parse(args.text)
    except MalformedToken as exc:
        print(json.dumps({"ok": False, "error": {"code": exc.code, "offset": exc.offset, "detail": exc.reason}}))
        return 1
    violations = validate(msg)
    if violations:
        print(json.dumps({"ok": False, "violations": [v.to_json_dict() for v in violations]}))
        return 1
    print(json.dumps({"ok": True, "segments": [segment_to_json_dict(s) for s in msg.segments]}))
    return 0


def _cmd_build(args) -> int:
    samples = read_samples(args.input)
    templates = load_templates(args.templates) if args.templates else None
    records = [
        build_multiturn(s, n_turns=args.turns, rng_seed=args.seed + i, templates=templates)
        for i, s in enumerate(samples)
    ]
    n = write_records(records, args.out)
    print(f"wrote {n} records to {args.out}")
    return 0


def _cmd_filter(args) -> int:
    report = filter_records(read_records(args.input))
    _emit(json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n", args.report)
    if args.report is not None:
        print(f"kept {report.kept}, rejected {len(report.rejected)}")
    return 0


def _cmd_stats(args) -> int:
    stats = dataset_stats(read_records(args.input))
    print(json.dumps(stats.to_json_dict(), sort_keys=True, indent=2))
    return 0


_COMMANDS = {
    "replay": _cmd_replay,
    "serve": _cmd_serve,
    "validate": _cmd_validate,
    "build": _cmd_build,
    "filter": _cmd_filter,
    "stats": _cmd_stats,
}


def main(argv: "list[str] | None" = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DatasetFormatError, TranscriptError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
