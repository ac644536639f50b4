"""``microcorn`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from typing import Sequence

from . import pipeline
from .config import ConfigError, load_config
from .generator import MODES

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

COMMANDS = (
    "datagen", "pretrain-lm", "train-encoders", "train-retriever", "build-index", "eval-retrieval",
    "train-entity-adapter", "generate", "eval-commenting", "gradcheck", "repro-all",
)


def _ks(text: str) -> tuple:
    try:
        ks = tuple(int(k) for k in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive")
    return ks


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file with dotted section names")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--out", help="output directory (the MICROCORN_OUT variable takes precedence)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="microcorn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train-retriever":
            p.add_argument("--stage", type=int, choices=(1, 2), required=True)
        elif name == "eval-retrieval":
            p.add_argument("--k", type=_ks, default=None, help="comma-separated cutoffs, e.g. 1,5,10")
        elif name == "generate":
            p.add_argument("--query", required=True, help="JSONL with id, question, query_features")
            p.add_argument("--index", required=True, help="index file from build-index")
        elif name == "eval-commenting":
            p.add_argument("--mode", choices=MODES, action="append", help="repeatable; default is every mode")
    return parser


def _config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out_dir"] = args.out
    return load_config(args.config, overrides)


def repro_all(ws: pipeline.Workspace) -> dict:
    steps = [
        ("datagen", lambda: pipeline.run_datagen(ws)),
        ("pretrain-lm", lambda: pipeline.run_pretrain(ws)),
        ("train-encoders", lambda: pipeline.run_train_encoders(ws)),
        ("train-retriever 1", lambda: pipeline.run_train_retriever(ws, 1)),
        ("train-retriever 2", lambda: pipeline.run_train_retriever(ws, 2)),
        ("build-index", lambda: pipeline.run_build_index(ws)),
        ("eval-retrieval", lambda: pipeline.run_eval_retrieval(ws)),
        ("train-entity-adapter", lambda: pipeline.run_train_entity_adapter(ws)),
        ("eval-commenting", lambda: pipeline.run_eval_commenting(ws)),
    ]
    for stale in ("metrics/retrieval.json", "metrics/commenting.json", "freeze.json"):
        if ws.path(stale).exists():
            ws.path(stale).unlink()
    timings = {}
    for name, fn in steps:
        start = time.perf_counter()
        fn()
        timings[name] = round(time.perf_counter() - start, 1)
        print(f"{name}: {timings[name]}s", flush=True)
    print(ws.path("report.txt").read_text(encoding="utf-8"))
    return {"seconds": timings}


def dispatch(args, ws: pipeline.Workspace):
    cmd = args.command
    if cmd == "datagen":
        return pipeline.run_datagen(ws)
    if cmd == "pretrain-lm":
        return pipeline.run_pretrain(ws)
    if cmd == "train-encoders":
        return pipeline.run_train_encoders(ws)
    if cmd == "train-retriever":
        return pipeline.run_train_retriever(ws, args.stage)
    if cmd == "build-index":
        return pipeline.run_build_index(ws)
    if cmd == "eval-retrieval":
        return pipeline.run_eval_retrieval(ws, args.k)
    if cmd == "train-entity-adapter":
        return pipeline.run_train_entity_adapter(ws)
    if cmd == "generate":
        return pipeline.run_generate(ws, args.query, args.index)
    if cmd == "eval-commenting":
        return pipeline.run_eval_commenting(ws, tuple(args.mode or MODES))
    if cmd == "repro-all":
        return repro_all(ws)
    raise AssertionError(cmd)


def _fail(cmd: str, kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "command": cmd, "message": " ".join(message.split())}), file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as err:
        _fail(args.command, "ConfigError", str(err))
        return EXIT_CONFIG

    if args.command == "gradcheck":
        from .gradsuite import main_report

        ok, text = main_report(cfg.seed)
        print(text)
        return EXIT_OK if ok else EXIT_RUNTIME

    ws = pipeline.Workspace(cfg)
    marker = ws.path(f"{args.command}.failed")
    try:
        ws.root.mkdir(parents=True, exist_ok=True)
        result = dispatch(args, ws)
    except Exception as err:  # noqa: BLE001 - every failure becomes one parsable line
        try:
            marker.write_text(f"{type(err).__name__}: {err}\n", encoding="utf-8")
        except OSError:
            pass
        _fail(args.command, type(err).__name__, str(err))
        return EXIT_RUNTIME
    if marker.exists():
        marker.unlink()
    if args.command not in ("repro-all",):
        print(json.dumps(result, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
