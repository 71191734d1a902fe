"""Command-line entry point: ``heartlang <command> --config FILE [--seed N] [--workers N] [--deterministic]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .errors import ConfigError, DataError, HeartLangError

COMMANDS = ("synth", "tokenize", "train-vq", "pretrain", "probe", "export-vocab", "compare-slicing", "run")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heartlang", description="Heartbeat-sentence ECG representation learning.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file (defaults to the desk profile)")
    common.add_argument("--profile", choices=("desk", "full"), help="built-in profile to start from")
    common.add_argument("--seed", type=int, help="root seed (default 0)")
    common.add_argument("--workers", type=int, help="worker processes for tokenization")
    common.add_argument("--deterministic", action="store_true", help="single worker, bit-exact mode")
    common.add_argument("--out", help="output directory for this command")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a labelled synthetic corpus")
    t = sub.add_parser("tokenize", parents=[common], help="records -> sentence corpus")
    t.add_argument("--input", required=True, help="directory of record files")
    t.add_argument("--mode", choices=("heartbeat", "fixed_window"))
    t.add_argument("--leads", type=int, choices=(1, 2, 3, 6, 12), help="reduced-lead configuration")
    v = sub.add_parser("train-vq", parents=[common], help="train the quantised reconstruction model")
    v.add_argument("--corpus", required=True)
    r = sub.add_parser("pretrain", parents=[common], help="masked sentence pre-training")
    r.add_argument("--corpus", required=True)
    r.add_argument("--vq", required=True, help="VQ checkpoint directory")
    b = sub.add_parser("probe", parents=[common], help="linear probe on frozen features")
    b.add_argument("--corpus", required=True)
    b.add_argument("--encoder", help="pre-trained checkpoint directory (omit for random init)")
    b.add_argument("--task")
    e = sub.add_parser("export-vocab", parents=[common], help="codeword usage and exemplar patches")
    e.add_argument("--vq", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--exemplars", type=int, default=3)
    sub.add_parser("compare-slicing", parents=[common], help="heartbeat vs fixed-window, end to end")
    sub.add_parser("run", parents=[common], help="synth -> tokenize -> train-vq -> pretrain -> probe")
    return p


def _summary(obj) -> str:
    def clean(o):
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items() if k != "histogram"}
        if isinstance(o, list):
            return [clean(v) for v in o]
        return o
    return json.dumps(clean(obj), indent=2, default=str)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import pipeline
    from .config import load_config
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.deterministic:
            overrides["deterministic"] = True
        cfg = pipeline.set_deterministic(load_config(args.config, args.profile, overrides))
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        out = args.out
        cmd = args.command
        if cmd == "synth":
            res = pipeline.cmd_synth(cfg, out)
        elif cmd == "tokenize":
            res = pipeline.cmd_tokenize(cfg, args.input, out, args.mode, args.leads)
        elif cmd == "train-vq":
            res = pipeline.cmd_train_vq(cfg, args.corpus, out)
        elif cmd == "pretrain":
            res = pipeline.cmd_pretrain(cfg, args.corpus, args.vq, out)
        elif cmd == "probe":
            res = pipeline.cmd_probe(cfg, args.corpus, args.encoder, out, args.task)
        elif cmd == "export-vocab":
            res = pipeline.cmd_export_vocab(cfg, args.vq, args.corpus, out, args.exemplars)
        elif cmd == "compare-slicing":
            res = pipeline.cmd_compare_slicing(cfg, out)
            res = {"dir": res["dir"], "slicing": res["slicing"]}
        else:
            res = pipeline.cmd_run(cfg, out)
            res = {"dir": res["dir"], "rows": res["rows"]}
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except HeartLangError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(_summary(res))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
