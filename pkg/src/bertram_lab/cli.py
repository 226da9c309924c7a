"""Command line entry point: ``bertram-lab <step> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import pipeline as P
from .config import load_config, smoke_preset
from .core_math import DomainError
from .training import ConfigurationError

OUT_ENV = "BERTRAM_LAB_OUT"
log = logging.getLogger("bertram_lab")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help=f"run directory (default: ${OUT_ENV} or ./runs/default)")
    p.add_argument("--preset", choices=["smoke"], help="start from a built-in preset")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bertram-lab",
                                     description="Rare-word embedding laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="generate the synthetic corpus, lexicon, probes and dataset")
    _common(p)
    p = sub.add_parser("ingest", help="read a one-sentence-per-line corpus")
    _common(p)
    p.add_argument("--corpus", help="corpus text file (paths.corpus)")
    p = sub.add_parser("build-vocab", help="build the wordpiece vocabulary")
    _common(p)
    p.add_argument("--vocab-size", type=int, help="vocab.target_size")
    p = sub.add_parser("pretrain", help="masked-LM pretraining of the encoder")
    _common(p)
    p.add_argument("--epochs", type=int, help="pretrain.epochs")
    p = sub.add_parser("train-bertram", help="one stage of mimicking training")
    _common(p)
    p.add_argument("--stage", type=int, choices=[1, 2, 3], required=True)
    p.add_argument("--variant", choices=["shallow", "replace", "add"], help="bertram.variant")
    p = sub.add_parser("rarify", help="split, finetune the baseline, generate the test set")
    _common(p)
    p.add_argument("--step", choices=["split", "finetune", "generate"], required=True)
    p.add_argument("--lexicon", help="paths.lexicon")
    p.add_argument("--dataset", help="paths.dataset")
    p = sub.add_parser("probe", help="cloze-probe MRR, plain and with injected embeddings")
    _common(p)
    p.add_argument("--probes", help="paths.probes")
    p.add_argument("--variant", choices=["shallow", "replace", "add"], help="bertram.variant")
    p.add_argument("--plain-only", action="store_true", help="skip the injected run")
    p = sub.add_parser("eval", help="downstream accuracy on the rarified test set")
    _common(p)
    p.add_argument("--strategy", choices=["replace", "slash"], help="eval.strategy")
    p.add_argument("--indomain", action="store_true", default=None, help="eval.indomain")
    p.add_argument("--variant", choices=["shallow", "replace", "add"], help="bertram.variant")
    p = sub.add_parser("pipeline", help="run every step in order")
    _common(p)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    put("paths", "corpus", getattr(args, "corpus", None))
    put("paths", "lexicon", getattr(args, "lexicon", None))
    put("paths", "dataset", getattr(args, "dataset", None))
    put("paths", "probes", getattr(args, "probes", None))
    put("vocab", "target_size", getattr(args, "vocab_size", None))
    put("pretrain", "epochs", getattr(args, "epochs", None))
    put("bertram", "variant", getattr(args, "variant", None))
    put("eval", "strategy", getattr(args, "strategy", None))
    put("eval", "indomain", getattr(args, "indomain", None))
    if args.seed is not None:
        o["seed"] = args.seed
    return o


def _deep_update(a: dict, b: dict) -> dict:
    for k, v in b.items():
        a[k] = _deep_update(a.get(k, {}), v) if isinstance(v, dict) else v
    return a


def run(args: argparse.Namespace) -> dict:
    base = smoke_preset() if args.preset == "smoke" else {}
    if args.config:
        base = _deep_update(base, json.loads(Path(args.config).read_text(encoding="utf-8")))
    cfg = load_config(None, _deep_update(base, _overrides(args)))
    lay = P.Layout(Path(args.out or os.environ.get(OUT_ENV) or "runs/default"))
    torch.set_num_threads(1)
    c = args.command
    if c == "make-toy":
        return P.make_toy(cfg, lay)
    if c == "ingest":
        return P.ingest(cfg, lay)
    if c == "build-vocab":
        return P.vocab_step(cfg, lay)
    if c == "pretrain":
        return P.pretrain(cfg, lay)
    if c == "train-bertram":
        return P.train_bertram(cfg, lay, args.stage)
    if c == "rarify":
        return {"split": P.rarify_split, "finetune": P.rarify_finetune,
                "generate": P.rarify_generate}[args.step](cfg, lay)
    if c == "probe":
        return P.probe(cfg, lay, not args.plain_only)
    if c == "eval":
        return P.evaluate(cfg, lay)
    if c == "pipeline":
        out = {}
        if not cfg.paths.corpus:
            out["make-toy"] = P.make_toy(cfg, lay)
        for name, step in [("ingest", P.ingest), ("build-vocab", P.vocab_step),
                           ("pretrain", P.pretrain)]:
            out[name] = step(cfg, lay)
        for s in (1, 2, 3):
            out[f"stage{s}"] = P.train_bertram(cfg, lay, s)
        for name, step in [("split", P.rarify_split), ("finetune", P.rarify_finetune),
                           ("generate", P.rarify_generate), ("probe", P.probe),
                           ("eval", P.evaluate)]:
            out[name] = step(cfg, lay)
        return out
    raise AssertionError(c)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (OSError, ValueError, DomainError, ConfigurationError, KeyError) as exc:
        print(f"bertram-lab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if args.command != "pipeline":
        print(json.dumps(result, indent=2, sort_keys=True, default=str)[:4000])
    return 0


if __name__ == "__main__":
    sys.exit(main())
