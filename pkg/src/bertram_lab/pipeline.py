"""File-based pipeline steps. Each step reads its inputs from the run directory and
writes its outputs atomically, so an interrupted step never leaves partial files."""

from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import training as T
from .bertram import BertramModel, infer, infer_context_only
from .checkpoint import atomic_write_text
from .config import RunConfig
from .core_math import DomainError
from .encoder import EncoderConfig, EncoderModel, pretrain_mlm
from .harness.downstream import eval_downstream
from .harness.probe import load_probes, run_probe
from .harness.report import EvalReport
from .rarify import (BaselineClassifier, LabeledInstance, RarifiedInstance, SubstitutionLexicon,
                     finetune_baseline, load_dataset, rarify_dataset, split_dataset)
from .text import Corpus, Vocabulary, build_vocab, collect_contexts, ingest_corpus
from .toydata import make_world

log = logging.getLogger(__name__)


@dataclass
class Layout:
    root: Path

    @property
    def toy(self) -> Path:
        return self.root / "toy"

    @property
    def corpus(self) -> Path:
        return self.root / "corpus.json"

    @property
    def vocab(self) -> Path:
        return self.root / "vocab.json"

    @property
    def encoder(self) -> Path:
        return self.root / "encoder.ckpt"

    @property
    def encoder_manifest(self) -> Path:
        return self.root / "encoder.json"

    def stage(self, stage: int, variant: str | None = None) -> Path:
        name = f"stage{stage}.ckpt" if stage < 3 else f"stage3-{variant}.ckpt"
        return self.root / "bertram" / name

    @property
    def rarify(self) -> Path:
        return self.root / "rarify"

    @property
    def classifier(self) -> Path:
        return self.rarify / "classifier.ckpt"

    @property
    def reports(self) -> Path:
        return self.root / "reports"


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found ({hint})")
    return path


def _input(configured: str, fallback: Path, what: str) -> Path:
    return _need(Path(configured) if configured else fallback, f"set paths.{what} or run make-toy")


def _dump(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_report(lay: Layout, name: str, report: EvalReport) -> None:
    atomic_write_text(lay.reports / f"{name}.json", report.to_json())
    atomic_write_text(lay.reports / f"{name}.csv", report.to_csv())


def _jsonl(path: Path, records) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(x) for x in _need(path, "run the previous step").read_text("utf-8").splitlines()
            if x.strip()]


# loaders ---------------------------------------------------------------

def load_corpus(lay: Layout) -> Corpus:
    return Corpus.from_json(_need(lay.corpus, "run ingest").read_text("utf-8"))


def load_vocab(lay: Layout) -> Vocabulary:
    return Vocabulary.from_json(_need(lay.vocab, "run build-vocab").read_text("utf-8"))


def load_encoder(lay: Layout, vocab: Vocabulary) -> EncoderModel:
    manifest = json.loads(_need(lay.encoder_manifest, "run pretrain").read_text("utf-8"))
    if manifest["vocab_sha256"] != vocab.digest():
        raise DomainError("encoder was pretrained with a different vocabulary")
    enc = EncoderModel.load(_need(lay.encoder, "run pretrain"))
    enc.freeze()
    enc.eval()
    return enc


def load_bertram(lay: Layout, variant: str, encoder, vocab) -> BertramModel:
    path = _need(lay.stage(3, variant), f"run train-bertram --stage 3 --variant {variant}")
    model = BertramModel.load(path, encoder, vocab, variant)
    model.eval()
    return model


# steps -----------------------------------------------------------------

def make_toy(cfg: RunConfig, lay: Layout) -> dict:
    world = make_world(cfg.toy)
    paths = world.write(lay.toy)
    return {k: str(v) for k, v in paths.items()}


def ingest(cfg: RunConfig, lay: Layout) -> dict:
    corpus = ingest_corpus(_input(cfg.paths.corpus, lay.toy / "corpus.txt", "corpus"),
                           cfg.vocab.lowercase)
    atomic_write_text(lay.corpus, corpus.to_json())
    return {"sentences": len(corpus.sentences), "types": len(corpus.frequency)}


def vocab_step(cfg: RunConfig, lay: Layout) -> dict:
    vocab = build_vocab(load_corpus(lay), cfg.vocab.target_size, cfg.vocab.min_whole_word_freq)
    atomic_write_text(lay.vocab, vocab.to_json())
    return {"size": len(vocab), "sha256": vocab.digest()}


def pretrain(cfg: RunConfig, lay: Layout) -> dict:
    corpus, vocab = load_corpus(lay), load_vocab(lay)
    ecfg = EncoderConfig(vocab_size=len(vocab), seed=cfg.seed, **asdict(cfg.model))
    model, history = pretrain_mlm(corpus, vocab, ecfg, cfg.pretrain)
    model.save(lay.encoder, vocab)
    manifest = {"encoder": asdict(ecfg), "pretrain": asdict(cfg.pretrain),
                "vocab_sha256": vocab.digest(), "loss_history": history}
    _dump(lay.encoder_manifest, manifest)
    return manifest


def split_words(cfg: RunConfig, corpus: Corpus, vocab: Vocabulary) -> tuple[list[str], list[str]]:
    """Training words and the held-out words excluded from every stage."""
    pool = T.training_words(corpus, vocab, cfg.bertram.train_min_freq)
    k = min(cfg.eval.holdout, len(pool) // 5)
    held = sorted(random.Random(cfg.seed).sample(pool, k))
    return [w for w in pool if w not in set(held)], held


def _mimic_data(cfg, corpus, vocab, enc, words) -> T.MimickingData:
    b = cfg.bertram
    data = T.MimickingData(words, corpus, vocab, enc, pool=b.context_pool,
                           min_contexts=b.min_contexts, seed=cfg.seed)
    if not data.entries:
        raise DomainError("no training word has enough contexts")
    return data


def train_bertram(cfg: RunConfig, lay: Layout, stage: int) -> dict:
    corpus, vocab = load_corpus(lay), load_vocab(lay)
    enc = load_encoder(lay, vocab)
    b = cfg.bertram
    words, held = split_words(cfg, corpus, vocab)
    if stage == 3:
        s1 = BertramModel.load(_need(lay.stage(1), "run train-bertram --stage 1"), enc, vocab)
        s2 = BertramModel.load(_need(lay.stage(2), "run train-bertram --stage 2"), enc, vocab)
        model = T.combine_stages(s1, s2, b.variant)
    else:
        model = T.new_model(enc, vocab, words, b)
    data = _mimic_data(cfg, corpus, vocab, enc, words)
    if stage == 1:
        history = T.train_stage1_context(model, data, b)
    elif stage == 2:
        history = T.train_stage2_form(model, data, b)
    elif stage == 3:
        history = T.train_stage3_combined(model, data, b)
    else:
        raise DomainError(f"unknown stage {stage}")
    info = {"stage": stage, "variant": b.variant if stage == 3 else None, "loss_history": history,
            "words": len(data.entries), "skipped": data.skipped, "holdout": held}
    model.save(lay.stage(stage, b.variant), f"stage{stage}", {"bertram_config": asdict(b)})
    _dump(lay.reports / f"train-stage{stage}{'-' + b.variant if stage == 3 else ''}.json", info)
    if stage == 3:
        report = mimic_report(cfg, corpus, vocab, enc, held, s1, s2, model)
        write_report(lay, f"mimic-{b.variant}", report)
    return info


def mimic_report(cfg, corpus, vocab, enc, held, stage1, stage2, combined) -> EvalReport:
    """Cosine to the target embedding on held-out words for both baselines and the full model."""
    k = cfg.eval.holdout_contexts
    cos = torch.nn.functional.cosine_similarity
    scores: dict[str, list[float]] = {"context_only": [], "form_only": [], "combined": []}
    with torch.no_grad():
        for w in held:
            ctxs = collect_contexts(w, corpus, k, seed=cfg.seed + 1)
            e = enc.embed_tokens(vocab.tokenize_word(w))[0]
            scores["context_only"].append(cos(infer_context_only(stage1, w, ctxs), e, dim=0).item())
            scores["form_only"].append(cos(stage2.form([w])[0], e, dim=0).item())
            scores["combined"].append(cos(infer(combined, w, ctxs), e, dim=0).item())
    report = EvalReport("cosine", len(held))
    for name, vals in scores.items():
        report.add(name, float(np.mean(vals)) if vals else 0.0, len(vals))
    report.notes["contexts_per_word"] = k
    report.notes["variant"] = combined.variant
    return report


def _lexicon(cfg: RunConfig, lay: Layout, corpus: Corpus) -> SubstitutionLexicon:
    path = _input(cfg.paths.lexicon, lay.toy / "lexicon.jsonl", "lexicon")
    return SubstitutionLexicon.load(path, cfg.eval.rare_threshold, corpus)


def rarify_split(cfg: RunConfig, lay: Layout) -> dict:
    corpus = load_corpus(lay)
    data = load_dataset(_input(cfg.paths.dataset, lay.toy / "dataset.jsonl", "dataset"))
    train, cand = split_dataset(data, _lexicon(cfg, lay, corpus), cfg.seed)
    _jsonl(lay.rarify / "train.jsonl", [x.to_record() for x in train])
    _jsonl(lay.rarify / "candidates.jsonl", [x.to_record() for x in cand])
    info = {"total": len(data), "train": len(train), "candidates": len(cand),
            "n_labels": max(x.label for x in data) + 1}
    _dump(lay.rarify / "split.json", info)
    return info


def _instances(path: Path) -> list[LabeledInstance]:
    return [LabeledInstance(r["text"], r["label"], r.get("text_b"), r["uid"]) for r in _read_jsonl(path)]


def rarify_finetune(cfg: RunConfig, lay: Layout) -> dict:
    vocab = load_vocab(lay)
    enc = load_encoder(lay, vocab)
    split = json.loads(_need(lay.rarify / "split.json", "run rarify --step split").read_text("utf-8"))
    train = _instances(lay.rarify / "train.jsonl")
    clf = BaselineClassifier(enc, vocab, split["n_labels"], cfg.seed)
    before = [p.detach().clone() for p in clf.embedding_parameters()]
    history, stats = finetune_baseline(clf, train, cfg.seed, cfg.finetune)
    unchanged = all(torch.equal(a, p) for a, p in zip(before, clf.embedding_parameters()))
    clf.save(lay.classifier)
    info = {"loss_history": history, "augment": asdict(stats), "embeddings_unchanged": unchanged}
    _dump(lay.reports / "finetune.json", info)
    return info


def rarify_generate(cfg: RunConfig, lay: Layout) -> dict:
    corpus, vocab = load_corpus(lay), load_vocab(lay)
    clf = BaselineClassifier.load(_need(lay.classifier, "run rarify --step finetune"), vocab)
    cand = _instances(lay.rarify / "candidates.jsonl")
    test, report = rarify_dataset(cand, _lexicon(cfg, lay, corpus), clf, cfg.seed)
    _jsonl(lay.rarify / "test.jsonl", [x.to_record() for x in test])
    _dump(lay.reports / "rarify.json", report)
    return report


def probe(cfg: RunConfig, lay: Layout, with_bertram: bool = True) -> dict:
    corpus, vocab = load_corpus(lay), load_vocab(lay)
    enc = load_encoder(lay, vocab)
    probes = load_probes(_input(cfg.paths.probes, lay.toy / "probes.jsonl", "probes"))
    kw = dict(max_contexts=cfg.eval.max_contexts, seed=cfg.seed)
    out = {"plain": run_probe(enc, vocab, probes, corpus, None, **kw)}
    if with_bertram:
        model = load_bertram(lay, cfg.bertram.variant, enc, vocab)
        out[cfg.bertram.variant] = run_probe(enc, vocab, probes, corpus,
                                             lambda w, c: infer(model, w, c), **kw)
    for name, rep in out.items():
        write_report(lay, f"probe-{name}", rep)
    return {name: rep.slices for name, rep in out.items()}


def evaluate(cfg: RunConfig, lay: Layout) -> dict:
    corpus, vocab = load_corpus(lay), load_vocab(lay)
    enc = load_encoder(lay, vocab)
    clf = BaselineClassifier.load(_need(lay.classifier, "run rarify --step finetune"), vocab)
    test = [RarifiedInstance.from_record(r) for r in _read_jsonl(lay.rarify / "test.jsonl")]
    if not test:
        log.warning("rarified test set is empty; reports will have no instances")
    lexicon = _lexicon(cfg, lay, corpus)
    e = cfg.eval
    kw = dict(kinds=lexicon.kind, rare_threshold=e.rare_threshold, max_contexts=e.max_contexts,
              seed=cfg.seed)
    baseline = eval_downstream(clf, test, corpus, None, **kw)
    write_report(lay, "eval-baseline", baseline)
    model = load_bertram(lay, cfg.bertram.variant, enc, vocab)
    rep = eval_downstream(clf, test, corpus, lambda w, c: infer(model, w, c), e.strategy,
                          e.indomain, **kw)
    name = f"eval-{cfg.bertram.variant}-{e.strategy}" + ("-indomain" if e.indomain else "")
    write_report(lay, name, rep)
    return {"baseline": baseline.slices["all"], name: rep.slices["all"]}
