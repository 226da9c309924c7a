"""Three-stage mimicking trainer: context part, form part, then the combined model."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch

from .bertram import (BertramModel, NGramEmbeddingTable, VARIANTS, context_vectors,
                      prepare_masked_context)
from .core_math import Adam, DomainError, backward, set_frozen
from .encoder import EncoderModel
from .text import Corpus, Vocabulary, collect_contexts

log = logging.getLogger(__name__)


class ConfigurationError(RuntimeError):
    """A stage was asked to run without its prerequisites."""


@dataclass
class StageConfig:
    epochs: int
    lr: float
    words_per_batch: int
    warmup_fraction: float = 0.1


@dataclass
class BertramConfig:
    variant: str = "add"
    min_n: int = 3
    max_n: int = 5
    ngram_dropout: float = 0.1
    min_gram_count: int = 3
    min_contexts: int = 4
    max_contexts: int = 32
    context_pool: int = 64
    train_min_freq: int = 100
    stage1: StageConfig = field(default_factory=lambda: StageConfig(20, 5e-3, 16))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(20, 1e-2, 64))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(15, 5e-3, 16))
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "BertramConfig":
        d = dict(d)
        for k in ("stage1", "stage2", "stage3"):
            if k in d and isinstance(d[k], dict):
                d[k] = StageConfig(**d[k])
        cfg = cls(**d)
        if cfg.variant not in VARIANTS:
            raise DomainError(f"unknown variant {cfg.variant!r}")
        return cfg

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def training_words(corpus: Corpus, vocab: Vocabulary, min_freq: int = 100,
                   exclude: Sequence[str] = ()) -> list[str]:
    """Single-token words with corpus frequency at or above ``min_freq``."""
    skip = set(exclude)
    special = set(vocab.special_ids)
    out = []
    for w, c in corpus.frequency.items():
        if c < min_freq or w in skip:
            continue
        ids = vocab.tokenize_word(w)
        if len(ids) == 1 and ids[0] not in special:
            out.append(w)
    return sorted(out)


@dataclass
class WordData:
    word: str
    target: torch.Tensor
    items: list[tuple[list[int], int]]


class MimickingData:
    """Training words with their target embeddings and a pool of masked contexts."""

    def __init__(self, words: Sequence[str], corpus: Corpus, vocab: Vocabulary,
                 encoder: EncoderModel | None, targets: dict[str, torch.Tensor] | None = None,
                 pool: int = 64, min_contexts: int = 1, seed: int = 0):
        self.vocab = vocab
        self.entries: list[WordData] = []
        self.skipped = 0
        for w in words:
            if targets is not None:
                target = targets[w]
            else:
                target = encoder.embed_tokens(vocab.tokenize_word(w))[0].detach().clone()
            ctxs = collect_contexts(w, corpus, pool, seed=seed)
            if len(ctxs) < min_contexts:
                self.skipped += 1
                continue
            items = [prepare_masked_context(w, c, vocab) for c in ctxs]
            self.entries.append(WordData(w, target, items))
        if self.skipped:
            log.info("skipped %d words with fewer than %d contexts", self.skipped, min_contexts)
        self._shallow: dict[int, torch.Tensor] = {}

    def shallow_states(self, encoder: EncoderModel, k: int) -> torch.Tensor:
        """SHALLOW context states of entry ``k`` (frozen encoder, so computed once)."""
        if k not in self._shallow:
            with torch.no_grad():
                self._shallow[k] = context_vectors(encoder, self.vocab, "shallow",
                                                   self.entries[k].items)
        return self._shallow[k]


def _sample_contexts(n: int, lo: int, hi: int, rng: random.Random) -> list[int]:
    hi = min(hi, n)
    lo = min(lo, hi)
    k = rng.randint(lo, hi)
    return sorted(rng.sample(range(n), k))


def _batches(n: int, size: int, rng: random.Random) -> list[list[int]]:
    order = list(range(n))
    rng.shuffle(order)
    return [order[i:i + size] for i in range(0, n, size)]


def _words_forward(model: BertramModel, data: MimickingData, batch: list[int], mode: str,
                   picks: dict[int, list[int]], training: bool,
                   generator: torch.Generator | None) -> torch.Tensor:
    """Predicted embeddings for the words in ``batch``.

    ``mode`` is ``context`` (first stage), ``form`` (second stage) or a variant name.
    """
    words = [data.entries[k].word for k in batch]
    if mode == "form":
        return model.form(words, training, generator)
    groups = [len(picks[k]) for k in batch]
    if mode == "context" or mode == "shallow":
        h = torch.cat([data.shallow_states(model.encoder, k)[picks[k]] for k in batch])
        if mode == "context":
            per_ctx = model.linear(h)
        else:
            forms = model.form(words, training, generator)
            rows = torch.repeat_interleave(forms, torch.tensor(groups), dim=0)
            per_ctx = model.per_context(h, rows, "shallow")
    else:
        forms = model.form(words, training, generator)
        rows = torch.repeat_interleave(forms, torch.tensor(groups), dim=0)
        items = [data.entries[k].items[j] for k in batch for j in picks[k]]
        h = context_vectors(model.encoder, data.vocab, mode, items, rows)
        per_ctx = model.linear(h)
    return model.aggregate(per_ctx, groups)[1]


def _run_stage(model: BertramModel, data: MimickingData, mode: str, stage: StageConfig,
               trainable: list[torch.nn.Parameter], cfg: BertramConfig, seed_offset: int) -> list[float]:
    all_params = list(model.parameters())
    set_frozen(all_params, True)
    set_frozen(trainable, False)
    rng = random.Random(cfg.seed * 1000 + seed_offset)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + seed_offset)
    n = len(data.entries)
    steps = stage.epochs * math.ceil(n / stage.words_per_batch)
    opt = Adam(trainable, lr=stage.lr, warmup_fraction=stage.warmup_fraction, total_steps=steps)
    history = []
    dropout_on = mode != "context"
    for epoch in range(stage.epochs):
        total = 0.0
        for batch in _batches(n, stage.words_per_batch, rng):
            picks = {k: _sample_contexts(len(data.entries[k].items), cfg.min_contexts,
                                         cfg.max_contexts, rng) for k in batch}
            v = _words_forward(model, data, batch, mode, picks, dropout_on, gen)
            target = torch.stack([data.entries[k].target for k in batch])
            losses = ((target - v) ** 2).sum(dim=-1)
            loss = losses.mean()
            backward(loss)
            opt.step()
            total += losses.sum().item()
        history.append(total / max(n, 1))
        log.info("%s epoch %d loss %.4f", mode, epoch + 1, history[-1])
    set_frozen(all_params, True)
    return history


def train_stage1_context(model: BertramModel, data: MimickingData, cfg: BertramConfig) -> list[float]:
    """Fit A, b and the aggregator on SHALLOW context states; form and encoder untouched."""
    if model.encoder is None:
        raise ConfigurationError("stage 1 needs the encoder")
    trainable = [model.A, model.b, *model.aggregator.parameters()]
    hist = _run_stage(model, data, "context", cfg.stage1, trainable, cfg, 1)
    model.completed_stages = sorted(set(model.completed_stages) | {1})
    return hist


def train_stage2_form(model: BertramModel, data: MimickingData, cfg: BertramConfig) -> list[float]:
    """Fit the n-gram table alone; the encoder is never consulted."""
    hist = _run_stage(model, data, "form", cfg.stage2, [model.ngrams.weight], cfg, 2)
    model.completed_stages = sorted(set(model.completed_stages) | {2})
    return hist


def train_stage3_combined(model: BertramModel, data: MimickingData, cfg: BertramConfig) -> list[float]:
    """Train everything except the encoder through the model's variant.

    For ``add`` the n-gram table stays frozen as well.
    """
    missing = {1, 2} - set(model.completed_stages)
    if missing:
        raise ConfigurationError(f"stage 3 requires completed stages {sorted(missing)}")
    if model.encoder is None:
        raise ConfigurationError("stage 3 needs the encoder")
    trainable = [model.A, model.b, *model.aggregator.parameters()]
    if model.variant == "shallow":
        trainable += [model.gate_x, model.gate_y]
    if model.variant != "add":
        trainable.append(model.ngrams.weight)
    hist = _run_stage(model, data, model.variant, cfg.stage3, trainable, cfg, 3)
    model.completed_stages = sorted(set(model.completed_stages) | {3})
    return hist


def new_model(encoder: EncoderModel, vocab: Vocabulary, words: Sequence[str],
              cfg: BertramConfig) -> BertramModel:
    table = NGramEmbeddingTable.for_words(words, encoder.d, cfg.min_n, cfg.max_n,
                                          cfg.ngram_dropout, cfg.seed, cfg.min_gram_count)
    model = BertramModel(encoder, vocab, table, cfg.variant, cfg.seed)
    set_frozen(model.parameters(), True)
    return model


def combine_stages(stage1: BertramModel, stage2: BertramModel, variant: str) -> BertramModel:
    """Context part from the first-stage model, n-gram table from the second."""
    if 1 not in stage1.completed_stages:
        raise ConfigurationError("first checkpoint has not completed stage 1")
    if 2 not in stage2.completed_stages:
        raise ConfigurationError("second checkpoint has not completed stage 2")
    if stage1.ngrams.grams != stage2.ngrams.grams:
        raise ConfigurationError("stage checkpoints disagree on the n-gram inventory")
    model = BertramModel(stage1.encoder, stage1.vocab,
                         NGramEmbeddingTable(stage2.ngrams.grams, stage2.d, stage2.ngrams.min_n,
                                             stage2.ngrams.max_n, stage2.ngrams.dropout),
                         variant)
    with torch.no_grad():
        model.ngrams.weight.copy_(stage2.ngrams.weight)
        model.A.copy_(stage1.A)
        model.b.copy_(stage1.b)
        for dst, src in zip(model.aggregator.parameters(), stage1.aggregator.parameters()):
            dst.copy_(src)
    set_frozen(model.parameters(), True)
    model.completed_stages = [1, 2]
    return model


def evaluate_loss(model: BertramModel, data: MimickingData, mode: str, n_contexts: int | None = None,
                  seed: int = 0) -> float:
    """Mean mimicking loss with a fixed context draw, dropout off."""
    rng = random.Random(seed)
    picks = {}
    for k, e in enumerate(data.entries):
        n = len(e.items)
        m = n if n_contexts is None else min(n, n_contexts)
        picks[k] = sorted(rng.sample(range(n), m))
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(data.entries), 64):
            batch = list(range(s, min(s + 64, len(data.entries))))
            v = _words_forward(model, data, batch, mode, picks, False, None)
            target = torch.stack([data.entries[k].target for k in batch])
            total += ((target - v) ** 2).sum(dim=-1).sum().item()
    return total / max(len(data.entries), 1)
