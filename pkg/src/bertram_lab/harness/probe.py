"""Cloze probing with mean reciprocal rank per keyword-frequency bucket."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch

from ..core_math import DomainError
from ..encoder import EncoderModel
from ..text import MASK, Corpus, Vocabulary, collect_contexts, frequency_bucket
from .inject import InjectionPlan, inject_replace
from .report import EvalReport

SLOT = "___"
RANK_CUTOFF = 100

Embedder = Callable[[str, list[list[str]]], torch.Tensor]


@dataclass
class ClozeProbe:
    pattern: list[str]
    keyword: str
    targets: list[str]
    bucket_hint: str | None = None

    def __post_init__(self):
        if self.pattern.count(SLOT) != 1:
            raise DomainError(f"probe pattern needs exactly one slot: {self.pattern}")
        if self.keyword not in self.pattern:
            raise DomainError(f"keyword {self.keyword!r} missing from pattern")
        if not self.targets:
            raise DomainError("probe without targets")


def load_probes(path) -> list[ClozeProbe]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            r = json.loads(line)
            out.append(ClozeProbe(list(r["pattern"]), r["keyword"], list(r["targets"]),
                                  r.get("bucket_hint")))
    return out


def mrr(ranks: Sequence[int | None]) -> float:
    """Mean of 1/rank; ``None`` (not ranked within the cutoff) counts as 0."""
    if not ranks:
        raise DomainError("MRR of an empty probe set")
    total = 0.0
    for r in ranks:
        if r is not None:
            if r < 1:
                raise DomainError(f"rank {r} < 1")
            total += 1.0 / r
    return total / len(ranks)


def best_rank(scores: torch.Tensor, target_ids: Sequence[int], cutoff: int = RANK_CUTOFF) -> int | None:
    best = None
    for t in target_ids:
        r = 1 + int((scores > scores[t]).sum())
        best = r if best is None else min(best, r)
    return best if best is not None and best <= cutoff else None


def probe_inputs(probe: ClozeProbe, vocab: Vocabulary):
    """Ids for the probe with the slot masked, the mask index, and the keyword's token span."""
    words = [MASK if w == SLOT else w for w in probe.pattern]
    ids, spans = vocab.word_spans(words, offset=1)
    ids = [vocab.cls_id, *ids, vocab.sep_id]
    kw = probe.pattern.index(probe.keyword)
    return ids, ids.index(vocab.mask_id), spans[kw]


def run_probe(encoder: EncoderModel, vocab: Vocabulary, probes: Sequence[ClozeProbe], corpus: Corpus,
              embedder: Embedder | None = None, max_contexts: int | None = 32, seed: int = 0,
              cutoff: int = RANK_CUTOFF) -> EvalReport:
    """MRR of the plain encoder, or with keywords injected through ``embedder``."""
    if not probes:
        raise DomainError("no probes")
    per_bucket: dict[str, list] = {}
    flagged = []
    unscorable: set[str] = set()
    ranks_all = []
    with torch.no_grad():
        for probe in probes:
            ids, mask_pos, (i, j) = probe_inputs(probe, vocab)
            e = encoder.embed_tokens(ids)
            read = mask_pos
            if embedder is not None:
                ctxs = collect_contexts(probe.keyword, corpus, max_contexts, seed=seed)
                if not ctxs:
                    flagged.append(probe.keyword)
                v = embedder(probe.keyword, ctxs)
                e = inject_replace(e, InjectionPlan("replace", [(i, j)], [v]))
                if mask_pos > j:
                    read = mask_pos - (j - i)
            scores = encoder.mlm_logits(encoder.forward_embeddings(e)[read])
            targets = [vocab[t] for t in probe.targets if len(vocab.tokenize_word(t)) == 1]
            unscorable.update(t for t in probe.targets if len(vocab.tokenize_word(t)) != 1)
            r = best_rank(scores, targets, cutoff)
            ranks_all.append(r)
            bucket = probe.bucket_hint or frequency_bucket(corpus.count(probe.keyword))
            per_bucket.setdefault(bucket, []).append(r)
    report = EvalReport("mrr", len(probes))
    for b in ("rare", "medium", "frequent"):
        if b in per_bucket:
            report.add(b, mrr(per_bucket[b]), len(per_bucket[b]))
    report.add("all", mrr(ranks_all), len(ranks_all))
    report.notes["flagged_no_context"] = sorted(set(flagged))
    report.notes["unscorable_targets"] = sorted(unscorable)
    return report
