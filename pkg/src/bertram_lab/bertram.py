"""Rare-word embeddings from surface form and contexts on top of a frozen encoder.

Three ways of exposing the form to the encoder are supported:

* ``shallow``: contexts are encoded without form; form and context are gated afterwards.
* ``replace``: the form embedding takes the place of the ``[MASK]`` input vector.
* ``add``: the form embedding and a colon are prepended right after ``[CLS]``.

Per-context vectors are aggregated by a self-attention layer (attentive mimicking).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from . import checkpoint
from .core_math import DimensionError, DomainError, softmax
from .encoder import EncoderModel
from .text import MASK, Vocabulary, extract_ngrams

VARIANTS = ("shallow", "replace", "add")


class NGramEmbeddingTable(nn.Module):
    def __init__(self, grams: Sequence[str], d: int, min_n: int = 3, max_n: int = 5,
                 dropout: float = 0.1, seed: int = 0):
        super().__init__()
        self.grams = list(grams)
        self.index = {g: i for i, g in enumerate(self.grams)}
        self.min_n, self.max_n, self.dropout = min_n, max_n, dropout
        g = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter((torch.rand(len(self.grams), d, generator=g) - 0.5) * 0.1)

    @classmethod
    def for_words(cls, words, d: int, min_n=3, max_n=5, dropout=0.1, seed=0, min_count=1):
        """Table over grams found in at least ``min_count`` distinct words."""
        counts = Counter(gr for w in set(words) for gr in set(extract_ngrams(w, min_n, max_n).grams))
        grams = sorted(gr for gr, c in counts.items() if c >= min_count)
        return cls(grams, d, min_n, max_n, dropout, seed)

    def gram_ids(self, word: str) -> list[int]:
        grams = extract_ngrams(word, self.min_n, self.max_n).grams
        return [self.index[gr] for gr in grams if gr in self.index]

    def forward(self, words: Sequence[str], training: bool = False,
                generator: torch.Generator | None = None) -> torch.Tensor:
        """Mean of known, surviving n-gram vectors per word; zero when none survive."""
        ids = [self.gram_ids(w) for w in words]
        G = max((len(x) for x in ids), default=0)
        d = self.weight.shape[1]
        if G == 0:
            return self.weight.new_zeros((len(words), d))
        idx = torch.zeros((len(words), G), dtype=torch.long)
        keep = torch.zeros((len(words), G), dtype=self.weight.dtype)
        for r, x in enumerate(ids):
            idx[r, : len(x)] = torch.tensor(x, dtype=torch.long)
            keep[r, : len(x)] = 1.0
        if training and self.dropout > 0:
            survive = torch.rand(keep.shape, generator=generator) >= self.dropout
            keep = keep * survive.to(keep.dtype)
        vecs = self.weight[idx] * keep[..., None]
        count = keep.sum(dim=1, keepdim=True)
        return vecs.sum(dim=1) / count.clamp(min=1.0)


def form_embedding(word: str, table: NGramEmbeddingTable, training: bool = False,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    return table([word], training, generator)[0]


def gate(v_form: torch.Tensor, v_context: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if v_form.shape[-1] != v_context.shape[-1] or x.shape[-1] != 2 * v_form.shape[-1]:
        raise DimensionError(
            f"gate: form {tuple(v_form.shape)}, context {tuple(v_context.shape)}, x {tuple(x.shape)}"
        )
    return torch.sigmoid(torch.cat([v_form, v_context], dim=-1) @ x + y)


def fcm_combine(v_form, v_context, alpha, A, b) -> torch.Tensor:
    alpha = torch.as_tensor(alpha, dtype=v_form.dtype)
    if alpha.dim() > 0:
        alpha = alpha[..., None]
    return alpha * (v_context @ A.T + b) + (1 - alpha) * v_form


class AttentionAggregator(nn.Module):
    """Self-attention weights over per-context embeddings.

    ``s_ij = (Q v_i) . (K v_j) / sqrt(d_att)``; ``rho = softmax_i(sum_j s_ij)``.
    """

    def __init__(self, d: int, d_att: int | None = None, seed: int = 0):
        super().__init__()
        d_att = d_att or d
        g = torch.Generator().manual_seed(seed + 7)
        self.query = nn.Parameter(torch.randn(d_att, d, generator=g) * 0.01)
        self.key = nn.Parameter(torch.randn(d_att, d, generator=g) * 0.01)
        self.temperature = math.sqrt(d_att)

    def scores(self, vs: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``vs``: ``(W, M, d)``; ``mask``: ``(W, M)`` True where valid."""
        q = vs @ self.query.T
        k = vs @ self.key.T
        if mask is not None:
            k = k * mask[..., None].to(k.dtype)
        s = (q * k.sum(dim=1, keepdim=True)).sum(-1) / self.temperature
        if mask is not None:
            s = s.masked_fill(~mask, float("-inf"))
        return s

    def forward(self, vs: torch.Tensor, mask: torch.Tensor | None = None):
        rho = softmax(self.scores(vs, mask), dim=-1)
        return rho, (rho[..., None] * vs).sum(dim=-2)


def attentive_mimicking(vs: torch.Tensor, aggregator: AttentionAggregator):
    if vs.dim() != 2 or vs.shape[0] == 0:
        raise DomainError("attentive mimicking needs at least one embedding")
    rho, v = aggregator(vs[None])
    return rho[0], v[0]


def mimicking_loss(e_w: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    return ((e_w - v) ** 2).sum(dim=-1)


def prepare_masked_context(word: str, context: Sequence[str], vocab: Vocabulary) -> tuple[list[int], int]:
    """Mask every occurrence of ``word``; return ``[CLS] ... [SEP]`` ids and the first mask index."""
    if word not in context:
        raise DomainError(f"context does not contain {word!r}")
    masked = [MASK if w == word else w for w in context]
    ids = [vocab.cls_id, *vocab.tokenize(masked), vocab.sep_id]
    return ids, ids.index(vocab.mask_id)


def crop_around(ids: list[int], i: int, max_body: int) -> tuple[list[int], int]:
    """Center-crop the body between ``[CLS]`` and ``[SEP]`` around position ``i``."""
    body = ids[1:-1]
    if len(body) <= max_body:
        return ids, i
    if max_body < 1:
        raise DomainError("no room left for the masked position")
    j = i - 1
    start = min(max(0, j - max_body // 2), len(body) - max_body)
    return [ids[0], *body[start:start + max_body], ids[-1]], i - start


@dataclass
class Assembled:
    embeddings: torch.Tensor
    pad_mask: torch.Tensor
    read: torch.Tensor


def assemble_inputs(encoder: EncoderModel, vocab: Vocabulary, variant: str,
                    items: Sequence[tuple[list[int], int]],
                    v_forms: torch.Tensor | None) -> Assembled:
    """Build padded encoder inputs for a batch of masked contexts.

    ``v_forms`` holds one form vector per item; it is ignored for ``shallow``.
    """
    if variant not in VARIANTS:
        raise DomainError(f"unknown variant {variant!r}")
    if variant != "shallow" and v_forms is None:
        raise DomainError(f"variant {variant} needs form embeddings")
    extra = 2 if variant == "add" else 0
    max_body = encoder.config.max_len - 2 - extra
    rows, reads = [], []
    for ids, i in items:
        ids, i = crop_around(ids, i, max_body)
        if variant == "add":
            ids = [ids[0], vocab.pad_id, vocab.colon_id, *ids[1:]]
            i += 2
        rows.append(ids)
        reads.append(i)
    T = max(len(r) for r in rows)
    idx = torch.full((len(rows), T), vocab.pad_id, dtype=torch.long)
    pad = torch.ones((len(rows), T), dtype=torch.bool)
    for r, ids in enumerate(rows):
        idx[r, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        pad[r, : len(ids)] = False
    e = encoder.embed_tokens(idx)
    read = torch.tensor(reads, dtype=torch.long)
    if variant != "shallow":
        slot = torch.zeros((len(rows), T), dtype=torch.bool)
        if variant == "replace":
            slot[torch.arange(len(rows)), read] = True
        else:
            slot[:, 1] = True
        e = torch.where(slot[..., None], v_forms[:, None, :].to(e.dtype), e)
    return Assembled(e, pad, read)


def context_vectors(encoder: EncoderModel, vocab: Vocabulary, variant: str,
                    items: Sequence[tuple[list[int], int]], v_forms: torch.Tensor | None = None,
                    chunk: int = 256) -> torch.Tensor:
    """Final-layer state at the (shifted) mask position for each item."""
    outs = []
    for s in range(0, len(items), chunk):
        part = items[s:s + chunk]
        vf = None if v_forms is None else v_forms[s:s + chunk]
        a = assemble_inputs(encoder, vocab, variant, part, vf)
        h = encoder.forward_embeddings(a.embeddings, a.pad_mask)
        outs.append(h[torch.arange(len(part)), a.read])
    return torch.cat(outs, dim=0)


def context_embedding(encoder: EncoderModel, vocab: Vocabulary, variant: str, ids: list[int],
                      i: int, v_form: torch.Tensor | None = None) -> torch.Tensor:
    vf = None if v_form is None else v_form[None]
    return context_vectors(encoder, vocab, variant, [(ids, i)], vf)[0]


class BertramModel(nn.Module):
    """Form table, linear map, gate and aggregator around a frozen encoder.

    The encoder is held by reference, not registered as a submodule, so its
    weights are never part of this model's parameters or checkpoints.
    """

    def __init__(self, encoder: EncoderModel | None, vocab: Vocabulary, table: NGramEmbeddingTable,
                 variant: str = "add", seed: int = 0):
        super().__init__()
        if variant not in VARIANTS:
            raise DomainError(f"unknown variant {variant!r}")
        d = table.weight.shape[1]
        self.variant = variant
        self.vocab = vocab
        self.__dict__["encoder"] = encoder
        self.ngrams = table
        self.A = nn.Parameter(torch.eye(d))
        self.b = nn.Parameter(torch.zeros(d))
        self.gate_x = nn.Parameter(torch.zeros(2 * d))
        self.gate_y = nn.Parameter(torch.zeros(()))
        self.aggregator = AttentionAggregator(d, seed=seed)
        self.completed_stages: list[int] = []

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def set_encoder(self, encoder: EncoderModel | None) -> None:
        self.__dict__["encoder"] = encoder

    def linear(self, v: torch.Tensor) -> torch.Tensor:
        return v @ self.A.T + self.b

    def form(self, words, training=False, generator=None) -> torch.Tensor:
        return self.ngrams(words, training, generator)

    def per_context(self, h: torch.Tensor, v_form: torch.Tensor | None, variant: str) -> torch.Tensor:
        """Single-context embeddings from context states ``h`` (and matching form rows)."""
        if variant == "shallow" and v_form is not None:
            alpha = gate(v_form, h, self.gate_x, self.gate_y)
            return fcm_combine(v_form, h, alpha, self.A, self.b)
        return self.linear(h)

    def aggregate(self, per_ctx: torch.Tensor, groups: Sequence[int]):
        """Attentive mimicking for consecutive groups of rows of sizes ``groups``."""
        W, M = len(groups), max(groups)
        vs = per_ctx.new_zeros((W, M, per_ctx.shape[-1]))
        mask = torch.zeros((W, M), dtype=torch.bool)
        r = 0
        for w, m in enumerate(groups):
            vs[w, :m] = per_ctx[r:r + m]
            mask[w, :m] = True
            r += m
        return self.aggregator(vs, mask)

    def save(self, path, stage_tag: str | None = None, extra: dict | None = None) -> None:
        meta = {
            "kind": "bertram", "variant": self.variant, "d": self.d,
            "grams": self.ngrams.grams, "min_n": self.ngrams.min_n, "max_n": self.ngrams.max_n,
            "dropout": self.ngrams.dropout, "completed_stages": self.completed_stages,
            "stage": stage_tag, "vocab_sha256": self.vocab.digest(),
        }
        meta.update(extra or {})
        checkpoint.save_module(path, self, meta)

    @classmethod
    def load(cls, path, encoder: EncoderModel | None, vocab: Vocabulary,
             variant: str | None = None) -> "BertramModel":
        meta, arrays = checkpoint.read_checkpoint(path)
        table = NGramEmbeddingTable(meta["grams"], meta["d"], meta["min_n"], meta["max_n"],
                                    meta["dropout"])
        model = cls(encoder, vocab, table, variant or meta["variant"])
        checkpoint.load_into_module(model, arrays)
        model.completed_stages = list(meta.get("completed_stages", []))
        return model


def _contexts_items(word: str, contexts, vocab: Vocabulary) -> list[tuple[list[int], int]]:
    if not contexts:
        return [([vocab.cls_id, vocab.mask_id, vocab.sep_id], 1)]
    return [prepare_masked_context(word, c, vocab) for c in contexts]


def single_context_embedding(model: BertramModel, word: str, context: Sequence[str]) -> torch.Tensor:
    return infer(model, word, [context])


def infer(model: BertramModel, word: str, contexts: Sequence[Sequence[str]],
          variant: str | None = None) -> torch.Tensor:
    """Embedding for ``word`` from its form and contexts.

    With no contexts, a bare ``[CLS] [MASK] [SEP]`` context stands in so every
    variant still sees the form through its usual slot.
    """
    variant = variant or model.variant
    items = _contexts_items(word, contexts, model.vocab)
    v_form = model.form([word])
    forms = v_form.expand(len(items), -1)
    h = context_vectors(model.encoder, model.vocab, variant, items,
                        None if variant == "shallow" else forms)
    per_ctx = model.per_context(h, forms if variant == "shallow" else None, variant)
    _, v = attentive_mimicking(per_ctx, model.aggregator)
    return v


def infer_context_only(model: BertramModel, word: str, contexts) -> torch.Tensor:
    """Context-part prediction (SHALLOW contexts, no form), as optimised in the first stage."""
    items = _contexts_items(word, contexts, model.vocab)
    h = context_vectors(model.encoder, model.vocab, "shallow", items)
    return attentive_mimicking(model.linear(h), model.aggregator)[1]
