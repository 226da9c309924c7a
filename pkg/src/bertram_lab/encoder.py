"""Miniature BERT-style encoder with a tied masked-language-model head."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .core_math import Adam, DomainError, backward
from .text import Corpus, Vocabulary

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    vocab_size: int
    n_layers: int = 2
    d: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d % self.n_heads:
            raise DomainError(f"hidden size {self.d} not divisible by {self.n_heads} heads")
        if self.max_len < 8:
            raise DomainError("max_len must be at least 8")


@dataclass
class PretrainConfig:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 2e-3
    warmup_fraction: float = 0.1
    select_prob: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1
    seed: int = 0


class EncoderLayer(nn.Module):
    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.ln1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, d_ff)
        self.ff2 = nn.Linear(d_ff, d)
        self.ln2 = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None) -> torch.Tensor:
        B, T, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.view(B, T, self.n_heads, hd).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hd).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if pad_mask is not None:
            scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        ctx = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = self.ln1(x + self.out(ctx))
        return self.ln2(x + self.ff2(F.gelu(self.ff1(x))))


class EncoderModel(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        g = torch.Generator().manual_seed(config.seed)
        d = config.d
        self.tok = nn.Parameter(torch.randn(config.vocab_size, d, generator=g) * 0.02)
        self.pos = nn.Parameter(torch.randn(config.max_len, d, generator=g) * 0.02)
        self.ln_in = nn.LayerNorm(d)
        self.layers = nn.ModuleList(
            EncoderLayer(d, config.n_heads, config.d_ff) for _ in range(config.n_layers)
        )
        for layer in self.layers:
            for lin in (layer.qkv, layer.out, layer.ff1, layer.ff2):
                with torch.no_grad():
                    lin.weight.copy_(torch.randn(lin.weight.shape, generator=g) * 0.02)
                    lin.bias.zero_()
        self.head_dense = nn.Linear(d, d)
        with torch.no_grad():
            self.head_dense.weight.copy_(torch.randn(d, d, generator=g) * 0.02)
            self.head_dense.bias.zero_()
        self.head_ln = nn.LayerNorm(d)
        self.head_bias = nn.Parameter(torch.zeros(config.vocab_size))
        self.eval()

    @property
    def d(self) -> int:
        return self.config.d

    def embed_tokens(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            raise DomainError(f"token id out of range [0, {self.config.vocab_size})")
        return self.tok[ids]

    def forward_embeddings(self, e: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Final-layer states for a ``(T, d)`` or ``(B, T, d)`` sequence of input vectors."""
        single = e.dim() == 2
        if single:
            e = e.unsqueeze(0)
            if pad_mask is not None:
                pad_mask = pad_mask.unsqueeze(0)
        T = e.shape[1]
        if T > self.config.max_len:
            raise DomainError(f"sequence length {T} exceeds max_len {self.config.max_len}")
        x = self.ln_in(e + self.pos[:T])
        for layer in self.layers:
            x = layer(x, pad_mask)
        return x[0] if single else x

    def forward_ids(self, ids, pad_mask=None) -> torch.Tensor:
        return self.forward_embeddings(self.embed_tokens(ids), pad_mask)

    def mlm_logits(self, h: torch.Tensor) -> torch.Tensor:
        z = self.head_ln(F.gelu(self.head_dense(h)))
        return z @ self.tok.T + self.head_bias

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None

    def save(self, path, vocab: Vocabulary | None = None, extra: dict | None = None) -> None:
        meta = {"kind": "encoder", "config": asdict(self.config)}
        if vocab is not None:
            meta["vocab_sha256"] = vocab.digest()
        meta.update(extra or {})
        checkpoint.save_module(path, self, meta)

    @classmethod
    def load(cls, path) -> "EncoderModel":
        meta, arrays = checkpoint.read_checkpoint(path)
        model = cls(EncoderConfig(**meta["config"]))
        checkpoint.load_into_module(model, arrays)
        return model


def encode_sentence(words, vocab: Vocabulary, max_len: int) -> list[int]:
    ids = vocab.tokenize(words)[: max_len - 2]
    return [vocab.cls_id, *ids, vocab.sep_id]


def pad_batch(seqs: list[list[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    T = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    mask = torch.ones((len(seqs), T), dtype=torch.bool)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[b, : len(s)] = False
    return ids, mask


def mlm_mask(ids: np.ndarray, rng: np.random.Generator, vocab_size: int, mask_id: int,
             protected: np.ndarray, select_prob=0.15, mask_prob=0.8, random_prob=0.1):
    """BERT masking over a padded id array.

    Returns ``(inputs, labels, action)`` where labels are -100 off selection and
    ``action`` is 0 unselected, 1 masked, 2 random token, 3 kept.
    """
    selectable = ~protected
    selected = (rng.random(ids.shape) < select_prob) & selectable
    r = rng.random(ids.shape)
    to_mask = selected & (r < mask_prob)
    to_rand = selected & (r >= mask_prob) & (r < mask_prob + random_prob)
    inputs = ids.copy()
    inputs[to_mask] = mask_id
    inputs[to_rand] = rng.integers(0, vocab_size, size=int(to_rand.sum()))
    labels = np.where(selected, ids, -100)
    action = np.zeros(ids.shape, dtype=np.int8)
    action[to_mask] = 1
    action[to_rand] = 2
    action[selected & ~to_mask & ~to_rand] = 3
    return inputs, labels, action


def pretrain_mlm(corpus: Corpus, vocab: Vocabulary, config: EncoderConfig,
                 train: PretrainConfig | None = None) -> tuple[EncoderModel, list[float]]:
    """Masked-LM pretraining. Returns the model and the mean loss of each epoch."""
    train = train or PretrainConfig()
    if len(corpus.sentences) < train.batch_size:
        raise DomainError(
            f"corpus has {len(corpus.sentences)} sentences, fewer than one batch ({train.batch_size})"
        )
    torch.manual_seed(train.seed)
    model = EncoderModel(config)
    model.train()
    seqs = [encode_sentence(s, vocab, config.max_len) for s in corpus.sentences]
    special = np.zeros(len(vocab), dtype=bool)
    special[vocab.special_ids] = True
    rng = np.random.default_rng(train.seed)
    order_rng = random.Random(train.seed)
    n_batches = math.ceil(len(seqs) / train.batch_size)
    opt = Adam(list(model.parameters()), lr=train.lr, warmup_fraction=train.warmup_fraction,
               total_steps=n_batches * train.epochs)
    history = []
    for epoch in range(train.epochs):
        order = list(range(len(seqs)))
        order_rng.shuffle(order)
        total, count = 0.0, 0
        for b in range(n_batches):
            batch = [seqs[i] for i in order[b * train.batch_size:(b + 1) * train.batch_size]]
            ids, pad = pad_batch(batch, vocab.pad_id)
            ids_np = ids.numpy()
            protected = special[ids_np]
            inputs, labels, _ = mlm_mask(ids_np, rng, len(vocab), vocab.mask_id, protected,
                                         train.select_prob, train.mask_prob, train.random_prob)
            labels_t = torch.from_numpy(labels)
            if not (labels_t >= 0).any():
                continue
            h = model.forward_ids(torch.from_numpy(inputs), pad)
            sel = labels_t >= 0
            logits = model.mlm_logits(h[sel])
            loss = F.cross_entropy(logits, labels_t[sel])
            backward(loss)
            opt.step()
            total += loss.item()
            count += 1
        history.append(total / max(count, 1))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, history[-1])
    model.eval()
    return model, history


def target_embedding(word: str, vocab: Vocabulary, model: EncoderModel) -> torch.Tensor:
    ids = vocab.tokenize_word(word)
    if len(ids) != 1:
        raise DomainError(f"{word!r} tokenizes into {len(ids)} pieces; targets must be single tokens")
    return model.embed_tokens(ids)[0]
