"""Dataset rarification: split, augmented baseline finetuning, greedy test-set generation."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .core_math import Adam, DomainError, backward, set_frozen
from .encoder import EncoderConfig, EncoderModel
from .text import MASK, SLASH, Corpus, Vocabulary

log = logging.getLogger(__name__)

MAX_MASKED = 5


@dataclass
class LabeledInstance:
    text: list[str]
    label: int
    text_b: list[str] | None = None
    uid: int = -1

    @property
    def words(self) -> list[str]:
        return self.text + (self.text_b or [])

    def with_words(self, words: Sequence[str]) -> "LabeledInstance":
        n = len(self.text)
        words = list(words)
        return LabeledInstance(words[:n], self.label,
                               None if self.text_b is None else words[n:], self.uid)

    def to_record(self) -> dict:
        rec = {"text": self.text, "label": self.label, "uid": self.uid}
        if self.text_b is not None:
            rec["text_b"] = self.text_b
        return rec


@dataclass
class RarifiedInstance:
    text: list[str]
    label: int
    provenance: list[tuple[int, str, str]]
    text_b: list[str] | None = None
    uid: int = -1

    @property
    def words(self) -> list[str]:
        return self.text + (self.text_b or [])

    def original(self) -> LabeledInstance:
        words = self.words
        for pos, orig, _ in self.provenance:
            words[pos] = orig
        n = len(self.text)
        return LabeledInstance(words[:n], self.label,
                               None if self.text_b is None else words[n:], self.uid)

    def to_record(self) -> dict:
        rec = {"text": self.text, "label": self.label,
               "provenance": [list(p) for p in self.provenance], "uid": self.uid}
        if self.text_b is not None:
            rec["text_b"] = self.text_b
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "RarifiedInstance":
        return cls(list(rec["text"]), int(rec["label"]),
                   [(int(p), o, r) for p, o, r in rec["provenance"]],
                   rec.get("text_b"), int(rec.get("uid", -1)))


@dataclass(frozen=True)
class Discard:
    reason: str


def load_dataset(path) -> list[LabeledInstance]:
    out = []
    for uid, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if line.strip():
            rec = json.loads(line)
            out.append(LabeledInstance(list(rec["text"]), int(rec["label"]), rec.get("text_b"), uid))
    return out


class SubstitutionLexicon:
    """Word -> rare synonyms, restricted to synonyms below ``threshold`` in a reference corpus."""

    def __init__(self, entries: dict[str, Iterable[str]], threshold: int = 100,
                 corpus: Corpus | None = None, kinds: dict[str, str] | None = None):
        self.threshold = threshold
        self.kinds = dict(kinds or {})
        self.dropped = 0
        self.entries: dict[str, list[str]] = {}
        for w, syns in entries.items():
            keep = []
            for s in sorted(set(syns)):
                if s == w or (corpus is not None and corpus.count(s) >= threshold):
                    self.dropped += 1
                    continue
                keep.append(s)
            if keep:
                self.entries[w] = keep

    def __call__(self, word: str) -> list[str]:
        return self.entries.get(word, [])

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def kind(self, synonym: str) -> str:
        return self.kinds.get(synonym, "wn")

    @classmethod
    def load(cls, path, threshold: int = 100, corpus: Corpus | None = None) -> "SubstitutionLexicon":
        entries, kinds = {}, {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            entries.setdefault(rec["word"], []).extend(rec["synonyms"])
            kinds.update(rec.get("kinds", {}))
        return cls(entries, threshold, corpus, kinds)


def split_dataset(data: Sequence[LabeledInstance], lexicon, seed: int = 0):
    """Candidates are instances with a substitutable word; at least a third goes to training."""
    if len(data) < 3:
        raise DomainError("need at least 3 instances to split")
    subst = [k for k, x in enumerate(data) if any(lexicon(w) for w in x.words)]
    if not subst:
        raise DomainError("rarification impossible: no instance has a substitutable word")
    need = math.ceil(len(data) / 3)
    cand = set(subst)
    train = set(range(len(data))) - cand
    if len(train) < need:
        rng = random.Random(seed)
        moved = rng.sample(sorted(cand), need - len(train))
        cand -= set(moved)
        train |= set(moved)
    return [data[k] for k in sorted(train)], [data[k] for k in sorted(cand)]


def mask_word(words: Sequence[str], position: int) -> list[str]:
    if not 0 <= position < len(words):
        raise DomainError(f"position {position} outside a {len(words)}-word input")
    out = list(words)
    out[position] = MASK
    return out


@dataclass
class AugmentConfig:
    mask_prob: float = 0.05
    dup_prob: float = 0.10
    dup_mask_prob: float = 0.25


@dataclass
class AugmentStats:
    words: int = 0
    masked: int = 0
    duplicated: int = 0
    copies: int = 0
    copies_masked: int = 0

    def add(self, other: "AugmentStats") -> None:
        for k in self.__dict__:
            setattr(self, k, getattr(self, k) + getattr(other, k))


def augment_words(words: Sequence[str], rng: random.Random,
                  cfg: AugmentConfig | None = None) -> tuple[list[str], AugmentStats]:
    """Mask a word with ``mask_prob``; otherwise turn it into ``w / w`` with ``dup_prob``,
    masking each copy independently with ``dup_mask_prob``."""
    cfg = cfg or AugmentConfig()
    out: list[str] = []
    st = AugmentStats(words=len(words))
    for w in words:
        if rng.random() < cfg.mask_prob:
            out.append(MASK)
            st.masked += 1
        elif rng.random() < cfg.dup_prob:
            st.duplicated += 1
            pair = []
            for _ in range(2):
                st.copies += 1
                if rng.random() < cfg.dup_mask_prob:
                    st.copies_masked += 1
                    pair.append(MASK)
                else:
                    pair.append(w)
            out.extend([pair[0], SLASH, pair[1]])
        else:
            out.append(w)
    return out, st


class Classifier(Protocol):
    def predict_proba_batch(self, inputs: Sequence[tuple[list[str], list[str] | None]]) -> np.ndarray: ...


class BaselineClassifier(nn.Module):
    """Encoder copy plus a linear head on the ``[CLS]`` state."""

    def __init__(self, encoder: EncoderModel, vocab: Vocabulary, n_labels: int, seed: int = 0):
        super().__init__()
        self.encoder = copy.deepcopy(encoder)
        self.vocab = vocab
        self.n_labels = n_labels
        g = torch.Generator().manual_seed(seed + 11)
        self.head = nn.Linear(encoder.d, n_labels)
        with torch.no_grad():
            self.head.weight.copy_(torch.randn(n_labels, encoder.d, generator=g) * 0.02)
            self.head.bias.zero_()
        self.eval()

    @property
    def max_len(self) -> int:
        return self.encoder.config.max_len

    def encode(self, text: Sequence[str], text_b: Sequence[str] | None = None):
        """Ids plus the inclusive token span of every word (pair words continue the count)."""
        v = self.vocab
        ids_a, spans_a = v.word_spans(text, offset=1)
        ids = [v.cls_id, *ids_a, v.sep_id]
        spans = list(spans_a)
        if text_b is not None:
            ids_b, spans_b = v.word_spans(text_b, offset=len(ids))
            ids += [*ids_b, v.sep_id]
            spans += spans_b
        return ids, spans

    def _truncate(self, ids: list[int]) -> list[int]:
        if len(ids) <= self.max_len:
            return ids
        return ids[: self.max_len - 1] + [self.vocab.sep_id]

    def logits_embeddings(self, seqs: Sequence[torch.Tensor]) -> torch.Tensor:
        T = max(s.shape[0] for s in seqs)
        d = self.encoder.d
        e = seqs[0].new_zeros((len(seqs), T, d))
        pad = torch.ones((len(seqs), T), dtype=torch.bool)
        for b, s in enumerate(seqs):
            e[b, : s.shape[0]] = s
            pad[b, : s.shape[0]] = False
        h = self.encoder.forward_embeddings(e, pad)
        return self.head(h[:, 0])

    def logits_ids(self, batch: Sequence[list[int]]) -> torch.Tensor:
        return self.logits_embeddings([self.encoder.embed_tokens(self._truncate(ids)) for ids in batch])

    def predict_proba_batch(self, inputs) -> np.ndarray:
        with torch.no_grad():
            ids = [self.encode(t, tb)[0] for t, tb in inputs]
            out = []
            for s in range(0, len(ids), 128):
                out.append(torch.softmax(self.logits_ids(ids[s:s + 128]).double(), dim=-1))
            return torch.cat(out).numpy()

    def predict_proba(self, text, text_b=None) -> np.ndarray:
        return self.predict_proba_batch([(text, text_b)])[0]

    def predict_proba_embeddings(self, seqs: Sequence[torch.Tensor]) -> np.ndarray:
        with torch.no_grad():
            return torch.softmax(self.logits_embeddings(seqs).double(), dim=-1).numpy()

    def embedding_parameters(self) -> list[nn.Parameter]:
        return [self.encoder.tok, self.encoder.pos]

    def save(self, path, extra: dict | None = None) -> None:
        from dataclasses import asdict
        meta = {"kind": "classifier", "config": asdict(self.encoder.config),
                "n_labels": self.n_labels, "vocab_sha256": self.vocab.digest()}
        meta.update(extra or {})
        checkpoint.save_module(path, self, meta)

    @classmethod
    def load(cls, path, vocab: Vocabulary) -> "BaselineClassifier":
        meta, arrays = checkpoint.read_checkpoint(path)
        model = cls(EncoderModel(EncoderConfig(**meta["config"])), vocab, meta["n_labels"])
        checkpoint.load_into_module(model, arrays)
        return model


@dataclass
class FinetuneConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    warmup_fraction: float = 0.1
    augment: AugmentConfig = field(default_factory=AugmentConfig)


def finetune_baseline(classifier: BaselineClassifier, train: Sequence[LabeledInstance],
                      seed: int = 0, cfg: FinetuneConfig | None = None) -> tuple[list[float], AugmentStats]:
    """Cross-entropy finetuning with fresh augmentations every epoch; embeddings stay frozen."""
    cfg = cfg or FinetuneConfig()
    rng = random.Random(seed)
    torch.manual_seed(seed)
    params = list(classifier.parameters())
    set_frozen(params, False)
    set_frozen(classifier.embedding_parameters(), True)
    trainable = [p for p in params if p.requires_grad]
    n_batches = math.ceil(len(train) / cfg.batch_size)
    opt = Adam(trainable, lr=cfg.lr, warmup_fraction=cfg.warmup_fraction,
               total_steps=n_batches * cfg.epochs)
    stats = AugmentStats()
    history = []
    classifier.train()
    for _ in range(cfg.epochs):
        order = list(range(len(train)))
        rng.shuffle(order)
        total = 0.0
        for b in range(n_batches):
            chunk = [train[k] for k in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            ids = []
            for x in chunk:
                a, st_a = augment_words(x.text, rng, cfg.augment)
                stats.add(st_a)
                bb = None
                if x.text_b is not None:
                    bb, st_b = augment_words(x.text_b, rng, cfg.augment)
                    stats.add(st_b)
                ids.append(classifier.encode(a, bb)[0])
            labels = torch.tensor([x.label for x in chunk], dtype=torch.long)
            loss = F.cross_entropy(classifier.logits_ids(ids), labels)
            backward(loss)
            opt.step()
            total += loss.item() * len(chunk)
        history.append(total / len(train))
        log.info("finetune epoch loss %.4f", history[-1])
    classifier.eval()
    set_frozen(params, True)
    return history, stats


def select_replacements(instance: LabeledInstance, classifier: Classifier, lexicon,
                        seed=0) -> RarifiedInstance | Discard:
    """Greedy masking search for the words the classifier depends on.

    At each round every not-yet-masked substitutable position is masked on top
    of the positions chosen so far; the one giving the lowest probability of
    the gold label is kept (lowest position on ties). Once the prediction flips,
    each chosen position receives a random rare synonym.
    """
    words = instance.words
    n_a = len(instance.text)

    def split(ws):
        return (ws[:n_a], None if instance.text_b is None else ws[n_a:])

    y = instance.label
    p0 = classifier.predict_proba_batch([split(words)])[0]
    if int(np.argmax(p0)) != y:
        return Discard("misclassified")
    chosen: list[int] = []
    current = list(words)
    for _ in range(MAX_MASKED):
        options = [j for j in range(len(words)) if j not in chosen and lexicon(words[j])]
        if not options:
            break
        trials = [mask_word(current, j) for j in options]
        probs = classifier.predict_proba_batch([split(t) for t in trials])
        best = min(range(len(options)), key=lambda k: (probs[k][y], options[k]))
        chosen.append(options[best])
        current = trials[best]
        if int(np.argmax(probs[best])) != y:
            rng = random.Random(f"{seed}:{instance.uid}")
            out = list(words)
            prov = []
            for pos in sorted(chosen):
                repl = rng.choice(lexicon(words[pos]))
                out[pos] = repl
                prov.append((pos, words[pos], repl))
            a, b = split(out)
            return RarifiedInstance(a, y, prov, b, instance.uid)
    return Discard("no_flip")


def rarify_dataset(candidates: Sequence[LabeledInstance], lexicon, classifier: Classifier,
                   seed: int = 0) -> tuple[list[RarifiedInstance], dict]:
    emitted: list[RarifiedInstance] = []
    counts = {"processed": 0, "emitted": 0, "discarded": 0, "misclassified": 0}
    for inst in sorted(candidates, key=lambda x: x.uid):
        counts["processed"] += 1
        out = select_replacements(inst, classifier, lexicon, seed)
        if isinstance(out, Discard):
            counts["misclassified" if out.reason == "misclassified" else "discarded"] += 1
        else:
            emitted.append(out)
            counts["emitted"] += 1
    n_repl = [len(r.provenance) for r in emitted]
    report = dict(counts)
    report["mean_replacements"] = float(np.mean(n_repl)) if n_repl else 0.0
    report["replacement_histogram"] = {str(k): n_repl.count(k) for k in sorted(set(n_repl))}
    return emitted, report
