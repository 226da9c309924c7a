"""Corpus ingestion, wordpiece vocabulary, tokenization, character n-grams, contexts."""

from __future__ import annotations

import hashlib
import json
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

from .core_math import DomainError

PAD, CLS, SEP, MASK, COLON, SLASH = "[PAD]", "[CLS]", "[SEP]", "[MASK]", ":", "/"
UNK = "[UNK]"
SPECIALS = (PAD, CLS, SEP, MASK, COLON, SLASH, UNK)
CONT = "##"
BOUNDARY = "<S>"

RARE_LIMIT = 10
MEDIUM_LIMIT = 100


@dataclass
class Corpus:
    sentences: list[list[str]]
    frequency: Counter = field(default_factory=Counter)
    index: dict[str, list[int]] = field(default_factory=dict)

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sequence[str]]) -> "Corpus":
        sents = [list(s) for s in sentences]
        freq: Counter = Counter()
        index: dict[str, list[int]] = defaultdict(list)
        for sid, sent in enumerate(sents):
            freq.update(sent)
            for w in dict.fromkeys(sent):
                index[w].append(sid)
        return cls(sents, freq, dict(index))

    def count(self, word: str) -> int:
        return self.frequency.get(word, 0)

    def to_json(self) -> str:
        return json.dumps({"sentences": [" ".join(s) for s in self.sentences]})

    @classmethod
    def from_json(cls, text: str) -> "Corpus":
        return cls.from_sentences(s.split() for s in json.loads(text)["sentences"])


def ingest_corpus(path, lowercase: bool = True) -> Corpus:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read corpus {path}: {exc}") from exc
    sents = []
    for line in raw.splitlines():
        if lowercase:
            line = line.lower()
        words = line.split()
        if words:
            sents.append(words)
    if not sents:
        raise DomainError(f"corpus {path} contains no sentences")
    return Corpus.from_sentences(sents)


class Vocabulary:
    """Wordpiece inventory with dense ids. Non-initial pieces carry the ``##`` prefix."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise DomainError("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self.ids:
                raise DomainError(f"vocabulary lacks special token {s}")
        self._cache: dict[str, tuple[str, ...]] = {}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def __getitem__(self, token: str) -> int:
        return self.ids[token]

    pad_id = property(lambda self: self.ids[PAD])
    cls_id = property(lambda self: self.ids[CLS])
    sep_id = property(lambda self: self.ids[SEP])
    mask_id = property(lambda self: self.ids[MASK])
    colon_id = property(lambda self: self.ids[COLON])
    slash_id = property(lambda self: self.ids[SLASH])
    unk_id = property(lambda self: self.ids[UNK])

    @property
    def special_ids(self) -> list[int]:
        return [self.ids[s] for s in SPECIALS]

    def word_pieces(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is None:
            cached = self._cache[word] = tuple(_greedy_pieces(word, self.ids))
        return cached

    def tokenize_word(self, word: str) -> list[int]:
        return [self.ids[p] for p in self.word_pieces(word)]

    def tokenize(self, text) -> list[int]:
        words = text.split() if isinstance(text, str) else text
        out: list[int] = []
        for w in words:
            out.extend(self.tokenize_word(w))
        return out

    def word_spans(self, words: Sequence[str], offset: int = 0) -> tuple[list[int], list[tuple[int, int]]]:
        """Token ids plus, per word, its inclusive ``(start, end)`` token span."""
        ids: list[int] = []
        spans = []
        for w in words:
            piece_ids = self.tokenize_word(w)
            spans.append((offset + len(ids), offset + len(ids) + len(piece_ids) - 1))
            ids.extend(piece_ids)
        return ids, spans

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text)["tokens"])


def _greedy_pieces(word: str, inventory) -> list[str]:
    if word in inventory:
        return [word]
    pieces = []
    start = 0
    n = len(word)
    while start < n:
        end = n
        piece = None
        while end > start:
            cand = word[start:end] if start == 0 else CONT + word[start:end]
            if cand in inventory:
                piece = cand
                break
            end -= 1
        if piece is None:
            pieces.append(UNK)
            start += 1
        else:
            pieces.append(piece)
            start = end
    return pieces


def build_vocab(corpus: Corpus, target_size: int = 2000, min_whole_word_freq: int = 100,
                max_fragment_len: int = 6) -> Vocabulary:
    """Specials, the corpus alphabet (initial and ``##`` forms), whole frequent words,
    then the most frequent non-initial fragments until ``target_size`` is reached.

    Whole words are admitted in frequency order (ties lexicographic); if they alone
    overflow the budget the tail is cut.
    """
    alphabet = sorted({ch for w in corpus.frequency for ch in w})
    base = list(SPECIALS)
    for ch in alphabet:
        for tok in (ch, CONT + ch):
            if tok not in base:
                base.append(tok)
    if target_size < len(base):
        raise DomainError(
            f"target_size {target_size} below the {len(base)} specials and alphabet pieces"
        )
    seen = set(base)
    tokens = list(base)
    whole = sorted((w for w, c in corpus.frequency.items() if c >= min_whole_word_freq),
                   key=lambda w: (-corpus.frequency[w], w))
    for w in whole:
        if len(tokens) >= target_size:
            break
        if w not in seen:
            tokens.append(w)
            seen.add(w)

    frags: Counter = Counter()
    for w, c in corpus.frequency.items():
        if w in seen:
            continue
        for i in range(1, len(w)):
            for j in range(i + 2, min(len(w), i + max_fragment_len) + 1):
                frags[CONT + w[i:j]] += c
    for frag, _ in sorted(frags.items(), key=lambda kv: (-kv[1], kv[0])):
        if len(tokens) >= target_size:
            break
        if frag not in seen:
            tokens.append(frag)
            seen.add(frag)
    return Vocabulary(tokens)


@dataclass(frozen=True)
class NGramSet:
    word: str
    grams: tuple[str, ...]


def _symbols(word: str) -> list[str]:
    return [BOUNDARY, *word, BOUNDARY]


@lru_cache(maxsize=200_000)
def _ngrams(word: str, min_n: int, max_n: int) -> tuple[str, ...]:
    syms = _symbols(word)
    L = len(syms)
    grams = []
    for n in range(min_n, max_n + 1):
        for i in range(0, L - n + 1):
            grams.append("".join(syms[i:i + n]))
    return tuple(grams)


def extract_ngrams(word: str, min_n: int = 3, max_n: int = 5) -> NGramSet:
    if not word:
        raise DomainError("cannot extract n-grams of an empty word")
    if not 1 <= min_n <= max_n:
        raise DomainError(f"invalid n-gram range [{min_n}, {max_n}]")
    return NGramSet(word, _ngrams(word, min_n, max_n))


def collect_contexts(word: str, corpus: Corpus, max_contexts: int | None = None,
                     extra: Iterable[Sequence[str]] | None = None, seed: int = 0) -> list[list[str]]:
    """Distinct sentences containing ``word`` (corpus first, then ``extra``).

    Above ``max_contexts`` a seeded uniform subsample is returned in original order.
    """
    seen = set()
    out: list[list[str]] = []
    for sid in corpus.index.get(word, ()):
        key = tuple(corpus.sentences[sid])
        if key not in seen:
            seen.add(key)
            out.append(corpus.sentences[sid])
    for sent in extra or ():
        key = tuple(sent)
        if word in key and key not in seen:
            seen.add(key)
            out.append(list(sent))
    if max_contexts is not None and len(out) > max_contexts:
        rng = random.Random(f"{seed}:{word}")
        keep = sorted(rng.sample(range(len(out)), max_contexts))
        out = [out[i] for i in keep]
    return out


def frequency_bucket(count: int) -> str:
    if count < 0:
        raise DomainError("negative count")
    if count < RARE_LIMIT:
        return "rare"
    if count < MEDIUM_LIMIT:
        return "medium"
    return "frequent"
