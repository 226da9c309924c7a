"""Synthetic toy world with a planted synonym lexicon.

Every noun has a category and a region. The category is only visible through
the words around it; the region is visible both in some contexts and in the
noun's spelling (a region-specific suffix). Frequent nouns get definitional
sentences ("a X is a kind of fruit"); rare and medium nouns never do, so the
cloze probe "a X is a kind of ___" can only be solved for them by reading
their contexts. Rare nouns are planted as synonyms of frequent nouns sharing
category and region, and a few misspellings of frequent nouns are sprinkled in.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import atomic_write_text

CATEGORIES = {
    "fruit": (["ripe", "sweet", "juicy"], ["eaten", "peeled", "picked"]),
    "animal": (["wild", "furry", "hungry"], ["fed", "hunted", "tamed"]),
    "tool": (["sharp", "heavy", "rusty"], ["used", "sharpened", "repaired"]),
    "vehicle": (["fast", "loud", "shiny"], ["driven", "towed", "parked"]),
    "garment": (["warm", "woven", "torn"], ["worn", "stitched", "ironed"]),
    "drink": (["cold", "bitter", "fizzy"], ["poured", "sipped", "brewed"]),
    "building": (["tall", "old", "empty"], ["built", "rented", "painted"]),
    "instrument": (["tuned", "wooden", "brass"], ["played", "strummed", "practiced"]),
}
REGIONS = {"north": "ux", "south": "ela", "east": "ori", "west": "ang"}

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"


@dataclass
class ToyConfig:
    n_frequent: int = 320
    n_medium: int = 120
    n_rare: int = 400
    n_misspelled: int = 80
    frequent_range: tuple[int, int] = (110, 160)
    medium_range: tuple[int, int] = (12, 90)
    rare_range: tuple[int, int] = (1, 9)
    n_dataset: int = 1800
    seed: int = 0


@dataclass
class Noun:
    word: str
    category: str
    region: str
    tier: str
    source: str | None = None


@dataclass
class ToyWorld:
    nouns: list[Noun]
    sentences: list[list[str]]
    lexicon: list[dict]
    probes: list[dict]
    dataset: list[dict]
    config: ToyConfig = field(default_factory=ToyConfig)

    def by_tier(self, tier: str) -> list[Noun]:
        return [n for n in self.nouns if n.tier == tier]

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        paths = {
            "corpus": out / "corpus.txt",
            "lexicon": out / "lexicon.jsonl",
            "probes": out / "probes.jsonl",
            "dataset": out / "dataset.jsonl",
            "nouns": out / "nouns.jsonl",
        }
        atomic_write_text(paths["corpus"], "".join(" ".join(s) + "\n" for s in self.sentences))
        atomic_write_text(paths["lexicon"], _jsonl(self.lexicon))
        atomic_write_text(paths["probes"], _jsonl(self.probes))
        atomic_write_text(paths["dataset"], _jsonl(self.dataset))
        atomic_write_text(paths["nouns"], _jsonl(n.__dict__ for n in self.nouns))
        return paths


def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _stem(rng: random.Random) -> str:
    n_syl = rng.choice((2, 2, 3))
    return "".join(rng.choice(CONSONANTS) + rng.choice(VOWELS) for _ in range(n_syl))


def _misspell(word: str, rng: random.Random) -> str:
    i = rng.randrange(1, len(word) - 2)
    return word[:i] + word[i + 1] + word[i] + word[i + 2:]


def _sentence(noun: Noun, rng: random.Random, allow_definition: bool,
              colon: bool = True) -> list[str]:
    adjs, verbs = CATEGORIES[noun.category]
    adj, verb, n, r = rng.choice(adjs), rng.choice(verbs), noun.word, noun.region
    kinds = ["cat"] * 30 + ["region"] * 20 + ["both"] * 10 + ["generic"] * 20
    if colon:
        kinds += ["colon"] * 12
    if allow_definition:
        kinds += ["def"] * 12
    kind = rng.choice(kinds)
    if kind == "cat":
        return rng.choice([
            ["the", adj, n, "was", verb, "today"],
            ["she", verb, "the", adj, n],
            ["my", n, "was", adj, "and", verb],
        ])
    if kind == "region":
        return rng.choice([
            ["the", n, "comes", "from", "the", r],
            ["people", "in", "the", r, "like", "the", n],
        ])
    if kind == "both":
        return ["the", adj, n, "from", "the", r, "was", verb]
    if kind == "generic":
        return rng.choice([
            ["i", "saw", "the", n, "yesterday"],
            ["we", "talked", "about", "the", n],
            ["there", "is", "a", n, "here"],
        ])
    if kind == "colon":
        return [n, ":", *_sentence(noun, rng, allow_definition, colon=False)]
    return ["a", n, "is", "a", "kind", "of", noun.category]


def _dataset_text(noun: Noun, rng: random.Random) -> list[str]:
    return rng.choice([
        ["i", "saw", "the", noun.word, "yesterday"],
        ["we", "talked", "about", "the", noun.word],
        ["there", "is", "a", noun.word, "here"],
        ["the", noun.word, "comes", "from", "the", noun.region],
        ["people", "in", "the", noun.region, "like", "the", noun.word],
    ])


def make_world(config: ToyConfig | None = None) -> ToyWorld:
    cfg = config or ToyConfig()
    rng = random.Random(cfg.seed)
    reserved = {w for adjs, verbs in CATEGORIES.values() for w in adjs + verbs}
    reserved |= set(CATEGORIES) | set(REGIONS)
    reserved |= {"the", "was", "today", "she", "my", "and", "comes", "from", "people", "in",
                 "like", "i", "saw", "yesterday", "we", "talked", "about", "there", "is", "a",
                 "here", "kind", "of"}
    used = set(reserved)
    cats, regions = sorted(CATEGORIES), sorted(REGIONS)

    def fresh(category: str, region: str, tier: str, source=None) -> Noun:
        while True:
            w = _stem(rng) + REGIONS[region]
            if w not in used:
                used.add(w)
                return Noun(w, category, region, tier, source)

    nouns = [fresh(cats[i % len(cats)], regions[(i // len(cats)) % len(regions)], "frequent")
             for i in range(cfg.n_frequent)]
    frequent = list(nouns)
    for _ in range(cfg.n_medium):
        src = rng.choice(frequent)
        nouns.append(fresh(src.category, src.region, "medium", src.word))
    for _ in range(cfg.n_rare):
        src = rng.choice(frequent)
        nouns.append(fresh(src.category, src.region, "rare", src.word))
    for src in rng.sample(frequent, cfg.n_misspelled):
        w = _misspell(src.word, rng)
        if w not in used:
            used.add(w)
            nouns.append(Noun(w, src.category, src.region, "misspelled", src.word))

    ranges = {"frequent": cfg.frequent_range, "medium": cfg.medium_range,
              "rare": cfg.rare_range, "misspelled": cfg.rare_range}
    sentences = []
    for noun in nouns:
        lo, hi = ranges[noun.tier]
        for _ in range(rng.randint(lo, hi)):
            sentences.append(_sentence(noun, rng, allow_definition=noun.tier == "frequent"))
    rng.shuffle(sentences)

    synonyms: dict[str, dict[str, str]] = {}
    for noun in nouns:
        if noun.source is not None:
            kind = "msp" if noun.tier == "misspelled" else "wn"
            synonyms.setdefault(noun.source, {})[noun.word] = kind
    lexicon = [{"word": w, "synonyms": sorted(s), "kinds": {k: s[k] for k in sorted(s)}}
               for w, s in sorted(synonyms.items())]

    probes = [{"pattern": ["a", n.word, "is", "a", "kind", "of", "___"], "keyword": n.word,
               "targets": [n.category]}
              for n in nouns if n.tier in ("rare", "medium", "frequent")]

    with_syn = [n for n in frequent if n.word in synonyms]
    dataset = []
    for _ in range(cfg.n_dataset):
        noun = rng.choice(with_syn)
        dataset.append({"text": _dataset_text(noun, rng), "label": cats.index(noun.category)})

    return ToyWorld(nouns, sentences, lexicon, probes, dataset, cfg)
