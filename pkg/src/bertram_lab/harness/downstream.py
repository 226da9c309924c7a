"""Accuracy of the frozen baseline classifier on a rarified test set, with optional injection."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch

from ..rarify import BaselineClassifier, RarifiedInstance
from ..text import Corpus, collect_contexts
from .inject import InjectionPlan, inject_replace, inject_slash
from .probe import Embedder
from .report import EvalReport

C_MAX = (1, 2, 4, 8, 16, 32, 64, 128, math.inf)
INTERVALS = ((0, 125), (125, 250), (250, 500), (500, math.inf))


def _fmt(x) -> str:
    return "inf" if x == math.inf else str(int(x))


def indomain_texts(test_set: Sequence[RarifiedInstance]) -> list[list[str]]:
    """Unlabeled test texts as extra contexts; pair members count separately."""
    out = []
    for inst in test_set:
        out.append(list(inst.text))
        if inst.text_b is not None:
            out.append(list(inst.text_b))
    return out


def build_inputs(classifier: BaselineClassifier, inst: RarifiedInstance, embedder: Embedder | None,
                 strategy: str, corpus: Corpus, extra, rare_threshold: int, max_contexts: int | None,
                 seed: int, context_log: list | None = None) -> torch.Tensor:
    ids, spans = classifier.encode(inst.text, inst.text_b)
    if embedder is None:
        return classifier.encoder.embed_tokens(classifier._truncate(ids))
    words = inst.words
    plan = InjectionPlan(strategy)
    for pos, _, repl in inst.provenance:
        if corpus.count(words[pos]) >= rare_threshold:
            continue
        ctxs = collect_contexts(words[pos], corpus, max_contexts, extra=extra, seed=seed)
        if context_log is not None:
            context_log.append((words[pos], len(ctxs)))
        plan.spans.append(spans[pos])
        plan.vectors.append(embedder(words[pos], ctxs))
    e = classifier.encoder.embed_tokens(ids)
    if not plan.spans:
        return classifier.encoder.embed_tokens(classifier._truncate(ids))
    if strategy == "slash":
        slash = classifier.encoder.embed_tokens([classifier.vocab.slash_id])[0]
        return inject_slash(e, plan, slash, classifier.max_len)
    out = inject_replace(e, plan)
    if out.shape[0] > classifier.max_len:
        out = torch.cat([out[: classifier.max_len - 1], out[-1:]])
    return out


def eval_downstream(classifier: BaselineClassifier, test_set: Sequence[RarifiedInstance],
                    corpus: Corpus, embedder: Embedder | None = None, strategy: str = "replace",
                    indomain: bool = False, kinds=None, rare_threshold: int = 100,
                    max_contexts: int | None = 32, seed: int = 0, c_max=C_MAX,
                    intervals=INTERVALS, batch_size: int = 64) -> EvalReport:
    """Accuracy for All, per substitution kind, per ``c_max`` and per count interval.

    Interval slices keep instances whose substituted words all fall in one
    interval; the rest land in ``interval:mixed`` so the interval slices
    partition the test set.
    """
    extra = indomain_texts(test_set) if indomain else None
    ctx_log: list = []
    correct = []
    with torch.no_grad():
        seqs = [build_inputs(classifier, inst, embedder, strategy, corpus, extra, rare_threshold,
                             max_contexts, seed, ctx_log) for inst in test_set]
        preds = []
        for s in range(0, len(seqs), batch_size):
            probs = classifier.predict_proba_embeddings(seqs[s:s + batch_size])
            preds.extend(int(k) for k in np.argmax(probs, axis=1))
    correct = np.array([p == inst.label for p, inst in zip(preds, test_set)], dtype=bool)
    counts = [[corpus.count(r) for _, _, r in inst.provenance] for inst in test_set]

    report = EvalReport("accuracy", len(test_set))
    report.notes["predictions"] = preds

    def add(name, mask):
        mask = np.asarray(mask, dtype=bool)
        n = int(mask.sum())
        report.add(name, float(correct[mask].mean()) if n else 0.0, n)
        return n

    add("all", np.ones(len(test_set), dtype=bool))
    kind_of = (kinds or (lambda s: "wn"))
    for k in ("msp", "wn"):
        add(f"kind:{k}", [any(kind_of(r) == k for _, _, r in inst.provenance) for inst in test_set])

    series = []
    for c in c_max:
        mask = [bool(cs) and max(cs) < c for cs in counts]
        n = add(f"c_max:{_fmt(c)}", mask)
        series.append({"x": _fmt(c), "score": report.score(f"c_max:{_fmt(c)}"), "count": n})
    report.series["c_max"] = series

    assigned = np.zeros(len(test_set), dtype=bool)
    series = []
    for lo, hi in intervals:
        mask = np.array([bool(cs) and all(lo <= x < hi for x in cs) for cs in counts], dtype=bool)
        assigned |= mask
        name = f"[{_fmt(lo)},{_fmt(hi)})"
        n = add(f"interval:{name}", mask)
        series.append({"x": name, "score": report.score(f"interval:{name}"), "count": n})
    add("interval:mixed", ~assigned)
    report.series["interval"] = series
    if ctx_log:
        report.notes["mean_contexts"] = float(np.mean([n for _, n in ctx_log]))
        report.notes["injected_words"] = len(ctx_log)
    return report
