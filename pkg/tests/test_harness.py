import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bertram_lab.core_math import DomainError
from bertram_lab.harness.downstream import C_MAX, build_inputs, eval_downstream
from bertram_lab.harness.inject import InjectionPlan, inject_replace, inject_slash, restore_replace
from bertram_lab.harness.probe import ClozeProbe, best_rank, mrr, probe_inputs, run_probe
from bertram_lab.harness.report import EvalReport
from bertram_lab.rarify import BaselineClassifier, RarifiedInstance
from bertram_lab.text import collect_contexts


def test_mrr_examples():
    assert mrr([1, 2, 4]) == pytest.approx(7 / 12)
    assert mrr([1, 1, 1]) == 1.0
    assert mrr([None, 1]) == 0.5
    with pytest.raises(DomainError):
        mrr([])


@given(st.lists(st.one_of(st.none(), st.integers(1, 500)), min_size=1, max_size=30))
def test_mrr_bounds_and_monotone(ranks):
    m = mrr(ranks)
    assert 0.0 <= m <= 1.0
    assert mrr(ranks + [1]) >= min(m, 1.0)


def test_best_rank_uses_best_target_and_cutoff():
    scores = torch.tensor([0.1, 0.9, 0.5, 0.7])
    assert best_rank(scores, [0, 2]) == 3
    assert best_rank(scores, [1]) == 1
    assert best_rank(scores, [0], cutoff=3) is None


def test_probe_validation():
    with pytest.raises(DomainError):
        ClozeProbe(["a", "x", "is"], "x", ["y"])
    with pytest.raises(DomainError):
        ClozeProbe(["a", "___", "___"], "a", ["y"])
    with pytest.raises(DomainError):
        ClozeProbe(["a", "x", "___"], "x", [])


def _seq(n, d=3):
    return torch.arange(n * d, dtype=torch.float32).view(n, d)


def test_replace_worked_example():
    e = _seq(8)
    v = torch.full((3,), -1.0)
    out = inject_replace(e, InjectionPlan("replace", [(2, 5)], [v]))
    assert out.shape[0] == 5
    assert torch.equal(out[2], v) and torch.equal(out[3], e[6])
    one = inject_replace(e, InjectionPlan("replace", [(4, 4)], [v]))
    assert one.shape[0] == 8 and torch.equal(one[4], v)


@st.composite
def plans(draw):
    n = draw(st.integers(2, 20))
    cuts = sorted(draw(st.sets(st.integers(0, n - 1), max_size=8)))
    spans = []
    for a, b in zip(cuts[::2], cuts[1::2]):
        spans.append((a, b))
    if len(cuts) % 2:
        spans.append((cuts[-1], cuts[-1])) if not spans or spans[-1][1] < cuts[-1] else None
    perm = draw(st.permutations(range(len(spans))))
    return n, [spans[k] for k in perm]


@given(plans())
@settings(max_examples=150)
def test_replace_restore_identity(case):
    n, spans = case
    e = torch.randn(n, 3)
    vecs = [torch.randn(3) for _ in spans]
    plan = InjectionPlan("replace", spans, vecs)
    out = inject_replace(e, plan)
    assert out.shape[0] == n - sum(j - i for i, j in spans)
    assert torch.equal(restore_replace(out, plan, e), e)


def _slash_oracle(e, spans, vecs, slash):
    ends = {j: v for (i, j), v in zip(spans, vecs)}
    rows = []
    for k in range(e.shape[0]):
        rows.append(e[k])
        if k in ends:
            rows += [slash, ends[k]]
    return torch.stack(rows)


@given(plans())
@settings(max_examples=150)
def test_slash_matches_rebuild(case):
    n, spans = case
    e = torch.randn(n, 3)
    vecs = [torch.randn(3) for _ in spans]
    slash = torch.full((3,), 9.0)
    out = inject_slash(e, InjectionPlan("slash", spans, vecs), slash)
    assert out.shape[0] == n + 2 * len(spans)
    assert torch.equal(out, _slash_oracle(e, spans, vecs, slash))


def test_slash_single_span_and_identity():
    e, slash, v = _seq(6), torch.full((3,), 9.0), torch.full((3,), -1.0)
    out = inject_slash(e, InjectionPlan("slash", [(2, 3)], [v]), slash)
    assert out.shape[0] == 8 and torch.equal(out[4], slash) and torch.equal(out[5], v)
    assert torch.equal(inject_slash(e, InjectionPlan("slash"), slash), e)
    assert torch.equal(inject_replace(e, InjectionPlan()), e)


def test_slash_crop_keeps_spans_and_ends():
    e, slash, v = _seq(12), torch.full((3,), 9.0), torch.full((3,), -1.0)
    out = inject_slash(e, InjectionPlan("slash", [(5, 6)], [v]), slash, max_len=10)
    assert out.shape[0] == 10
    assert torch.equal(out[0], e[0]) and torch.equal(out[-1], e[-1])
    rows = [tuple(r.tolist()) for r in out]
    for needed in (e[5], e[6], slash, v):
        assert tuple(needed.tolist()) in rows
    with pytest.raises(DomainError):
        inject_slash(e, InjectionPlan("slash", [(1, 9)], [v]), slash, max_len=8)


def test_invalid_plans():
    e = _seq(5)
    v = torch.zeros(3)
    with pytest.raises(DomainError):
        inject_replace(e, InjectionPlan("replace", [(0, 2), (2, 3)], [v, v]))
    with pytest.raises(DomainError):
        inject_replace(e, InjectionPlan("replace", [(3, 5)], [v]))
    with pytest.raises(DomainError):
        inject_replace(e, InjectionPlan("replace", [(0, 0)], []))


def test_report_serialisation_is_stable():
    r = EvalReport("accuracy", 3)
    r.add("b", 0.5, 2)
    r.add("a", 1.0, 1)
    r.series["c_max"] = [{"x": "1", "score": 0.0, "count": 0}]
    assert r.to_json() == EvalReport(**r.to_dict()).to_json()
    assert r.to_csv().splitlines()[:3] == ["series,x,score,count", "slice,a,1.000000,1", "slice,b,0.500000,2"]


# probing ------------------------------------------------------------------

def _probes(lab, n=30):
    return [ClozeProbe(**p) for p in lab.world.probes[:n]]


def test_probe_without_embedder_is_plain_ranking(lab):
    probes = _probes(lab)
    rep = run_probe(lab.encoder, lab.vocab, probes, lab.corpus)
    ranks = []
    with torch.no_grad():
        for p in probes:
            ids, m, _ = probe_inputs(p, lab.vocab)
            scores = lab.encoder.mlm_logits(lab.encoder.forward_ids(ids))[m]
            ranks.append(best_rank(scores, [lab.vocab[t] for t in p.targets if t in lab.vocab]))
    assert rep.score("all") == pytest.approx(mrr(ranks))
    assert sum(rep.slices[b]["count"] for b in ("rare", "medium", "frequent") if b in rep.slices) == rep.total


def test_probe_identity_embedder_changes_nothing(lab):
    probes = [p for p in _probes(lab, 80) if len(lab.vocab.tokenize_word(p.keyword)) == 1]
    assert probes
    ident = lambda w, c: lab.encoder.embed_tokens(lab.vocab.tokenize_word(w))[0]
    a = run_probe(lab.encoder, lab.vocab, probes, lab.corpus)
    b = run_probe(lab.encoder, lab.vocab, probes, lab.corpus, ident)
    assert a.slices == b.slices


def test_probe_flags_keywords_without_contexts(lab):
    p = ClozeProbe(["a", "zzqq", "is", "a", "kind", "of", "___"], "zzqq", ["fruit"])
    rep = run_probe(lab.encoder, lab.vocab, [p], lab.corpus, lambda w, c: torch.zeros(lab.encoder.d))
    assert rep.notes["flagged_no_context"] == ["zzqq"]


# downstream ---------------------------------------------------------------

def _single_token_test_set(lab):
    words = [w for w in lab.corpus.frequency
             if len(lab.vocab.tokenize_word(w)) == 1 and lab.corpus.count(w) >= 5 and w.isalpha()]
    words = sorted(words)[:20]
    out = []
    for k, w in enumerate(words):
        sent = lab.corpus.sentences[lab.corpus.index[w][0]]
        pos = sent.index(w)
        out.append(RarifiedInstance(list(sent), k % 8, [(pos, "orig", w)], None, k))
    return out


def test_noop_injection_reproduces_predictions(lab):
    clf = BaselineClassifier(lab.encoder, lab.vocab, 8, seed=1)
    test = _single_token_test_set(lab)
    ident = lambda w, c: clf.encoder.embed_tokens(lab.vocab.tokenize_word(w)).mean(0)
    kw = dict(rare_threshold=10**9, seed=0)
    plain = eval_downstream(clf, test, lab.corpus, None, **kw)
    noop = eval_downstream(clf, test, lab.corpus, ident, "replace", **kw)
    assert plain.notes["predictions"] == noop.notes["predictions"]
    assert noop.notes["injected_words"] == len(test)
    for inst in test:
        a = build_inputs(clf, inst, None, "replace", lab.corpus, None, 10**9, 32, 0)
        b = build_inputs(clf, inst, ident, "replace", lab.corpus, None, 10**9, 32, 0)
        assert torch.equal(a, b)


def test_slash_adds_two_positions_per_span(lab):
    clf = BaselineClassifier(lab.encoder, lab.vocab, 8)
    for inst in _single_token_test_set(lab)[:5]:
        emb = lambda w, c: torch.zeros(lab.encoder.d)
        plain = build_inputs(clf, inst, None, "slash", lab.corpus, None, 10**9, 32, 0)
        slash = build_inputs(clf, inst, emb, "slash", lab.corpus, None, 10**9, 32, 0)
        assert slash.shape[0] == plain.shape[0] + 2


def test_slices_partition_and_cmax_identity(lab):
    clf = BaselineClassifier(lab.encoder, lab.vocab, 8)
    test = _single_token_test_set(lab)
    rep = eval_downstream(clf, test, lab.corpus, None, intervals=((0, 10), (10, 50), (50, math.inf)))
    assert rep.slices["c_max:inf"] == rep.slices["all"]
    parts = [k for k in rep.slices if k.startswith("interval:")]
    assert sum(rep.slices[k]["count"] for k in parts) == rep.total
    counts = [rep.slices[f"c_max:{'inf' if c == math.inf else int(c)}"]["count"] for c in C_MAX]
    assert counts == sorted(counts)
    for s in rep.slices.values():
        assert 0.0 <= s["score"] <= 1.0


def test_indomain_adds_contexts(lab):
    clf = BaselineClassifier(lab.encoder, lab.vocab, 8)
    test = _single_token_test_set(lab)
    for inst in test:
        inst.text.append("indomainmarker")
    emb = lambda w, c: torch.zeros(lab.encoder.d)
    kw = dict(rare_threshold=10**9, max_contexts=None)
    a = eval_downstream(clf, test, lab.corpus, emb, **kw)
    b = eval_downstream(clf, test, lab.corpus, emb, indomain=True, **kw)
    assert b.notes["mean_contexts"] > a.notes["mean_contexts"]
    w = test[0].words[test[0].provenance[0][0]]
    extra = [inst.text for inst in test]
    assert len(collect_contexts(w, lab.corpus, None, extra)) > len(collect_contexts(w, lab.corpus))
