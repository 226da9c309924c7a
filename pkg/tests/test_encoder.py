import math
import random

import numpy as np
import pytest
import torch

from bertram_lab.checkpoint import read_checkpoint
from bertram_lab.core_math import Adam, DomainError, backward, grad_check
from bertram_lab.encoder import (EncoderConfig, EncoderModel, PretrainConfig, encode_sentence,
                                 mlm_mask, pretrain_mlm, target_embedding)
from bertram_lab.text import Corpus, build_vocab

ANIMALS = ["cat", "dog", "cow", "pig"]
SOUNDS = {"cat": "meows", "dog": "barks", "cow": "moos", "pig": "oinks"}


def _template_corpus(n=640, seed=0):
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        a = rng.choice(ANIMALS)
        out.append(["the", rng.choice(["big", "small"]), a, SOUNDS[a], "loudly"])
    return Corpus.from_sentences(out)


@pytest.fixture(scope="module")
def tiny():
    corpus = _template_corpus()
    vocab = build_vocab(corpus, target_size=80, min_whole_word_freq=20)
    cfg = EncoderConfig(len(vocab), n_layers=1, d=32, n_heads=2, d_ff=64, max_len=16, seed=0)
    model, hist = pretrain_mlm(corpus, vocab, cfg, PretrainConfig(epochs=12, batch_size=32, lr=5e-3))
    return corpus, vocab, cfg, model, hist


def _model(V=50, seed=0):
    return EncoderModel(EncoderConfig(V, n_layers=2, d=16, n_heads=4, d_ff=32, max_len=12, seed=seed))


def test_config_validation():
    with pytest.raises(DomainError):
        EncoderConfig(10, d=10, n_heads=4)
    with pytest.raises(DomainError):
        EncoderConfig(10, max_len=4)


def test_embed_tokens_rows():
    m = _model()
    e = m.embed_tokens([3, 3, 7])
    assert torch.equal(e[0], e[1])
    assert torch.equal(e[2], m.tok[7])
    with pytest.raises(DomainError):
        m.embed_tokens([50])
    with pytest.raises(DomainError):
        m.embed_tokens([-1])


def test_embed_tokens_matches_checkpoint_rows(tmp_path):
    m = _model()
    m.save(tmp_path / "m.ckpt")
    _, arrays = read_checkpoint(tmp_path / "m.ckpt")
    table = arrays["tok"][0]
    np.testing.assert_array_equal(m.embed_tokens([4, 9]).detach().numpy(), table[[4, 9]])


def test_forward_shapes_and_paths():
    m = _model()
    ids = torch.tensor([1, 5, 6, 7, 2])
    h = m.forward_ids(ids)
    assert h.shape == (5, 16)
    assert torch.equal(h, m.forward_embeddings(m.embed_tokens(ids)))
    assert torch.equal(h, m.forward_embeddings(m.embed_tokens(ids)))
    batched = m.forward_embeddings(m.embed_tokens(ids)[None])
    torch.testing.assert_close(batched[0], h, rtol=0, atol=1e-6)
    assert m.mlm_logits(h).shape == (5, 50)


def test_positions_matter():
    m = _model()
    a = m.forward_ids([1, 5, 6, 2])
    b = m.forward_ids([1, 6, 5, 2])
    assert not torch.allclose(a[1], b[2])


def test_overlength_input_rejected():
    with pytest.raises(DomainError):
        _model().forward_embeddings(torch.zeros(13, 16))


def test_padding_does_not_leak():
    m = _model()
    e = m.embed_tokens([1, 5, 6, 2])
    alone = m.forward_embeddings(e)
    padded = torch.cat([e, m.embed_tokens([0, 0])])[None]
    mask = torch.tensor([[False] * 4 + [True] * 2])
    torch.testing.assert_close(m.forward_embeddings(padded, mask)[0, :4], alone, rtol=0, atol=1e-6)


def test_untrained_entropy_near_uniform():
    V = 2000
    m = EncoderModel(EncoderConfig(V, seed=1))
    ids = torch.randint(0, V, (4, 20), generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        p = torch.softmax(m.mlm_logits(m.forward_ids(ids)), -1)
        ent = -(p * p.log()).sum(-1)
    assert (ent > 0.95 * math.log(V)).all()


def test_gradient_reaches_injected_vectors():
    m = _model().double()
    m.freeze()
    e = m.embed_tokens([1, 5, 6, 2]).detach().clone().requires_grad_(True)
    w = torch.randn(16, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    assert grad_check(lambda: (m.forward_embeddings(e)[1] @ w), [e], n_samples=30) < 1e-3


def test_mask_statistics_over_100k_tokens():
    rng = np.random.default_rng(0)
    ids = rng.integers(7, 500, size=(1000, 100))
    _, labels, action = mlm_mask(ids, rng, 500, 3, np.zeros(ids.shape, dtype=bool))
    sel = action > 0
    assert abs(sel.mean() - 0.15) < 0.01
    frac = [(action[sel] == k).mean() for k in (1, 2, 3)]
    assert abs(frac[0] - 0.8) < 0.02 and abs(frac[1] - 0.1) < 0.02 and abs(frac[2] - 0.1) < 0.02
    assert ((labels >= 0) == sel).all()
    assert (labels[sel] == ids[sel]).all()


def test_protected_positions_never_selected():
    rng = np.random.default_rng(1)
    ids = rng.integers(0, 50, size=(200, 30))
    protected = ids < 10
    inputs, labels, _ = mlm_mask(ids, rng, 50, 3, protected)
    assert (labels[protected] == -100).all()
    assert (inputs[protected] == ids[protected]).all()


def test_pretraining_lowers_loss(tiny):
    hist = tiny[4]
    assert hist[-1] < hist[0]


def test_pretrained_model_predicts_template_token(tiny):
    corpus, vocab, cfg, model, _ = tiny
    hits = 0
    for a in ANIMALS:
        ids = encode_sentence(["the", "big", a, "[MASK]", "loudly"], vocab, cfg.max_len)
        ids[4] = vocab.mask_id
        with torch.no_grad():
            scores = model.mlm_logits(model.forward_ids(ids))[4]
        top5 = set(scores.topk(5).indices.tolist())
        hits += vocab[SOUNDS[a]] in top5
    assert hits == len(ANIMALS)


def test_pretraining_is_deterministic(tiny, tmp_path):
    corpus, vocab, cfg, model, hist = tiny
    again, hist2 = pretrain_mlm(corpus, vocab, cfg, PretrainConfig(epochs=12, batch_size=32, lr=5e-3))
    assert hist == hist2
    model.save(tmp_path / "a.ckpt")
    again.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_pretrain_needs_a_full_batch():
    corpus = _template_corpus(10)
    vocab = build_vocab(corpus, 80, 5)
    with pytest.raises(DomainError, match="fewer than one batch"):
        pretrain_mlm(corpus, vocab, EncoderConfig(len(vocab), d=16, n_heads=2, max_len=8),
                     PretrainConfig(batch_size=64))


def test_frozen_encoder_unchanged_by_steps():
    m = _model()
    before = [p.detach().clone() for p in m.parameters()]
    m.freeze()
    opt = Adam(list(m.parameters()), lr=0.1)
    x = torch.randn(4, 16, requires_grad=True)
    backward(m.forward_embeddings(x).sum())
    opt.step()
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_target_embedding(tiny):
    _, vocab, _, model, _ = tiny
    assert torch.equal(target_embedding("cat", vocab, model), model.embed_tokens(vocab.tokenize_word("cat"))[0])
    with pytest.raises(DomainError, match="3 pieces"):
        target_embedding("qxz", vocab, model)
