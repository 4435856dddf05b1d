import json
import math
import shutil

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from arabic_absa.encoding import encode_pair
from arabic_absa.errors import ContractError, LoadError
from arabic_absa.model import (ClassifierHead, EncoderConfig, forward, forward_batch,
                               load_checkpoint, load_encoder, loss_and_grads,
                               save_checkpoint, verify_probe)

from conftest import TINY, make_instance

LABELS3 = {"positive": 0, "negative": 1, "neutral": 2}


@pytest.fixture
def encoder(tiny_checkpoint):
    return load_encoder(EncoderConfig(str(tiny_checkpoint), **TINY))


@pytest.fixture
def example(tok):
    inst = make_instance(aspect="الخدمة", sentence="الخدمة سيئة ولكن الفندق رائع",
                         dataset_id="hotels", polarity="negative")
    return encode_pair(inst, tok)


def test_load_reports_dimensions(encoder):
    assert encoder.num_layers == 2 and encoder.hidden_size == 32
    assert encoder.bert.config.hidden_dropout_prob == 0.3


def test_base_dimensions_are_default():
    cfg = EncoderConfig("x")
    assert (cfg.num_layers, cfg.num_heads, cfg.hidden_size) == (12, 12, 768)


def test_dimension_mismatch(tiny_checkpoint):
    with pytest.raises(LoadError, match=r"expected .*\(12, 12, 768\).*found \(2, 2, 32\)"):
        load_encoder(EncoderConfig(str(tiny_checkpoint)))


def test_missing_and_truncated_checkpoint(tiny_checkpoint, tmp_path):
    with pytest.raises(LoadError):
        load_encoder(EncoderConfig(str(tmp_path / "nothing"), **TINY))
    broken = tmp_path / "broken"
    shutil.copytree(tiny_checkpoint, broken)
    weights = broken / "model.safetensors"
    weights.write_bytes(weights.read_bytes()[: weights.stat().st_size // 2])
    with pytest.raises(LoadError):
        load_encoder(EncoderConfig(str(broken), **TINY))


def test_frozen_encoder_has_no_trainable_parameters(tiny_checkpoint):
    frozen = load_encoder(EncoderConfig(str(tiny_checkpoint), fine_tune=False, **TINY))
    assert frozen.trainable_parameters() == []
    tuned = load_encoder(EncoderConfig(str(tiny_checkpoint), fine_tune=True, **TINY))
    assert len(tuned.trainable_parameters()) > 0


def test_cls_state_is_first_row(encoder, example):
    from arabic_absa.model import collate
    b = collate([example])
    out = encoder(b["token_ids"], b["segment_ids"], b["attention_mask"])
    assert torch.equal(out.cls_state[0], out.hidden_states[0, 0])
    assert torch.isfinite(out.hidden_states).all()


def test_zero_head_gives_uniform(encoder, example):
    for k in (2, 3, 4):
        labels = dict(list({"positive": 0, "negative": 1, "neutral": 2, "conflict": 3}.items())[:k])
        head = ClassifierHead(32, labels)
        with torch.no_grad():
            head.W.zero_()
        P = forward(encoder, head, example)
        np.testing.assert_allclose(P, 1.0 / k, atol=1e-7)


def test_large_bias_dominates(encoder, example):
    head = ClassifierHead(32, {"positive": 0, "negative": 1, "neutral": 2, "conflict": 3})
    with torch.no_grad():
        head.W.zero_()
        head.b.copy_(torch.tensor([10.0, 0, 0, 0]))
    P = forward(encoder, head, example)
    # analytic value e^10 / (e^10 + 3)
    assert P[0] == pytest.approx(math.exp(10) / (math.exp(10) + 3), abs=1e-6)
    assert P[0] > 0.999


def test_forward_deterministic_without_dropout(encoder, example):
    head = ClassifierHead(32, LABELS3, dropout=0.5, seed=1)
    a = forward(encoder, head, example)
    b = forward(encoder, head, example)
    assert np.array_equal(a, b)
    assert abs(a.sum() - 1) < 1e-6
    assert ((a > 0) & (a < 1)).all()


def test_dropout_active_is_stochastic(tiny_checkpoint, example):
    enc = load_encoder(EncoderConfig(str(tiny_checkpoint), **TINY))
    head = ClassifierHead(32, LABELS3, dropout=0.5, seed=1, init_std=1.0)
    torch.manual_seed(0)
    draws = {tuple(forward(enc, head, example, dropout_active=True).round(6)) for _ in range(5)}
    assert len(draws) > 1


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 2**16))
def test_softmax_shift_invariance(shift, seed):
    head = ClassifierHead(8, LABELS3, seed=seed, init_std=1.0, dtype=torch.float64)
    h = torch.randn(5, 8, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    P = head(h)
    with torch.no_grad():
        head.b.add_(shift)
    Q = head(h)
    assert torch.allclose(P, Q, atol=1e-6)
    assert (P.sum(-1) - 1).abs().max() < 1e-6


def test_loss_values():
    p = torch.tensor([0.0, 1.0, 0.0], requires_grad=True)
    loss, _ = loss_and_grads(p, 1, [p])
    assert loss == 0.0
    u = torch.full((4,), 0.25, requires_grad=True)
    loss, _ = loss_and_grads(u, 2, [u])
    assert loss == pytest.approx(math.log(4), abs=1e-7)
    with pytest.raises(ContractError):
        loss_and_grads(u, 4, [u])
    with pytest.raises(ContractError):
        loss_and_grads(u, -1, [u])


def _head_loss(W, b, h, gold):
    z = h @ W + b
    z = z - z.max()
    return -(z[gold] - np.log(np.exp(z).sum()))


def test_head_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    hidden, k = 6, 4
    head = ClassifierHead(hidden, {"positive": 0, "negative": 1, "neutral": 2, "conflict": 3},
                          seed=3, init_std=0.5, dtype=torch.float64)
    h = torch.tensor(rng.normal(size=hidden))
    gold = 2
    _, (gW, gb) = loss_and_grads(head(h), gold, [head.W, head.b])
    W, b, hn = head.W.detach().numpy().copy(), head.b.detach().numpy().copy(), h.numpy()
    eps = 1e-6
    num_W = np.zeros_like(W)
    for i in range(hidden):
        for j in range(k):
            Wp, Wm = W.copy(), W.copy()
            Wp[i, j] += eps
            Wm[i, j] -= eps
            num_W[i, j] = (_head_loss(Wp, b, hn, gold) - _head_loss(Wm, b, hn, gold)) / (2 * eps)
    num_b = np.zeros_like(b)
    for j in range(k):
        bp, bm = b.copy(), b.copy()
        bp[j] += eps
        bm[j] -= eps
        num_b[j] = (_head_loss(W, bp, hn, gold) - _head_loss(W, bm, hn, gold)) / (2 * eps)
    for analytic, numeric in ((gW.numpy(), num_W), (gb.numpy(), num_b)):
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
        assert np.max(np.abs(analytic - numeric)) < 1e-4
        assert np.max(rel[np.abs(numeric) > 1e-6]) < 1e-4


def test_gradients_reach_encoder_only_when_fine_tuning(tiny_checkpoint, example):
    for fine_tune in (True, False):
        enc = load_encoder(EncoderConfig(str(tiny_checkpoint), fine_tune=fine_tune, **TINY))
        head = ClassifierHead(32, LABELS3)
        probs = forward_batch(enc, head, [example])
        params = list(head.parameters()) + enc.trainable_parameters()
        loss, grads = loss_and_grads(probs, [example.label_id], params)
        assert len(grads) == (2 + len(list(enc.bert.parameters())) if fine_tune else 2)
        assert loss > 0


def test_checkpoint_roundtrip(encoder, tok, tmp_path, example):
    head = ClassifierHead(32, LABELS3, dropout=0.1, seed=5, init_std=0.5)
    probe = [example] + [encode_pair(make_instance(aspect="الفندق", sentence="الفندق رائع",
                                                   idx=i, dataset_id="hotels"), tok)
                         for i in range(3)]
    manifest = save_checkpoint(encoder, head, tok, tmp_path / "ckpt", probe=probe,
                               extra={"input_mode": "pair"})
    assert manifest["fine_tune"] is True and manifest["dropout_rate"] == 0.3
    assert manifest["head_dropout"] == 0.1
    stored = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
    assert stored["fine_tune"] is True and stored["dropout_rate"] == 0.3
    enc2, head2, tok2, m2 = load_checkpoint(tmp_path / "ckpt")
    assert m2["input_mode"] == "pair"
    before = np.stack([forward(encoder, head, e) for e in probe])
    after = np.stack([forward(enc2, head2, e) for e in probe])
    assert np.max(np.abs(before - after)) < 1e-6
    assert verify_probe(tmp_path / "ckpt") < 1e-6
    assert tok2.vocabulary == tok.vocabulary


def test_checkpoint_label_map_mismatch(encoder, tok, tmp_path):
    head = ClassifierHead(32, LABELS3)
    save_checkpoint(encoder, head, tok, tmp_path / "ckpt")
    mpath = tmp_path / "ckpt" / "manifest.json"
    m = json.loads(mpath.read_text())
    m["label_map"]["conflict"] = 3
    mpath.write_text(json.dumps(m))
    with pytest.raises(LoadError, match="head shape"):
        load_checkpoint(tmp_path / "ckpt")


def test_incomplete_checkpoint_lists_missing(encoder, tok, tmp_path):
    head = ClassifierHead(32, LABELS3)
    save_checkpoint(encoder, head, tok, tmp_path / "ckpt")
    (tmp_path / "ckpt" / "head.safetensors").unlink()
    (tmp_path / "ckpt" / "vocab.txt").unlink()
    with pytest.raises(LoadError, match=r"head\.safetensors.*vocab\.txt"):
        load_checkpoint(tmp_path / "ckpt")
