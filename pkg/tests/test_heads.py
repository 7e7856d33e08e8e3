import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mlvpt.heads import ASLConfig, ClassHeads, asl, classify, joint_loss, predict
from mlvpt.nncore import ShapeError

D64 = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D64)


def test_classify_examples():
    c = rand(2, 4, 3)
    assert (classify(c, torch.zeros(4, 3, dtype=D64), torch.zeros(4, dtype=D64)) == 0.5).all()
    out = classify(c, torch.zeros(4, 3, dtype=D64), torch.full((4,), 20.0, dtype=D64))
    assert (out > 1 - 1e-8).all()


def test_classify_matches_per_class_loop():
    c, W, b = rand(3, 5, 4), rand(5, 4, seed=1), rand(5, seed=2)
    out = classify(c, W, b)
    for i in range(3):
        for k in range(5):
            logit = sum(float(W[k, d]) * float(c[i, k, d]) for d in range(4)) + float(b[k])
            assert out[i, k].item() == pytest.approx(1 / (1 + math.exp(-logit)), abs=1e-12)
    with pytest.raises(ShapeError):
        classify(c, W[:, :3], b)


def test_heads_are_not_shared():
    torch.manual_seed(0)
    a, b = ClassHeads(4, 8), ClassHeads(4, 8)
    assert not torch.equal(a.weight, b.weight)
    assert sum(p.numel() for p in a.parameters()) == 4 * (8 + 1)


def test_asl_spot_values():
    half = torch.tensor([0.5], dtype=D64)
    assert asl(half, torch.tensor([1.0], dtype=D64)).item() == pytest.approx(0.693147, abs=1e-6)
    assert asl(half, torch.tensor([0.0], dtype=D64)).item() == pytest.approx(0.173287, abs=1e-6)
    assert ASLConfig() == ASLConfig(lambda_pos=0.0, lambda_neg=2.0, prob_clamp_eps=1e-7)


def test_asl_reduces_to_bce():
    rng = np.random.default_rng(0)
    f = torch.as_tensor(rng.uniform(0.01, 0.99, size=1000))
    y = torch.as_tensor(rng.integers(0, 2, size=1000).astype(np.float64))
    cfg = ASLConfig(lambda_pos=0.0, lambda_neg=0.0)
    ours = torch.stack([asl(f[i : i + 1], y[i : i + 1], cfg) for i in range(1000)])
    bce = torch.nn.functional.binary_cross_entropy(f, y, reduction="none")
    assert (ours - bce).abs().max() < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-4, 1 - 1e-4), st.floats(1e-4, 1 - 1e-4), st.floats(0, 4), st.floats(0, 4))
def test_asl_nonnegative_and_monotone(f1, f2, lp, ln):
    cfg = ASLConfig(lambda_pos=lp, lambda_neg=ln)
    lo, hi = sorted((f1, f2))
    if hi - lo < 1e-6:
        return
    t = lambda v: torch.tensor([v], dtype=D64)  # noqa: E731
    one, zero = t(1.0), t(0.0)
    assert asl(t(lo), one, cfg) >= 0 and asl(t(lo), zero, cfg) >= 0
    assert asl(t(lo), one, cfg) > asl(t(hi), one, cfg)
    assert asl(t(lo), zero, cfg) < asl(t(hi), zero, cfg)


def test_asl_clamps_saturated_probabilities():
    out = asl(torch.tensor([0.0, 1.0], dtype=D64), torch.tensor([1.0, 0.0], dtype=D64))
    assert torch.isfinite(out)


def test_joint_loss_examples():
    p, y = torch.sigmoid(rand(4, 6)), (rand(4, 6, seed=1) > 0).to(D64)
    assert joint_loss(p, p, y).item() == pytest.approx(2 * asl(p, y).mean().item(), abs=1e-12)
    q = torch.sigmoid(rand(4, 6, seed=2))
    assert joint_loss(p, q, y).item() == pytest.approx(asl(p, y).mean().item() + asl(q, y).mean().item(), abs=1e-12)
    eps = 1e-7
    perfect = y.clone()
    bound = 6 * -math.log(1 - eps) * 2
    assert joint_loss(perfect, perfect, y).item() < bound


def test_predict_examples():
    v = torch.tensor([0.2, 0.7], dtype=D64)
    assert torch.equal(predict(v, v), v)
    assert predict(torch.ones(3), torch.zeros(3)).tolist() == [0.5] * 3
    assert predict(torch.tensor([0.8]), torch.tensor([0.4])).item() == pytest.approx(0.6)


def test_asl_config_validation():
    with pytest.raises(ValueError):
        ASLConfig(lambda_neg=-1.0)
