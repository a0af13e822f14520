import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff, cosine, temporal_loss_ref
from vidadapt.adapter import (
    INFER_WINDOW,
    TRAIN_WINDOW,
    ActivationWindow,
    AdapterParams,
    FeatureCapture,
    LoRALinear,
    LossWeights,
    consecutive_similarities,
    diffusion_loss,
    frame_similarity,
    is_active,
    lora_forward,
    merge_adapter,
    temporal_loss,
    total_loss,
)

D = torch.float64


def hand_params(scale=1.0):
    return AdapterParams(torch.eye(2, dtype=D), torch.tensor([[1.0, 0.0]], dtype=D), torch.tensor([[0.0], [1.0]], dtype=D), scale)


def test_lora_hand_example():
    x = torch.tensor([1.0, 2.0], dtype=D)
    assert torch.equal(lora_forward(x, hand_params()), torch.tensor([1.0, 3.0], dtype=D))
    assert torch.equal(lora_forward(x, hand_params(0.0)), x)
    assert torch.allclose(merge_adapter(hand_params(), 0.5) @ x, torch.tensor([1.0, 2.5], dtype=D))
    assert torch.equal(merge_adapter(hand_params(), 0.0), torch.eye(2, dtype=D))
    with pytest.raises(ValueError):
        merge_adapter(hand_params(), 1.5)


def test_zero_b_is_base():
    W0 = torch.randn(5, 3, dtype=D)
    p = AdapterParams.init(W0, rank=2, generator=torch.Generator().manual_seed(0))
    x = torch.randn(7, 3, dtype=D)
    assert torch.equal(p.B, torch.zeros(5, 2, dtype=D))
    assert torch.equal(lora_forward(x, p), x @ W0.T)


def test_shape_errors():
    with pytest.raises(ValueError):
        AdapterParams(torch.eye(2), torch.zeros(1, 3), torch.zeros(2, 1))
    with pytest.raises(ValueError):
        AdapterParams(torch.eye(2), torch.zeros(3, 2), torch.zeros(2, 3))
    with pytest.raises(ValueError):
        lora_forward(torch.ones(3), hand_params())


def test_init_scale():
    p = AdapterParams.init(torch.zeros(256, 256), rank=4, generator=torch.Generator().manual_seed(1))
    assert float(p.A.std()) == pytest.approx(0.02, rel=0.05)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
def test_merge_equals_runtime_scale(d_out, d_in, r, seed):
    r = min(r, d_in, d_out)
    g = torch.Generator().manual_seed(seed)
    p = AdapterParams(torch.randn(d_out, d_in, generator=g, dtype=D), torch.randn(r, d_in, generator=g, dtype=D), torch.randn(d_out, r, generator=g, dtype=D), 0.5)
    x = torch.randn(3, d_in, generator=g, dtype=D)
    assert (x @ merge_adapter(p, 0.5).T - lora_forward(x, p)).abs().max() <= 1e-6


def test_lora_linear_gating_and_merge():
    torch.manual_seed(0)
    base = nn.Linear(6, 4)
    layer = LoRALinear(base, rank=2, generator=torch.Generator().manual_seed(0))
    x = torch.randn(3, 6)
    ref = base(x)
    assert torch.equal(layer(x), ref)
    with torch.no_grad():
        layer.lora_B.normal_()
    assert not torch.allclose(layer(x), ref)
    layer.active = False
    assert torch.equal(layer(x), ref)
    layer.active = True
    layer.scale = 0.5
    runtime = layer(x)
    layer.scale = 1.0
    layer.merge(0.5)
    assert (layer(x) - runtime).abs().max() <= 1e-6
    layer.unmerge()
    assert layer.weight.requires_grad is False


def test_similarity_examples():
    a = torch.tensor([1.0, 0.0], dtype=D)
    assert float(frame_similarity(a, a)) == pytest.approx(1.0, abs=1e-12)
    assert float(frame_similarity(a, torch.tensor([0.0, 1.0], dtype=D))) == 0.0
    assert float(frame_similarity(a, torch.tensor([1.0, 1.0], dtype=D))) == pytest.approx(1 / math.sqrt(2), abs=1e-9)
    with pytest.raises(ValueError):
        frame_similarity(a, torch.zeros(2, dtype=D))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100), st.floats(0.01, 100))
def test_similarity_scale_invariant(seed, a, b):
    g = torch.Generator().manual_seed(seed)
    F, G = torch.randn(2, 3, 4, generator=g, dtype=D)
    assert float(frame_similarity(a * F, b * G)) == pytest.approx(float(frame_similarity(F, G)), abs=1e-12)
    assert -1 <= float(frame_similarity(F, G)) <= 1


def _frames_with_similarities(sims):
    """Unit vectors in the plane whose consecutive cosines equal ``sims``."""
    angle, out = 0.0, [torch.tensor([1.0, 0.0], dtype=D)]
    for s in sims:
        angle += math.acos(s)
        out.append(torch.tensor([math.cos(angle), math.sin(angle)], dtype=D))
    return out


def test_temporal_loss_examples():
    same = [torch.ones(4, dtype=D)] * 5
    assert float(temporal_loss(same)) == 0.0
    assert float(temporal_loss(_frames_with_similarities([1.0, 0.0]))) == pytest.approx(1.0, abs=1e-9)
    assert float(temporal_loss(_frames_with_similarities([1.0, 0.5, 0.5]))) == pytest.approx(0.125, abs=1e-9)
    with pytest.raises(ValueError):
        temporal_loss(same[:2])


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 7), st.integers(0, 2**31))
def test_temporal_loss_vs_reference_and_scale_invariance(n, seed):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(n, 2, 3, 3, generator=g, dtype=D)
    ref = temporal_loss_ref([f.numpy() for f in feats])
    assert float(temporal_loss(feats)) == pytest.approx(ref, abs=1e-12)
    scales = torch.rand(n, 1, 1, 1, generator=g, dtype=D) * 10 + 0.1
    assert abs(float(temporal_loss(feats * scales)) - float(temporal_loss(feats))) <= 1e-8
    s = consecutive_similarities(feats)
    assert float(s[0]) == pytest.approx(cosine(feats[0].numpy(), feats[1].numpy()), abs=1e-12)


def test_diffusion_and_total_loss():
    assert float(diffusion_loss(torch.zeros(3, 3), torch.ones(3, 3))) == 1.0
    x = torch.randn(4, 5, dtype=D)
    assert float(diffusion_loss(x, x)) == 0.0
    y = torch.randn(4, 5, dtype=D)
    assert float(diffusion_loss(x, y)) == pytest.approx(float(((x - y) ** 2).sum() / 20), abs=1e-10)
    assert total_loss(0, 0) == 0
    assert total_loss(1, 1) == pytest.approx(1.01, abs=1e-9)
    assert total_loss(0.125, 2.0) == pytest.approx(0.145, abs=1e-9)
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.01)


def test_activation_windows():
    T = 1000
    assert not is_active(250, T, TRAIN_WINDOW)
    assert is_active(750, T, TRAIN_WINDOW)
    assert is_active(500, T, TRAIN_WINDOW)
    assert is_active(950, T, INFER_WINDOW)
    assert not is_active(899, T, INFER_WINDOW)
    with pytest.raises(ValueError):
        is_active(0, T, TRAIN_WINDOW)
    assert ActivationWindow.parse("0.8,1.0") == ActivationWindow(0.8, 1.0)
    assert str(ActivationWindow.parse("0.9")) == "0.9,1"
    with pytest.raises(ValueError):
        ActivationWindow(0.9, 0.5)


def test_capture_holds_detached_copies():
    cap = FeatureCapture()
    feats = torch.randn(3, 2, 2, requires_grad=True)
    cap.record(0, 1, feats)
    with torch.no_grad():
        feats.add_(1.0)
    stored = cap.frames(0, 1)
    assert len(stored) == 3 and not stored[0].requires_grad
    assert not torch.equal(stored[0], feats[0].detach())
    cap.clear()
    assert cap.frames(0, 1) == []


def _lora_temporal_objective(W0, x):
    def f(A, B):
        p = AdapterParams(W0, A, B)
        return temporal_loss(lora_forward(x, p))

    return f


@pytest.mark.parametrize("seed", range(50))
def test_grad_temporal_through_lora(seed):
    g = torch.Generator().manual_seed(seed)
    n, tokens, d_in, d_out, r = 4, 3, 4, 3, 2
    W0 = torch.randn(d_out, d_in, generator=g, dtype=D)
    x = torch.randn(n, tokens, d_in, generator=g, dtype=D)
    A = torch.randn(r, d_in, generator=g, dtype=D).requires_grad_()
    B = torch.randn(d_out, r, generator=g, dtype=D).requires_grad_()
    f = _lora_temporal_objective(W0, x)
    gA, gB = torch.autograd.grad(f(A, B), [A, B])
    nA = central_diff(lambda a: float(f(torch.tensor(a), B.detach())), A.detach().numpy())
    nB = central_diff(lambda b: float(f(A.detach(), torch.tensor(b))), B.detach().numpy())
    for an, nu in ((gA.numpy(), nA), (gB.numpy(), nB)):
        assert np.linalg.norm(an - nu) <= 1e-4 * max(np.linalg.norm(nu), 1e-8)
