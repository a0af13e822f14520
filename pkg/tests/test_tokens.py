import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_diff
from vidadapt.adapter import AdapterParams, lora_forward, temporal_loss
from vidadapt.tokens import (
    CrossAttentionParams,
    PromptLearner,
    ToyTextEncoder,
    ToyVisionEncoder,
    TrainState,
    assemble,
    attention,
    cross_attention,
    gate_on,
    guided_step,
    init_shared,
    piecewise_loss,
    pool_adjacent,
    project_unshared,
    sgd_update,
)
from vidadapt.schedule import build_schedule, ddim_denoise_step

D = torch.float64


def test_shared_init_statistics():
    T = init_shared(18, 768, seed=0, dtype=D)
    assert T.shape == (18, 768)
    assert 3e-4 <= float(T.var()) <= 5e-4
    assert torch.equal(T, init_shared(18, 768, seed=0, dtype=D))
    assert not torch.equal(T, init_shared(18, 768, seed=1, dtype=D))


def test_pooling_examples():
    v = torch.randn(5, dtype=D)
    assert torch.equal(pool_adjacent(v.expand(2, 6, 5)), v.expand(2, 3, 5))
    H = torch.tensor([1.0, 3.0, 2.0, 4.0], dtype=D)[None, :, None].expand(1, 4, 3)
    assert torch.equal(pool_adjacent(H)[0, :, 0], torch.tensor([2.0, 3.0], dtype=D))
    assert pool_adjacent(torch.zeros(2, 50, 8)).shape == (2, 25, 8)
    with pytest.raises(ValueError):
        pool_adjacent(torch.zeros(1, 5, 3))


def test_projection_examples():
    H = torch.randn(2, 3, 4, dtype=D)
    assert torch.equal(project_unshared(H, torch.eye(4, dtype=D)), H)
    assert torch.equal(project_unshared(H, 2 * torch.eye(4, dtype=D)), 2 * H)
    a = torch.tensor([[[1.0, 2.0]]], dtype=D)
    W = torch.tensor([[3.0, 4.0], [5.0, 6.0]], dtype=D)
    assert torch.equal(project_unshared(a, W), torch.tensor([[[13.0, 16.0]]], dtype=D))
    with pytest.raises(ValueError):
        project_unshared(H, torch.eye(3, dtype=D))


def test_assembly_row_counts_and_segments():
    d = 768
    T = init_shared(18, d)
    Z = torch.randn(25, d)
    c, u = torch.randn(77, d), torch.randn(77, d)
    emb = assemble(T, Z, c, u)
    assert emb.length == 197
    for name, block in zip(("shared", "frame", "cond", "uncond"), (T, Z, c, u)):
        assert torch.equal(emb.segment(name), block)
    assert assemble(T, Z[:0], c, u).length == 18 + 154
    assert assemble(T[:0], Z, c, u).length == 25 + 154
    with pytest.raises(ValueError):
        assemble(T, torch.randn(25, 10), c, u)


def test_default_toy_assembly():
    vis, text = ToyVisionEncoder(d=64), ToyTextEncoder(d=64, length=8)
    learner = PromptLearner(d=64)
    frames = torch.randn(3, 3, 32, 32)
    H = vis(frames)
    assert H.shape == (3, 50, 64)
    emb = learner(H, text("a red square"), text(""))
    assert emb.length == 18 + 25 + 2 * 8
    assert emb.rows.shape == (3, 59, 64)
    assert torch.equal(emb.segment("shared")[1], learner.T_share.detach())
    assert torch.equal(emb.segment("uncond")[2], text(""))
    boosted = PromptLearner(d=64, unshare_boost=2.0)(H, text("x"), text(""))
    assert torch.allclose(boosted.segment("frame"), 2 * emb.segment("frame"))
    assert PromptLearner(d=64, drop_shared=True)(H, text("x"), text("")).length == 25 + 16
    assert PromptLearner(d=64, drop_unshared=True)(H, text("x"), text("")).length == 18 + 16


def test_attention_single_row_and_ties():
    X = torch.randn(4, 3, dtype=D)
    p = CrossAttentionParams(*(torch.randn(3, 3, dtype=D) for _ in range(3)))
    Z = torch.randn(1, 3, dtype=D)
    out = cross_attention(X, Z, p)
    assert torch.allclose(out, (Z @ p.W_V).expand(4, 3), atol=1e-12)
    K = torch.ones(2, 2, dtype=D)
    V = torch.tensor([[1.0, 2.0], [3.0, 6.0]], dtype=D)
    assert torch.allclose(attention(torch.randn(5, 2, dtype=D), K, V), torch.tensor([2.0, 4.0], dtype=D).expand(5, 2))


def test_attention_hand_case():
    Q = torch.tensor([[1.0, 0.0], [0.0, 2.0]], dtype=D)
    K = torch.tensor([[1.0, 1.0], [0.5, -1.0]], dtype=D)
    V = torch.tensor([[2.0, 0.0], [0.0, 3.0]], dtype=D)
    out, w = attention(Q, K, V, return_weights=True)
    expect = np.zeros((2, 2))
    for i in range(2):
        logits = [float(Q[i] @ K[j]) / math.sqrt(2) for j in range(2)]
        ex = [math.exp(v) for v in logits]
        probs = [e / sum(ex) for e in ex]
        expect[i] = probs[0] * V[0].numpy() + probs[1] * V[1].numpy()
    assert np.abs(out.numpy() - expect).max() <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 6), st.integers(0, 2**31))
def test_attention_rows_are_distributions(M, L, d, seed):
    g = torch.Generator().manual_seed(seed)
    X, Z = torch.randn(M, d, generator=g), torch.randn(L, d, generator=g)
    p = CrossAttentionParams(*(torch.randn(d, d, generator=g) for _ in range(3)))
    out, w = cross_attention(X, Z, p, return_weights=True)
    assert out.shape == (M, d) and w.shape == (M, L)
    assert (w >= 0).all() and (w.sum(-1) - 1).abs().max() <= 1e-6


def test_cross_attention_dimension_check():
    p = CrossAttentionParams(torch.eye(3), torch.eye(3), torch.eye(3))
    with pytest.raises(ValueError):
        cross_attention(torch.randn(2, 3), torch.randn(2, 4), p)
    with pytest.raises(ValueError):
        cross_attention(torch.randn(2, 3), torch.randn(2, 3), CrossAttentionParams(torch.eye(2), torch.eye(3), torch.eye(3)))


def test_guided_step_examples():
    s = build_schedule()
    one = torch.tensor([1.0], dtype=D)
    half = lambda x, t, conditioning=None: torch.full_like(x, 0.5)
    zero = lambda x, t, conditioning=None: torch.zeros_like(x)
    assert float(guided_step(one, None, 0.1, half, 10)) == pytest.approx(0.95, abs=1e-12)
    assert torch.equal(guided_step(one, None, 0.0, half, 10), one)
    assert torch.equal(guided_step(one, None, 0.3, zero, 10), one)
    std = guided_step(one, None, 0.0, half, 500, mode="standard", schedule=s, t_prev=400)
    assert torch.equal(std, ddim_denoise_step(one, torch.full_like(one, 0.5), 500, s, t_prev=400))
    with pytest.raises(ValueError):
        guided_step(one, None, 0.1, lambda x, t, conditioning=None: torch.zeros(2), 10)


def test_piecewise_examples():
    T = 1000
    eps = torch.zeros(10, dtype=D)
    pred = torch.full((10,), math.sqrt(0.2), dtype=D)
    assert float(piecewise_loss(eps, pred, 250, T, 5.0)) == pytest.approx(0.2, abs=1e-12)
    assert float(piecewise_loss(eps, pred, 750, T, 0.1)) == pytest.approx(0.3, abs=1e-12)
    assert gate_on(500, T) and not gate_on(499, T)
    with pytest.raises(ValueError):
        piecewise_loss(eps, pred, 1001, T, 0.0)


def test_sgd_modes():
    th = torch.tensor([1.0], dtype=D)
    st_ = TrainState({"theta": th}, mode="sgd")
    sgd_update(st_, {"theta": torch.tensor([2.0], dtype=D)})
    assert float(th) == pytest.approx(0.99994, abs=1e-15)
    p = torch.randn(3, dtype=D)
    before = p.clone()
    st_ = TrainState({"p": p}, lr=0.1)
    for _ in range(3):
        sgd_update(st_, {"p": torch.zeros(3, dtype=D)})
    assert torch.equal(p, before)


def test_sgd_rejects_frozen_and_unknown():
    frozen = torch.ones(2)
    st_ = TrainState({"a": torch.zeros(2)}, {"enc": frozen})
    with pytest.raises(ValueError):
        sgd_update(st_, {"a": torch.ones(2), "enc": torch.ones(2)})
    with pytest.raises(KeyError):
        sgd_update(st_, {"a": torch.ones(2), "zzz": torch.ones(2)})
    with pytest.raises(KeyError):
        sgd_update(st_, {})
    assert torch.equal(frozen, torch.ones(2))
    assert TrainState({"a": torch.zeros(1)}).lr == 3e-5


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_adamw_matches_torch(wd):
    g = torch.Generator().manual_seed(0)
    p0 = torch.randn(4, 3, generator=g, dtype=D)
    ours = p0.clone()
    ref = p0.clone().requires_grad_()
    opt = torch.optim.AdamW([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=wd)
    st_ = TrainState({"w": ours}, lr=1e-2, weight_decay=wd)
    for _ in range(20):
        grad = torch.randn(4, 3, generator=g, dtype=D)
        ref.grad = grad.clone()
        opt.step()
        sgd_update(st_, {"w": grad})
    assert (ours - ref.detach()).abs().max() <= 1e-12


def test_encoders_are_frozen_and_seeded():
    vis = ToyVisionEncoder()
    assert all(not p.requires_grad for p in vis.parameters())
    text = ToyTextEncoder()
    assert torch.equal(text("a red square"), ToyTextEncoder()("A red square!"))
    assert not torch.equal(text("a red square"), text("a blue circle"))


# -- gradient checks through the full token path ------------------------------


def _token_objective(t: int, T_total: int, data, lam=1.0):
    """Scalar loss of a miniature conditioned predictor.

    Conditioning rows come from shared tokens and projected pooled vision
    features; the value projection carries a low-rank adapter. Per-frame
    attention outputs double as the captured features.
    """
    H, cond, uncond, X, W_Q, W_K, W_V0, eps = data

    def f(A, B, T_share, W_unshare):
        Z = assemble(T_share, project_unshared(pool_adjacent(H), W_unshare), cond, uncond).rows
        Q = X @ W_Q
        K = Z @ W_K
        V = lora_forward(Z, AdapterParams(W_V0, A, B))
        out = attention(Q, K, V)
        lt = temporal_loss(out)
        return piecewise_loss(eps, out, t, T_total, lt, lam)

    return f


def _instance(seed, n=4, d=3, n_vis=4, n_share=2, L=1, M=2, r=2):
    g = torch.Generator().manual_seed(seed)
    rnd = lambda *s: torch.randn(*s, generator=g, dtype=D)
    data = (rnd(n, n_vis, d), rnd(L, d), rnd(L, d), rnd(n, M, d), rnd(d, d), rnd(d, d), rnd(d, d), rnd(n, M, d))
    params = [rnd(r, d), rnd(d, r), rnd(n_share, d), rnd(d, d)]
    return data, params


def _check_grads(f, params):
    ps = [p.clone().requires_grad_() for p in params]
    analytic = torch.autograd.grad(f(*ps), ps)
    for i, (p, an) in enumerate(zip(params, analytic)):

        def fi(v, i=i):
            args = [q.clone() for q in params]
            args[i] = torch.tensor(v)
            return float(f(*args))

        num = central_diff(fi, p.numpy(), h=1e-5)
        assert np.linalg.norm(an.numpy() - num) <= 1e-4 * max(np.linalg.norm(num), 1e-8), f"param {i}"


@pytest.mark.parametrize("seed", range(50))
def test_piecewise_gradients_gate_on(seed):
    data, params = _instance(seed)
    _check_grads(_token_objective(800, 1000, data), params)


@pytest.mark.parametrize("seed", range(10))
def test_piecewise_gradients_gate_off(seed):
    data, params = _instance(seed)
    _check_grads(_token_objective(200, 1000, data), params)


def test_gate_off_temporal_gradient_is_exactly_zero():
    data, params = _instance(3)
    ps = [p.clone().requires_grad_() for p in params]
    H, cond, uncond, X, W_Q, W_K, W_V0, eps = data

    def parts(A, B, T_share, W_unshare):
        Z = assemble(T_share, project_unshared(pool_adjacent(H), W_unshare), cond, uncond).rows
        out = attention(X @ W_Q, Z @ W_K, lora_forward(Z, AdapterParams(W_V0, A, B)))
        return out, temporal_loss(out)

    out, lt = parts(*ps)
    with_term = torch.autograd.grad(piecewise_loss(eps, out, 200, 1000, lt, 1.0), ps, retain_graph=True)
    mse_only = torch.autograd.grad(piecewise_loss(eps, out, 200, 1000, torch.zeros(()), 1.0), ps, retain_graph=True)
    for a, b in zip(with_term, mse_only):
        assert torch.equal(a, b)
    on = torch.autograd.grad(piecewise_loss(eps, out, 800, 1000, lt, 1.0), ps[2], retain_graph=True)[0]
    on_mse = torch.autograd.grad(piecewise_loss(eps, out, 800, 1000, torch.zeros(()), 1.0), ps[2])[0]
    assert not torch.equal(on, on_mse)
