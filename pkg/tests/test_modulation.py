import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from torch.autograd import gradcheck

from aiorestore.exceptions import ShapeError, ValidationError
from aiorestore.guidance import SemanticMaskSet
from aiorestore.modulation import (
    DAM, QGM, SCA, PromptGenerator, dam_forward, degradation_prompt, downsample_segments, mask_average_pool,
    qgm_forward, sca_forward,
)

from . import oracles
from .instances import dam_instance, dam_params, mlp_params, prompt_instance, randomize

T = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))  # noqa: E731


# --------------------------------------------------------------------- QGM

def test_qgm_identity_and_constant():
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    fq = torch.randn(2, 5, dtype=torch.float64)
    z = torch.zeros(3, 5, dtype=torch.float64)
    out = qgm_forward(x, fq, z, torch.ones(3, dtype=torch.float64), z, torch.zeros(3, dtype=torch.float64))
    assert torch.equal(out, x)
    c = T([0.5, -1.0, 2.0])
    out = qgm_forward(x, fq, z, torch.zeros(3, dtype=torch.float64), z, c)
    assert torch.equal(out, c.view(1, 3, 1, 1).expand_as(x))


def test_qgm_hand_case():
    x = T([[[[1, 2], [3, 4]]]])
    fq = T([[1.0]])
    out = qgm_forward(x, fq, T([[0.0]]), T([2.0]), T([[0.0]]), T([0.5]))
    assert torch.equal(out, T([[[[2.5, 4.5], [6.5, 8.5]]]]))


def test_qgm_channel_mismatch():
    with pytest.raises(ShapeError):
        QGM(4, 3)(torch.randn(1, 5, 2, 2), torch.randn(1, 3))


def test_qgm_module_init_is_near_identity():
    block = QGM(4, 6)
    x = torch.randn(1, 4, 3, 3)
    out = block(x, torch.zeros(1, 6))
    assert torch.equal(out, x)


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10**6))
def test_qgm_affine_in_input(a, b, seed):
    r = np.random.default_rng(seed)
    x1, x2 = T(r.standard_normal((1, 2, 3, 3))), T(r.standard_normal((1, 2, 3, 3)))
    fq = T(r.standard_normal((1, 4)))
    ws, wt = T(r.standard_normal((2, 4))), T(r.standard_normal((2, 4)))
    bs, bt = T(r.standard_normal(2)), T(r.standard_normal(2))
    f = lambda x: qgm_forward(x, fq, ws, bs, wt, bt)  # noqa: E731
    shift = (fq @ wt.T + bt)[:, :, None, None]
    lhs = f(a * x1 + b * x2)
    rhs = a * f(x1) + b * f(x2) - (a + b - 1) * shift
    assert torch.allclose(lhs, rhs, atol=1e-9)


# --------------------------------------------------------------------- MAP

def test_map_single_mask_gives_global_mean():
    f = torch.randn(1, 3, 4, 5, dtype=torch.float64)
    out = mask_average_pool(f, torch.zeros(1, 4, 5, dtype=torch.int64))
    assert torch.allclose(out, f.mean((2, 3), keepdim=True).expand_as(f), atol=1e-12)


def test_map_columns_hand_case():
    f = T([[[[1, 2], [3, 4]]]])
    left = np.array([[1, 0], [1, 0]], dtype=bool)
    ms = SemanticMaskSet((left, ~left), (2, 2))
    assert torch.equal(mask_average_pool(f, ms), T([[[[2, 3], [2, 3]]]]))


def test_map_constant_and_non_partition():
    f = torch.full((1, 2, 3, 3), 0.7, dtype=torch.float64)
    seg = torch.tensor([[[0, 1, 1], [2, 2, 1], [0, 0, 3]]])
    assert torch.allclose(mask_average_pool(f, seg), f, atol=1e-15)
    overlap = SemanticMaskSet((np.ones((3, 3), bool), np.eye(3, dtype=bool)), (3, 3))
    with pytest.raises(ValidationError):
        mask_average_pool(f, overlap)
    with pytest.raises(ShapeError):
        mask_average_pool(f, torch.zeros(1, 2, 3, dtype=torch.int64))


@given(seed=st.integers(0, 10**6), k=st.integers(1, 6))
def test_map_idempotent(seed, k):
    r = np.random.default_rng(seed)
    f = T(r.standard_normal((2, 3, 4, 5)))
    seg = torch.as_tensor(r.integers(0, k, (2, 4, 5)))
    once = mask_average_pool(f, seg)
    twice = mask_average_pool(once, seg)
    assert torch.allclose(once, twice, rtol=0, atol=1e-12)


def test_downsample_segments_majority():
    seg = torch.tensor([[[0, 0, 1, 1], [0, 1, 1, 1], [2, 2, 3, 3], [2, 3, 3, 3]]])
    assert downsample_segments(seg, 2).tolist() == [[[0, 1], [2, 3]]]
    tie = torch.tensor([[[1, 0], [0, 1]]])
    assert downsample_segments(tie, 2).tolist() == [[[0]]]


# --------------------------------------------------------------------- SCA

def test_sca_constant_semantic_map():
    r = np.random.default_rng(0)
    v = r.standard_normal(3)
    f_sem = T(np.broadcast_to(v[None, :, None, None], (1, 3, 4, 4)).copy())
    wk, wv = T(r.standard_normal((2, 3))), T(r.standard_normal((2, 3)))
    out = sca_forward(T(r.standard_normal((1, 2, 4, 4))), f_sem, wk, wv)
    assert torch.allclose(out, (wv @ T(v)).view(1, 2, 1, 1).expand(1, 2, 4, 4), atol=1e-12)


@given(seed=st.integers(0, 10**6), heads=st.sampled_from([1, 2, 4]))
def test_sca_attention_rows_sum_to_one(seed, heads):
    r = np.random.default_rng(seed)
    c = 4
    _, attn = sca_forward(T(r.standard_normal((2, c, 3, 2)) * 3), T(r.standard_normal((2, 3, 3, 2)) * 3),
                          T(r.standard_normal((c, 3))), T(r.standard_normal((c, 3))), heads, return_attention=True)
    assert torch.allclose(attn.sum(-1), torch.ones_like(attn.sum(-1)), atol=1e-6)


def test_sca_hand_case_dense_oracle():
    f_in = np.array([[[[0.5, -1.0], [2.0, 0.0]]]])
    f_sem = np.array([[[[1.0, 0.0], [-1.0, 2.0]]]])
    wk, wv = np.array([[0.7]]), np.array([[-1.3]])
    expected = oracles.sca(f_in, f_sem, wk, wv, 1)
    got = sca_forward(T(f_in), T(f_sem), T(wk), T(wv)).numpy()
    assert np.abs(got - expected).max() < 1e-6
    # position 0: scores 0.5 * 0.7 * [1, 0, -1, 2]
    s = 0.35 * np.array([1.0, 0, -1, 2])
    a = np.exp(s) / np.exp(s).sum()
    assert got[0, 0, 0, 0] == pytest.approx(float(a @ (-1.3 * np.array([1.0, 0, -1, 2]))), abs=1e-12)


def test_sca_shape_errors():
    with pytest.raises(ShapeError):
        sca_forward(torch.randn(1, 2, 3, 3), torch.randn(1, 2, 4, 3), torch.randn(2, 2), torch.randn(2, 2))
    with pytest.raises(ShapeError):
        sca_forward(torch.randn(1, 2, 3, 3), torch.randn(1, 2, 3, 3), torch.randn(3, 2), torch.randn(2, 2))


# ------------------------------------------------------------------ prompt

def test_prompt_single_and_uniform():
    pg = PromptGenerator(1, 3).double()
    f_d = torch.randn(2, 512, dtype=torch.float64)
    f_p, w = pg(f_d, return_weights=True)
    assert torch.equal(w, torch.ones(2, 1, dtype=torch.float64))
    assert torch.allclose(f_p, pg.mlp_out(pg.bank[0]).expand(2, 3), atol=1e-12)
    pg4 = PromptGenerator(4, 3).double()
    with torch.no_grad():
        pg4.mlp_weights.fc2.weight.zero_()
        pg4.mlp_weights.fc2.bias.fill_(0.3)
    f_p = pg4(f_d)
    assert torch.allclose(f_p, pg4.mlp_out(pg4.bank.mean(0)).expand(2, 3), atol=1e-12)


def test_prompt_hand_logits():
    pg = PromptGenerator(2, 2).double()
    with torch.no_grad():
        pg.mlp_weights.fc2.weight.zero_()
        pg.mlp_weights.fc2.bias.copy_(T([math.log(3.0), 0.0]))
        pg.bank.copy_(T([[1.0, 2.0], [3.0, -1.0]]))
    f_p, w = pg(torch.randn(1, 512, dtype=torch.float64), return_weights=True)
    assert torch.allclose(w, T([[0.75, 0.25]]), atol=1e-12)
    mix = np.array([0.75 * 1 + 0.25 * 3, 0.75 * 2 - 0.25])
    expected = oracles.mlp(mlp_params(pg.mlp_out), mix)
    assert np.abs(f_p.detach().numpy()[0] - expected).max() < 1e-6


def test_prompt_dimension_check():
    with pytest.raises(ShapeError):
        PromptGenerator(3, 4)(torch.randn(1, 256))


@given(seed=st.integers(0, 10**6))
def test_prompt_weights_are_distribution(seed):
    pg, f_d = prompt_instance(np.random.default_rng(seed), seed)
    _, w = pg(T(f_d) * 10, return_weights=True)
    assert (w >= 0).all()
    assert torch.allclose(w.sum(-1), torch.ones(w.shape[0], dtype=torch.float64), atol=1e-6)


# --------------------------------------------------------------------- DAM

def test_dam_zero_mask_logits_and_zero_fuse():
    block = DAM(4, 3).double()
    with torch.no_grad():
        block.mlp_mask.fc2.weight.zero_()
        block.mlp_mask.fc2.bias.zero_()
    x = torch.randn(1, 4, 5, 6, dtype=torch.float64)
    out, parts = block(x, torch.randn(1, 512, dtype=torch.float64), torch.randn(1, 3, dtype=torch.float64),
                       return_parts=True)
    assert torch.equal(parts["mask"], torch.full_like(parts["mask"], 0.5))
    assert torch.allclose(parts["f_m"], 0.5 * parts["x_hat"], atol=0)
    assert torch.equal(out, torch.zeros_like(out))       # fuse is zero-initialised and bias-free
    assert block.fuse.bias is None


def test_dam_hand_case_2x2():
    block, x, f_c, f_p = dam_instance(np.random.default_rng(3), 3)
    block, x = block, np.random.default_rng(4).standard_normal((1, block.proj.in_channels, 2, 2))
    f_c, f_p = f_c[:1], f_p[:1]
    got = dam_forward(T(x), T(f_c), T(f_p), block).detach().numpy()
    assert np.abs(got - oracles.dam(x, f_c, f_p, dam_params(block))).max() < 1e-6


@pytest.mark.parametrize("tokens", [1, 4])
def test_dam_matches_oracle(tokens):
    for seed in range(5):
        block, x, f_c, f_p = dam_instance(np.random.default_rng(seed), seed, tokens)
        got = block(T(x), T(f_c), T(f_p)).detach().numpy()
        assert np.abs(got - oracles.dam(x, f_c, f_p, dam_params(block))).max() < 1e-6


def test_dam_mask_strictly_inside_unit_interval():
    block, x, f_c, f_p = dam_instance(np.random.default_rng(9), 9)
    _, parts = block(T(x), T(f_c), T(f_p), return_parts=True)
    m = parts["mask"]
    assert ((m > 0) & (m < 1)).all()
    assert m.shape == (x.shape[0], 1) + x.shape[2:]


def test_dam_query_role_runs():
    block = DAM(4, 3, heads=2, content_role="query", content_tokens=8).double()
    randomize(block, torch.Generator().manual_seed(0), 0.3)
    out = block(torch.randn(2, 4, 3, 3, dtype=torch.float64), torch.randn(2, 512, dtype=torch.float64),
                torch.randn(2, 3, dtype=torch.float64))
    assert out.shape == (2, 4, 3, 3) and torch.isfinite(out).all()


def test_dam_dimension_errors():
    block = DAM(4, 3)
    with pytest.raises(ShapeError):
        block(torch.randn(1, 4, 2, 2), torch.randn(1, 256), torch.randn(1, 3))
    with pytest.raises(ShapeError):
        block(torch.randn(1, 4, 2, 2), torch.randn(1, 512), torch.randn(1, 5))


# -------------------------------------------------------- block gradients

def _gc(fn, *inputs):
    return gradcheck(fn, inputs, eps=1e-6, atol=1e-8, rtol=1e-4)


def test_block_gradients_finite_differences():
    g = torch.Generator().manual_seed(0)
    rnd = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64, requires_grad=True)  # noqa: E731
    assert _gc(qgm_forward, rnd(1, 2, 3, 3), rnd(1, 4), rnd(2, 4), rnd(2), rnd(2, 4), rnd(2))
    seg = torch.tensor([[[0, 0, 1], [2, 1, 1], [2, 2, 0]]])
    assert _gc(lambda f: mask_average_pool(f, seg), rnd(1, 2, 3, 3))
    assert _gc(lambda a, b, k, v: sca_forward(a, b, k, v, 2), rnd(1, 2, 2, 3), rnd(1, 3, 2, 3), rnd(2, 3), rnd(2, 3))

    pg = PromptGenerator(3, 2).double()
    randomize(pg, g, 0.2)
    assert _gc(lambda fd, bank: degradation_prompt(fd, bank, pg.mlp_weights, pg.mlp_out), rnd(1, 512), rnd(3, 2))

    for tokens in (1, 4):
        block = DAM(2, 3, heads=1, mask_base=2, content_tokens=tokens).double()
        randomize(block, g, 0.3)
        params = list(block.parameters())

        def dam_fn(x, fc, fp, *ps):
            with torch.no_grad():
                for p, new in zip(params, ps):
                    p.copy_(new)
            return block(x, fc, fp)

        assert _gc(lambda x, fc, fp: block(x, fc, fp), rnd(1, 2, 3, 3), rnd(1, 512) * 0.1, rnd(1, 3))
        # parameters: compare autograd against central differences by hand
        x, fc, fp = rnd(1, 2, 3, 3).detach(), rnd(1, 512).detach() * 0.1, rnd(1, 3).detach()
        wts = torch.randn(1, 2, 3, 3, generator=g, dtype=torch.float64)
        block.zero_grad()
        (block(x, fc, fp) * wts).sum().backward()
        for p in params:
            direction = torch.randn(p.shape, generator=g, dtype=torch.float64)
            analytic = float((p.grad * direction).sum())
            with torch.no_grad():
                p.add_(1e-6 * direction)
                up = float((block(x, fc, fp) * wts).sum())
                p.sub_(2e-6 * direction)
                down = float((block(x, fc, fp) * wts).sum())
                p.add_(1e-6 * direction)
            fd = (up - down) / 2e-6
            assert abs(fd - analytic) <= 1e-4 * max(abs(fd), abs(analytic), 1e-6)


def test_sca_module_matches_functional():
    block = SCA(4, 3, heads=2).double()
    a, b = torch.randn(1, 4, 2, 2, dtype=torch.float64), torch.randn(1, 3, 2, 2, dtype=torch.float64)
    assert torch.equal(block(a, b), sca_forward(a, b, block.w_k, block.w_v, 2))
