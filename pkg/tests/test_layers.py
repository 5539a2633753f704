import itertools

import numpy as np
import pytest

from sparseconv.layers import (
    EPSILON, BottleneckParams, ParamStore, SIConvParams, SislParams,
    first_layer_masks, fusion_block, fusion_params, mask_density, si_bottleneck_forward,
    si_conv_forward, sisl_forward, spp_fuse, spp_params, switch_map,
)
from sparseconv.tensor import Tensor, conv2d, grad_check, max_pool_window, mul, total
from sparseconv.data import KITTI_LIKE, synth_scanlines
from oracles import random_mask, si_conv_loops, switch_loops

RNG = np.random.default_rng(99)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def si_params(cout, cin, k=1, d=1, stride=1, b=None, w=None, rng=RNG):
    w = rng.normal(size=(cout, cin, 2 * k + 1, 2 * k + 1)) if w is None else w
    b = rng.normal(size=cout) if b is None else np.asarray(b, dtype=float)
    return SIConvParams(T(w), T(b), k=k, d=d, stride=stride)


def sisl_params(cout, cin, stride=1, share=False, seed=0):
    store = ParamStore(seed)
    p = store.sisl("s", cin, cout, stride=stride, share_weights=share)
    for t in store.params.values():
        t.data = np.random.default_rng(seed).normal(size=t.shape)
    return p


def perturb(x, o, rng):
    noisy = x.copy()
    invalid = np.broadcast_to(o == 0, x.shape)
    noisy[invalid] = rng.normal(scale=100.0, size=invalid.sum())
    return noisy


# -- parameter types ----------------------------------------------------------

def test_si_params_validation():
    with pytest.raises(ValueError):
        SIConvParams(T(np.zeros((1, 1, 3, 3))), T([0.0]), k=1, epsilon=0.0)
    with pytest.raises(ValueError):
        SIConvParams(T(np.zeros((1, 1, 3, 3))), T([0.0]), k=2)
    with pytest.raises(ValueError):
        SIConvParams(T(np.zeros((1, 1, 3, 3))), T([0.0]), d=0)


def test_sisl_params_validation():
    a = si_params(2, 2)
    with pytest.raises(ValueError):
        SislParams(a, si_params(2, 2, d=1))
    with pytest.raises(ValueError):
        SislParams(a, si_params(2, 3, d=2))
    with pytest.raises(ValueError):
        SislParams(a, si_params(2, 2, d=2), share_weights=True)


def test_bottleneck_params_validation():
    store = ParamStore(0)
    p = store.bottleneck("b", 4, 8)
    assert p.inner.in_channels == 4 and p.residual_projection is not None
    assert store.bottleneck("c", 8, 8).residual_projection is None
    assert store.bottleneck("d", 8, 8, stride=2).residual_projection is not None
    assert store.bottleneck("e", 3, 3).inner.in_channels == 2   # round(1.5) -> 2
    assert store.bottleneck("f", 1, 1).inner.in_channels == 1
    with pytest.raises(ValueError):
        BottleneckParams(p.reduce, p.inner, p.expand, None)
    with pytest.raises(ValueError):
        BottleneckParams(p.reduce, p.inner, p.expand, p.residual_projection, variant="nope")


def test_param_store_rejects_duplicates_and_is_deterministic():
    s = ParamStore(5)
    s.si_conv("a", 2, 2)
    with pytest.raises(KeyError):
        s.si_conv("a", 2, 2)
    a, b = ParamStore(3), ParamStore(3)
    a.bottleneck("x", 4, 8, use_sisl=True)
    b.bottleneck("x", 4, 8, use_sisl=True)
    assert list(a.params) == list(b.params)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


# -- si_conv -------------------------------------------------------------------

def test_si_conv_empty_window_gives_bias():
    x = RNG.normal(size=(1, 1, 5, 5))
    y, m = si_conv_forward(T(x), np.zeros((1, 1, 5, 5)), si_params(1, 1, b=[0.5]))
    np.testing.assert_array_equal(y.data, 0.5)
    assert not m.any()


def test_si_conv_two_valid_taps():
    x = np.zeros((1, 1, 3, 3))
    o = np.zeros((1, 1, 3, 3))
    x[0, 0, 0, 0], x[0, 0, 2, 1] = 4.0, 8.0
    o[0, 0, 0, 0] = o[0, 0, 2, 1] = 1
    x[0, 0, 1, 1] = 1000.0       # invalid, must be ignored
    y, m = si_conv_forward(T(x), o, si_params(1, 1, w=np.ones((1, 1, 3, 3)), b=[0.0]))
    assert y.data[0, 0, 1, 1] == 12.0 / (2.0 + EPSILON)
    assert abs(y.data[0, 0, 1, 1] - 6.0) < 1e-4
    assert m[0, 0, 1, 1] == 1


def test_si_conv_dense_constant():
    c = 2.5
    y, m = si_conv_forward(T(np.full((1, 1, 6, 6), c)), np.ones((1, 1, 6, 6)),
                           si_params(1, 1, w=np.ones((1, 1, 3, 3)), b=[0.0]))
    np.testing.assert_allclose(y.data[0, 0, 1:-1, 1:-1], 9 * c / (9 + EPSILON), rtol=0, atol=1e-15)
    assert abs(y.data[0, 0, 2, 2] - c) < 1e-5
    assert m.all()


@pytest.mark.parametrize("k,d,stride", [(1, 1, 1), (1, 2, 1), (1, 1, 2), (2, 1, 1), (1, 2, 2)])
def test_si_conv_matches_literal_oracle(k, d, stride):
    rng = np.random.default_rng(k * 100 + d * 10 + stride)
    x = rng.normal(size=(1, 2, 9, 8))
    o = random_mask(rng, (1, 1, 9, 8), 0.3)
    p = si_params(3, 2, k, d, stride, rng=rng)
    y, m = si_conv_forward(T(x), o, p)
    ry, rm = si_conv_loops(x[0], o[0, 0], p.w.data, p.b.data, k, d, stride)
    np.testing.assert_allclose(y.data[0], ry, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(m[0, 0], rm)


def test_si_conv_errors():
    p = si_params(1, 1)
    with pytest.raises(ValueError):
        si_conv_forward(T(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 5)), p)
    with pytest.raises(ValueError, match="binary"):
        si_conv_forward(T(np.zeros((1, 1, 4, 4))), np.full((1, 1, 4, 4), 0.5), p)


def test_si_conv_dense_degeneration():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3, 7, 7))
        p = si_params(2, 3, k=1, d=1 + seed % 2, rng=rng)
        y, _ = si_conv_forward(T(x), np.ones((2, 1, 7, 7)), p)
        pad = p.d
        ref = conv2d(T(x), p.w, dilation=p.d, padding=pad).data / (9 + EPSILON) \
            + p.b.data[None, :, None, None]
        inner = (slice(None), slice(None), slice(pad, -pad), slice(pad, -pad))
        np.testing.assert_allclose(y.data[inner], ref[inner], rtol=0, atol=1e-12)


# -- switch ----------------------------------------------------------------------

def test_switch_trivial():
    assert switch_map(np.ones((1, 1, 4, 4))).all()
    assert not switch_map(np.zeros((1, 1, 4, 4))).any()


def test_switch_single_pixel():
    o = np.zeros((1, 1, 5, 5))
    o[0, 0, 2, 2] = 1
    s = switch_map(o)[0, 0]
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1
    expected[2, 2] = 0
    np.testing.assert_array_equal(s, expected)


def test_switch_exhaustive_3x3():
    for bits in itertools.product((0.0, 1.0), repeat=9):
        o = np.array(bits).reshape(3, 3)
        np.testing.assert_array_equal(switch_map(o[None, None])[0, 0], switch_loops(o))
        outside = sum(bits) - bits[4]
        assert switch_map(o[None, None])[0, 0, 1, 1] == (1.0 if outside else 0.0)


def test_switch_ignores_centre_and_rejects_non_binary():
    o = random_mask(RNG, (1, 1, 6, 6), 0.3)
    flipped = o.copy()
    flipped[0, 0, 3, 3] = 1 - flipped[0, 0, 3, 3]
    assert switch_map(o)[0, 0, 3, 3] == switch_map(flipped)[0, 0, 3, 3]
    with pytest.raises(ValueError):
        switch_map(np.full((1, 1, 3, 3), 2.0))


# -- SISL ----------------------------------------------------------------------

def test_sisl_dense_equals_d1_branch():
    p = sisl_params(3, 2)
    x = RNG.normal(size=(1, 2, 6, 6))
    o = np.ones((1, 1, 6, 6))
    y, m = sisl_forward(T(x), o, p)
    y1, m1 = si_conv_forward(T(x), o, p.branch_d1)
    np.testing.assert_array_equal(y.data, y1.data)
    np.testing.assert_array_equal(m, m1)


def test_sisl_empty_is_d2_bias():
    p = sisl_params(3, 2)
    y, m = sisl_forward(T(RNG.normal(size=(1, 2, 5, 5))), np.zeros((1, 1, 5, 5)), p)
    np.testing.assert_array_equal(y.data, np.broadcast_to(p.branch_d2.b.data[None, :, None, None], y.shape))
    assert not m.any()


def test_sisl_reaches_across_gap():
    o = np.zeros((1, 1, 5, 5))
    o[0, 0, 0, :] = o[0, 0, 4, :] = 1
    x = RNG.normal(size=(1, 1, 5, 5))
    p = sisl_params(1, 1)
    _, m = sisl_forward(T(x), o, p)
    _, plain = si_conv_forward(T(x), o, p.branch_d1)
    assert plain[0, 0, 2, 2] == 0 and m[0, 0, 2, 2] == 1
    # brute force: switch off at (2,2), so the d=2 branch value is used there
    y, _ = sisl_forward(T(x), o, p)
    ry, _ = si_conv_loops(x[0], o[0, 0], p.branch_d2.w.data, p.branch_d2.b.data, 1, 2)
    assert y.data[0, 0, 2, 2] == pytest.approx(ry[0, 2, 2], abs=1e-12)


def test_sisl_blend_matches_literal_oracle():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(1, 2, 8, 8))
        o = random_mask(rng, (1, 1, 8, 8), 0.15)
        p = sisl_params(2, 2, seed=seed)
        y, m = sisl_forward(T(x), o, p)
        s = switch_loops(o[0, 0])
        y1, m1 = si_conv_loops(x[0], o[0, 0], p.branch_d1.w.data, p.branch_d1.b.data, 1, 1)
        y2, m2 = si_conv_loops(x[0], o[0, 0], p.branch_d2.w.data, p.branch_d2.b.data, 1, 2)
        np.testing.assert_allclose(y.data[0], s * y1 + (1 - s) * y2, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(m[0, 0], s * m1 + (1 - s) * m2)


def test_sisl_stride_samples_switch():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 8, 8))
    o = random_mask(rng, (1, 1, 8, 8), 0.2)
    p = sisl_params(2, 2, stride=2)
    y, m = sisl_forward(T(x), o, p)
    s = switch_loops(o[0, 0])[::2, ::2]
    y1, m1 = si_conv_loops(x[0], o[0, 0], p.branch_d1.w.data, p.branch_d1.b.data, 1, 1, 2)
    y2, m2 = si_conv_loops(x[0], o[0, 0], p.branch_d2.w.data, p.branch_d2.b.data, 1, 2, 2)
    np.testing.assert_allclose(y.data[0], s * y1 + (1 - s) * y2, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(m[0, 0], s * m1 + (1 - s) * m2)


def test_sisl_mask_dominates_plain():
    rng = np.random.default_rng(8)
    masks = [random_mask(rng, (1, 1, 12, 12), dens) for dens in (0.02, 0.1, 0.3, 0.6)]
    masks += [synth_scanlines(64, 256, seed=s, **KITTI_LIKE)[0].mask[None, None] for s in range(3)]
    for o in masks:
        plain, sisl, _ = first_layer_masks(o)
        assert np.all(sisl >= plain)
        assert set(np.unique(sisl)) <= {0.0, 1.0}


def test_shared_weights_are_shared():
    p = sisl_params(2, 2, share=True)
    assert p.branch_d1.w is p.branch_d2.w
    p.branch_d1.w.data = p.branch_d1.w.data + 1.0
    np.testing.assert_array_equal(p.branch_d2.w.data, p.branch_d1.w.data)


def test_shared_vs_unshared_dense_identical():
    shared = sisl_params(2, 2, share=True, seed=3)
    unshared = sisl_params(2, 2, share=False, seed=3)
    unshared.branch_d1.w.data = shared.branch_d1.w.data.copy()
    unshared.branch_d1.b.data = shared.branch_d1.b.data.copy()
    x, o = RNG.normal(size=(1, 2, 6, 6)), np.ones((1, 1, 6, 6))
    np.testing.assert_array_equal(sisl_forward(T(x), o, shared)[0].data,
                                  sisl_forward(T(x), o, unshared)[0].data)


# -- bottleneck --------------------------------------------------------------

def zero_bottleneck(ch, use_sisl=False, variant="plain"):
    store = ParamStore(0)
    p = store.bottleneck("b", ch, ch, use_sisl=use_sisl, variant=variant)
    for t in store.params.values():
        t.data = np.zeros_like(t.data)
    return p


@pytest.mark.parametrize("use_sisl", [False, True])
@pytest.mark.parametrize("variant", ["plain", "pre_activation", "pre_addition"])
def test_bottleneck_zero_weights_is_identity(use_sisl, variant):
    o = random_mask(RNG, (1, 1, 7, 7), 0.3)
    # non-negative and zero at invalid pixels so the trailing ReLU is harmless
    x = np.abs(RNG.normal(size=(1, 4, 7, 7))) * o
    y, m = si_bottleneck_forward(T(x), o, zero_bottleneck(4, use_sisl, variant))
    np.testing.assert_array_equal(y.data, x)
    if not use_sisl:
        np.testing.assert_array_equal(m, max_pool_window(o, 1, 1))


@pytest.mark.parametrize("use_sisl,stride", [(False, 1), (False, 2), (True, 1), (True, 2)])
def test_bottleneck_mask_is_max_pool(use_sisl, stride):
    store = ParamStore(1)
    p = store.bottleneck("b", 3, 4, stride=stride, use_sisl=use_sisl)
    rng = np.random.default_rng(stride)
    for _ in range(20):
        o = random_mask(rng, (1, 1, 8, 8), rng.uniform(0.02, 0.5))
        _, m = si_bottleneck_forward(T(rng.normal(size=(1, 3, 8, 8))), o, p)
        if use_sisl:
            _, ref = sisl_forward(T(np.zeros((1, p.inner.in_channels, 8, 8))), o, p.inner)
        else:
            ref = max_pool_window(o, 1, 1, stride)
        np.testing.assert_array_equal(m, ref)


@pytest.mark.parametrize("variant", ["plain", "pre_activation", "pre_addition"])
def test_bottleneck_sparsity_invariance(variant):
    store = ParamStore(2)
    p = store.bottleneck("b", 3, 5, use_sisl=True, variant=variant)
    rng = np.random.default_rng(11)
    for _ in range(20):
        o = random_mask(rng, (2, 1, 8, 8), 0.2)
        x = rng.normal(size=(2, 3, 8, 8))
        y1, m1 = si_bottleneck_forward(T(x), o, p)
        y2, m2 = si_bottleneck_forward(T(perturb(x, o, rng)), o, p)
        assert np.array_equal(y1.data, y2.data) and np.array_equal(m1, m2)


def test_bottleneck_variants_differ():
    store = ParamStore(6)
    base = store.bottleneck("b", 4, 4)
    x = RNG.normal(size=(1, 4, 6, 6))
    o = np.ones((1, 1, 6, 6))
    outs = [si_bottleneck_forward(T(x), o, BottleneckParams(base.reduce, base.inner, base.expand,
                                                            None, variant=v))[0].data
            for v in ("plain", "pre_activation", "pre_addition")]
    assert not np.array_equal(outs[0], outs[1]) and not np.array_equal(outs[0], outs[2])


def test_bottleneck_channel_mismatch():
    p = ParamStore(0).bottleneck("b", 3, 4)
    with pytest.raises(ValueError, match="channels"):
        si_bottleneck_forward(T(np.zeros((1, 2, 4, 4))), np.ones((1, 1, 4, 4)), p)


# -- fusion ------------------------------------------------------------------

def test_spp_fuse_shapes_and_bias():
    store = ParamStore(0)
    p = spp_params(store, "spp", 4)
    f = T(RNG.normal(size=(2, 4, 4, 8)))
    out = spp_fuse(f, f, p)
    assert out.shape == (2, 4, 4, 8)
    p.b.data = RNG.normal(size=4)
    zero = spp_fuse(T(np.zeros((1, 4, 4, 8))), T(np.zeros((1, 4, 4, 8))), p)
    np.testing.assert_array_equal(zero.data, np.broadcast_to(p.b.data[None, :, None, None], zero.shape))
    with pytest.raises(ValueError):
        spp_fuse(f, T(np.zeros((2, 4, 4, 4))), p)


def test_spp_pyramid_is_live():
    store = ParamStore(0)
    p = spp_params(store, "spp", 2)
    a = RNG.normal(size=(1, 2, 8, 8))
    b = a.copy()
    b[0, :, 0, 0] += 1.0
    # changing one pixel alters the pooled context far away from it
    d = spp_fuse(T(a), T(a), p).data - spp_fuse(T(b), T(a), p).data
    assert np.abs(d[0, :, 7, 7]).max() > 0 and np.abs(d[0, :, 0, 7]).max() > 0


def test_fusion_block_contract():
    store = ParamStore(0)
    p = fusion_params(store, "f", 3, 5)
    dec, skip = T(RNG.normal(size=(1, 3, 4, 4))), T(RNG.normal(size=(1, 5, 4, 4)))
    o = random_mask(RNG, (1, 1, 4, 4), 0.5)
    out = fusion_block(dec, skip, o, p)
    assert out.shape == (1, 3, 4, 4)
    assert not np.array_equal(out.data, fusion_block(dec, skip, 1 - o, p).data)
    p.w.data = np.zeros_like(p.w.data)
    p.b.data = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(fusion_block(dec, skip, o, p).data,
                                  np.broadcast_to(p.b.data[None, :, None, None], (1, 3, 4, 4)))
    with pytest.raises(ValueError):
        fusion_block(dec, skip, np.ones((1, 1, 2, 2)), p)


# -- density ---------------------------------------------------------------

def test_mask_density():
    assert mask_density(np.ones((1, 1, 3, 3))) == 1.0
    assert mask_density(np.zeros((1, 1, 3, 3))) == 0.0
    d = synth_scanlines(64, 256, seed=0, **KITTI_LIKE)[0].mask
    assert abs(mask_density(d) - 0.05) <= 0.01


def test_stride1_layers_never_lose_density():
    rng = np.random.default_rng(21)
    store = ParamStore(0)
    layers = [("si", si_params(2, 2)), ("sisl", sisl_params(2, 2)),
              ("bn", store.bottleneck("b", 2, 2, use_sisl=True))]
    for _ in range(20):
        o = random_mask(rng, (1, 1, 10, 10), rng.uniform(0, 0.3))
        x = T(rng.normal(size=(1, 2, 10, 10)))
        for kind, p in layers:
            fn = {"si": si_conv_forward, "sisl": sisl_forward, "bn": si_bottleneck_forward}[kind]
            _, m = fn(x, o, p)
            assert mask_density(m) >= mask_density(o)
            assert np.all(m >= o)


# -- gradients ---------------------------------------------------------------

def _readout(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def test_si_conv_grad():
    rng = np.random.default_rng(0)
    o = random_mask(rng, (1, 1, 6, 6), 0.4)
    p = si_params(2, 2, rng=rng)
    x = T(rng.normal(size=(1, 2, 6, 6)))
    r = _readout((1, 2, 6, 6), 1)

    def f(x, w, b):
        return total(mul(si_conv_forward(x, o, SIConvParams(w, b))[0], r))
    assert grad_check(f, [x, p.w, p.b]) < 1e-4
