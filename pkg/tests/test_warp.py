import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warpgrad import tensor as T
from warpgrad.errors import ContractError, DimensionError
from warpgrad.oracles import direct_index_warp
from warpgrad.tensor import Tape, Tensor
from warpgrad.warp import (KernelPredictor, bilinear_sample, extract_patch, fuse_with_mask,
                           identity_grid, local_attention_warp, patch_offsets, predict_kernel,
                           shifted_patches, upsample_flow, warp_with_flow)


def _dense_bilinear(f, x, y):
    """Reference sampler with clamped indices, one point at a time."""
    C, H, W = f.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    tx, ty = x - x0, y - y0
    out = np.zeros(C)
    for cy, wy in ((y0, 1 - ty), (y0 + 1, ty)):
        for cx, wx in ((x0, 1 - tx), (x0 + 1, tx)):
            out += wx * wy * f[:, min(max(cy, 0), H - 1), min(max(cx, 0), W - 1)]
    return out


def test_identity_grid_layout():
    g = identity_grid(2, 3).data
    assert g.shape == (2, 2, 3)
    assert g[0, 1, 2] == 2 and g[1, 1, 2] == 1


def test_zero_flow_is_identity():
    f = np.random.default_rng(0).normal(size=(3, 6, 7))
    out = warp_with_flow(f, np.zeros((2, 6, 7))).data
    np.testing.assert_array_equal(out, f)


def test_bilinear_matches_pointwise_reference():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(2, 5, 6))
    coords = rng.uniform(-2, 8, size=(2, 4, 3))
    out = bilinear_sample(f, coords).data
    for i in range(4):
        for j in range(3):
            np.testing.assert_allclose(out[:, i, j], _dense_bilinear(f, *coords[:, i, j]), atol=1e-12)


def test_zero_border_outside_is_zero():
    f = np.ones((1, 4, 4))
    out = bilinear_sample(f, np.array([[[-5.0]], [[-5.0]]]), border="zero").data
    assert out.item() == 0.0
    with pytest.raises(ContractError):
        bilinear_sample(f, np.zeros((2, 1, 1)), border="wrap")


def test_bilinear_shape_mismatch():
    with pytest.raises(DimensionError):
        bilinear_sample(np.ones((1, 4, 4)), np.zeros((3, 2, 2)))


def test_integer_flow_matches_direct_indexing():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(3, 8, 9))
    flow = rng.integers(-3, 4, size=(2, 8, 9)).astype(float)
    np.testing.assert_array_equal(warp_with_flow(f, flow).data, direct_index_warp(f, flow))


def test_extract_patch_values():
    f = np.arange(25.0).reshape(1, 5, 5)
    p = extract_patch(f, np.array([2.0, 2.0]), 3).data
    np.testing.assert_array_equal(p[0], f[0, 1:4, 1:4])


def test_patch_offsets_row_major():
    off = patch_offsets(3)
    assert off[:, 0].tolist() == [-1, -1] and off[:, 1].tolist() == [0, -1]
    with pytest.raises(ContractError):
        patch_offsets(4)


@pytest.mark.parametrize("border", ["clamp", "zero"])
def test_shifted_patches_equals_sampling(border):
    rng = np.random.default_rng(3)
    f = rng.normal(size=(2, 3, 6, 5))
    n = 5
    grid = identity_grid(6, 5).data
    coords = grid[None, :, None] + patch_offsets(n)[None, :, :, None, None]
    ref = bilinear_sample(f, np.repeat(coords, 2, axis=0), border).data
    np.testing.assert_array_equal(shifted_patches(f, n, border).data, ref)


def test_kernel_is_a_distribution():
    rng = np.random.default_rng(4)
    M = KernelPredictor(2, 3, rng, center_bias=0.0, gain=1.0)
    k = predict_kernel(rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3)), M).data
    assert k.shape == (3, 3)
    assert k.min() > 0 and k.sum() == pytest.approx(1.0)


def test_local_attention_is_convex_combination():
    rng = np.random.default_rng(5)
    M = KernelPredictor(2, 3, rng, center_bias=0.0, gain=1.0)
    fs, ft = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6, 6))
    out = local_attention_warp(fs, ft, rng.normal(size=(2, 6, 6)), M).data
    assert out.min() >= fs.min() - 1e-12 and out.max() <= fs.max() + 1e-12


def test_local_attention_wrong_flow_shape():
    rng = np.random.default_rng(6)
    M = KernelPredictor(2, 3, rng)
    with pytest.raises(DimensionError):
        local_attention_warp(np.ones((2, 6, 6)), np.ones((2, 6, 6)), np.zeros((2, 3, 3)), M)


def test_local_attention_gradients_reach_every_input():
    rng = np.random.default_rng(7)
    M = KernelPredictor(2, 3, rng, center_bias=0.0, gain=1.0)
    fs = Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
    ft = Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
    w = Tensor(rng.uniform(-1.3, 1.3, size=(2, 5, 5)), requires_grad=True)
    with Tape() as tape:
        y = T.sum(T.square(local_attention_warp(fs, ft, w, M)))
    g = tape.backward(y)
    for t in (fs, ft, w, M.weight.value, M.bias.value):
        assert np.abs(g[t]).sum() > 0


def test_fuse_with_mask_endpoints_and_range():
    a, b = np.zeros((2, 3, 3)), np.ones((2, 3, 3))
    np.testing.assert_array_equal(fuse_with_mask(a, b, np.zeros((1, 3, 3))).data, a)
    np.testing.assert_array_equal(fuse_with_mask(a, b, np.ones((1, 3, 3))).data, b)
    with pytest.raises(ContractError):
        fuse_with_mask(a, b, np.full((1, 3, 3), 1.5))


def test_upsample_flow_scales_constant_field():
    w = np.stack([np.full((4, 4), 1.5), np.full((4, 4), -0.5)])[None]
    up = upsample_flow(w, 2).data
    assert up.shape == (1, 2, 8, 8)
    np.testing.assert_allclose(up[0, 0], 3.0)
    np.testing.assert_allclose(up[0, 1], -1.0)


@settings(max_examples=40, deadline=None)
@given(x=st.floats(-3.0, 9.0), y=st.floats(-3.0, 8.0), seed=st.integers(0, 2 ** 16))
def test_bilinear_sample_stays_within_neighbour_range(x, y, seed):
    f = np.random.default_rng(seed).normal(size=(1, 6, 7))
    v = bilinear_sample(f, np.array([[[x]], [[y]]])).data.item()
    assert f.min() - 1e-12 <= v <= f.max() + 1e-12
    np.testing.assert_allclose(v, _dense_bilinear(f, x, y)[0], atol=1e-12)
