"""The independent oracles, and checks that they would catch a broken implementation."""

import numpy as np
import pytest

from warpgrad import losses as L
from warpgrad.oracles import (direct_index_warp, exhaustive_mu_max, finite_difference_gradient,
                              patchwise_least_squares)
from warpgrad.warp import warp_with_flow


def test_finite_difference_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = finite_difference_gradient(lambda v: float((v ** 2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, atol=1e-8)


def test_least_squares_oracle_zero_on_affine_field():
    yy, xx = np.mgrid[0:6, 0:7].astype(float)
    w = np.stack([0.1 * xx - 0.2 * yy + 1, 0.3 * xx + 0.05 * yy - 2])
    assert patchwise_least_squares(w) < 1e-20


def test_direct_index_warp_rejects_fractional_flow():
    with pytest.raises(ValueError):
        direct_index_warp(np.zeros((1, 3, 3)), np.full((2, 3, 3), 0.5))


def test_exhaustive_mu_max_self_similarity():
    v = np.random.default_rng(0).normal(size=(3, 4, 4))
    best, where = exhaustive_mu_max(v, v)
    np.testing.assert_allclose(best, 1.0, atol=1e-7)
    np.testing.assert_array_equal(where, np.arange(16).reshape(4, 4))


def test_mutation_affine_residual_without_bias_row_is_caught():
    # dropping the translation column of the affine model should disagree with the oracle
    yy, xx = np.mgrid[0:8, 0:8]
    w = np.stack([np.sin(xx / 2.0), np.cos(yy / 3.0) * xx / 4.0]) + 5.0
    rel = L.patch_offsets(3)

    def no_bias(field):
        total = 0.0
        for y0 in range(6):
            for x0 in range(6):
                src = np.stack([field[:, y0 + 1 + int(dy), x0 + 1 + int(dx)] + (dx, dy)
                                for dx, dy in rel.T], axis=1)
                A = rel @ src.T @ np.linalg.inv(src @ src.T)
                total += float(((rel - A @ src) ** 2).sum())
        return total

    assert abs(no_bias(w) - patchwise_least_squares(w)) > 1e-3
    assert abs(L.affine_regularization(w).item() - patchwise_least_squares(w)) < 1e-8


def test_mutation_transposed_flow_is_caught():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(2, 6, 6))
    flow = rng.integers(-2, 3, size=(2, 6, 6)).astype(float)
    ref = direct_index_warp(f, flow)
    np.testing.assert_array_equal(warp_with_flow(f, flow).data, ref)
    assert not np.array_equal(warp_with_flow(f, flow[::-1]).data, ref)


def test_mutation_mean_instead_of_max_is_caught():
    rng = np.random.default_rng(2)
    v_s, v_t = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    best, _ = exhaustive_mu_max(v_s, v_t)
    a = v_s.reshape(3, 16)
    b = v_t.reshape(3, 16)
    cos = (a / np.linalg.norm(a, axis=0)).T @ (b / np.linalg.norm(b, axis=0))  # (source, target)
    wrong = cos.mean(axis=0).reshape(4, 4)
    assert np.abs(wrong - best).max() > 0.1
    np.testing.assert_allclose(L.mu_max(v_s, v_t)[0], best, atol=1e-12)
