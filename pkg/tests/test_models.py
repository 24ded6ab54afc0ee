import numpy as np
import pytest

from warpgrad.errors import ContractError, DimensionError
from warpgrad.models import (GFLA, ModelSpec, MotionExtractionNetwork, SequentialGFLA, adaln,
                             heatmap_from_joints)
from warpgrad.tensor import Tape, Tensor

SMALL = dict(image_size=16, base_channels=4, max_channels=8, res_blocks=1,
             attention_scales=[8, 16], patch_sizes=[3, 3])


def _inputs(spec, B=1, seed=0):
    rng = np.random.default_rng(seed)
    s = spec.image_size
    x = rng.uniform(-1, 1, size=(B, 3, s, s))
    p_s = rng.uniform(0, 1, size=(B, spec.joints, s, s))
    p_t = rng.uniform(0, 1, size=(B, spec.joints, s, s))
    return x, p_s, p_t


def test_heatmap_peak_and_cutoff():
    h = heatmap_from_joints([3.2, 4.7, -10, 2], 10, 10, sigma=1.0)
    assert h.shape == (2, 10, 10)
    assert h[0, 5, 3] == 1.0
    assert h[0, 5, 7] == 0.0  # beyond three sigma
    assert not h[1].any()  # joint outside the frame
    with pytest.raises(ContractError):
        heatmap_from_joints([0, 0], 4, 4, sigma=0)


def test_model_spec_validation():
    with pytest.raises(ContractError):
        ModelSpec(image_size=64, attention_scales=[24], patch_sizes=[3])
    with pytest.raises(ContractError):
        ModelSpec(patch_sizes=[4])
    assert ModelSpec(image_size=64, attention_scales=[16, 32], patch_sizes=[3, 5]).levels == 2


def test_gfla_output_shapes_and_range():
    spec = ModelSpec(**SMALL)
    model = GFLA(spec, seed=0)
    x, p_s, p_t = _inputs(spec, B=2)
    out, w, m = model(x, p_s, p_t)
    assert out.shape == (2, 3, 16, 16)
    assert w.shape == (2, 2, 8, 8) and m.shape == (2, 1, 8, 8)
    assert np.abs(out.data).max() < 1 and 0 < m.data.min() and m.data.max() < 1


def test_gfla_is_deterministic_by_seed():
    spec = ModelSpec(**SMALL)
    a, b, c = GFLA(spec, seed=3), GFLA(spec, seed=3), GFLA(spec, seed=4)
    x, p_s, p_t = _inputs(spec)
    np.testing.assert_array_equal(a(x, p_s, p_t)[0].data, b(x, p_s, p_t)[0].data)
    assert not np.array_equal(a(x, p_s, p_t)[0].data, c(x, p_s, p_t)[0].data)


def test_ablation_variants_share_weights():
    local = GFLA(ModelSpec(**SMALL, attention="local"), seed=0).state_dict()
    bilin = GFLA(ModelSpec(**SMALL, attention="bilinear"), seed=0).state_dict()
    shared = set(bilin)
    assert shared < set(local)
    assert all(np.array_equal(local[k], bilin[k]) for k in shared)


def test_gfla_gradients_reach_flow_estimator():
    spec = ModelSpec(**SMALL)
    model = GFLA(spec, seed=0)
    x, p_s, p_t = _inputs(spec)
    with Tape() as tape:
        out, _, _ = model(x, p_s, p_t)
        loss = (out * out).mean()
    g = tape.backward(loss)
    named = dict(model.named_parameters())
    assert np.abs(g[named["flow.flow_head.weight"].value]).sum() > 0


def test_sequential_rollout_length():
    spec = ModelSpec(**SMALL)
    model = SequentialGFLA(spec, seed=0)
    x, p_s, _ = _inputs(spec)
    poses = [_inputs(spec, seed=k)[2] for k in range(3)]
    frames = model.rollout(x, p_s, poses)
    assert len(frames) == 3 and frames[0].shape == x.shape


def test_adaln_normalises_then_scales():
    f = np.random.default_rng(1).normal(3.0, 2.0, size=(2, 4, 10))
    out = adaln(f, np.zeros((2, 1, 1)), np.ones((2, 1, 1))).data
    np.testing.assert_allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=(1, 2)), 1.0, atol=1e-6)
    shifted = adaln(f, np.full((2, 1, 1), 5.0), np.full((2, 1, 1), 2.0)).data
    np.testing.assert_allclose(shifted, 2 * out + 5, atol=1e-12)


def test_men_starts_as_identity_and_checks_shapes():
    men = MotionExtractionNetwork(joints=4, hidden=8, seed=0)
    J = np.random.default_rng(2).uniform(0, 64, size=(1, 8, 32))
    np.testing.assert_allclose(men(J).data, J, atol=1e-9)
    with pytest.raises(DimensionError):
        men(np.zeros((1, 6, 32)))
    with pytest.raises(ContractError):
        men(np.zeros((1, 8, men.receptive_field - 1)))


def test_men_equivariant_to_translation_and_scale():
    men = MotionExtractionNetwork(joints=4, hidden=8, seed=1)
    for p in men.parameters():
        p.assign(p.value.data + 0.05 * np.random.default_rng(0).normal(size=p.value.shape))
    J = np.random.default_rng(3).uniform(0, 64, size=(1, 8, 32))
    base = men(J).data
    np.testing.assert_allclose(men(2.0 * J + 7.0).data, 2.0 * base + 7.0, atol=1e-8)
