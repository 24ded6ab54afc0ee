import numpy as np
import pytest

from warpgrad import losses as L
from warpgrad.errors import ContractError, DimensionError
from warpgrad.oracles import direct_index_warp, exhaustive_mu_max, patchwise_least_squares
from warpgrad.tasks import Motion
from warpgrad.tensor import Tape, Tensor


def _exact_pair(seed=0, C=4, H=8, W=9):
    """Distinct random features and a target built by an in-bounds integer warp."""
    rng = np.random.default_rng(seed)
    v_s = rng.normal(size=(C, H, W))
    ys, xs = np.mgrid[0:H, 0:W]
    sx = rng.integers(0, W, size=(H, W))
    sy = rng.integers(0, H, size=(H, W))
    flow = np.stack([sx - xs, sy - ys]).astype(float)
    return v_s, direct_index_warp(v_s, flow), flow


def test_sampling_correctness_exact_warp_is_exp_minus_one():
    v_s, v_t, flow = _exact_pair()
    lc = L.sampling_correctness(v_s, v_t, flow).item()
    assert abs(lc - np.exp(-1)) <= 1e-6


def test_sampling_correctness_worse_under_perturbation():
    v_s, v_t, flow = _exact_pair(1)
    base = L.sampling_correctness(v_s, v_t, flow).item()
    assert L.sampling_correctness(v_s, v_t, flow + 3.0).item() > base


def test_mu_max_matches_exhaustive_search():
    rng = np.random.default_rng(2)
    v_s, v_t = rng.normal(size=(3, 5, 6)), rng.normal(size=(3, 5, 6))
    best, where = L.mu_max(v_s, v_t, return_index=True)
    ref, ref_where = exhaustive_mu_max(v_s, v_t)
    np.testing.assert_array_equal(where[0], ref_where)
    np.testing.assert_allclose(best[0], ref, rtol=0, atol=1e-12)


def test_affine_regularization_zero_for_affine_flows():
    for motion in (Motion.translation(3, -2), Motion.rotation(15, (7.5, 7.5)),
                   Motion.rotation(10, (7.5, 7.5), 1.1, (2, -1))):
        assert L.affine_regularization(motion.flow(16, 16)).item() <= 1e-8


def test_affine_regularization_matches_oracle():
    yy, xx = np.mgrid[0:8, 0:8]
    w = np.stack([np.sin(xx / 2.0) + 0.3 * np.cos(yy), np.cos(yy / 3.0) * xx / 4.0])
    ours = L.affine_regularization(w).item()
    assert abs(ours - patchwise_least_squares(w)) <= 1e-8
    assert ours > 1e-3


def test_affine_regularization_batch_is_mean():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6, 6))
    both = L.affine_regularization(np.stack([a, b])).item()
    single = (L.affine_regularization(a).item() + L.affine_regularization(b).item()) / 2
    assert both == pytest.approx(single, rel=1e-12)


def test_affine_regularization_rejects_bad_patch():
    with pytest.raises(ContractError):
        L.affine_regularization(np.zeros((2, 6, 6)), n=2)
    with pytest.raises(ContractError):
        L.affine_regularization(np.zeros((2, 2, 2)), n=3)


def test_gram_matrix_normalised():
    f = np.ones((2, 3, 4))
    np.testing.assert_allclose(L.gram_matrix(f).data, np.full((2, 2), 12 / 24))


def test_perceptual_and_style_zero_on_identical_images():
    phi = L.FeatureExtractor(seed=0)
    x = np.random.default_rng(4).uniform(-1, 1, size=(1, 3, 16, 16))
    assert L.perceptual_loss(x, x, phi).item() == 0.0
    assert L.style_loss(x, x, phi).item() == 0.0
    y = x + 0.1
    assert L.perceptual_loss(x, y, phi).item() > 0


def test_feature_extractor_is_frozen():
    phi = L.FeatureExtractor(seed=0)
    assert phi.parameters() == []
    assert phi.layer_at(np.zeros((1, 3, 16, 16)), 4).shape[-1] == 4


def test_discriminator_loss_detaches_fake():
    rng = np.random.default_rng(5)
    D = L.Discriminator(3, base=4, layers=2, rng=rng)
    real = Tensor(rng.normal(size=(2, 3, 8, 8)))
    fake = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
    with Tape() as tape:
        d_loss = L.discriminator_loss(D, real, fake)
    assert not np.any(tape.backward(d_loss)[fake])
    with Tape() as tape:
        g_loss = L.generator_adversarial_loss(D, fake)
    assert np.any(tape.backward(g_loss)[fake])


def test_joint_loss_weighting():
    w = L.LossWeights()
    total = L.joint_generation_loss({"l1": Tensor(1.0), "style": Tensor(2.0)}, w).item()
    assert total == pytest.approx(w.l1 + 2 * w.style)
    with pytest.raises(ContractError):
        L.joint_generation_loss({"bogus": Tensor(1.0)}, w)


def test_loss_weight_defaults():
    w = L.LossWeights()
    assert (w.c, w.r, w.l1, w.adv, w.perc, w.style) == (5.0, 0.0025, 5.0, 2.0, 0.5, 500.0)
    with pytest.raises(ContractError):
        L.LossWeights(c=-1.0)


def test_mpjpe_modes():
    gt = np.zeros((4, 3))
    hat = np.zeros((4, 3))
    hat[0] = 3.0
    hat[1] = 4.0  # joint 0 displaced by (3, 4)
    assert L.mpjpe(hat, gt).item() == pytest.approx(7 * 3 / 12)
    assert L.mpjpe(hat, gt, "euclidean").item() == pytest.approx(5 * 3 / 6)
    with pytest.raises(DimensionError):
        L.mpjpe(np.zeros((4, 3)), np.zeros((4, 2)))


def test_temporal_adversarial_shapes():
    rng = np.random.default_rng(6)
    Dv = L.TemporalDiscriminator(3, rng=rng, base=4, layers=2)
    clip = rng.normal(size=(1, 3, 3, 8, 8))
    d, g = L.temporal_adversarial(Dv, clip, clip)
    assert d.size == 1 and g.size == 1
    with pytest.raises(ContractError):
        L.temporal_adversarial(Dv, clip, clip[:, :2])


def test_animation_loss_average_plus_video():
    total = L.animation_loss([Tensor(1.0), Tensor(3.0)], Tensor(2.0), 0.5).item()
    assert total == pytest.approx(3.0)
