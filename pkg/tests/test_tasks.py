import numpy as np
import pytest

from warpgrad.errors import ContractError
from warpgrad.losses import affine_regularization
from warpgrad.tasks import (WARP_KINDS, ClipTask, SkeletonTask, gen_clip_task, gen_skeleton_task,
                            gen_warp_task, load_task, save_task)
from warpgrad.warp import warp_with_flow


@pytest.mark.parametrize("kind", WARP_KINDS)
def test_target_is_source_warped_by_gt_flow(kind):
    t = gen_warp_task(kind, size=32, seed=1)
    warped = warp_with_flow(t.source, t.gt_flow).data
    vis = t.visible[0] > 0
    assert vis.mean() > 0.5
    np.testing.assert_allclose(warped[:, vis], t.target[:, vis], atol=1e-12)


def test_translation_defaults():
    t = gen_warp_task("translation", size=32)
    np.testing.assert_array_equal(t.gt_flow[0], 3.0)
    np.testing.assert_array_equal(t.gt_flow[1], -2.0)
    assert t.source.min() >= -1 and t.source.max() <= 1


def test_task_determinism():
    a, b = gen_warp_task("articulated", 32, seed=5), gen_warp_task("articulated", 32, seed=5)
    assert a.source.tobytes() == b.source.tobytes() and a.gt_flow.tobytes() == b.gt_flow.tobytes()
    assert gen_warp_task("articulated", 32, seed=6).source.tobytes() != a.source.tobytes()


def test_articulated_flow_is_not_affine():
    rough = affine_regularization(gen_warp_task("articulated", 32).gt_flow).item()
    smooth = affine_regularization(gen_warp_task("rotation", 32).gt_flow).item()
    assert smooth < 1e-8 < 1.0 < rough


def test_bad_kind_and_size():
    with pytest.raises(ContractError):
        gen_warp_task("shear")
    with pytest.raises(ContractError):
        gen_warp_task("translation", size=8)


def test_skeleton_noise_level():
    t = gen_skeleton_task(joints=8, frames=64, sigma_n=2.0, seed=0)
    assert t.j_gt.shape == (16, 64)
    assert t.noise.std() == pytest.approx(2.0, rel=0.1)
    assert not gen_skeleton_task(sigma_n=0.0).noise.any()
    with pytest.raises(ContractError):
        gen_skeleton_task(frames=8)


def test_clip_frames_move():
    c = gen_clip_task(frames=4, size=32, seed=0)
    assert c.frames.shape == (5, 3, 32, 32)
    diffs = [np.abs(c.frames[k + 1] - c.frames[k]).mean() for k in range(4)]
    assert min(diffs) > 0.01
    np.testing.assert_array_equal(c.source, c.frames[0])


@pytest.mark.parametrize("make", [lambda: gen_warp_task("rotation", 32, seed=2),
                                  lambda: gen_skeleton_task(frames=16, seed=2),
                                  lambda: gen_clip_task(frames=2, size=16, seed=2)])
def test_save_load_round_trip(tmp_path, make):
    task = make()
    back = load_task(save_task(task, tmp_path / "t"))
    assert type(back) is type(task)
    if isinstance(task, SkeletonTask):
        assert back.j_noisy.tobytes() == task.j_noisy.tobytes()
    elif isinstance(task, ClipTask):
        assert back.frames.tobytes() == task.frames.tobytes()
    else:
        assert back.target.tobytes() == task.target.tobytes()
        assert (tmp_path / "t" / "source.png").exists()


def test_load_missing_task(tmp_path):
    with pytest.raises(ContractError):
        load_task(tmp_path)
