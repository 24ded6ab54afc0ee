"""Checkpoint evaluation and demo panels."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import losses as L
from .errors import ContractError
from .images import flow_to_rgb, mask_to_rgb, save_image, to_uint8
from .plotting import PANEL_TITLES, plot_panels
from .tasks import ClipTask, SkeletonTask, WarpTask, load_task
from .training import (clip_inputs, flow_epe, flow_roughness, frame_metrics, load_checkpoint,
                       men_metrics, rollout, warp_inputs)
from .warp import upsample_flow, warp_with_flow


def evaluate_flow(w, task: WarpTask, extractor=None, coarse=None) -> dict:
    """Flow metrics for any flow ``w`` (model output or injected ground truth)."""
    w = np.asarray(getattr(w, "data", w), dtype=float)
    if w.ndim == 3:
        w = w[None]
    out = {"epe": flow_epe(w, task.gt_flow, task.visible),
           "L_r": float(L.affine_regularization(w).item()),
           "flow_roughness": flow_roughness(w)}
    if extractor is not None:
        xs, xt = task.source[None], task.target[None]
        h = w.shape[-1]
        vs, vt = extractor.layer_at(xs, h), extractor.layer_at(xt, h)
        out["L_c"] = float(L.sampling_correctness(vs, vt, w).item())
    return out


def _extractor(cfg):
    return L.FeatureExtractor(cfg.model.image_channels, cfg.extractor.channels, cfg.extractor.seed)


def _expect(task, cls, kind):
    if not isinstance(task, cls):
        raise ContractError(f"a {kind} checkpoint cannot be evaluated on a {type(task).__name__}")


def evaluate(checkpoint, taskdir) -> dict:
    model, kind, cfg = load_checkpoint(checkpoint)
    task = load_task(taskdir)
    res: dict = {"model": kind}
    if kind in ("flow", "gfla"):
        _expect(task, WarpTask, kind)
        xs, xt, ps, pt = warp_inputs(task)
        if xs.shape[-1] != cfg.model.image_size:
            raise ContractError(f"task size {xs.shape[-1]} != model image size {cfg.model.image_size}")
        if kind == "flow":
            w, _ = model(xs, ps, pt)
        else:
            x_hat, w, _ = model(xs, ps, pt)
            res["l1"] = float(L.l1_reconstruction(xt, x_hat).item())
        res.update(evaluate_flow(w, task, _extractor(cfg)))
    elif kind in ("sequential", "independent"):
        _expect(task, ClipTask, kind)
        frames, poses = clip_inputs(task)
        outs = rollout(model, kind, frames, poses)[0]
        res.update(frame_metrics([o.data for o in outs], task.frames, task.source))
    else:
        _expect(task, SkeletonTask, kind)
        res.update(men_metrics(model, task.j_noisy[None], task.j_gt[None]))
    return res


def write_eval(checkpoint, taskdir, out) -> dict:
    res = evaluate(checkpoint, taskdir)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(res, indent=2, sort_keys=True))
    return res


def _panels(source, target, output, w, m, size):
    factor = size // w.shape[-1]
    up = upsample_flow(w, factor).data[0] if factor > 1 else np.asarray(w)[0]
    mask = m[0, 0]
    if mask.shape[-1] != size:
        mask = np.kron(mask, np.ones((factor, factor)))
    return [to_uint8(source), to_uint8(target), to_uint8(output), flow_to_rgb(up), mask_to_rgb(mask)]


def demo(checkpoint, taskdir, out) -> list:
    """Write five panels per sample (plus a side-by-side figure); returns the sample directories."""
    model, kind, cfg = load_checkpoint(checkpoint)
    task = load_task(taskdir)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    if kind in ("flow", "gfla"):
        _expect(task, WarpTask, kind)
        xs, xt, ps, pt = warp_inputs(task)
        if kind == "flow":
            w, m = model(xs, ps, pt)
            factor = xs.shape[-1] // w.shape[-1]
            output = warp_with_flow(xs, upsample_flow(w.data, factor)).data[0]
        else:
            x_hat, w, m = model(xs, ps, pt)
            output = x_hat.data[0]
        samples.append(_panels(task.source, task.target, output, w.data, m.data, xs.shape[-1]))
    elif kind in ("sequential", "independent"):
        _expect(task, ClipTask, kind)
        frames, poses = clip_inputs(task)
        outs, flows, masks, _ = rollout(model, kind, frames, poses)
        for k, o in enumerate(outs, start=1):
            samples.append(_panels(task.source, task.frames[k], o.data[0], flows[k - 1][0].data,
                                   masks[k - 1][0].data, task.frames.shape[-1]))
    else:
        raise ContractError("demo needs an image model checkpoint (flow, gfla, sequential or independent)")
    dirs = []
    for i, panels in enumerate(samples):
        d = out / f"sample{i:02d}"
        d.mkdir(exist_ok=True)
        for j, (img, title) in enumerate(zip(panels, PANEL_TITLES)):
            save_image(d / f"{j}_{title}.png", img)
        plot_panels(panels, out / f"sample{i:02d}.png")
        dirs.append(d)
    return dirs
