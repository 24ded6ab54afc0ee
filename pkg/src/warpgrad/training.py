"""Training loops for the four run types, plus metric logging and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses as L
from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .config import RunConfig
from .errors import ConfigError, ContractError
from .images import flow_to_rgb, save_image
from .models import (GFLA, FlowEstimator, MotionExtractionNetwork, SequentialGFLA,
                     heatmap_from_joints)
from .nn import Module
from .optim import Adam
from .tasks import ClipTask, WarpTask, gen_clip_task, gen_skeleton_task, gen_warp_task
from .warp import upsample_flow, warp_with_flow

log = logging.getLogger(__name__)

HELDOUT_SEED = 10 ** 9  # skeleton evaluation seeds start here; training seeds stay below


class MetricsLog:
    """Append-only (step, name, value) CSV; steps must increase per metric name."""

    def __init__(self, path):
        self.path = Path(path)
        self._last: dict[str, int] = {}
        self.history: dict[str, list] = {}
        with open(self.path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(["step", "name", "value"])

    def log(self, step: int, **values) -> None:
        rows = []
        for name, val in values.items():
            if step <= self._last.get(name, -1):
                raise ContractError(f"metric {name}: step {step} is not after {self._last[name]}")
            self._last[name] = step
            val = float(val)
            self.history.setdefault(name, []).append((step, val))
            rows.append([step, name, repr(val)])
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(rows)


def read_metrics(path) -> dict[str, list]:
    out: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["name"], []).append((int(row["step"]), float(row["value"])))
    return out


# model containers: parameter paths are stable across run types so that a
# train-flow checkpoint warm-starts the flow branch of train-gen

class FlowModel(Module):
    def __init__(self, spec, seed: int = 0):
        super().__init__()
        self.flow = FlowEstimator(spec, rng=np.random.default_rng(seed))

    def __call__(self, x_s, p_s, p_t):
        return self.flow(x_s, p_s, p_t)


MODEL_KINDS = ("flow", "gfla", "sequential", "independent", "men")


def build_model(kind: str, cfg: RunConfig) -> Module:
    if kind == "flow":
        return FlowModel(cfg.model, cfg.seed)
    if kind in ("gfla", "independent"):
        return GFLA(cfg.model, cfg.seed)
    if kind == "sequential":
        return SequentialGFLA(cfg.model, cfg.seed)
    if kind == "men":
        m = cfg.men
        return MotionExtractionNetwork(cfg.task.joints, m.hidden, tuple(m.dilations), m.kernel, cfg.seed)
    raise ContractError(f"unknown model kind {kind!r}")


def model_kind(cfg: RunConfig) -> str:
    return {"train-flow": "flow", "train-gen": "gfla", "train-men": "men"}.get(
        cfg.command, cfg.anim.mode)


def save_checkpoint(path, model: Module, cfg: RunConfig, kind: str, step: int) -> None:
    meta = {"config": cfg.to_dict(), "model": kind, "step": step}
    save_tensors(path, model.state_dict(), meta)


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns (model, kind, config)."""
    from .config import config_from_dict

    p = Path(path)
    if not p.exists():
        raise ConfigError([f"checkpoint {p} not found"])
    arrays, meta = load_tensors(p)
    if "config" not in meta or meta.get("model") not in MODEL_KINDS:
        raise ContractError(f"{p}: checkpoint lacks an embedded config or model kind")
    cfg = config_from_dict(meta["config"])
    model = build_model(meta["model"], cfg)
    model.load_state_dict(arrays)
    return model, meta["model"], cfg


def warm_start(model: Module, path) -> int:
    """Copy every tensor of a checkpoint whose path exists in ``model``; returns the count."""
    p = Path(path)
    if not p.exists():
        raise ConfigError([f"warm_start: checkpoint {p} not found"])
    arrays, _ = load_tensors(p)
    own = dict(model.named_parameters())
    shared = [k for k in arrays if k in own]
    if not shared:
        raise ContractError(f"warm_start: {p} shares no tensors with the model")
    for k in shared:
        if tuple(arrays[k].shape) != own[k].value.shape:
            raise ContractError(f"tensor {k}: checkpoint shape {arrays[k].shape} "
                                f"!= model shape {own[k].value.shape}")
        own[k].assign(np.array(arrays[k]))
    return len(shared)


# inputs and metrics shared with evaluation

def pose_maps(joints, size: int) -> np.ndarray:
    return heatmap_from_joints(joints, size, size)[None]


def warp_inputs(task: WarpTask):
    size = task.source.shape[-1]
    return (task.source[None], task.target[None],
            pose_maps(task.joints_s, size), pose_maps(task.joints_t, size))


def flow_epe(w, gt_flow: np.ndarray, visible: Optional[np.ndarray] = None) -> float:
    """Mean end-point error at image resolution over visible pixels.

    ``w`` may be coarser than ``gt_flow``; it is upsampled with its offsets
    rescaled first.
    """
    w = np.asarray(w.data if isinstance(w, T.Tensor) else w, dtype=float)
    if w.ndim == 3:
        w = w[None]
    factor = gt_flow.shape[-1] // w.shape[-1]
    up = upsample_flow(w, factor).data[0] if factor > 1 else w[0]
    err = np.sqrt(((up - gt_flow) ** 2).sum(axis=0))
    if visible is None:
        return float(err.mean())
    vis = np.asarray(visible).reshape(err.shape) > 0.5
    return float(err[vis].mean())


def flow_roughness(w) -> float:
    """Mean per-window affine residual of a (1,2,H,W) or (2,H,W) flow."""
    w = np.asarray(w.data if isinstance(w, T.Tensor) else w)
    H, W = w.shape[-2:]
    return float(L.affine_regularization(w).item()) / ((H - 2) * (W - 2))


def frame_metrics(frames: list, clip: np.ndarray, source: np.ndarray) -> dict:
    """Per-frame L1 and adjacent-frame difference error; frame 0 of the prediction is the source."""
    pred = [source] + [np.asarray(f)[0] if np.ndim(f) == 4 else np.asarray(f) for f in frames]
    l1 = [float(np.abs(p - g).mean()) for p, g in zip(pred[1:], clip[1:])]
    diff = [float(np.abs((pred[k] - pred[k - 1]) - (clip[k] - clip[k - 1])).mean())
            for k in range(1, len(pred))]
    return {"frame_l1": float(np.mean(l1)), "frame_diff_error": float(np.mean(diff))}


def feature_pair(phi, a, b, height: int):
    try:
        return phi.layer_at(a, height), phi.layer_at(b, height)
    except Exception as exc:
        raise ConfigError([f"extractor has no layer at the flow resolution {height}: {exc}"]) from None


# run plumbing

class Run:
    def __init__(self, cfg: RunConfig, out=None):
        self.cfg = cfg
        self.out = Path(out or cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "samples").mkdir(exist_ok=True)
        cfg.save(self.out / "config.json")
        self.metrics = MetricsLog(self.out / "metrics.csv")
        self.t0 = time.time()

    def due(self, step: int) -> bool:
        s = self.cfg.schedule
        return step % s.log_every == 0 or step == s.steps

    def sample_due(self, step: int) -> bool:
        s = self.cfg.schedule
        return step > 0 and (step % s.sample_every == 0 or step == s.steps)

    def finish(self, model, kind, summary: dict) -> dict:
        from .plotting import plot_metrics

        step = self.cfg.schedule.steps
        save_checkpoint(self.out / "checkpoint.bin", model, self.cfg, kind, step)
        summary = {"command": self.cfg.command, "model": kind, "seed": self.cfg.seed,
                   "steps": step, **summary, "wall_time_s": round(time.time() - self.t0, 3)}
        (self.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        plot_metrics(self.metrics.history, self.out / "metrics.png")
        return summary


def _adam(params, cfg: RunConfig, scale: float = 1.0) -> Adam:
    o = cfg.optim
    return Adam(params, lr=o.lr * scale, betas=(o.beta1, o.beta2))


def warp_pool(cfg: RunConfig):
    """Training pairs (consecutive seeds from task.seed) and held-out pairs."""
    t = cfg.task
    train = [gen_warp_task(t.kind, t.size, t.seed + i, t.joints, **t.params) for i in range(t.pool)]
    held = [gen_warp_task(t.kind, t.size, HELDOUT_SEED + i, t.joints, **t.params)
            for i in range(t.heldout)]
    return train, held


def stack_inputs(tasks):
    parts = [warp_inputs(k) for k in tasks]
    return tuple(np.concatenate(z) for z in zip(*parts))


class PairSampler:
    """Deterministic minibatches from the pair pool; a single pair is used as is."""

    def __init__(self, tasks, batch_size: int, seed: int):
        self.tasks = tasks
        self.size = 1 if len(tasks) == 1 else min(batch_size, len(tasks))
        self.rng = np.random.default_rng(seed)
        self._fixed = stack_inputs(tasks) if len(tasks) == 1 else None

    def __call__(self):
        if self._fixed is not None:
            return self.tasks, self._fixed
        idx = np.sort(self.rng.choice(len(self.tasks), self.size, replace=False))
        chosen = [self.tasks[i] for i in idx]
        return chosen, stack_inputs(chosen)


def batch_epe(w, tasks) -> float:
    wd = np.asarray(w.data if isinstance(w, T.Tensor) else w)
    return float(np.mean([flow_epe(wd[i], k.gt_flow, k.visible) for i, k in enumerate(tasks)]))


def train_flow(cfg: RunConfig, out=None) -> dict:
    """Stage 1: the flow estimator alone under lambda_c L_c + lambda_r L_r."""
    run = Run(cfg, out)
    tasks, held = warp_pool(cfg)
    sampler = PairSampler(tasks, cfg.optim.batch_size, cfg.seed + 2)
    model = FlowModel(cfg.model, cfg.seed)
    phi = L.FeatureExtractor(cfg.model.image_channels, cfg.extractor.channels, cfg.extractor.seed)
    opt = _adam(model.parameters(), cfg)
    lw = cfg.loss
    for step in range(cfg.schedule.steps + 1):
        chosen, (xs, xt, ps, pt) = sampler()
        vs, vt = feature_pair(phi, xs, xt, cfg.model.coarsest)
        with T.Tape() as tape:
            w, m = model(xs, ps, pt)
            lc = L.sampling_correctness(vs, vt, w)
            lr_ = L.affine_regularization(w)
            loss = T.add(T.mul(lc, lw.c), T.mul(lr_, lw.r))
        if run.due(step):
            run.metrics.log(step, loss=loss.item(), L_c=lc.item(), L_r=lr_.item(),
                            epe=batch_epe(w, chosen))
        if run.sample_due(step):
            _emit_flow_sample(run.out / "samples", step, chosen[0], w[0:1], m[0:1])
        if step == cfg.schedule.steps:
            break
        opt.step(tape.backward(loss))
    final = _flow_summary(model, phi, tasks[0], cfg)
    for k, v in _heldout(model, phi, held, cfg).items():
        final[k] = v
    return run.finish(model, "flow", final)


def _flow_summary(model, phi, task, cfg, prefix="final_") -> dict:
    xs, xt, ps, pt = warp_inputs(task)
    vs, vt = feature_pair(phi, xs, xt, cfg.model.coarsest)
    if isinstance(model, GFLA):
        x_hat, w, _ = model(xs, ps, pt)
    else:
        (w, _), x_hat = model(xs, ps, pt), None
    out = {f"{prefix}epe": flow_epe(w, task.gt_flow, task.visible),
           f"{prefix}L_c": L.sampling_correctness(vs, vt, w).item(),
           f"{prefix}L_r": L.affine_regularization(w).item()}
    if prefix == "final_":
        out["flow_roughness"] = flow_roughness(w)
    if x_hat is not None:
        out[f"{prefix}l1"] = L.l1_reconstruction(xt, x_hat).item()
    return out


def _heldout(model, phi, held, cfg) -> dict:
    if not held:
        return {}
    rows = [_flow_summary(model, phi, k, cfg, prefix="") for k in held]
    return {f"heldout_{k}": float(np.mean([r[k] for r in rows])) for k in rows[0]}


def _emit_flow_sample(d, step, task, w, m):
    factor = task.source.shape[-1] // w.shape[-1]
    up = upsample_flow(w.data, factor).data
    save_image(d / f"step{step:06d}_warped.png", warp_with_flow(task.source[None], up).data[0])
    save_image(d / f"step{step:06d}_flow.png", flow_to_rgb(up[0]))


def generation_terms(model: GFLA, phi, D, xs, xt, ps, pt, spec):
    """Forward pass and the six generator terms for one source/target pair."""
    x_hat, w, m = model(xs, ps, pt)
    vs, vt = feature_pair(phi, xs, xt, spec.coarsest)
    terms = {
        "c": L.sampling_correctness(vs, vt, w),
        "r": L.affine_regularization(w),
        "l1": L.l1_reconstruction(xt, x_hat),
        "adv": L.generator_adversarial_loss(D, x_hat),
        "perc": L.perceptual_loss(xt, x_hat, phi),
        "style": L.style_loss(xt, x_hat, phi),
    }
    return x_hat, w, m, terms


def train_gen(cfg: RunConfig, out=None) -> dict:
    """Stage 2: the whole generator end to end against a discriminator."""
    run = Run(cfg, out)
    tasks, held = warp_pool(cfg)
    sampler = PairSampler(tasks, cfg.optim.batch_size, cfg.seed + 2)
    model = GFLA(cfg.model, cfg.seed)
    warmed = warm_start(model, cfg.warm_start) if cfg.warm_start else 0
    rng = np.random.default_rng(cfg.seed + 1)
    D = L.Discriminator(cfg.model.image_channels, rng=rng)
    phi = L.FeatureExtractor(cfg.model.image_channels, cfg.extractor.channels, cfg.extractor.seed)
    opt_g = _adam(model.parameters(), cfg)
    opt_d = _adam(D.parameters(), cfg, cfg.optim.lr_d_ratio)
    for step in range(cfg.schedule.steps + 1):
        chosen, (xs, xt, ps, pt) = sampler()
        with T.Tape() as tape:
            x_hat, w, m, terms = generation_terms(model, phi, D, xs, xt, ps, pt, cfg.model)
            loss = L.joint_generation_loss(terms, cfg.loss)
        last = step == cfg.schedule.steps
        if not last:
            g = tape.backward(loss)
        with T.Tape() as d_tape:
            d_loss = L.discriminator_loss(D, xt, x_hat)
        if run.due(step):
            run.metrics.log(step, loss=loss.item(), d_loss=d_loss.item(), epe=batch_epe(w, chosen),
                            **{f"L_{k}": v.item() for k, v in terms.items()})
        if run.sample_due(step):
            save_image(run.out / "samples" / f"step{step:06d}_output.png", x_hat.data[0])
        if last:
            break
        opt_g.step(g)
        opt_d.step(d_tape.backward(d_loss))
    final = _flow_summary(model, phi, tasks[0], cfg)
    final.update(_heldout(model, phi, held, cfg))
    final["warm_started_tensors"] = warmed
    return run.finish(model, "gfla", final)


def clip_inputs(clip: ClipTask):
    size = clip.frames.shape[-1]
    poses = [pose_maps(j, size) for j in clip.joints]
    return [f[None] for f in clip.frames], poses


def rollout(model, kind: str, frames, poses, detach_prev: bool = False):
    """Generate frames 1..K; returns (outputs, flows, masks, previous inputs)."""
    xs, ps = frames[0], poses[0]
    outs, flows, masks, prevs = [], [], [], []
    x_prev, p_prev = xs, ps
    for k in range(1, len(frames)):
        if kind == "sequential":
            xp = x_prev.detach() if detach_prev and isinstance(x_prev, T.Tensor) else x_prev
            x_k, aux = model.step(xs, ps, xp, p_prev, poses[k])
            flows.append((aux["w_s"], aux["w_p"]))
            masks.append((aux["m_s"], aux["m_p"]))
            prevs.append(xp)
        else:
            x_k, w, m = model(xs, ps, poses[k])
            flows.append((w,))
            masks.append((m,))
        outs.append(x_k)
        x_prev, p_prev = x_k, poses[k]
    return outs, flows, masks, prevs


def train_anim(cfg: RunConfig, out=None) -> dict:
    """Clip training: mean per-frame generator loss plus the temporal adversarial term."""
    run = Run(cfg, out)
    t = cfg.task
    clip = gen_clip_task(t.frames, t.size, t.seed, t.joints, **t.params)
    kind = cfg.anim.mode
    model = build_model(kind, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    D = L.Discriminator(cfg.model.image_channels, rng=rng)
    D_v = L.TemporalDiscriminator(t.frames, cfg.model.image_channels, rng=rng)
    phi = L.FeatureExtractor(cfg.model.image_channels, cfg.extractor.channels, cfg.extractor.seed)
    frames, poses = clip_inputs(clip)
    feats = [phi.layer_at(f, cfg.model.coarsest) for f in frames]
    opt_g = _adam(model.parameters(), cfg)
    opt_d = _adam(D.parameters() + D_v.parameters(), cfg, cfg.optim.lr_d_ratio)
    lw = cfg.loss
    real_clip = np.stack([f[0] for f in frames[1:]])[None]
    for step in range(cfg.schedule.steps + 1):
        with T.Tape() as tape:
            outs, flows, masks, prevs = rollout(model, kind, frames, poses)
            frame_losses = []
            for k, x_k in enumerate(outs, start=1):
                terms = {"l1": L.l1_reconstruction(frames[k], x_k),
                         "adv": L.generator_adversarial_loss(D, x_k),
                         "perc": L.perceptual_loss(frames[k], x_k, phi),
                         "style": L.style_loss(frames[k], x_k, phi),
                         "c": L.sampling_correctness(feats[0], feats[k], flows[k - 1][0]),
                         "r": L.affine_regularization(flows[k - 1][0])}
                if kind == "sequential":
                    v_prev = phi.layer_at(prevs[k - 1].detach() if isinstance(prevs[k - 1], T.Tensor)
                                          else prevs[k - 1], cfg.model.coarsest)
                    terms["c"] = T.add(terms["c"], L.sampling_correctness(v_prev, feats[k], flows[k - 1][1]))
                    terms["r"] = T.add(terms["r"], L.affine_regularization(flows[k - 1][1]))
                frame_losses.append(L.joint_generation_loss(terms, lw))
            fake_clip = T.reshape(T.concat(outs, axis=0), (1,) + real_clip.shape[1:])
            g_v = L.generator_adversarial_loss(D_v, L.stack_clip(fake_clip))
            loss = L.animation_loss(frame_losses, g_v, lw.video)
        last = step == cfg.schedule.steps
        if not last:
            g = tape.backward(loss)
        with T.Tape() as d_tape:
            d_loss = L.discriminator_loss(D, np.concatenate([f for f in frames[1:]]),
                                          T.concat(outs, axis=0))
            d_v, _ = L.temporal_adversarial(D_v, real_clip, fake_clip.detach())
            d_total = T.add(d_loss, d_v)
        fm = frame_metrics([o.data for o in outs], clip.frames, clip.source)
        if run.due(step):
            run.metrics.log(step, loss=loss.item(), d_loss=d_total.item(), **fm)
        if run.sample_due(step):
            for k, o in enumerate(outs, start=1):
                save_image(run.out / "samples" / f"step{step:06d}_frame{k:02d}.png", o.data[0])
        if last:
            break
        opt_g.step(g)
        opt_d.step(d_tape.backward(d_total))
    return run.finish(model, kind, {f"final_{k}": v for k, v in fm.items()})


def skeleton_batch(seeds, cfg: RunConfig):
    t = cfg.task
    tasks = [gen_skeleton_task(t.joints, t.sequence_length, sigma_n=t.sigma_n, seed=int(s))
             for s in seeds]
    return np.stack([k.j_noisy for k in tasks]), np.stack([k.j_gt for k in tasks])


def men_metrics(men, J_noisy, J_gt) -> dict:
    out = men(J_noisy).data
    return {"mpjpe_before": float(L.mpjpe(J_noisy, J_gt).item()),
            "mpjpe_after": float(L.mpjpe(out, J_gt).item()),
            "mpjpe_before_euclidean": float(L.mpjpe(J_noisy, J_gt, "euclidean").item()),
            "mpjpe_after_euclidean": float(L.mpjpe(out, J_gt, "euclidean").item())}


def train_men(cfg: RunConfig, out=None) -> dict:
    """Skeleton denoiser trained on fresh noisy sequences each step, scored on held-out ones."""
    run = Run(cfg, out)
    men = build_model("men", cfg)
    rng = np.random.default_rng(cfg.seed)
    held_noisy, held_gt = skeleton_batch(HELDOUT_SEED + np.arange(cfg.schedule.eval_sequences), cfg)
    opt = _adam(men.parameters(), cfg)
    for step in range(cfg.schedule.steps + 1):
        if run.due(step):
            run.metrics.log(step, **{k: v for k, v in men_metrics(men, held_noisy, held_gt).items()
                                     if not k.endswith("euclidean")})
        if step == cfg.schedule.steps:
            break
        noisy, gt = skeleton_batch(rng.integers(0, HELDOUT_SEED, cfg.optim.batch_size), cfg)
        with T.Tape() as tape:
            loss = L.mpjpe(men(noisy), gt)
        opt.step(tape.backward(loss))
    final = men_metrics(men, held_noisy, held_gt)
    final["ratio"] = final["mpjpe_after"] / final["mpjpe_before"]
    return run.finish(men, "men", final)


TRAINERS = {"train-flow": train_flow, "train-gen": train_gen, "train-anim": train_anim,
            "train-men": train_men}


def run_command(cfg: RunConfig, out=None) -> dict:
    return TRAINERS[cfg.command](cfg, out)
