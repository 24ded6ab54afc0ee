"""Procedural tasks with exact ground truth.

Warp tasks pair a textured source image with a target built by warping the
source through a known flow; skeleton tasks add Gaussian jitter to smooth
joint trajectories; clip tasks move a textured sprite over a static
background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .checkpoint import load_tensors, save_tensors
from .errors import ContractError
from .images import save_image
from .warp import bilinear_sample, identity_grid

WARP_KINDS = ("translation", "rotation", "affine", "articulated")


# textures

def value_noise(size: int, rng: np.random.Generator, channels: int = 3,
                cells=(4, 8), weights=(1.0, 0.5)) -> np.ndarray:
    """Band-limited noise: coarse random lattices upsampled with cubic splines."""
    out = np.zeros((channels, size, size))
    for c, wgt in zip(cells, weights):
        lattice = rng.normal(size=(channels, c + 3, c + 3))
        zoom = (size + 3 * size / c) / (c + 3)
        up = ndimage.zoom(lattice, (1, zoom, zoom), order=3, mode="reflect")
        off = int(round(1.5 * size / c))
        out += wgt * up[:, off:off + size, off:off + size]
    return out


def texture(size: int, rng: np.random.Generator, channels: int = 3, shapes: int = 4) -> np.ndarray:
    """Value noise plus a few flat-coloured discs and boxes, squashed into (-1, 1)."""
    img = value_noise(size, rng, channels)
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    for _ in range(shapes):
        colour = rng.uniform(-1.5, 1.5, size=(channels, 1, 1))
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(size / 12, size / 6)
        if rng.random() < 0.5:
            inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        else:
            inside = (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= 0.6 * r)
        # soft edge keeps the image band-limited
        soft = ndimage.gaussian_filter(inside.astype(float), 1.0)
        img = img * (1 - soft) + colour * soft
    return np.tanh(0.8 * img)


# motions: target pixel p samples the source at A p + b

def _rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass
class Motion:
    A: np.ndarray
    b: np.ndarray

    def flow(self, height: int, width: int) -> np.ndarray:
        grid = identity_grid(height, width).data
        src = np.einsum("ij,jhw->ihw", self.A, grid) + self.b[:, None, None]
        return src - grid

    def to_target(self, source_points: np.ndarray) -> np.ndarray:
        """Invert the map for (M, 2) source points."""
        return np.linalg.solve(self.A, (source_points - self.b).T).T

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Motion":
        return cls(np.eye(2), np.array([dx, dy], dtype=float))

    @classmethod
    def rotation(cls, theta_deg: float, center, scale: float = 1.0, shift=(0.0, 0.0)) -> "Motion":
        A = scale * _rotation(np.deg2rad(theta_deg))
        c = np.asarray(center, dtype=float)
        return cls(A, c - A @ c + np.asarray(shift, dtype=float))


@dataclass
class WarpTask:
    kind: str
    source: np.ndarray  # (C,H,W)
    target: np.ndarray  # (C,H,W)
    gt_flow: np.ndarray  # (2,H,W)
    visible: np.ndarray  # (1,H,W)
    joints_s: np.ndarray  # (2N,)
    joints_t: np.ndarray  # (2N,)
    seed: int
    params: dict = field(default_factory=dict)


def _sample(img: np.ndarray, flow: np.ndarray) -> np.ndarray:
    grid = identity_grid(*flow.shape[1:]).data
    return bilinear_sample(img, grid + flow).data


def _in_bounds(flow: np.ndarray) -> np.ndarray:
    H, W = flow.shape[1:]
    grid = identity_grid(H, W).data
    x, y = grid + flow
    return (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)


def _corner_mask(region: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """True where all four bilinear neighbours of p + w(p) lie inside ``region``."""
    H, W = region.shape
    grid = identity_grid(H, W).data
    x, y = grid + flow
    x0 = np.clip(np.floor(x).astype(int), 0, W - 1)
    y0 = np.clip(np.floor(y).astype(int), 0, H - 1)
    x1 = np.clip(x0 + 1, 0, W - 1)
    y1 = np.clip(y0 + 1, 0, H - 1)
    return region[y0, x0] & region[y0, x1] & region[y1, x0] & region[y1, x1]


def _joints(rng, size, n, margin):
    return rng.uniform(margin, size - 1 - margin, size=(n, 2))


def gen_warp_task(kind: str, size: int = 64, seed: int = 0, joints: int = 8, **params) -> WarpTask:
    """Build a deterministic warp task.

    kinds and their parameters:
      translation: dx=3, dy=-2
      rotation:    theta=15 (degrees, about the image centre)
      affine:      theta=10, scale=1.1, shift=(2, -1)
      articulated: back=(2, 1) translation of the background; front part is a
                   disc (radius size/5) moved by front_theta=20 degrees about
                   its centre plus front_shift=(-4, 3)
    """
    if kind not in WARP_KINDS:
        raise ContractError(f"unknown warp task kind {kind!r}; expected one of {WARP_KINDS}")
    if size < 16:
        raise ContractError(f"task size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    center = ((size - 1) / 2.0, (size - 1) / 2.0)
    if kind == "translation":
        p = {"dx": 3.0, "dy": -2.0} | params
        motion = Motion.translation(p["dx"], p["dy"])
    elif kind == "rotation":
        p = {"theta": 15.0} | params
        motion = Motion.rotation(p["theta"], center)
    elif kind == "affine":
        p = {"theta": 10.0, "scale": 1.1, "shift": (2.0, -1.0)} | params
        motion = Motion.rotation(p["theta"], center, p["scale"], p["shift"])
    else:
        return _articulated(size, seed, rng, joints, params)

    src = texture(size, rng)
    flow = motion.flow(size, size)
    tgt = _sample(src, flow)
    visible = _in_bounds(flow)[None].astype(float)
    j_s = _joints(rng, size, joints, size / 6)
    j_t = motion.to_target(j_s)
    p = {k: (list(v) if isinstance(v, tuple) else v) for k, v in p.items()}
    return WarpTask(kind, src, tgt, flow, visible, j_s.ravel(), j_t.ravel(), seed, p)


def _articulated(size, seed, rng, joints, params) -> WarpTask:
    p = {"back": (2.0, 1.0), "front_theta": 20.0, "front_shift": (-4.0, 3.0),
         "radius": size / 5.0} | params
    bg = texture(size, rng)
    fg = texture(size, rng)
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    c_part = rng.uniform(0.35 * size, 0.65 * size, 2)
    region_s = (xs - c_part[0]) ** 2 + (ys - c_part[1]) ** 2 <= p["radius"] ** 2
    source = np.where(region_s[None], fg, bg)

    back = Motion.translation(*p["back"])
    front = Motion.rotation(p["front_theta"], c_part, shift=p["front_shift"])
    w_back = back.flow(size, size)
    w_front = front.flow(size, size)
    # a target pixel belongs to the front part when its front-motion source lies in the disc
    sx, sy = identity_grid(size, size).data + w_front
    region_t = (sx - c_part[0]) ** 2 + (sy - c_part[1]) ** 2 <= p["radius"] ** 2
    flow = np.where(region_t[None], w_front, w_back)

    inb = _in_bounds(flow)
    vis_front = region_t & _corner_mask(region_s, w_front) & inb
    vis_back = ~region_t & _corner_mask(~region_s, w_back) & inb
    visible = vis_front | vis_back

    target = _sample(source, flow)
    hidden_front = _sample(fg, w_front)
    hidden_back = _sample(bg, w_back)
    target = np.where(visible[None], target,
                      np.where(region_t[None], hidden_front, hidden_back))

    n_front = joints // 2
    ang = rng.uniform(0, 2 * np.pi, n_front)
    rad = rng.uniform(0.2, 0.9, n_front) * p["radius"]
    j_front = c_part + np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    j_back = _joints(rng, size, joints - n_front, size / 6)
    j_s = np.concatenate([j_front, j_back])
    j_t = np.concatenate([front.to_target(j_front), back.to_target(j_back)])
    p = {k: (list(v) if isinstance(v, tuple) else float(v)) for k, v in p.items()}
    p["part_center"] = c_part.tolist()
    return WarpTask("articulated", source, target, flow, visible[None].astype(float),
                    j_s.ravel(), j_t.ravel(), seed, p)


# skeletons

@dataclass
class SkeletonTask:
    j_gt: np.ndarray  # (2N, K)
    j_noisy: np.ndarray  # (2N, K)
    sigma_n: float
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def noise(self) -> np.ndarray:
        return self.j_noisy - self.j_gt


def gen_skeleton_task(joints: int = 8, frames: int = 64, amplitude=(3.0, 10.0),
                      period=(16.0, 64.0), sigma_n: float = 2.0, seed: int = 0,
                      canvas: float = 64.0) -> SkeletonTask:
    """Sinusoidal joint trajectories plus iid Gaussian jitter of std ``sigma_n``."""
    if frames < 16:
        raise ContractError(f"skeleton sequences need K >= 16 frames, got {frames}")
    rng = np.random.default_rng(seed)
    k = np.arange(frames, dtype=float)
    base = rng.uniform(0.2 * canvas, 0.8 * canvas, size=(2 * joints, 1))
    amp = rng.uniform(*amplitude, size=(2 * joints, 1))
    per = rng.uniform(*period, size=(2 * joints, 1))
    phase = rng.uniform(0, 2 * np.pi, size=(2 * joints, 1))
    j_gt = base + amp * np.sin(2 * np.pi * k[None] / per + phase)
    j_noisy = j_gt + rng.normal(0.0, sigma_n, size=j_gt.shape) if sigma_n > 0 else j_gt.copy()
    return SkeletonTask(j_gt, j_noisy, float(sigma_n), seed,
                        {"joints": joints, "frames": frames, "amplitude": list(amplitude),
                         "period": list(period), "canvas": canvas})


# sprite clips

@dataclass
class ClipTask:
    frames: np.ndarray  # (K+1, C, H, W); frame 0 is the source
    joints: np.ndarray  # (K+1, 2N)
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def source(self) -> np.ndarray:
        return self.frames[0]


def gen_clip_task(frames: int = 4, size: int = 32, seed: int = 0, joints: int = 8,
                  step=(2.0, 1.0), spin: float = 6.0, radius: Optional[float] = None) -> ClipTask:
    """A textured disc sprite drifting (``step`` px/frame) and spinning over a static background."""
    rng = np.random.default_rng(seed)
    radius = size / 4.0 if radius is None else radius
    bg = texture(size, rng)
    sprite = texture(size, rng)
    grid = identity_grid(size, size).data
    c0 = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
    start = rng.uniform(0.35 * size, 0.5 * size, 2)
    heading = rng.choice([-1.0, 1.0], 2) * np.asarray(step, dtype=float)
    local = rng.uniform(-0.8, 0.8, size=(joints // 2, 2)) * radius / np.sqrt(2)
    bg_j = _joints(rng, size, joints - joints // 2, size / 6)
    out, js = [], []
    for k in range(frames + 1):
        centre = start + k * heading
        motion = Motion.rotation(-spin * k, centre, shift=c0 - centre)
        sprite_flow = motion.flow(size, size)
        rel = grid - centre[:, None, None]
        inside = (rel ** 2).sum(axis=0) <= radius ** 2
        frame = np.where(inside[None], _sample(sprite, sprite_flow), bg)
        out.append(frame)
        sprite_j = motion.to_target(c0 + local)
        js.append(np.concatenate([sprite_j, bg_j]).ravel())
    return ClipTask(np.stack(out), np.stack(js), seed,
                    {"frames": frames, "size": size, "step": list(step), "spin": spin,
                     "radius": radius})


# serialization

def save_task(task, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if isinstance(task, WarpTask):
        meta = {"type": "warp", "kind": task.kind, "seed": task.seed, "params": task.params}
        save_tensors(d / "task.bin", {"source": task.source, "target": task.target,
                                      "gt_flow": task.gt_flow, "visible": task.visible,
                                      "joints_s": task.joints_s, "joints_t": task.joints_t}, meta)
        save_image(d / "source.png", task.source)
        save_image(d / "target.png", task.target)
    elif isinstance(task, SkeletonTask):
        meta = {"type": "skeleton", "seed": task.seed, "sigma_n": task.sigma_n, "params": task.params}
        save_tensors(d / "task.bin", {"j_gt": task.j_gt, "j_noisy": task.j_noisy}, meta)
    elif isinstance(task, ClipTask):
        meta = {"type": "clip", "seed": task.seed, "params": task.params}
        save_tensors(d / "task.bin", {"frames": task.frames, "joints": task.joints}, meta)
        for k, fr in enumerate(task.frames):
            save_image(d / f"frame{k:02d}.png", fr)
    else:
        raise ContractError(f"cannot serialise {type(task).__name__}")
    (d / "task.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def load_task(directory):
    d = Path(directory)
    if not (d / "task.bin").exists():
        raise ContractError(f"{d} does not contain a task (task.bin missing)")
    arrays, meta = load_tensors(d / "task.bin")
    kind = meta.get("type")
    if kind == "warp":
        return WarpTask(meta["kind"], arrays["source"], arrays["target"], arrays["gt_flow"],
                        arrays["visible"], arrays["joints_s"], arrays["joints_t"], meta["seed"],
                        meta.get("params", {}))
    if kind == "skeleton":
        return SkeletonTask(arrays["j_gt"], arrays["j_noisy"], meta["sigma_n"], meta["seed"],
                            meta.get("params", {}))
    if kind == "clip":
        return ClipTask(arrays["frames"], arrays["joints"], meta["seed"], meta.get("params", {}))
    raise ContractError(f"{d}: unknown task type {kind!r}")
