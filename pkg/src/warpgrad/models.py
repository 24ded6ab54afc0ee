"""Desk-scale model assemblies: flow estimator, texture renderer, sequential
generator, and the motion extraction (skeleton denoising) network."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import Conv1d, Conv2d, ConvBlock, Linear, Module, ResBlock, UpBlock
from .tensor import Tensor, as_tensor
from .warp import KernelPredictor, fuse_with_mask, local_attention_warp, upsample_flow, warp_with_flow


def heatmap_from_joints(joints, height: int, width: int, sigma: float = 1.5) -> np.ndarray:
    """One Gaussian blob channel per joint, centred on the joint's nearest pixel.

    ``joints`` is flat ``[x0, y0, x1, y1, ...]``. Values beyond 3 sigma are
    zero; joints outside the frame give an all-zero channel.
    """
    if sigma <= 0:
        raise ContractError(f"heat-map sigma must be positive, got {sigma}")
    j = np.asarray(joints, dtype=float).reshape(-1, 2)
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    out = np.zeros((len(j), height, width))
    for i, (x, y) in enumerate(j):
        if not (np.isfinite(x) and np.isfinite(y)):
            continue
        cx, cy = np.round(x), np.round(y)
        if cx < 0 or cx > width - 1 or cy < 0 or cy > height - 1:
            continue
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        blob = np.exp(-d2 / (2.0 * sigma ** 2))
        blob[d2 > (3.0 * sigma) ** 2] = 0.0
        out[i] = blob
    return out


@dataclass
class ModelSpec:
    """Architecture hyper-parameters shared by the generator components."""

    image_size: int = 64
    image_channels: int = 3
    joints: int = 8
    base_channels: int = 32
    max_channels: int = 128
    res_blocks: int = 2
    attention_scales: list = field(default_factory=lambda: [16])
    patch_sizes: list = field(default_factory=lambda: [3])
    attention: str = "local"  # "local" or "bilinear" (Bi-Sample ablation)
    bottleneck: bool = True

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ContractError("; ".join(problems))

    def problems(self) -> list:
        p = []
        s = self.image_size
        if len(self.attention_scales) != len(self.patch_sizes):
            p.append("attention_scales and patch_sizes must have equal length")
        for sc in self.attention_scales:
            if sc > s or s % sc or (s // sc) & (s // sc - 1):
                p.append(f"attention scale {sc} must be image_size / 2**k")
        for n in self.patch_sizes:
            if n < 1 or n % 2 == 0:
                p.append(f"patch size {n} must be odd")
        if self.attention not in ("local", "bilinear"):
            p.append(f"attention must be 'local' or 'bilinear', got {self.attention!r}")
        if self.base_channels < 1 or self.res_blocks < 0:
            p.append("base_channels must be >= 1 and res_blocks >= 0")
        return p

    @property
    def coarsest(self) -> int:
        return min(self.attention_scales)

    @property
    def levels(self) -> int:
        return int(np.log2(self.image_size // self.coarsest))

    def channels_at(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, self.max_channels)

    def patch_size_at(self, scale: int) -> int:
        return self.patch_sizes[self.attention_scales.index(scale)]


class Encoder(Module):
    """Stem + ``levels`` stride-2 stages; returns features at every level."""

    def __init__(self, cin: int, spec: ModelSpec, *, rng):
        super().__init__()
        self.stem = ConvBlock(cin, spec.channels_at(0), rng=rng)
        self.downs, self.res = [], []
        for lv in range(1, spec.levels + 1):
            self.downs.append(ConvBlock(spec.channels_at(lv - 1), spec.channels_at(lv), stride=2, rng=rng))
            self.res.append([ResBlock(spec.channels_at(lv), rng=rng) for _ in range(spec.res_blocks)])

    def named_parameters(self, prefix=""):
        yield from self.stem.named_parameters(prefix + "stem.")
        for i, d in enumerate(self.downs):
            yield from d.named_parameters(f"{prefix}downs.{i}.")
            for j, r in enumerate(self.res[i]):
                yield from r.named_parameters(f"{prefix}res.{i}.{j}.")

    def __call__(self, x) -> list:
        h = self.stem(x)
        feats = [h]
        for down, blocks in zip(self.downs, self.res):
            h = down(h)
            for b in blocks:
                h = b(h)
            feats.append(h)
        return feats


class FlowEstimator(Module):
    """Fully convolutional auto-encoder with a shared trunk and two heads.

    Inputs (source image, source pose, target pose) are stacked on channels.
    Outputs the flow (linear head, pixels at the coarsest attention scale) and
    the occlusion mask (sigmoid head) at that scale.
    """

    def __init__(self, spec: ModelSpec, *, rng):
        super().__init__()
        self.spec = spec
        cin = spec.image_channels + 2 * spec.joints
        self.encoder = Encoder(cin, spec, rng=rng)
        c = spec.channels_at(spec.levels)
        self.bottleneck = None
        if spec.bottleneck and spec.coarsest >= 4:
            self.bottleneck = [ConvBlock(c, c, stride=2, rng=rng), ResBlock(c, rng=rng), UpBlock(c, c, rng=rng)]
        self.flow_head = Conv2d(c, 2, 3, rng=rng, gain=0.05)
        self.mask_head = Conv2d(c, 1, 3, rng=rng, gain=0.1)

    def __call__(self, x_s, p_s, p_t) -> tuple[Tensor, Tensor]:
        x_s, p_s, p_t = as_tensor(x_s), as_tensor(p_s), as_tensor(p_t)
        if not (x_s.shape[-2:] == p_s.shape[-2:] == p_t.shape[-2:]):
            raise ContractError(f"flow estimator inputs differ in resolution: "
                                f"{x_s.shape}, {p_s.shape}, {p_t.shape}")
        if x_s.shape[-1] != self.spec.image_size:
            raise ContractError(f"expected {self.spec.image_size}px inputs, got {x_s.shape}")
        h = self.encoder(T.concat([x_s, p_s, p_t], axis=1))[-1]
        if self.bottleneck is not None:
            down, res, up = self.bottleneck
            h = T.add(h, up(res(down(h))))
        w = self.flow_head(h)
        m = T.sigmoid(self.mask_head(h))
        return w, m


def flow_estimator_forward(F: FlowEstimator, x_s, p_s, p_t):
    return F(x_s, p_s, p_t)


class AttentionBlock(Module):
    """Warp source features to a target layout, then fuse with the target features."""

    def __init__(self, channels: int, n: int, mode: str, *, rng):
        super().__init__()
        self.mode = mode
        # drawn in both modes so the ablation variants share every other weight
        sub = np.random.default_rng(rng.integers(2 ** 62))
        self.kernel = KernelPredictor(channels, n, sub) if mode == "local" else None

    def __call__(self, f_s, f_t, w, m) -> Tensor:
        if self.mode == "local":
            f_attn = local_attention_warp(f_s, f_t, w, self.kernel)
        else:
            f_attn = warp_with_flow(f_s, w)
        return fuse_with_mask(f_t, f_attn, m)


class Renderer(Module):
    """Local neural texture renderer.

    A source-image encoder and a target-pose encoder feed attention blocks at
    the configured scales; a shared decoder produces a tanh image. With
    ``branches=2`` a second attention path warps the previous frame, and the
    per-scale branch outputs are summed.
    """

    def __init__(self, spec: ModelSpec, *, rng, branches: int = 1):
        super().__init__()
        self.spec = spec
        self.branches = branches
        self.image_encoder = Encoder(spec.image_channels, spec, rng=rng)
        self.pose_encoder = Encoder(spec.joints, spec, rng=rng)
        self.attn = {}
        for b in range(branches):
            for sc in spec.attention_scales:
                lv = int(np.log2(spec.image_size // sc))
                blk = AttentionBlock(spec.channels_at(lv), spec.patch_size_at(sc), spec.attention, rng=rng)
                self.attn[(b, sc)] = blk
        L = spec.levels
        self.mid = [ResBlock(spec.channels_at(L), rng=rng) for _ in range(spec.res_blocks)]
        self.ups = [UpBlock(spec.channels_at(lv + 1), spec.channels_at(lv), rng=rng)
                    for lv in reversed(range(L))]
        self.out = Conv2d(spec.channels_at(0), spec.image_channels, 3, rng=rng)

    def named_parameters(self, prefix=""):
        yield from self.image_encoder.named_parameters(prefix + "image_encoder.")
        yield from self.pose_encoder.named_parameters(prefix + "pose_encoder.")
        for (b, sc), blk in self.attn.items():
            yield from blk.named_parameters(f"{prefix}attn.{b}.{sc}.")
        for i, r in enumerate(self.mid):
            yield from r.named_parameters(f"{prefix}mid.{i}.")
        for i, u in enumerate(self.ups):
            yield from u.named_parameters(f"{prefix}ups.{i}.")
        yield from self.out.named_parameters(prefix + "out.")

    def _attend(self, h, sources, flows, masks, scale):
        size = self.spec.image_size
        lv = int(np.log2(size // scale))
        outs = []
        for b, feats in enumerate(sources):
            factor = scale // self.spec.coarsest
            w = upsample_flow(flows[b], factor)
            m = T.bilinear_upsample(masks[b], factor) if factor > 1 else masks[b]
            outs.append(self.attn[(b, scale)](feats[lv], h, w, m))
        total = outs[0]
        for o in outs[1:]:
            total = T.add(total, o)
        return total

    def __call__(self, images: Sequence, p_t, flows: Sequence, masks: Sequence) -> Tensor:
        if not (len(images) == len(flows) == len(masks) == self.branches):
            raise ContractError(f"renderer expects {self.branches} image/flow/mask triples")
        spec = self.spec
        sources = [self.image_encoder(x) for x in images]
        h = self.pose_encoder(p_t)[-1]
        scale = spec.coarsest
        h = self._attend(h, sources, flows, masks, scale)
        for r in self.mid:
            h = r(h)
        for up in self.ups:
            h = up(h)
            scale *= 2
            if scale in spec.attention_scales:
                h = self._attend(h, sources, flows, masks, scale)
        return T.tanh(self.out(h))


def renderer_forward(G: Renderer, x_s, p_t, w, m) -> Tensor:
    return G([x_s], p_t, [w], [m])


class GFLA(Module):
    """Flow estimator + renderer for single-image pose transfer."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.flow = FlowEstimator(spec, rng=rng)
        self.renderer = Renderer(spec, rng=rng)

    def __call__(self, x_s, p_s, p_t):
        w, m = self.flow(x_s, p_s, p_t)
        return self.renderer([x_s], p_t, [w], [m]), w, m


class SequentialGFLA(Module):
    """Recurrent generator warping both the source image and the previous output."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.flow_s = FlowEstimator(spec, rng=rng)
        self.flow_p = FlowEstimator(spec, rng=rng)
        self.renderer = Renderer(spec, rng=rng, branches=2)

    def step(self, x_s, p_s, x_prev, p_prev, p_k, force_masks_zero: bool = False):
        return sequential_step(self.flow_s, self.flow_p, self.renderer, x_s, p_s, x_prev, p_prev,
                               p_k, force_masks_zero)

    def rollout(self, x_s, p_s, poses: Sequence) -> list:
        """Generate one frame per target pose; the first step sees (x_s, p_s) as previous."""
        frames = []
        x_prev, p_prev = x_s, p_s
        for p_k in poses:
            x_k, _ = self.step(x_s, p_s, x_prev, p_prev, p_k)
            frames.append(x_k)
            x_prev, p_prev = x_k, p_k
        return frames


def sequential_step(F_s: FlowEstimator, F_p: FlowEstimator, G: Renderer, x_s, p_s,
                    x_prev, p_prev, p_k, force_masks_zero: bool = False):
    """One recurrent generation step; returns (frame, aux dict of flows/masks)."""
    if x_prev is None:
        x_prev, p_prev = x_s, p_s
    w_s, m_s = F_s(x_s, p_s, p_k)
    w_p, m_p = F_p(x_prev, p_prev, p_k)
    if force_masks_zero:
        m_s = Tensor._wrap(np.zeros(m_s.shape))
        m_p = Tensor._wrap(np.zeros(m_p.shape))
    x_k = G([x_s, x_prev], p_k, [w_s, w_p], [m_s, m_p])
    return x_k, {"w_s": w_s, "m_s": m_s, "w_p": w_p, "m_p": m_p}


def adaln(f, beta, gamma, eps: float = 1e-8) -> Tensor:
    """Adaptive layer norm over all (C, L) entries of each case, then gamma * . + beta.

    ``beta`` / ``gamma`` broadcast against (B, C, L): per-case scalars (B,1,1)
    or per-channel (B,C,1).
    """
    f = as_tensor(f)
    if f.ndim not in (2, 3) or f.shape[-1] * f.shape[-2] <= 1:
        raise ContractError(f"adaln needs (C, L) or (B, C, L) input with C*L > 1, got {f.shape}")
    axes = (-2, -1)
    mu = T.mean(f, axis=axes, keepdims=True)
    xc = T.sub(f, mu)
    var = T.mean(T.square(xc), axis=axes, keepdims=True)
    sigma = T.sqrt(T.add(var, 1e-300))
    return T.add(T.mul(as_tensor(gamma), T.div(xc, T.add(sigma, eps))), as_tensor(beta))


def skeleton_statistics(J: Tensor) -> tuple[Tensor, Tensor]:
    """Per-case location (x/y means, (B,2N,1)) and overall scale ((B,1,1))."""
    B, D, K = J.shape
    pairs = T.reshape(J, (B, D // 2, 2, K))
    mu_xy = T.mean(pairs, axis=(1, 3), keepdims=True)  # (B,1,2,1)
    mu = T.reshape(T.mul(np.ones((1, D // 2, 2, 1)), mu_xy), (B, D, 1))
    centered = T.sub(J, mu)
    sigma = T.sqrt(T.add(T.mean(T.square(centered), axis=(1, 2), keepdims=True), 1e-300))
    return mu, sigma


class StatisticExtractor(Module):
    """E(J): per-case normalisation parameters for every ADALN layer.

    The output layer receives the input's own location and scale, so the
    network's answer is expressed in the input's coordinate frame; the hidden
    layers get (beta, gamma) predicted from the normalised sequence's temporal
    moments.
    """

    def __init__(self, coords: int, hidden: int, layers: int, *, rng):
        super().__init__()
        self.layers = layers
        self.hidden = hidden
        self.proj = Linear(2 * coords, 2 * hidden * layers, rng=rng, gain=0.1)

    def __call__(self, J: Tensor, J_norm: Tensor):
        mu, sigma = skeleton_statistics(J)
        desc = T.concat([T.mean(J_norm, axis=2), T.sqrt(T.add(T.mean(T.square(J_norm), axis=2), 1e-12))],
                        axis=1)  # (B, 2*coords)
        z = self.proj(desc)
        B = J.shape[0]
        z = T.reshape(z, (B, self.layers, 2, self.hidden, 1))
        params = []
        for i in range(self.layers):
            beta = z[:, i, 0]
            gamma = T.add(z[:, i, 1], 1.0)
            params.append((beta, gamma))
        return params, (mu, sigma)


class MotionExtractionNetwork(Module):
    """Temporal 1D-conv denoiser for (B, 2N, K) skeleton sequences."""

    def __init__(self, joints: int = 8, hidden: int = 64, dilations: Sequence[int] = (1, 2, 4),
                 kernel: int = 3, seed: int = 0, slope: float = 0.2):
        super().__init__()
        rng = np.random.default_rng(seed)
        coords = 2 * joints
        self.joints = joints
        self.kernel = kernel
        self.dilations = tuple(dilations)
        self.slope = slope
        self.stats = StatisticExtractor(coords, hidden, len(self.dilations), rng=rng)
        self.inp = Conv1d(coords, hidden, 1, rng=rng)
        self.blocks = [Conv1d(hidden, hidden, kernel, dilation=d, rng=rng) for d in self.dilations]
        self.out = Conv1d(hidden, coords, 1, rng=rng, gain=0.0)  # starts as the identity

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations)

    def __call__(self, J) -> Tensor:
        J = as_tensor(J)
        single = J.ndim == 2
        if single:
            J = T.reshape(J, (1,) + J.shape)
        B, D, K = J.shape
        if D != 2 * self.joints:
            raise DimensionError(f"expected {2 * self.joints} coordinate rows, got {D}")
        if K < self.receptive_field:
            raise ContractError(f"sequence length {K} is shorter than the receptive field "
                                f"{self.receptive_field}; need K >= {self.receptive_field}")
        mu, sigma = skeleton_statistics(J)
        J_norm = T.div(T.sub(J, mu), T.add(sigma, 1e-8))
        params, _ = self.stats(J, J_norm)
        h = self.inp(J_norm)
        for conv, (beta, gamma) in zip(self.blocks, params):
            h = T.add(h, T.leaky_relu(adaln(conv(h), beta, gamma), self.slope))
        delta = self.out(h)
        # restore the input's own location and scale
        out = adaln_restore(T.add(J_norm, delta), mu, sigma)
        return T.reshape(out, out.shape[1:]) if single else out


def adaln_restore(x: Tensor, beta: Tensor, gamma: Tensor) -> Tensor:
    return T.add(T.mul(x, gamma), beta)


def men_forward(men: MotionExtractionNetwork, J_noisy) -> Tensor:
    return men(J_noisy)
