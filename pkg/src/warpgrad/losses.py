"""Training objectives, each a differentiable scalar built from tape primitives."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import Conv2d, Module
from .tensor import Tensor, as_tensor
from .warp import identity_grid, patch_offsets, warp_with_flow

log = logging.getLogger(__name__)

EPS = 1e-8
PROB_CLAMP = 1e-7


class FeatureExtractor(Module):
    """Frozen, seeded stack of stride-2 convolutions with leaky ReLU.

    Calling it returns the list of activations, one per layer; layer ``i`` is
    at 1 / 2**(i+1) of the input resolution.
    """

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (16, 32), seed: int = 0,
                 slope: float = 0.2):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.layers = []
        cin = in_channels
        for c in channels:
            self.layers.append(Conv2d(cin, c, 3, stride=2, padding=1, rng=rng))
            cin = c
        self.slope = slope
        self.freeze()

    def __call__(self, x) -> list:
        feats = []
        h = as_tensor(x)
        for conv in self.layers:
            h = T.leaky_relu(conv(h), self.slope)
            feats.append(h)
        return feats

    def layer_at(self, x, height: int) -> Tensor:
        """Activation whose spatial height equals ``height``."""
        for f in self(x):
            if f.shape[-2] == height:
                return f
        raise DimensionError(f"no extractor layer at resolution {height} for input {as_tensor(x).shape}")


@dataclass
class LossWeights:
    """Loss weights; defaults for the first six are the published ones."""

    c: float = 5.0
    r: float = 0.0025
    l1: float = 5.0
    adv: float = 2.0
    perc: float = 0.5
    style: float = 500.0
    video: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"loss weight {k} must be finite and >= 0, got {v}")


def _batched(x: Tensor) -> Tensor:
    return T.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


def cosine_similarity(a: Tensor, b: Tensor, eps: float = EPS) -> Tensor:
    """Cosine similarity over the channel axis of (B,C,...) maps."""
    num = T.sum(T.mul(a, b), axis=1)
    na = T.add(T.sqrt(T.add(T.sum(T.square(a), axis=1), 1e-300)), eps)
    nb = T.add(T.sqrt(T.add(T.sum(T.square(b), axis=1), 1e-300)), eps)
    return T.div(num, T.mul(na, nb))


def mu_max(v_s, v_t, eps: float = EPS, return_index: bool = False):
    """Best cosine similarity of every target vector against all source vectors.

    Returns a (B,H,W) array (no gradient), optionally with the flat argmax index.
    """
    vs = _batched(as_tensor(v_s)).data
    vt = _batched(as_tensor(v_t)).data
    B, C = vs.shape[:2]
    a = vs.reshape(B, C, -1)
    b = vt.reshape(B, C, -1)
    an = a / (np.linalg.norm(a, axis=1, keepdims=True) + eps)
    bn = b / (np.linalg.norm(b, axis=1, keepdims=True) + eps)
    sim = np.matmul(np.swapaxes(an, 1, 2), bn)  # (B, source, target)
    best = sim.max(axis=1).reshape((B,) + vt.shape[2:])
    if return_index:
        return best, sim.argmax(axis=1).reshape((B,) + vt.shape[2:])
    return best


def sampling_correctness(v_s, v_t, w, eps: float = EPS, border: str = "clamp") -> Tensor:
    """Mean over locations of exp(-cos(warp(v_s, w), v_t) / mu_max).

    ``mu_max`` comes from an exhaustive search over source locations and is
    held constant in the backward pass. A perfect warp of distinct features
    gives exp(-1).
    """
    v_s, v_t, w = _batched(as_tensor(v_s)), _batched(as_tensor(v_t)), _batched(as_tensor(w))
    if v_s.shape != v_t.shape:
        raise DimensionError(f"sampling_correctness: {v_s.shape} vs {v_t.shape}")
    if w.shape[2:] != v_t.shape[2:]:
        raise DimensionError(f"flow {w.shape} not at feature resolution {v_t.shape}")
    warped = warp_with_flow(v_s, w, border)
    mu = cosine_similarity(warped, v_t, eps)
    best = np.maximum(mu_max(v_s, v_t, eps), eps)
    return T.mean(T.exp(T.neg(T.div(mu, best))))


def _patch_stack(x: Tensor, n: int) -> Tensor:
    """(B,2,H,W) -> (B,2,n*n,H-n+1,W-n+1) of every full n x n window, row-major."""
    B, C, H, W = x.shape
    Ho, Wo = H - n + 1, W - n + 1
    parts = []
    for dy in range(n):
        for dx in range(n):
            parts.append(T.reshape(x[:, :, dy:dy + Ho, dx:dx + Wo], (B, C, 1, Ho, Wo)))
    return T.concat(parts, axis=2)


def affine_regularization(w, n: int = 3, eps: float = EPS, singular_penalty: float = 1e6) -> Tensor:
    """Summed residual of the per-patch least-squares affine fit from target to source coords.

    Every stride-1 window that lies fully inside the field contributes
    ||T - A S||^2 with A = T S^T (S S^T + eps I)^-1. Windows are expressed
    relative to their centre, which leaves the residual unchanged and keeps
    the 3x3 systems well scaled. Batched input averages over the batch.
    """
    w = _batched(as_tensor(w))
    if n < 1 or n % 2 == 0 or n * n < 3:
        raise ContractError(f"affine_regularization: n must be odd with n*n >= 3, got {n}")
    B, _, H, W = w.shape
    if H < n or W < n:
        raise ContractError(f"affine_regularization: field {H}x{W} smaller than patch {n}")
    K = n * n
    r = n // 2
    off = patch_offsets(n)  # target window coords relative to centre, (2, K)
    wp = _patch_stack(w, n)  # (B,2,K,Ho,Wo)
    wc = T.reshape(w[:, :, r:H - r, r:W - r], (B, 2, 1, H - 2 * r, W - 2 * r))
    rel = T.add(T.sub(wp, wc), off[None, :, :, None, None])  # source coords rel. to centre
    L = (H - 2 * r) * (W - 2 * r)
    S2 = T.transpose(T.reshape(rel, (B, 2, K, L)), (0, 3, 1, 2))  # (B,L,2,K)
    ones = Tensor._wrap(np.ones((B, L, 1, K)))
    S = T.concat([S2, ones], axis=2)  # (B,L,3,K)
    St = T.transpose(S, (0, 1, 3, 2))
    gram = T.add(T.matmul(S, St), eps * np.eye(3))
    cond = np.linalg.cond(gram.data)
    if not np.all(np.isfinite(cond)) or cond.max() > 1e14:
        log.warning("affine_regularization: collapsed flow, %d singular windows",
                    int(np.sum(~np.isfinite(cond) | (cond > 1e14))))
        return Tensor(singular_penalty)
    Tm = Tensor._wrap(np.broadcast_to(off, (B, L, 2, K)).copy())
    A = T.matmul(T.matmul(Tm, St), T.inv(gram))
    resid = T.sub(Tm, T.matmul(A, S))
    return T.div(T.sum(T.square(resid)), float(B))


def l1_reconstruction(x, x_hat) -> Tensor:
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"l1_reconstruction: {x.shape} vs {x_hat.shape}")
    return T.mean(T.abs(T.sub(x, x_hat)))


def _neg_log(p: Tensor) -> Tensor:
    return T.neg(T.mean(T.log(T.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))))


def discriminator_loss(D: Callable, real, fake) -> Tensor:
    """-E[log D(real)] - E[log(1 - D(fake))], with ``fake`` detached."""
    fake = as_tensor(fake).detach()
    return T.add(_neg_log(D(real)), _neg_log(T.sub(1.0, D(fake))))


def generator_adversarial_loss(D: Callable, fake) -> Tensor:
    """Non-saturating generator term -E[log D(fake)]."""
    return _neg_log(D(fake))


def adversarial_losses(D: Callable, real, fake) -> tuple[Tensor, Tensor]:
    return discriminator_loss(D, real, fake), generator_adversarial_loss(D, fake)


def perceptual_loss(x, x_hat, phi: Callable) -> Tensor:
    """Sum over extractor layers of the mean absolute activation difference."""
    fa, fb = phi(x), phi(x_hat)
    total = Tensor._wrap(np.zeros(()))
    for a, b in zip(fa, fb):
        total = T.add(total, T.mean(T.abs(T.sub(a, b))))
    return total


def gram_matrix(phi_j) -> Tensor:
    """F F^T / (C*H*W) for (C,H,W) or batched (B,C,H,W) activations."""
    f = as_tensor(phi_j)
    single = f.ndim == 3
    f = _batched(f)
    B, C, H, W = f.shape
    F = T.reshape(f, (B, C, H * W))
    g = T.div(T.matmul(F, T.transpose(F, (0, 2, 1))), float(C * H * W))
    return T.reshape(g, (C, C)) if single else g


def style_loss(x, x_hat, phi: Callable) -> Tensor:
    fa, fb = phi(x), phi(x_hat)
    total = Tensor._wrap(np.zeros(()))
    for a, b in zip(fa, fb):
        total = T.add(total, T.mean(T.abs(T.sub(gram_matrix(a), gram_matrix(b)))))
    return total


TERM_KEYS = ("c", "r", "l1", "adv", "perc", "style")


def joint_generation_loss(terms: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of whichever of the six generator terms are present."""
    unknown = set(terms) - set(TERM_KEYS)
    if unknown:
        raise ContractError(f"unknown loss terms {sorted(unknown)}")
    total = Tensor._wrap(np.zeros(()))
    for key in TERM_KEYS:
        if key in terms:
            val = as_tensor(terms[key])
            if not np.all(np.isfinite(val.data)):
                raise ContractError(f"loss term {key} is not finite")
            total = T.add(total, T.mul(val, getattr(weights, key)))
    return total


def mpjpe(j_hat, j_gt, mode: str = "l1") -> Tensor:
    """Joint position error for (…, 2N, K) sequences with rows x0, y0, x1, y1, ...

    ``mode="l1"`` is the mean absolute coordinate error; ``"euclidean"`` the
    mean per-joint Euclidean distance.
    """
    j_hat, j_gt = as_tensor(j_hat), as_tensor(j_gt)
    if j_hat.shape != j_gt.shape:
        raise DimensionError(f"mpjpe: {j_hat.shape} vs {j_gt.shape}")
    d = T.sub(j_hat, j_gt)
    if mode == "l1":
        return T.mean(T.abs(d))
    if mode == "euclidean":
        shape = j_hat.shape
        if shape[-2] % 2:
            raise DimensionError(f"mpjpe: odd coordinate count {shape[-2]}")
        pairs = T.reshape(d, shape[:-2] + (shape[-2] // 2, 2, shape[-1]))
        return T.mean(T.sqrt(T.add(T.sum(T.square(pairs), axis=-2), 1e-300)))
    raise ContractError(f"unknown mpjpe mode {mode!r}")


def stack_clip(clip) -> Tensor:
    """(B,K,C,H,W) clip -> (B,K*C,H,W) channel-stacked frames."""
    clip = as_tensor(clip)
    B, K, C, H, W = clip.shape
    return T.reshape(clip, (B, K * C, H, W))


def temporal_adversarial(D_v: Callable, real_clip, fake_clip) -> tuple[Tensor, Tensor]:
    real_clip, fake_clip = as_tensor(real_clip), as_tensor(fake_clip)
    if real_clip.ndim != 5 or fake_clip.ndim != 5:
        raise DimensionError("clips must be (B,K,C,H,W)")
    if real_clip.shape[1] != fake_clip.shape[1]:
        raise ContractError(f"clip lengths differ: {real_clip.shape[1]} vs {fake_clip.shape[1]}")
    if real_clip.shape[1] < 2:
        raise ContractError("temporal adversarial loss needs clips of at least 2 frames")
    return adversarial_losses(D_v, stack_clip(real_clip), stack_clip(fake_clip))


def animation_loss(frame_losses: Sequence[Tensor], temporal_g_loss, weight_v: float) -> Tensor:
    """Mean per-frame generator loss plus the weighted temporal adversarial term."""
    if not frame_losses:
        raise ContractError("animation_loss needs at least one frame loss")
    total = frame_losses[0]
    for fl in frame_losses[1:]:
        total = T.add(total, fl)
    return T.add(T.div(total, float(len(frame_losses))), T.mul(as_tensor(temporal_g_loss), weight_v))


class Discriminator(Module):
    """Strided conv stack -> global average -> sigmoid probability per case."""

    def __init__(self, in_channels: int, base: int = 16, layers: int = 3, *, rng, slope: float = 0.2):
        super().__init__()
        self.convs = []
        c = in_channels
        for i in range(layers):
            out = base * (2 ** i)
            self.convs.append(Conv2d(c, out, 3, stride=2, padding=1, rng=rng))
            c = out
        self.head = Conv2d(c, 1, 3, rng=rng, gain=0.5)
        self.slope = slope

    def __call__(self, x) -> Tensor:
        h = as_tensor(x)
        for conv in self.convs:
            h = T.leaky_relu(conv(h), self.slope)
        logits = T.mean(self.head(h), axis=(1, 2, 3))
        return T.sigmoid(T.reshape(logits, (-1, 1)))


class TemporalDiscriminator(Discriminator):
    """Discriminator over K channel-stacked frames."""

    def __init__(self, frames: int, channels: int = 3, base: int = 16, layers: int = 3, *, rng):
        super().__init__(frames * channels, base, layers, rng=rng)
        self.frames = frames
