"""Differentiable spatial transformation operators.

Coordinates are absolute pixel positions ``(x, y)`` stored channel-first; a
flow field ``w`` maps target location ``l`` to the source sampling position
``l + w[l]``. Feature maps are ``(B, C, H, W)``; unbatched ``(C, H, W)``
inputs are accepted and returned unbatched.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import Module
from .tensor import Parameter, Tensor, as_tensor

BORDER_MODES = ("clamp", "zero")


def identity_grid(height: int, width: int) -> Tensor:
    """(2, H, W) grid whose entry at (y, x) is (x, y)."""
    if height < 1 or width < 1:
        raise ContractError(f"identity_grid: sizes must be >= 1, got {height}x{width}")
    ys, xs = np.meshgrid(np.arange(height, dtype=float), np.arange(width, dtype=float),
                         indexing="ij")
    return Tensor(np.stack([xs, ys]))


def patch_offsets(n: int) -> np.ndarray:
    """(2, n*n) integer offsets of an n x n window, row-major over (dy, dx)."""
    if n < 1 or n % 2 == 0:
        raise ContractError(f"patch size must be odd and positive, got {n}")
    r = np.arange(n) - n // 2
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()]).astype(float)


def _batch(x: Tensor):
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def bilinear_sample(f, coords, border: str = "clamp") -> Tensor:
    """Sample ``f`` (B,C,H,W) at ``coords`` (B,2,*S) with bilinear interpolation.

    Returns (B,C,*S). ``border="clamp"`` repeats edge pixels beyond the image;
    ``"zero"`` treats out-of-range pixels as 0. Differentiable in both inputs.
    """
    if border not in BORDER_MODES:
        raise ContractError(f"unknown border mode {border!r}; expected one of {BORDER_MODES}")
    f, coords = as_tensor(f), as_tensor(coords)
    unbatched = f.ndim == 3
    if unbatched:
        f = T.reshape(f, (1,) + f.shape)
        coords = T.reshape(coords, (1,) + coords.shape)
    if f.ndim != 4 or coords.ndim < 3 or coords.shape[1] != 2 or coords.shape[0] != f.shape[0]:
        raise DimensionError(f"bilinear_sample: feature {f.shape} / coords {coords.shape} mismatch")
    B, C, H, W = f.shape
    out_spatial = coords.shape[2:]
    P = int(np.prod(out_spatial))
    cd = coords.data.reshape(B, 2, P)
    x, y = cd[:, 0], cd[:, 1]
    x0f, y0f = np.floor(x), np.floor(y)
    tx, ty = x - x0f, y - y0f
    x0, y0 = x0f.astype(np.int64), y0f.astype(np.int64)
    # four corner taps per sample: index, weight, and d(weight)/dx, d(weight)/dy
    idx = np.empty((B, P, 4), dtype=np.int64)
    wts, dxw, dyw = np.empty((B, P, 4)), np.empty((B, P, 4)), np.empty((B, P, 4))
    k = 0
    for cy, wy, sy in ((y0, 1.0 - ty, -1.0), (y0 + 1, ty, 1.0)):
        for cx, wx, sx in ((x0, 1.0 - tx, -1.0), (x0 + 1, tx, 1.0)):
            valid = ((cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)) if border == "zero" else 1.0
            idx[:, :, k] = np.clip(cy, 0, H - 1) * W + np.clip(cx, 0, W - 1)
            wts[:, :, k] = wx * wy * valid
            dxw[:, :, k] = sx * wy * valid
            dyw[:, :, k] = sy * wx * valid
            k += 1
    indptr = np.arange(0, 4 * P + 1, 4)

    def taps(data, b):
        # (P, H*W) sampling matrix; repeated columns from clamping simply add up
        return sparse.csr_matrix((data[b].ravel(), idx[b].ravel(), indptr), shape=(P, H * W))

    S = [taps(wts, b) for b in range(B)]
    fd = f.data.reshape(B, C, H * W)
    out = np.stack([(S[b] @ fd[b].T).T for b in range(B)])

    def bw(g):
        g = g.reshape(B, C, P)
        gf = np.stack([(S[b].T @ g[b].T).T for b in range(B)]).reshape(f.shape)
        gx = np.stack([((taps(dxw, b) @ fd[b].T).T * g[b]).sum(axis=0) for b in range(B)])
        gy = np.stack([((taps(dyw, b) @ fd[b].T).T * g[b]).sum(axis=0) for b in range(B)])
        return gf, np.stack([gx, gy], axis=1).reshape(coords.shape)

    res = T.op("bilinear_sample", out.reshape((B, C) + out_spatial), (f, coords), bw)
    if unbatched:
        res = T.reshape(res, res.shape[1:])
    return res


def warp_with_flow(f, w, border: str = "clamp") -> Tensor:
    """Plain bilinear warping: out[l] = f(l + w[l]). ``w`` at ``f``'s resolution."""
    f, w = as_tensor(f), as_tensor(w)
    grid = identity_grid(w.shape[-2], w.shape[-1])
    return bilinear_sample(f, T.add(w, grid), border)


def extract_patch(f, center, n: int, border: str = "clamp") -> Tensor:
    """The n x n grid of bilinear samples (1 px spacing) centred at ``center``.

    ``f`` is (C,H,W), ``center`` a length-2 (x, y). Returns (C,n,n).
    """
    f, center = as_tensor(f), as_tensor(center)
    off = patch_offsets(n).reshape(2, n, n)
    coords = T.add(T.reshape(center, (2, 1, 1)), off)
    return bilinear_sample(f, coords, border)


def upsample_flow(w, factor: int) -> Tensor:
    """Bilinearly upsample a flow field; offsets are rescaled with the grid."""
    if factor == 1:
        return as_tensor(w)
    return T.mul(T.bilinear_upsample(w, factor), float(factor))


class KernelPredictor(Module):
    """Fully connected map from a concatenated patch pair to n*n softmax weights.

    Applied at every location at once, i.e. a 1x1 convolution over the
    flattened (2C * n*n) patch descriptor.
    """

    def __init__(self, channels: int, n: int, rng: np.random.Generator, name: str = "M",
                 center_bias: float = 3.0, gain: float = 0.1):
        super().__init__()
        patch_offsets(n)
        self.channels = channels
        self.n = n
        fan_in = 2 * channels * n * n
        self.weight = Parameter(f"{name}.weight",
                                Tensor(rng.normal(0.0, gain / np.sqrt(fan_in), (n * n, fan_in))))
        # favouring the centre tap makes the untrained module close to plain bilinear sampling
        bias = np.zeros(n * n)
        bias[(n * n) // 2] = center_bias
        self.bias = Parameter(f"{name}.bias", Tensor(bias))

    def logits(self, patches_s: Tensor, patches_t: Tensor) -> Tensor:
        # patches: (B, C, n*n, H, W)
        if patches_s.shape != patches_t.shape:
            raise DimensionError(f"patch shapes differ: {patches_s.shape} vs {patches_t.shape}")
        B, C, K = patches_s.shape[:3]
        spatial = patches_s.shape[3:]
        if C != self.channels or K != self.n * self.n:
            raise DimensionError(f"kernel predictor configured for C={self.channels}, "
                                 f"n={self.n}; got patches {patches_s.shape}")
        x = T.concat([patches_s, patches_t], axis=1)
        x = T.reshape(x, (B, 2 * C * K, int(np.prod(spatial))))
        z = T.add(T.matmul(self.weight.value, x), T.reshape(self.bias.value, (K, 1)))
        return T.reshape(z, (B, K) + spatial)

    def __call__(self, patches_s: Tensor, patches_t: Tensor) -> Tensor:
        return T.softmax(self.logits(patches_s, patches_t), axis=1)


def predict_kernel(patch_s, patch_t, M: KernelPredictor) -> Tensor:
    """Kernel (n, n) for one location from a (C,n,n) source/target patch pair."""
    patch_s, patch_t = as_tensor(patch_s), as_tensor(patch_t)
    if patch_s.shape != patch_t.shape or patch_s.ndim != 3:
        raise DimensionError(f"predict_kernel: patch shapes {patch_s.shape} / {patch_t.shape}")
    C, n, _ = patch_s.shape
    shape = (1, C, n * n, 1, 1)
    k = M(T.reshape(patch_s, shape), T.reshape(patch_t, shape))
    return T.reshape(k, (n, n))


def _pad(x: Tensor, r: int, axis: int, border: str) -> Tensor:
    if r == 0:
        return x
    n = x.shape[axis]
    if border == "clamp":
        lo = x[(slice(None),) * axis + (slice(0, 1),)]
        hi = x[(slice(None),) * axis + (slice(n - 1, n),)]
    else:
        shape = list(x.shape)
        shape[axis] = 1
        lo = hi = Tensor._wrap(np.zeros(shape))
    return T.concat([lo] * r + [x] + [hi] * r, axis=axis)


def shifted_patches(f, n: int, border: str = "clamp") -> Tensor:
    """(B,C,H,W) -> (B,C,n*n,H,W) neighbourhoods at integer offsets, ordered like ``patch_offsets``.

    Equal to bilinear sampling at ``grid + offsets`` but built from slices.
    """
    f = as_tensor(f)
    B, C, H, W = f.shape
    r = n // 2
    padded = _pad(_pad(f, r, 2, border), r, 3, border)
    parts = [T.reshape(padded[:, :, dy:dy + H, dx:dx + W], (B, C, 1, H, W))
             for dy in range(n) for dx in range(n)]
    return T.concat(parts, axis=2)


def _window_coords(base: Tensor, n: int) -> Tensor:
    # base (B,2,H,W) -> (B,2,n*n,H,W)
    off = patch_offsets(n)[None, :, :, None, None]
    B, _, H, W = base.shape
    return T.add(T.reshape(base, (B, 2, 1, H, W)), off)


def local_attention_warp(f_s, f_t, w, M: KernelPredictor, border: str = "clamp",
                         return_kernel: bool = False):
    """Content-aware local attention sampling.

    For each target location l an n x n source patch around l + w[l] and the
    target patch around l are fed to ``M``; the output is the kernel-weighted
    sum of the source patch (a convex combination per channel).
    """
    f_s, f_t, w = as_tensor(f_s), as_tensor(f_t), as_tensor(w)
    f_s, unb = _batch(f_s)
    f_t, _ = _batch(f_t)
    w, _ = _batch(w)
    if f_s.shape[:2] != f_t.shape[:2]:
        raise DimensionError(f"source {f_s.shape} and target {f_t.shape} features disagree")
    if w.shape[1] != 2 or w.shape[2:] != f_t.shape[2:]:
        raise DimensionError(f"flow {w.shape} is not at target resolution {f_t.shape[2:]}")
    B, C, H, W = f_t.shape
    n = M.n
    grid = identity_grid(H, W).data[None]
    src = bilinear_sample(f_s, _window_coords(T.add(w, grid), n), border)
    tgt = shifted_patches(f_t, n, border)
    k = M(src, tgt)
    out = T.sum(T.mul(src, T.reshape(k, (B, 1, n * n, H, W))), axis=2)
    if unb:
        out = T.reshape(out, out.shape[1:])
        k = T.reshape(k, k.shape[1:])
    return (out, k) if return_kernel else out


def fuse_with_mask(f_t, f_attn, m) -> Tensor:
    """(1 - m) * f_t + m * f_attn with ``m`` (.., 1, H, W) broadcast over channels."""
    f_t, f_attn, m = as_tensor(f_t), as_tensor(f_attn), as_tensor(m)
    if f_t.shape != f_attn.shape:
        raise DimensionError(f"fuse_with_mask: {f_t.shape} vs {f_attn.shape}")
    if m.shape[-2:] != f_t.shape[-2:]:
        raise DimensionError(f"fuse_with_mask: mask {m.shape} vs features {f_t.shape}")
    if m.data.min() < 0.0 or m.data.max() > 1.0:
        raise ContractError("occlusion mask values must lie in [0, 1]")
    return T.add(T.mul(T.sub(1.0, m), f_t), T.mul(m, f_attn))
