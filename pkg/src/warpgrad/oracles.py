"""Brute-force reference implementations used to check the main ops.

Nothing here imports the autodiff engine or the warp/loss code: each oracle
computes its quantity straight from the definition with plain numpy loops.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of one array."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


def exhaustive_mu_max(v_s: np.ndarray, v_t: np.ndarray, eps: float = 1e-8):
    """Best cosine similarity of each target vector over all source vectors.

    Inputs are (C,H,W). Returns (best (H,W), argmax flat source index (H,W)).
    """
    v_s = np.asarray(v_s, dtype=float)
    v_t = np.asarray(v_t, dtype=float)
    C, H, W = v_t.shape
    src = v_s.reshape(C, -1).T
    src_norm = np.sqrt((src ** 2).sum(axis=1)) + eps
    best = np.full((H, W), -np.inf)
    where = np.zeros((H, W), dtype=int)
    for y in range(H):
        for x in range(W):
            t = v_t[:, y, x]
            tn = np.sqrt(t @ t) + eps
            for j in range(src.shape[0]):
                c = (src[j] @ t) / (src_norm[j] * tn)
                if c > best[y, x]:
                    best[y, x] = c
                    where[y, x] = j
    return best, where


def patchwise_least_squares(w: np.ndarray, n: int = 3) -> float:
    """Sum over full n x n windows of the residual of the best affine map target -> source.

    Works in absolute pixel coordinates and solves each window's normal
    equations separately.
    """
    w = np.asarray(w, dtype=float)
    _, H, W = w.shape
    total = 0.0
    for y0 in range(H - n + 1):
        for x0 in range(W - n + 1):
            tgt, src = [], []
            for dy in range(n):
                for dx in range(n):
                    y, x = y0 + dy, x0 + dx
                    tgt.append((x, y))
                    src.append((x + w[0, y, x], y + w[1, y, x], 1.0))
            Tm = np.array(tgt, dtype=float).T  # (2,K)
            S = np.array(src).T  # (3,K)
            # A S ~= T  <=>  (S S^T) A^T = S T^T
            A = np.linalg.solve(S @ S.T, S @ Tm.T).T
            r = Tm - A @ S
            total += float((r ** 2).sum())
    return total


def direct_index_warp(f: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Warp a (C,H,W) map by an integer flow through direct indexing with edge clamping."""
    f = np.asarray(f)
    flow = np.asarray(flow)
    if not np.array_equal(flow, np.round(flow)):
        raise ValueError("direct_index_warp needs an integer-valued flow")
    C, H, W = f.shape
    out = np.empty_like(f, dtype=float)
    for y in range(H):
        for x in range(W):
            sx = min(max(x + int(flow[0, y, x]), 0), W - 1)
            sy = min(max(y + int(flow[1, y, x]), 0), H - 1)
            out[:, y, x] = f[:, sy, sx]
    return out
