"""The gradient-check suite: one small randomized case per differentiable op.

Each case builder takes a seeded Generator and returns the scalar function,
its inputs and which of them to perturb. Non-scalar ops are reduced with a
fixed random projection so every output element is exercised. Inputs of
piecewise-linear ops are kept away from their kinks.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .gradcheck import GradcheckReport, gradcheck
from .models import adaln
from .warp import (KernelPredictor, bilinear_sample, extract_patch, fuse_with_mask,
                   local_attention_warp, predict_kernel)

SAMPLING_TOL = 1e-4
DEFAULT_TOL = 1e-5


def _proj(rng, shape):
    r = rng.normal(size=shape)
    return lambda y: T.sum(T.mul(y, r))


def _away(rng, shape, margin=0.1, scale=1.0):
    """Normal samples pushed at least ``margin`` away from zero."""
    x = rng.normal(scale=scale, size=shape)
    return np.where(x >= 0, x + margin, x - margin)


def _coords(rng, shape2, H, W):
    """Sample coordinates strictly inside grid cells (away from integer kinks)."""
    ix = rng.integers(0, W - 1, size=shape2)
    iy = rng.integers(0, H - 1, size=shape2)
    return np.stack([ix + rng.uniform(0.1, 0.9, shape2), iy + rng.uniform(0.1, 0.9, shape2)])


def _unary(fn, make=None):
    def build(rng):
        x = make(rng) if make else rng.normal(size=(3, 4))
        p = _proj(rng, x.shape)
        return (lambda a: p(fn(a))), [x], None
    return build


def _binary(fn, make_b=None):
    def build(rng):
        a = rng.normal(size=(3, 4))
        b = make_b(rng) if make_b else rng.normal(size=(3, 4))
        p = _proj(rng, np.broadcast_shapes(a.shape, b.shape))
        return (lambda x, y: p(fn(x, y))), [a, b], None
    return build


def _matmul(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    p = _proj(rng, (2, 3, 5))
    return (lambda x, y: p(T.matmul(x, y))), [a, b], None


def _inv(rng):
    a = rng.normal(size=(2, 3, 3)) + 3 * np.eye(3)
    p = _proj(rng, a.shape)
    return (lambda x: p(T.inv(x))), [a], None


def _reduce(fn):
    def build(rng):
        x = rng.normal(size=(2, 3, 4))
        y = fn(T.Tensor(x))
        p = _proj(rng, y.shape)
        return (lambda a: p(fn(a))), [x], None
    return build


def _concat(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    p = _proj(rng, (2, 7))
    return (lambda x, y: p(T.concat([x, y], axis=1))), [a, b], None


def _conv2d(rng):
    x, w, b = rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    p = _proj(rng, (2, 4, 3, 3))
    return (lambda a, k, c: p(T.conv2d(a, k, c, stride=2, padding=1))), [x, w, b], None


def _conv1d(rng):
    x, w, b = rng.normal(size=(2, 3, 9)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)
    p = _proj(rng, (2, 4, 9))
    return (lambda a, k, c: p(T.conv1d(a, k, c, padding=2, dilation=2))), [x, w, b], None


def _instance_norm(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    p = _proj(rng, x.shape)
    return (lambda a: p(T.instance_norm(a, eps=1e-5))), [x], None


def _softmax(rng):
    x = rng.normal(size=(2, 5, 3))
    p = _proj(rng, x.shape)
    return (lambda a: p(T.softmax(a, axis=1))), [x], None


def _upsample(rng):
    x = rng.normal(size=(1, 2, 3, 4))
    p = _proj(rng, (1, 2, 6, 8))
    return (lambda a: p(T.bilinear_upsample(a, 2))), [x], None


def _bilinear_sample(rng):
    f = rng.normal(size=(1, 2, 6, 7))
    c = _coords(rng, (1, 4, 5), 6, 7).transpose(1, 0, 2, 3)
    p = _proj(rng, (1, 2, 4, 5))
    return (lambda a, b: p(bilinear_sample(a, b))), [f, c], None


def _extract_patch(rng):
    f = rng.normal(size=(2, 7, 7))
    c = _coords(rng, (), 3, 3).ravel() + 2.0
    p = _proj(rng, (2, 3, 3))
    return (lambda a, b: p(extract_patch(a, b, 3))), [f, c], None


def _predict_kernel(rng):
    M = KernelPredictor(2, 3, rng, center_bias=0.0, gain=1.0)
    ps, pt = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    p = _proj(rng, (3, 3))
    return (lambda a, b: p(predict_kernel(a, b, M))), [ps, pt], None


def _fractional_flow(rng, H, W, scale=1.5):
    w = rng.uniform(-scale, scale, size=(1, 2, H, W))
    frac = w - np.floor(w)
    return np.where(np.abs(frac - 0.5) > 0.4, w + 0.3, w)  # keep clear of integer offsets


def _local_attention(rng):
    C, H, W = 2, 5, 5
    fs, ft = rng.normal(size=(1, C, H, W)), rng.normal(size=(1, C, H, W))
    w = rng.uniform(0.05, 0.45, size=(1, 2, H, W)) * rng.choice([-1.0, 1.0], size=(1, 2, H, W))
    M = KernelPredictor(C, 3, rng, center_bias=0.0, gain=1.0)
    p = _proj(rng, (1, C, H, W))
    return (lambda a, b, c: p(local_attention_warp(a, b, c, M))), [fs, ft, w], None


def _fuse(rng):
    ft, fa = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 2, 4, 4))
    m = rng.uniform(0.1, 0.9, size=(1, 1, 4, 4))
    p = _proj(rng, (1, 2, 4, 4))
    return (lambda a, b, c: p(fuse_with_mask(a, b, c))), [ft, fa, m], None


def _sampling_correctness(rng):
    vs, vt = rng.normal(size=(1, 4, 6, 6)), rng.normal(size=(1, 4, 6, 6))
    w = _fractional_flow(rng, 6, 6)
    w = np.clip(w, -0.9, 0.9)
    # mu_max depends only on the features, so it is constant while w moves
    return (lambda a, b, c: L.sampling_correctness(a, b, c)), [vs, vt, w], [2]


def _affine_reg(rng):
    w = rng.normal(size=(1, 2, 5, 6))
    return (lambda a: L.affine_regularization(a)), [w], None


def _l1(rng):
    x, y = rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(1, 3, 4, 4))
    return (lambda a, b: L.l1_reconstruction(a, b)), [x, y], None


def _tiny_d(rng, cin):
    return L.Discriminator(cin, base=4, layers=2, rng=rng)


# The discriminator term detaches its fake input, so each adversarial term is
# checked only against the input it actually differentiates.

def _adversarial(term):
    def build(rng):
        D = _tiny_d(rng, 3)
        real, fake = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(2, 3, 8, 8))
        if term == "d":
            return (lambda r, x: L.discriminator_loss(D, r, x)), [real, fake], [0]
        return (lambda r, x: L.generator_adversarial_loss(D, x)), [real, fake], [1]
    return build


def _perceptual(rng):
    phi = L.FeatureExtractor(3, (4, 6), seed=int(rng.integers(1 << 30)))
    x, y = rng.normal(size=(1, 3, 8, 8)), rng.normal(size=(1, 3, 8, 8))
    return (lambda a, b: L.perceptual_loss(a, b, phi)), [x, y], [1]


def _style(rng):
    phi = L.FeatureExtractor(3, (4, 6), seed=int(rng.integers(1 << 30)))
    x, y = rng.normal(size=(1, 3, 8, 8)), rng.normal(size=(1, 3, 8, 8))
    return (lambda a, b: L.style_loss(a, b, phi)), [x, y], [1]


def _mpjpe(mode):
    def build(rng):
        j, g = rng.normal(size=(2, 8, 5)), rng.normal(size=(2, 8, 5))
        g = j + _away(rng, j.shape)
        return (lambda a, b: L.mpjpe(a, b, mode)), [j, g], None
    return build


def _temporal(term):
    def build(rng):
        D = L.TemporalDiscriminator(3, 2, base=4, layers=2, rng=rng)
        real, fake = rng.normal(size=(1, 3, 2, 8, 8)), rng.normal(size=(1, 3, 2, 8, 8))
        idx = 0 if term == "d" else 1
        return (lambda r, x: L.temporal_adversarial(D, r, x)[idx]), [real, fake], [idx]
    return build


def _adaln(rng):
    x = rng.normal(size=(2, 4, 6))
    beta, gamma = rng.normal(size=(2, 4, 1)), rng.normal(size=(2, 4, 1))
    p = _proj(rng, x.shape)
    return (lambda a, b, c: p(adaln(a, b, c))), [x, beta, gamma], None


def _slice(rng):
    x = rng.normal(size=(3, 5))
    p = _proj(rng, (2, 2))
    return (lambda a: p(a[1:, ::2][:, :2])), [x], None


OPS: dict[str, tuple[Callable, float]] = {
    "add": (_binary(T.add, lambda r: r.normal(size=(4,))), DEFAULT_TOL),
    "sub": (_binary(T.sub), DEFAULT_TOL),
    "mul": (_binary(T.mul, lambda r: r.normal(size=(3, 1))), DEFAULT_TOL),
    "div": (_binary(T.div, lambda r: _away(r, (3, 4), 0.5)), DEFAULT_TOL),
    "neg": (_unary(T.neg), DEFAULT_TOL),
    "square": (_unary(T.square), DEFAULT_TOL),
    "matmul": (_matmul, DEFAULT_TOL),
    "inv": (_inv, DEFAULT_TOL),
    "exp": (_unary(T.exp), DEFAULT_TOL),
    "log": (_unary(T.log, lambda r: r.uniform(0.5, 2.0, (3, 4))), DEFAULT_TOL),
    "abs": (_unary(T.abs, lambda r: _away(r, (3, 4))), DEFAULT_TOL),
    "sqrt": (_unary(T.sqrt, lambda r: r.uniform(0.5, 2.0, (3, 4))), DEFAULT_TOL),
    "tanh": (_unary(T.tanh), DEFAULT_TOL),
    "sigmoid": (_unary(T.sigmoid), DEFAULT_TOL),
    "leaky_relu": (_unary(T.leaky_relu, lambda r: _away(r, (3, 4))), DEFAULT_TOL),
    "clip": (_unary(lambda a: T.clip(a, -0.5, 0.5),
                    lambda r: r.choice([-1.0, -0.2, 0.2, 1.0], (3, 4)) + r.uniform(-0.1, 0.1, (3, 4))),
             DEFAULT_TOL),
    "sum": (_reduce(lambda a: T.sum(a, axis=1)), DEFAULT_TOL),
    "mean": (_reduce(lambda a: T.mean(a, axis=(0, 2), keepdims=True)), DEFAULT_TOL),
    "reshape": (_reduce(lambda a: T.reshape(a, (4, 6))), DEFAULT_TOL),
    "transpose": (_reduce(lambda a: T.transpose(a, (2, 0, 1))), DEFAULT_TOL),
    "concat": (_concat, DEFAULT_TOL),
    "slice": (_slice, DEFAULT_TOL),
    "conv2d": (_conv2d, DEFAULT_TOL),
    "conv1d": (_conv1d, DEFAULT_TOL),
    "instance_norm": (_instance_norm, DEFAULT_TOL),
    "softmax": (_softmax, DEFAULT_TOL),
    "bilinear_upsample": (_upsample, DEFAULT_TOL),
    "bilinear_sample": (_bilinear_sample, SAMPLING_TOL),
    "extract_patch": (_extract_patch, SAMPLING_TOL),
    "predict_kernel": (_predict_kernel, DEFAULT_TOL),
    "local_attention_warp": (_local_attention, SAMPLING_TOL),
    "fuse_with_mask": (_fuse, DEFAULT_TOL),
    "sampling_correctness": (_sampling_correctness, SAMPLING_TOL),
    "affine_regularization": (_affine_reg, DEFAULT_TOL),
    "l1_reconstruction": (_l1, DEFAULT_TOL),
    "adversarial_d": (_adversarial("d"), DEFAULT_TOL),
    "adversarial_g": (_adversarial("g"), DEFAULT_TOL),
    "perceptual": (_perceptual, DEFAULT_TOL),
    "style": (_style, DEFAULT_TOL),
    "mpjpe_l1": (_mpjpe("l1"), DEFAULT_TOL),
    "mpjpe_euclidean": (_mpjpe("euclidean"), DEFAULT_TOL),
    "temporal_adversarial_d": (_temporal("d"), DEFAULT_TOL),
    "temporal_adversarial_g": (_temporal("g"), DEFAULT_TOL),
    "adaln": (_adaln, DEFAULT_TOL),
}


def check_op(name: str, seed: int = 0, tol: float | None = None) -> GradcheckReport:
    build, default_tol = OPS[name]
    f, inputs, wrt = build(np.random.default_rng(seed))
    return gradcheck(f, inputs, step=1e-5, tolerance=default_tol if tol is None else tol,
                     wrt=wrt, name=name)


def run_suite(names=None, seed: int = 0, tol: float | None = None, seeds=None) -> list[GradcheckReport]:
    """Check each op over ``seeds`` (default just ``seed``), keeping the worst report per op."""
    seeds = [seed] if seeds is None else list(seeds)
    out = []
    for name in names or OPS:
        reports = [check_op(name, s, tol) for s in seeds]
        out.append(max(reports, key=lambda r: (not r.passed, r.max_rel_err)))
    return out
