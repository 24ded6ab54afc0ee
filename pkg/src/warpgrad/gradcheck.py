"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    mean_rel_err: float
    tolerance: float
    passed: bool
    n_checked: int
    message: str = ""
    per_input: list = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = (f"{self.name:<28s} max_rel={self.max_rel_err:.3e} "
                f"mean_rel={self.mean_rel_err:.3e} tol={self.tolerance:.0e} {status}")
        return line + (f" ({self.message})" if self.message else "")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor is 1e-3 of the largest gradient magnitude seen, so components that
    are zero up to round-off do not dominate. Both sides zero gives 0.
    """
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3 * scale)
    diff = np.abs(a - n)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(denom > 0, diff / np.where(denom > 0, denom, 1.0), 0.0)
    return rel


def numeric_gradient(f: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                     which: int, step: float) -> np.ndarray:
    """Central differences (f(x+h) - f(x-h)) / 2h for every element of input ``which``."""
    base = [np.array(a, dtype=float) for a in arrays]
    x = base[which]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(*[Tensor(a) for a in base]).item()
        flat[i] = orig - step
        fm = f(*[Tensor(a) for a in base]).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-5,
              tolerance: float = 1e-5, wrt: Sequence[int] | None = None,
              name: str = "f") -> GradcheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    ``wrt`` selects which inputs are perturbed (default: all).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(a, dtype=float) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    leaves = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    with Tape() as tape:
        out = f(*leaves)
    if out.size != 1:
        return GradcheckReport(name, np.inf, np.inf, tolerance, False, 0,
                               f"output has shape {out.shape}, expected a scalar")
    again = f(*[Tensor(a) for a in arrays]).item()
    if again != out.item():
        return GradcheckReport(name, np.inf, np.inf, tolerance, False, 0,
                               f"non-deterministic: two evaluations gave {out.item()!r} and {again!r}")
    grads = tape.backward(out)

    rels, per_input = [], []
    for i in wrt:
        analytic = grads[leaves[i]]
        numeric = numeric_gradient(f, arrays, i, step)
        rel = relative_error(analytic, numeric)
        rels.append(rel)
        per_input.append(float(rel.max(initial=0.0)))
    allrel = np.concatenate(rels) if rels else np.zeros(0)
    max_rel = float(allrel.max(initial=0.0))
    mean_rel = float(allrel.mean()) if allrel.size else 0.0
    return GradcheckReport(name, max_rel, mean_rel, tolerance, max_rel <= tolerance,
                           int(allrel.size), per_input=per_input)
