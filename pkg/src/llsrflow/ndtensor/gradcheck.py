"""Central-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, grad, no_grad


class NondeterministicFunction(RuntimeError):
    pass


@dataclass
class GradcheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tol: float
    coords: list = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rel_err(a: np.ndarray, n: np.ndarray, floor: float) -> np.ndarray:
    # relative to the larger magnitude; tiny gradients are compared absolutely
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(f, x, eps: float = 1e-5, tol: float = 1e-4, coords=None,
              floor: float = 1e-6) -> GradcheckReport:
    """Compare the tape gradient of scalar ``f`` against central differences.

    ``x`` is a Tensor or a list of Tensors (all f64, requires_grad). ``coords``
    optionally restricts the check to a list of ``(tensor_index, flat_index)``
    pairs; by default every coordinate of every tensor is checked.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires float64 inputs")

    loss = f()
    analytic_all = grad(loss, xs)
    with no_grad():
        f0 = float(f().data)
    if f0 != float(loss.data):
        raise NondeterministicFunction(f"f is not deterministic: {float(loss.data)!r} != {f0!r}")

    if coords is None:
        coords = [(i, j) for i, t in enumerate(xs) for j in range(t.size)]
    analytic = np.empty(len(coords))
    numeric = np.empty(len(coords))
    with no_grad():
        for k, (i, j) in enumerate(coords):
            flat = xs[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f().data)
            flat[j] = orig - eps
            fm = float(f().data)
            flat[j] = orig
            numeric[k] = (fp - fm) / (2 * eps)
            analytic[k] = analytic_all[i].reshape(-1)[j]
    return GradcheckReport(analytic, numeric, _rel_err(analytic, numeric, floor), tol, list(coords))
