"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonDeterministicFragment
from .tensor import Tensor, backward, no_grad


@dataclass
class GradcheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    fn,
    tensors,
    h: float = 1e-4,
    tol: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
    names=None,
) -> GradcheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` takes no arguments and returns a scalar Tensor built from
    ``tensors``. It must be deterministic: it is evaluated twice up front and
    :class:`NonDeterministicFragment` is raised if the results differ (the
    usual cause is training-mode dropout drawing from an unseeded stream).
    ``max_elements`` caps how many coordinates per tensor are probed.
    """
    tensors = list(tensors)
    names = list(names) if names is not None else [getattr(t, "name", f"input{i}") for i, t in enumerate(tensors)]
    with no_grad():
        a = fn().data.copy()
        b = fn().data.copy()
    if not np.array_equal(a, b):
        raise NonDeterministicFragment("fragment returned different values on identical calls")

    for t in tensors:
        t.grad = None
    out = fn()
    backward(out, tensors)
    analytic = [t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol)
    for name, t, ga in zip(names, tensors, analytic):
        t.data = np.ascontiguousarray(t.data)
        size = t.data.size
        if max_elements is not None and size > max_elements:
            flat_idx = np.sort(rng.choice(size, max_elements, replace=False))
        else:
            flat_idx = np.arange(size)
        flat = t.data.reshape(-1)
        num = np.empty(len(flat_idx))
        with no_grad():
            for j, i in enumerate(flat_idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn().data)
                flat[i] = orig - h
                fm = float(fn().data)
                flat[i] = orig
                num[j] = (fp - fm) / (2 * h)
        err = relative_error(ga.reshape(-1)[flat_idx], num)
        report.errors[name] = float(err.max()) if err.size else 0.0
    return report


def scalar_probe(out: Tensor, weights: np.ndarray) -> Tensor:
    """Reduce an arbitrary-shaped output to a scalar with fixed random weights."""
    return (out * weights).sum()
