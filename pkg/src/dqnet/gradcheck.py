"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autograd import Tensor, no_grad


class GradCheckError(RuntimeError):
    """The checked function produced a non-finite value."""


@dataclass(frozen=True)
class GradReport:
    op: str
    max_abs_dev: float
    max_rel_dev: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_dev <= self.tol

    def __str__(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (
            f"{flag} {self.op}: max|dev|={self.max_abs_dev:.3e} "
            f"max rel={self.max_rel_dev:.3e} (tol {self.tol:.0e}, {self.checked} elements)"
        )


def _scalar(f: Callable[[Tensor], Tensor], x: Tensor) -> float:
    value = float(np.asarray(f(x).data).sum())
    if not np.isfinite(value):
        raise GradCheckError(f"function value is not finite ({value})")
    return value


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-6,
    tol: float = 1e-5,
    op: str = "f",
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> GradReport:
    """Compare ``x.grad`` from one backward pass of ``f(x)`` with central differences.

    ``f`` must return a scalar tensor. ``x`` is perturbed in place, so it can be
    a parameter that ``f`` reaches through a closure. The relative deviation of
    an element is ``|analytic - numeric| / max(|analytic|, |numeric|, floor, r / tol)``
    where ``r = 16 eps |f(x)| / h`` bounds the rounding error of the difference
    quotient; gradients below that resolution are judged by absolute error.
    With ``samples`` set, only that many randomly chosen elements are checked.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x.data = np.ascontiguousarray(x.data)
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if out.data.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        if not np.all(np.isfinite(out.data)):
            raise GradCheckError(f"{op}: function value is not finite")
        f0 = float(out.data.sum())
        out.backward()
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = was
        x.grad = None

    flat = x.data.reshape(-1)
    if samples is None or samples >= flat.size:
        indices = np.arange(flat.size)
    else:
        rng = rng or np.random.default_rng(0)
        indices = rng.choice(flat.size, size=samples, replace=False)

    resolution = 16.0 * np.finfo(x.data.dtype).eps * abs(f0) / h
    floor = max(floor, resolution / tol)
    a_flat = analytic.reshape(-1)
    max_abs = 0.0
    max_rel = 0.0
    with no_grad():
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + h
            up = _scalar(f, x)
            flat[idx] = orig - h
            down = _scalar(f, x)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            dev = abs(float(a_flat[idx]) - numeric)
            scale = max(abs(float(a_flat[idx])), abs(numeric), floor)
            max_abs = max(max_abs, dev)
            max_rel = max(max_rel, dev / scale)
    return GradReport(op, max_abs, max_rel, tol, int(len(indices)))
