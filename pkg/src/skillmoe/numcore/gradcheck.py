"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst: tuple[int, int] | None
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"grad_check {verdict}: max rel. error {self.max_rel_error:.3e} at {self.worst}"


def grad_check(fn: Callable[..., Tensor], point: Sequence[np.ndarray] | np.ndarray,
               step: float = 1e-5, tolerance: float = 1e-6, floor: float = 1e-6) -> GradCheckReport:
    """Compare backward() against central differences at ``point``.

    ``fn`` takes one Tensor per array in ``point`` and returns a scalar
    Tensor. The per-coordinate relative error is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps near-zero
    coordinates from dominating through rounding noise.
    """
    if isinstance(point, np.ndarray):
        point = [point]
    arrays = [np.array(p, dtype=np.float64) for p in point]

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    backward(tape, out)
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]

    def value(args):
        return float(fn(*[Tensor(a) for a in args]).data)

    numeric = []
    for k, a in enumerate(arrays):
        num = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value(arrays)
            flat[i] = orig - step
            fm = value(arrays)
            flat[i] = orig
            num.reshape(-1)[i] = (fp - fm) / (2.0 * step)
        numeric.append(num)

    max_err, worst = 0.0, None
    for k, (an, nu) in enumerate(zip(analytic, numeric)):
        if an.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(an), np.abs(nu)), floor)
        err = np.abs(an - nu) / denom
        i = int(np.argmax(err))
        if err.reshape(-1)[i] > max_err:
            max_err, worst = float(err.reshape(-1)[i]), (k, i)
    return GradCheckReport(max_err < tolerance, max_err, worst, analytic, numeric)
