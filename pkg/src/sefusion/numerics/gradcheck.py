"""Central finite-difference check of backward gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericalError, UsageError
from .autodiff import Parameter, Tensor, backward

# gradients smaller than this are compared on an absolute scale
SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    param: str | None
    index: tuple[int, int] | None
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), SCALE_FLOOR)


def finite_diff_check(model_fn: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5) -> GradCheckReport:
    """Compare backward gradients with (f(θ+ε) - f(θ-ε)) / 2ε element by element.

    ``model_fn`` rebuilds the forward pass from the current parameter values
    and returns a scalar Tensor. Run it in 64-bit.
    """
    if not eps > 0 or not np.isfinite(eps):
        raise UsageError(f"finite-difference step must be a positive finite number, got {eps!r}")

    def evaluate() -> float:
        out = model_fn()
        val = out.item()
        if not np.isfinite(val):
            raise NumericalError(f"model_fn returned a non-finite loss ({val})")
        return val

    loss = model_fn()
    if not np.isfinite(loss.item()):
        raise NumericalError(f"model_fn returned a non-finite loss ({loss.item()})")
    backward(loss, params)
    analytic = {p.name: p.grad.copy() for p in params}

    worst, where, count = 0.0, (None, None), 0
    for p in params:
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = evaluate()
            flat[k] = orig - eps
            down = evaluate()
            flat[k] = orig
            numeric = (up - down) / (2 * eps)
            err = relative_error(float(analytic[p.name].reshape(-1)[k]), numeric)
            count += 1
            if err > worst or where[0] is None:
                worst = max(worst, err)
                where = (p.name, tuple(int(i) for i in np.unravel_index(k, p.value.shape)))
    return GradCheckReport(worst, where[0], where[1], count)
