"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from widin.autodiff.tensor import Tensor
from widin.errors import NumericalError


def gradcheck(f: Callable[[], Tensor], params: Tensor | Sequence[Tensor], eps: float = 1e-4) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments and must rebuild its graph from the current
    ``params`` on each call.  Returns the maximum over all parameter entries of
    ``|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)``.

    The difference quotient uses the fourth-order central stencil
    ``(-f(+2h) + 8 f(+h) - 8 f(-h) + f(-2h)) / 12h``; the plain two-point
    quotient is roundoff-limited near gradient zero crossings.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    params = [params] if isinstance(params, Tensor) else list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1 or not math.isfinite(out.item()):
        raise NumericalError("gradcheck needs a finite scalar output")
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        p.grad = None
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for offset in (2.0, 1.0, -1.0, -2.0):
                flat[i] = orig + offset * eps
                vals.append(f().item())
            flat[i] = orig
            if not all(math.isfinite(v) for v in vals):
                raise NumericalError("non-finite value during finite differencing")
            # paired differences first: an input that does not affect f gives exactly 0
            numeric = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
