"""Finite-difference gradient checking for tape ops and model layers.

Central differences with an *effective step*: after perturbing a float32
entry by ``+h`` and ``-h``, the divisor is the realized float64 difference of
the two stored values rather than the nominal ``2h``. That removes the
representation error of the perturbation itself, so exactly-linear functions
check out to machine precision even at float32 storage.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-3) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` maps the input tensors to a scalar Tensor and must be
    deterministic. Error is ``|analytic - numeric| / max(1, |numeric|)``,
    maximized over every component of every input.
    """
    inputs = list(inputs)
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise ValueError("grad_check: non-finite input")
        t.requires_grad = True
        t.zero_grad()
    out = fn(*inputs)
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check: non-finite function value")
    backward(out)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = np.float32(orig + step)
                hi_x = float(flat[i])
                hi = float(fn(*inputs).data)
                flat[i] = np.float32(orig - step)
                lo_x = float(flat[i])
                lo = float(fn(*inputs).data)
                flat[i] = orig
            denom = hi_x - lo_x
            if denom == 0.0:
                raise ValueError("grad_check: step underflowed at float32")
            numeric = (hi - lo) / denom
            if not np.isfinite(numeric):
                raise ValueError("grad_check: non-finite numeric derivative")
            err = abs(float(aflat[i]) - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
