"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, no_grad


class GradCheckError(RuntimeError):
    """The function under test produced a non-finite value."""


def finite_difference_check(f, x, eps=1e-5, max_coords=None, seed=0):
    """Compare the tape gradient of ``f`` at ``x`` against central differences.

    ``f`` maps a Tensor to a scalar Tensor and must be evaluable at every
    ``x +/- eps`` single-coordinate perturbation.  Returns the maximum over
    checked coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    For large inputs, ``max_coords`` caps the number of coordinates probed
    (a deterministic sample drawn with ``seed``); by default every
    coordinate is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    flat = x.ravel()
    n = flat.size
    if max_coords is not None and n > max_coords:
        coords = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
        coords.sort()
    else:
        coords = np.arange(n)

    worst = 0.0
    with no_grad():
        for i in coords:
            bumped = flat.copy()
            bumped[i] += eps
            hi = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[i] -= 2 * eps
            lo = f(Tensor(bumped.reshape(x.shape))).item()
            if not (np.isfinite(hi) and np.isfinite(lo)):
                idx = np.unravel_index(int(i), x.shape)
                raise GradCheckError(f"non-finite function value at coordinate {idx}")
            numeric = (hi - lo) / (2 * eps)
            err = abs(analytic.ravel()[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def finite_difference_check_param(loss_fn, param, eps=1e-5, max_coords=None, seed=0):
    """Same check, but against a parameter tensor already wired into a model.

    ``loss_fn`` takes no arguments and rebuilds the scalar loss from
    current parameter values; the analytic side reads ``param.grad`` after
    one backward pass, the numeric side nudges ``param.data`` in place.
    """
    from .tensor import backward as _backward

    out = loss_fn()
    _backward(out)
    analytic = param.grad.copy() if param.grad is not None else np.zeros_like(param.data)

    flat = param.data.ravel()
    n = flat.size
    if max_coords is not None and n > max_coords:
        coords = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
        coords.sort()
    else:
        coords = np.arange(n)

    worst = 0.0
    try:
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                hi = loss_fn().item()
                flat[i] = orig - eps
                lo = loss_fn().item()
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    idx = np.unravel_index(int(i), param.shape)
                    raise GradCheckError(f"non-finite function value at coordinate {idx}")
                numeric = (hi - lo) / (2 * eps)
                err = abs(analytic.ravel()[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    finally:
        param.grad = None
    return worst
