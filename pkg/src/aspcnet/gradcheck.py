"""Central finite-difference checks for the tape.

The error reported is ``max|g_ad - g_fd| / (max|g_ad| + max|g_fd| + 1e-12)``,
i.e. the worst coordinate discrepancy relative to the gradient's scale.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, no_grad

DENOM_EPS = 1e-12


def _as_scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ValueError(f"function must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(()))


def numerical_gradient(
    f: Callable[[], Tensor],
    param: Tensor,
    step: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. ``param``, perturbing in place.

    Only the flat ``indices`` are evaluated (all by default); the others are
    left at zero.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = _as_scalar(f())
            flat[i] = orig - step
            fm = _as_scalar(f())
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(param.shape)


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    diff = np.max(np.abs(g_ad - g_fd)) if g_ad.size else 0.0
    scale = np.max(np.abs(g_ad)) + np.max(np.abs(g_fd)) if g_ad.size else 0.0
    return float(diff / (scale + DENOM_EPS))


def check_params(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> dict[int, float]:
    """Compare tape gradients of ``f()`` against finite differences.

    ``params`` must be 64-bit tensors that ``f`` closes over. When
    ``max_coords`` is set, each parameter is probed on a seeded random
    subset of that many coordinates. Returns the error per parameter index.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("finite-difference checks need float64 tensors")
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = f()
    _as_scalar(out)
    tape.backward(out)

    rng = np.random.default_rng(seed)
    errors = {}
    for k, p in enumerate(params):
        g_ad = p.grad.reshape(-1)
        idx = None
        if max_coords is not None and p.size > max_coords:
            idx = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        g_fd = numerical_gradient(f, p, step, idx).reshape(-1)
        if idx is not None:
            g_ad = g_ad[idx]
            g_fd = g_fd[idx]
        errors[k] = relative_error(g_ad, g_fd)
    return errors


def finite_diff_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """Max relative error between tape and central-difference gradients of ``f`` at ``point``."""
    point = Tensor(point.data.astype(np.float64).copy(), dtype=np.float64)
    return check_params(lambda: f(point), [point], step)[0]
