from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, precision


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
               max_per_param: int | None = None, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Both sides are evaluated in float64; parameters are restored afterwards.
    `max_per_param` limits the finite-difference probes to a random subset of
    coordinates of each parameter (all coordinates when None).
    """
    rng = np.random.default_rng(seed)
    originals = [p.data for p in params]
    worst = 0.0
    try:
        with precision(np.float64):
            for p in params:
                p.data = p.data.astype(np.float64)
                p.grad = None
            loss = fn()
            if loss.data.size != 1:
                raise ValueError("grad_check needs a scalar-valued computation")
            loss.backward()
            for p in params:
                g_ad = np.zeros_like(p.data) if p.grad is None else p.grad
                if not np.all(np.isfinite(g_ad)):
                    raise NonFiniteError("non-finite reverse-mode gradient")
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_per_param is not None and flat.size > max_per_param:
                    idx = rng.choice(flat.size, size=max_per_param, replace=False)
                g_flat = g_ad.reshape(-1)
                for i in idx:
                    old = flat[i]
                    flat[i] = old + eps
                    f_plus = fn().item()
                    flat[i] = old - eps
                    f_minus = fn().item()
                    flat[i] = old
                    g_fd = (f_plus - f_minus) / (2 * eps)
                    if not np.isfinite(g_fd):
                        raise NonFiniteError("non-finite finite-difference gradient")
                    err = abs(g_flat[i] - g_fd) / max(1e-8, abs(g_flat[i]) + abs(g_fd))
                    worst = max(worst, float(err))
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            p.grad = None
    return worst
