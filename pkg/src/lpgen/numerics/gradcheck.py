from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between reverse-mode and central-difference gradients.

    ``f`` takes no arguments and reads the current values of ``params``; it is
    re-evaluated with each coordinate nudged by ``±h``. The relative error per
    coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.

    ``max_coords`` limits the check to a random subset of coordinates per
    parameter (all coordinates when ``None``).
    """
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    f().backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    # nudged evaluations need no tape
    for p in params:
        p.requires_grad = False

    pick = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(pick.choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    for p in params:
        p.requires_grad = True
        p.grad = None
    return worst
