"""Linear variance schedule shared by the denoiser's output mixing and the diffusion process."""
from __future__ import annotations

from functools import lru_cache

import numpy as np


class NoiseSchedule:
    """Linear variance schedule.

    ``beta`` runs linearly between ``beta_start`` and ``beta_end``. ``linear()``
    rescales the classic 1e-4..0.02 endpoints by 1000/T so short chains still end
    near pure noise.
    """

    def __init__(self, T: int, beta_start: float, beta_end: float):
        if T < 1:
            raise ValueError("T must be positive")
        self.T = T
        self.beta = np.linspace(beta_start, beta_end, T)
        if not (np.all(self.beta > 0) and np.all(self.beta < 1)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    @classmethod
    def linear(cls, T: int = 50) -> "NoiseSchedule":
        scale = 1000.0 / T
        return cls(T, 1e-4 * scale, min(0.02 * scale, 0.999))


@lru_cache(maxsize=8)
def linear_alpha_bar(T: int) -> np.ndarray:
    ab = NoiseSchedule.linear(T).alpha_bar
    ab.setflags(write=False)
    return ab
