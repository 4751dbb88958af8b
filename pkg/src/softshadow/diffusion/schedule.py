"""DDPM noise schedule and the Gaussian forward process."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients; entry ``t - 1`` belongs to step ``t`` (``1 <= t <= T``)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def at(self, t):
        """``(beta_t, alpha_t, alpha_bar_t)`` for integer step(s) ``t``."""
        i = np.asarray(t) - 1
        if np.any(i < 0) or np.any(i >= self.T):
            raise ValueError(f"step outside 1..{self.T}")
        return self.betas[i], self.alphas[i], self.alpha_bars[i]


def cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine schedule: ``alpha_bar(t) = h(t) / h(0)``, ``h(t) = cos^2(((t/T + s) / (1 + s)) pi/2)``.

    Betas are clipped to ``[1e-8, max_beta]`` and the cumulative products are
    recomputed from the clipped betas, so the one-step chain and the closed-form
    marginal agree exactly.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    t = np.arange(T + 1, dtype=float)
    h = np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
    abar = h / h[0]
    betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, max_beta)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def forward_noising(u0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal ``u_t = sqrt(abar_t) u0 + sqrt(1 - abar_t) eps``."""
    _, _, abar = schedule.at(t)
    return np.sqrt(abar) * np.asarray(u0, dtype=float) + np.sqrt(1.0 - abar) * np.asarray(eps, dtype=float)


def forward_chain(u0, t: int, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Iterate ``u_s = sqrt(alpha_s) u_{s-1} + sqrt(beta_s) eps_s`` for ``s = 1..t``."""
    u = np.array(u0, dtype=float)
    for step in range(1, t + 1):
        beta, alpha, _ = schedule.at(step)
        u = np.sqrt(alpha) * u + np.sqrt(beta) * rng.standard_normal(u.shape)
    return u
