"""Ancestral sampling of the reverse chain."""
from __future__ import annotations

import numpy as np
import torch

from ..geometry import PointCloud
from .schedule import NoiseSchedule
from .training import image_tensor


@torch.no_grad()
def reverse_chain(eps_fn, shape, schedule: NoiseSchedule, generator: torch.Generator, noise: bool = True,
                  u_T=None) -> torch.Tensor:
    """``u_{t-1} = (u_t - beta_t / sqrt(1 - abar_t) eps_fn(u_t, t)) / sqrt(alpha_t) + sigma_t z`` with
    ``sigma_t^2 = beta_t`` and no noise at ``t = 1``."""
    if u_T is None:
        u = torch.randn(shape, generator=generator)
    else:
        u = torch.as_tensor(u_T)
        if not u.is_floating_point():
            u = u.float()
    B = u.shape[0]
    for t in range(schedule.T, 0, -1):
        beta, alpha, abar = (float(v) for v in schedule.at(t))
        eps = eps_fn(u, torch.full((B,), t, dtype=torch.long))
        u = (u - beta / np.sqrt(1.0 - abar) * eps) / np.sqrt(alpha)
        if noise and t > 1:
            u = u + np.sqrt(beta) * torch.randn(shape, generator=generator, dtype=u.dtype)
    return u


@torch.no_grad()
def reverse_sample(y, model, schedule: NoiseSchedule, K: int, seed=0) -> PointCloud:
    """Draw a ``K``-point cloud (normalised frame) conditioned on the flattened wall image ``y``."""
    if model is None:
        raise ValueError("reverse_sample needs a trained model")
    if K < 1:
        raise ValueError("K must be >= 1")
    model.eval()
    latent = model.encoder(image_tensor(y, model.config.image_size))
    gen = torch.Generator().manual_seed(int(seed))
    u = reverse_chain(lambda u, t: model.denoiser(u, t, latent), (1, K, 3), schedule, gen)
    return PointCloud(u[0].double().numpy(), frame="normalized")
