"""Shadow encoder and pointwise conditional noise predictor."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

LATENT_DIM = 512


@dataclass
class NetworkConfig:
    image_size: int = 64
    image_channels: int = 1
    encoder_width: int = 16
    latent_dim: int = LATENT_DIM
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 4)
    time_dim: int = 64
    cond_dim: int = 128

    def to_dict(self):
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        return cls(**d)


class ShadowEncoder(nn.Module):
    """Four stride-2 conv stages, global average pool, linear head to the latent."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        w = cfg.encoder_width
        chans = [cfg.image_channels, w, 2 * w, 4 * w, 8 * w]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.GroupNorm(min(8, cout), cout), nn.SiLU()]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1], cfg.latent_dim)
        self.image_size = cfg.image_size
        self.image_channels = cfg.image_channels

    def forward(self, y):
        if y.shape[1:] != (self.image_channels, self.image_size, self.image_size):
            raise ValueError(f"expected images of shape (B, {self.image_channels}, {self.image_size}, "
                             f"{self.image_size}), got {tuple(y.shape)}")
        return self.head(self.features(y).mean(dim=(2, 3)))


def timestep_embedding(t, dim: int):
    """Sinusoidal embedding of integer steps ``t`` (shape ``(B,)``)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _Block(nn.Module):
    """Pointwise conv over ``[features; condition]``.

    The condition is the same for every point, so its share of the conv is
    computed once per cloud and broadcast instead of concatenated.
    """

    def __init__(self, cin, cout, cond_dim):
        super().__init__()
        self.conv = nn.Conv1d(cin, cout, 1)
        self.cond = nn.Linear(cond_dim, cout, bias=False)
        self.norm = nn.GroupNorm(min(8, cout), cout)
        self.act = nn.SiLU()

    def forward(self, h, c):
        return self.act(self.norm(self.conv(h) + self.cond(c)[:, :, None]))


class PointDenoiser(nn.Module):
    """U-Net of pointwise 1D convolutions; the condition is concatenated at every block.

    Points are processed independently given the condition, so any number of
    points can be denoised with the same weights.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.time_dim = cfg.time_dim
        self.cond = nn.Sequential(nn.Linear(cfg.latent_dim + cfg.time_dim, cfg.cond_dim), nn.SiLU(),
                                  nn.Linear(cfg.cond_dim, cfg.cond_dim))
        chans = [cfg.base_channels * m for m in cfg.channel_mult]
        self.lift = nn.Conv1d(3, chans[0], 1)
        self.down = nn.ModuleList(_Block(a, b, cfg.cond_dim) for a, b in zip(chans[:-1], chans[1:]))
        self.mid = _Block(chans[-1], chans[-1], cfg.cond_dim)
        self.up = nn.ModuleList(_Block(a + b, a, cfg.cond_dim) for a, b in zip(reversed(chans[:-1]), reversed(chans[1:])))
        self.out = nn.Conv1d(chans[0], 3, 1)

    def forward(self, u, t, latent):
        """``u``: ``(B, K, 3)``; ``t``: ``(B,)``; ``latent``: ``(B, latent_dim)``. Returns ``(B, K, 3)``."""
        c = self.cond(torch.cat([latent, timestep_embedding(t, self.time_dim)], dim=1))
        h = self.lift(u.transpose(1, 2))
        skips = []
        for blk in self.down:
            skips.append(h)
            h = blk(h, c)
        h = self.mid(h, c)
        for blk in self.up:
            h = blk(torch.cat([h, skips.pop()], dim=1), c)
        return self.out(h).transpose(1, 2)


class SSDModel(nn.Module):
    """Encoder + noise predictor, trained jointly."""

    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.config = cfg or NetworkConfig()
        self.encoder = ShadowEncoder(self.config)
        self.denoiser = PointDenoiser(self.config)

    def forward(self, u, t, y):
        return self.denoiser(u, t, self.encoder(y))
