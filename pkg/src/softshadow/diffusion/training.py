"""Simplified epsilon-prediction training, EMA weights and the SSDW checkpoint format."""
from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .networks import NetworkConfig, SSDModel
from .schedule import NoiseSchedule, cosine_schedule

log = logging.getLogger(__name__)

_MAGIC = b"SSDW"
_VERSION = 1
IMAGE_NORMALIZATION = "per-image-standardize"
_NORM_EPS = 1e-8


@dataclass
class TrainingConfig:
    T: int = 256
    lr: float = 1e-3
    batch_size: int = 16
    ema_decay: float = 0.9999
    iterations: int = 20000
    points_per_step: int | None = 128
    seed: int = 0

    def __post_init__(self):
        if min(self.T, self.batch_size, self.iterations) < 1 or self.lr <= 0 or not 0 < self.ema_decay < 1:
            raise ValueError("training hyperparameters must be positive (0 < ema_decay < 1)")


def normalize_images(y, eps: float = _NORM_EPS) -> np.ndarray:
    """Zero-mean, unit-variance per image; ``y`` is ``(B, M)`` or ``(M,)``."""
    y = np.asarray(y, dtype=float)
    mu = y.mean(axis=-1, keepdims=True)
    sd = y.std(axis=-1, keepdims=True)
    return (y - mu) / (sd + eps)


def image_tensor(y, size: int) -> torch.Tensor:
    """Flattened wall images -> normalised ``(B, 1, size, size)`` float32 tensor."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[1] != size * size:
        raise ValueError(f"measurement has {y.shape[1]} pixels, model expects {size}x{size}")
    return torch.from_numpy(normalize_images(y).reshape(-1, 1, size, size).astype(np.float32))


def diffusion_loss(eps_fn, u0, y, schedule: NoiseSchedule, generator: torch.Generator):
    """Per-point squared error ``||eps - eps_fn(u_t, t, y)||^2`` averaged over batch and points.

    ``t`` is drawn uniformly from ``1..T`` per cloud. Returns ``(loss, t, eps)``.
    """
    B = u0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    eps = torch.randn(u0.shape, generator=generator, dtype=u0.dtype)
    abar = torch.as_tensor(schedule.alpha_bars, dtype=u0.dtype)[t - 1][:, None, None]
    u_t = abar.sqrt() * u0 + (1.0 - abar).sqrt() * eps
    pred = eps_fn(u_t, t, y)
    loss = ((eps - pred) ** 2).sum(dim=-1).mean()
    return loss, t, eps


class Trainer:
    """Optimiser, EMA copy and step counter around an :class:`SSDModel`."""

    def __init__(self, model: SSDModel | None = None, config: TrainingConfig | None = None):
        self.config = config or TrainingConfig()
        torch.manual_seed(self.config.seed)
        self.model = model or SSDModel()
        self.ema = copy.deepcopy(self.model).requires_grad_(False)
        self.schedule = cosine_schedule(self.config.T)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=self.config.lr)
        self.generator = torch.Generator().manual_seed(self.config.seed)
        self.step = 0
        self.losses = []

    def ema_rate(self) -> float:
        # warm-up so that short desk-scale runs are not dominated by the initial weights
        return min(self.config.ema_decay, (1.0 + self.step) / (10.0 + self.step))

    @torch.no_grad()
    def update_ema(self):
        d = self.ema_rate()
        for pe, p in zip(self.ema.parameters(), self.model.parameters()):
            pe.mul_(d).add_(p.detach(), alpha=1.0 - d)
        for be, b in zip(self.ema.buffers(), self.model.buffers()):
            be.copy_(b)

    def training_step(self, u0, y) -> float:
        """One gradient step on a batch of normalised clouds ``(B, K, 3)`` and images ``(B, 1, H, W)``."""
        self.model.train()
        loss, _, _ = diffusion_loss(self.model, u0, y, self.schedule, self.generator)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at step {self.step}")
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        self.step += 1
        self.update_ema()
        value = loss.item()
        self.losses.append(value)
        return value

    def fit(self, clouds, measurements, iterations: int | None = None, callback=None):
        """Train on arrays ``clouds (n, K, 3)`` and flattened ``measurements (n, M)``."""
        cfg = self.config
        U = torch.as_tensor(np.asarray(clouds), dtype=torch.float32)
        Y = image_tensor(measurements, self.model.config.image_size)
        n, K = U.shape[0], U.shape[1]
        for _ in range(iterations or cfg.iterations):
            idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=self.generator)
            u0 = U[idx]
            if cfg.points_per_step and cfg.points_per_step < K:
                pick = torch.rand(len(idx), K, generator=self.generator).argsort(dim=1)[:, :cfg.points_per_step]
                u0 = torch.gather(u0, 1, pick[:, :, None].expand(-1, -1, 3))
            loss = self.training_step(u0, Y[idx])
            if callback is not None:
                callback(self.step, loss)
        return self.losses

    def save(self, path):
        save_checkpoint(path, self.model, self.ema, self.config, self.step)


def _state_blob(state):
    entries, chunks, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def save_checkpoint(path, model: SSDModel, ema: SSDModel | None = None, config: TrainingConfig | None = None,
                    step: int = 0):
    """``SSDW`` file: magic, version byte, u32 header length, JSON header, raw little-endian tensors."""
    header = {"network": model.config.to_dict(), "training": asdict(config or TrainingConfig()), "step": step,
              "image_normalization": IMAGE_NORMALIZATION, "normalization_eps": _NORM_EPS, "tensors": {}}
    blobs = []
    base = 0
    for key, m in (("model", model), ("ema", ema if ema is not None else model)):
        entries, blob = _state_blob(m.state_dict())
        for e in entries:
            e["offset"] += base
        header["tensors"][key] = entries
        blobs.append(blob)
        base += len(blob)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + bytes([_VERSION]) + struct.pack("<I", len(head)) + head + b"".join(blobs))


def load_checkpoint(path):
    """Returns ``(model, ema, training_config, step)``; raises ``ValueError`` on format or version mismatch."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not an SSDW checkpoint")
    if data[4] != _VERSION:
        raise ValueError(f"{path}: unsupported SSDW version {data[4]} (expected {_VERSION})")
    (hlen,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9:9 + hlen].decode("utf-8"))
    if header.get("image_normalization") != IMAGE_NORMALIZATION:
        raise ValueError(f"{path}: unknown image normalisation {header.get('image_normalization')!r}")
    payload = memoryview(data)[9 + hlen:]
    net_cfg = NetworkConfig.from_dict(header["network"])
    out = []
    for key in ("model", "ema"):
        m = SSDModel(net_cfg)
        state = {}
        for e in header["tensors"][key]:
            buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
            state[e["name"]] = torch.from_numpy(arr.astype(np.dtype(e["dtype"]), copy=True))
        m.load_state_dict(state)
        out.append(m.eval())
    return out[0], out[1].requires_grad_(False), TrainingConfig(**header["training"]), int(header["step"])
