"""Image, point-cloud and occupancy error measures."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

CHAMFER_CONVENTION = "mean-squared-nn;sum-of-both-directions"


def mse(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _points(P):
    pts = np.asarray(getattr(P, "points", P), dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty point cloud")
    return pts


def chamfer(P, Q) -> float:
    """Mean squared nearest-neighbour distance from P to Q plus from Q to P (exact k-d tree queries)."""
    p, q = _points(P), _points(Q)
    dpq, _ = cKDTree(q).query(p)
    dqp, _ = cKDTree(p).query(q)
    return float(np.mean(dpq**2) + np.mean(dqp**2))


def voxel_iou(a, b) -> float:
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def power_ratio_db(signal, other) -> float:
    s = np.mean(np.asarray(signal, dtype=float) ** 2)
    o = np.mean(np.asarray(other, dtype=float) ** 2)
    if o == 0:
        raise ValueError("reference component is identically zero")
    return 10.0 * math.log10(s / o)


def sbr_db(signal, background) -> float:
    """``10 log10(mean(signal^2) / mean(background^2))`` with ``signal = A(theta) f``."""
    signal, background = np.asarray(signal, dtype=float), np.asarray(background, dtype=float)
    if np.broadcast_shapes(signal.shape, background.shape) != signal.shape:
        raise ValueError("background does not match the signal")
    return power_ratio_db(signal, np.broadcast_to(background, signal.shape))


def snr_db(signal, noise) -> float:
    return power_ratio_db(signal, noise)


@dataclass
class EvalReport:
    mse_2d: float = float("nan")
    chamfer_3d: float = float("nan")
    voxel_iou: float = float("nan")
    sbr_db: float = float("inf")
    snr_db: float = float("inf")
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.voxel_iou <= 1.0 and not math.isnan(self.voxel_iou):
            raise ValueError("voxel_iou outside [0, 1]")

    def to_line(self) -> str:
        """One line of ``key:value`` pairs; metadata keys are prefixed with ``meta.``."""
        items = [("mse_2d", self.mse_2d), ("chamfer_3d", self.chamfer_3d), ("voxel_iou", self.voxel_iou),
                 ("sbr_db", self.sbr_db), ("snr_db", self.snr_db)]
        items += [(f"meta.{k}", v) for k, v in sorted(self.metadata.items())]
        for k, v in items:
            if ", " in str(v) or ":" in str(k):
                raise ValueError(f"report field {k!r} cannot hold {v!r}")
        return ", ".join(f"{k}:{_fmt(v)}" for k, v in items)

    @classmethod
    def from_line(cls, line: str) -> "EvalReport":
        vals, meta = {}, {}
        for part in line.strip().split(", "):
            key, _, raw = part.partition(":")
            if key.startswith("meta."):
                meta[key[5:]] = raw
            else:
                vals[key] = float(raw)
        return cls(**vals, metadata=meta)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
