"""Procedural primitive surfaces and farthest-point resampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import PointCloud


@dataclass(frozen=True)
class Primitive:
    """Closed primitive surface.

    ``box``: ``size`` holds the three half-extents. ``sphere``: ``size[0]`` is
    the radius. ``cylinder``: ``size`` is ``(radius, half_height)`` with the
    axis along ``axis`` (0, 1 or 2), caps included.
    """

    kind: str
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (0.5, 0.5, 0.5)
    axis: int = 2

    def __post_init__(self):
        if self.kind not in ("box", "sphere", "cylinder"):
            raise ValueError(f"unknown primitive {self.kind!r}")
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1 or 2")
        if self.area() <= 0:
            raise ValueError(f"degenerate {self.kind} with zero surface area")

    def area(self) -> float:
        if self.kind == "box":
            a, b, c = (2.0 * float(v) for v in self.size)
            return 2.0 * (a * b + b * c + a * c)
        r = float(self.size[0])
        if self.kind == "sphere":
            return 4.0 * np.pi * r**2
        h = 2.0 * float(self.size[1])
        return 2.0 * np.pi * r * h + 2.0 * np.pi * r**2

    def contains(self, pts, tol=1e-12) -> np.ndarray:
        """Strict interior test, used to trim union surfaces."""
        d = np.asarray(pts, dtype=float) - np.asarray(self.center, dtype=float)
        if self.kind == "box":
            return np.all(np.abs(d) < np.asarray(self.size, dtype=float) - tol, axis=1)
        if self.kind == "sphere":
            return np.linalg.norm(d, axis=1) < self.size[0] - tol
        radial = np.delete(d, self.axis, axis=1)
        return (np.linalg.norm(radial, axis=1) < self.size[0] - tol) & (np.abs(d[:, self.axis]) < self.size[1] - tol)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        if self.kind == "sphere":
            v = rng.standard_normal((n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return c + self.size[0] * v
        if self.kind == "box":
            h = np.asarray(self.size, dtype=float)
            # face pairs normal to x, y, z with areas proportional to the other two extents
            areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
            axis = rng.choice(3, size=n, p=areas / areas.sum())
            pts = rng.uniform(-1.0, 1.0, (n, 3)) * h
            sign = rng.choice([-1.0, 1.0], size=n)
            pts[np.arange(n), axis] = sign * h[axis]
            return c + pts
        r, hh = float(self.size[0]), float(self.size[1])
        side, cap = 2.0 * np.pi * r * 2.0 * hh, np.pi * r**2
        on_side = rng.random(n) < side / (side + 2.0 * cap)
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
        h = np.where(on_side, rng.uniform(-hh, hh, n), rng.choice([-hh, hh], size=n))
        u, v = rad * np.cos(theta), rad * np.sin(theta)
        other = [i for i in range(3) if i != self.axis]
        pts = np.zeros((n, 3))
        pts[:, other[0]], pts[:, other[1]], pts[:, self.axis] = u, v, h
        return c + pts


def _as_parts(shape):
    if isinstance(shape, Primitive):
        return [shape]
    parts = list(shape)
    if not parts or not all(isinstance(p, Primitive) for p in parts):
        raise ValueError("shape must be a Primitive or a non-empty sequence of Primitives")
    return parts


def sample_surface_points(shape, n_dense: int, seed=0) -> PointCloud:
    """``n_dense`` points uniform by area on a primitive or on the boundary of a union.

    For unions, points falling strictly inside another part are rejected and
    the draw is repeated until ``n_dense`` survive.
    """
    if n_dense < 1:
        raise ValueError("n_dense must be >= 1")
    parts = _as_parts(shape)
    rng = np.random.default_rng(seed)
    areas = np.array([p.area() for p in parts])
    out, have = [], 0
    while have < n_dense:
        need = n_dense - have
        draw = need if len(parts) == 1 else 2 * need + 16
        which = rng.choice(len(parts), size=draw, p=areas / areas.sum())
        pts = np.empty((draw, 3))
        keep = np.ones(draw, dtype=bool)
        for i, part in enumerate(parts):
            sel = which == i
            pts[sel] = part.sample(int(sel.sum()), rng)
            for j, other in enumerate(parts):
                if j != i:
                    keep[sel] &= ~other.contains(pts[sel])
        pts = pts[keep][:need]
        out.append(pts)
        have += len(pts)
    return PointCloud(np.concatenate(out), frame="scene")


def fps_resample(dense: PointCloud, K: int, seed=0) -> PointCloud:
    """Farthest-point subset of size ``K`` starting from a seed-chosen point."""
    pts = dense.points
    n = len(pts)
    if K > n:
        raise ValueError(f"cannot pick {K} points from {n}")
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    idx = np.empty(K, dtype=int)
    idx[0] = rng.integers(n)
    d = np.sum((pts - pts[idx[0]]) ** 2, axis=1)
    d[idx[0]] = -1.0  # never re-pick, even among duplicates
    for i in range(1, K):
        idx[i] = int(np.argmax(d))
        d = np.minimum(d, np.sum((pts - pts[idx[i]]) ** 2, axis=1))
        d[idx[i]] = -1.0
    return PointCloud(pts[idx], frame=dense.frame, meta=dict(dense.meta))
