"""Scene frame, computational field-of-view frustum, voxel grids and
segment/box tests.

Coordinate frame: the visible wall lies in the plane ``y = 0``, the hidden
emitter plane in ``y = D``, ``z`` points up and ``x`` is lateral. Both
rectangles are centred on the ``y`` axis.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SceneConfig",
    "Frustum",
    "VoxelGrid",
    "PointCloud",
    "build_cfov_frustum",
    "make_voxel_grid",
    "segment_intersects_voxel",
    "segments_intersect_boxes",
    "wall_pixel_centers",
    "emitter_pixel_centers",
    "voxelize_points",
]

_FLOAT_FIELDS = (
    "wall_width",
    "wall_height",
    "emitter_depth",
    "emitter_width",
    "emitter_height",
)
_INT_FIELDS = (
    "wall_res_x",
    "wall_res_z",
    "emitter_res_x",
    "emitter_res_z",
    "voxel_nx",
    "voxel_ny",
    "voxel_nz",
    "seed",
)


@dataclass(frozen=True)
class SceneConfig:
    """Full geometric description of an NLOS scene.

    Lengths are in meters, resolutions in pixels/voxels.
    """

    wall_width: float
    wall_height: float
    wall_res_x: int
    wall_res_z: int
    emitter_depth: float
    emitter_width: float
    emitter_height: float
    emitter_res_x: int
    emitter_res_z: int
    voxel_nx: int
    voxel_ny: int
    voxel_nz: int
    seed: int = 0

    def __post_init__(self):
        for name in _FLOAT_FIELDS:
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name} must be a positive finite length, got {value!r}")
        for name in _INT_FIELDS:
            value = getattr(self, name)
            if int(value) != value:
                raise ValueError(f"{name} must be an integer, got {value!r}")
            if name != "seed" and value < 1:
                raise ValueError(f"{name} must be >= 1, got {value!r}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    @property
    def M(self) -> int:
        return self.wall_res_x * self.wall_res_z

    @property
    def N(self) -> int:
        return self.emitter_res_x * self.emitter_res_z

    @property
    def K(self) -> int:
        return self.voxel_nx * self.voxel_ny * self.voxel_nz

    @property
    def D(self) -> float:
        return self.emitter_depth

    @property
    def emitter_pixel_area(self) -> float:
        return (self.emitter_width / self.emitter_res_x) * (self.emitter_height / self.emitter_res_z)

    def replace(self, **changes) -> "SceneConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name}={value!r}" if f.name in _FLOAT_FIELDS else f"{f.name}={int(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SceneConfig":
        """Parse flat ``key=value`` text. Unknown or duplicate keys are errors."""
        known = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in known:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ValueError(f"line {lineno}: duplicate key {key!r}")
            try:
                values[key] = float(value) if key in _FLOAT_FIELDS else int(value)
            except ValueError:
                raise ValueError(f"line {lineno}: bad value for {key}: {value!r}") from None
        missing = known - set(values) - {"seed"}
        if missing:
            raise ValueError(f"missing keys: {', '.join(sorted(missing))}")
        return cls(**values)

    @classmethod
    def load(cls, path) -> "SceneConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Frustum:
    """Occluding volume between the camera FOV (``y = 0``) and the emitter
    rectangle (``y = D``).

    ``base`` and ``top`` are ``(4, 3)`` corner arrays ordered
    ``(-x,-z), (+x,-z), (+x,+z), (-x,+z)`` so that ``base[i]`` joins ``top[i]``.
    """

    base: np.ndarray
    top: np.ndarray

    @property
    def corners(self) -> np.ndarray:
        return np.vstack([self.base, self.top])

    @property
    def depth(self) -> float:
        return float(self.top[0, 1] - self.base[0, 1])

    def bounds_at(self, t):
        """Lateral bounds ``(x0, x1, z0, z1)`` at normalized depth ``t = y / D``."""
        t = np.asarray(t, dtype=float)
        x0 = self.base[0, 0] + t * (self.top[0, 0] - self.base[0, 0])
        x1 = self.base[2, 0] + t * (self.top[2, 0] - self.base[2, 0])
        z0 = self.base[0, 2] + t * (self.top[0, 2] - self.base[0, 2])
        z1 = self.base[2, 2] + t * (self.top[2, 2] - self.base[2, 2])
        return x0, x1, z0, z1

    def is_prism(self) -> bool:
        return bool(np.allclose(self.base[:, [0, 2]], self.top[:, [0, 2]]))


def _rectangle(width, height, y):
    hx, hz = width / 2.0, height / 2.0
    return np.array([[-hx, y, -hz], [hx, y, -hz], [hx, y, hz], [-hx, y, hz]], dtype=float)


def build_cfov_frustum(cfg: SceneConfig) -> Frustum:
    for name in ("wall_width", "wall_height", "emitter_width", "emitter_height", "emitter_depth"):
        if getattr(cfg, name) <= 0:
            raise ValueError(f"{name} must be positive")
    return Frustum(
        base=_rectangle(cfg.wall_width, cfg.wall_height, 0.0),
        top=_rectangle(cfg.emitter_width, cfg.emitter_height, cfg.emitter_depth),
    )


@dataclass(frozen=True)
class VoxelGrid:
    """Uniform subdivision of a frustum.

    Voxel ``k`` has integer coordinates ``(ix, iy, iz)`` with
    ``k = (iy * nz + iz) * nx + ix``. ``half_extents`` is ``(K, 3)``; it is
    constant for prism frusta and varies with depth otherwise.
    """

    frustum: Frustum
    counts: tuple
    centers: np.ndarray
    half_extents: np.ndarray

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def lo(self) -> np.ndarray:
        return self.centers - self.half_extents

    @property
    def hi(self) -> np.ndarray:
        return self.centers + self.half_extents

    def index(self, ix, iy, iz):
        nx, ny, nz = self.counts
        return (np.asarray(iy) * nz + np.asarray(iz)) * nx + np.asarray(ix)

    def coords(self, k):
        nx, ny, nz = self.counts
        k = np.asarray(k)
        ix = k % nx
        iz = (k // nx) % nz
        iy = k // (nx * nz)
        return ix, iy, iz

    def neighbors(self, k):
        """Face-adjacent voxel indices of ``k``."""
        nx, ny, nz = self.counts
        ix, iy, iz = (int(c) for c in self.coords(k))
        out = []
        for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            jx, jy, jz = ix + dx, iy + dy, iz + dz
            if 0 <= jx < nx and 0 <= jy < ny and 0 <= jz < nz:
                out.append(int(self.index(jx, jy, jz)))
        return out


def make_voxel_grid(frustum: Frustum, nx: int, ny: int, nz: int) -> VoxelGrid:
    if min(nx, ny, nz) < 1:
        raise ValueError("voxel counts must be >= 1")
    D = frustum.depth
    iy, iz, ix = np.meshgrid(np.arange(ny), np.arange(nz), np.arange(nx), indexing="ij")
    iy, iz, ix = iy.ravel(), iz.ravel(), ix.ravel()
    t = (iy + 0.5) / ny
    x0, x1, z0, z1 = frustum.bounds_at(t)
    sx = (ix + 0.5) / nx
    sz = (iz + 0.5) / nz
    centers = np.column_stack([x0 + sx * (x1 - x0), frustum.base[0, 1] + t * D, z0 + sz * (z1 - z0)])
    half = np.column_stack([(x1 - x0) / (2 * nx), np.full(t.shape, D / (2 * ny)), (z1 - z0) / (2 * nz)])
    return VoxelGrid(frustum=frustum, counts=(nx, ny, nz), centers=centers, half_extents=half)


def _pixel_grid(width, height, res_x, res_z, y):
    # row 0 is the top (largest z); pixel m = iz * res_x + ix
    xs = -width / 2.0 + (np.arange(res_x) + 0.5) * (width / res_x)
    zs = height / 2.0 - (np.arange(res_z) + 0.5) * (height / res_z)
    zz, xx = np.meshgrid(zs, xs, indexing="ij")
    return np.column_stack([xx.ravel(), np.full(xx.size, float(y)), zz.ravel()])


def wall_pixel_centers(cfg: SceneConfig) -> np.ndarray:
    """``(M, 3)`` wall pixel centres (all with ``y == 0``)."""
    return _pixel_grid(cfg.wall_width, cfg.wall_height, cfg.wall_res_x, cfg.wall_res_z, 0.0)


def emitter_pixel_centers(cfg: SceneConfig) -> np.ndarray:
    """``(N, 3)`` emitter pixel centres (all with ``y == D``)."""
    return _pixel_grid(cfg.emitter_width, cfg.emitter_height, cfg.emitter_res_x, cfg.emitter_res_z, cfg.emitter_depth)


def _slab_interval(a, d, lo, hi):
    """Parameter interval of ``a + t d`` inside ``[lo, hi]`` along one axis.

    Shared by the scalar test and the vectorised visibility builder so that
    boundary decisions are bit-identical.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - a) / d
        t2 = (hi - a) / d
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    parallel = d == 0
    if np.any(parallel):
        inside = (lo <= a) & (a <= hi)
        tlo = np.where(parallel, np.where(inside, -np.inf, np.inf), tlo)
        thi = np.where(parallel, np.where(inside, np.inf, -np.inf), thi)
    return tlo, thi


def _canonical(a, b):
    # start from the endpoint with larger y (ties: lexicographically smaller x, z)
    # so the test is exactly symmetric in its endpoints
    swap = (a[..., 1] < b[..., 1]) | (
        (a[..., 1] == b[..., 1])
        & ((a[..., 0] > b[..., 0]) | ((a[..., 0] == b[..., 0]) & (a[..., 2] > b[..., 2])))
    )
    swap = swap[..., None]
    return np.where(swap, b, a), np.where(swap, a, b)


def segments_intersect_boxes(a, b, lo, hi) -> np.ndarray:
    """Vectorised closed segment / axis-aligned box test with broadcasting.

    ``a``, ``b``, ``lo``, ``hi`` broadcast against each other with a trailing
    axis of length 3.
    """
    a, b, lo, hi = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, lo, hi)))
    a, b = _canonical(a, b)
    d = b - a
    tmin = np.zeros(a.shape[:-1])
    tmax = np.ones(a.shape[:-1])
    for axis in range(3):
        tlo, thi = _slab_interval(a[..., axis], d[..., axis], lo[..., axis], hi[..., axis])
        tmin = np.maximum(tmin, tlo)
        tmax = np.minimum(tmax, thi)
    return tmin <= tmax


def segment_intersects_voxel(a, b, center, half_extents) -> bool:
    """True iff the closed segment ``a -> b`` touches the box ``center ± half_extents``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.array_equal(a, b):
        raise ValueError("degenerate segment: a == b")
    center = np.asarray(center, dtype=float)
    half = np.broadcast_to(np.asarray(half_extents, dtype=float), (3,))
    return bool(segments_intersect_boxes(a, b, center - half, center + half))


@dataclass
class PointCloud:
    """``(K, 3)`` points tagged with the frame they live in."""

    points: np.ndarray
    frame: str = "scene"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.frame not in ("scene", "normalized"):
            raise ValueError(f"unknown frame {self.frame!r}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")

    def __len__(self):
        return self.points.shape[0]

    def normalized(self) -> "PointCloud":
        """Centre the bounding box at the origin and scale its longest side to 1."""
        lo, hi = self.points.min(axis=0), self.points.max(axis=0)
        extent = float(np.max(hi - lo))
        if extent <= 0:
            raise ValueError("cannot normalize a cloud with zero extent")
        pts = (self.points - (lo + hi) / 2.0) / extent
        return PointCloud(np.clip(pts, -0.5, 0.5), frame="normalized", meta=dict(self.meta))

    def to_scene(self, scale: float, offset) -> "PointCloud":
        return PointCloud(self.points * scale + np.asarray(offset, dtype=float), frame="scene", meta=dict(self.meta))

    def save_xyz(self, path) -> None:
        """One ``x y z`` line per point, round-trip exact."""
        np.savetxt(path, self.points, fmt="%.17g", encoding="utf-8")

    @classmethod
    def load_xyz(cls, path, frame: str = "scene") -> "PointCloud":
        pts = np.loadtxt(path, dtype=float, ndmin=2, encoding="utf-8")
        if pts.size and pts.shape[1] != 3:
            raise ValueError(f"{path}: expected three columns, got {pts.shape[1]}")
        return cls(pts.reshape(-1, 3), frame=frame)


def voxelize_points(points, grid: VoxelGrid, min_count: int = 1) -> np.ndarray:
    """Boolean occupancy of ``grid`` marking voxels holding ``>= min_count`` points.

    Points outside the frustum are dropped.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    nx, ny, nz = grid.counts
    fr = grid.frustum
    t = (pts[:, 1] - fr.base[0, 1]) / fr.depth
    x0, x1, z0, z1 = fr.bounds_at(t)
    sx = (pts[:, 0] - x0) / (x1 - x0)
    sz = (pts[:, 2] - z0) / (z1 - z0)
    inside = (t > 0) & (t < 1) & (sx >= 0) & (sx < 1) & (sz >= 0) & (sz < 1)
    ix = np.floor(sx[inside] * nx).astype(int)
    iy = np.floor(t[inside] * ny).astype(int)
    iz = np.floor(sz[inside] * nz).astype(int)
    counts = np.bincount(grid.index(ix, iy, iz), minlength=grid.K)
    return counts >= min_count
