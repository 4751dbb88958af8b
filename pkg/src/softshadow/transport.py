"""Lambertian light transport, sparse pinspeck visibility and penumbra rendering."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import (
    SceneConfig,
    VoxelGrid,
    _slab_interval,
    emitter_pixel_centers,
    wall_pixel_centers,
)

__all__ = [
    "TransportMatrix",
    "SparseVisibility",
    "VisibilitySet",
    "PenumbraImage",
    "lambert_kernel",
    "build_transport",
    "build_visibility",
    "build_visibility_dense",
    "occlusion_mask",
    "render_exact",
    "render_linearized",
    "render_masked",
    "complementarity_check",
    "add_noise",
    "constant_background",
]

WALL_NORMAL = np.array([0.0, 1.0, 0.0])
EMITTER_NORMAL = np.array([0.0, -1.0, 0.0])


@dataclass(frozen=True)
class TransportMatrix:
    entries: np.ndarray
    scene_digest: str = ""

    @property
    def shape(self):
        return self.entries.shape

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


def _entries(A) -> np.ndarray:
    return A.entries if isinstance(A, TransportMatrix) else np.asarray(A, dtype=float)


def lambert_kernel(p, n_p, x, n_x):
    """One-sided Lambertian foreshortening ``max(0, cos) * max(0, cos)``.

    Broadcasts over leading axes. The first cosine is measured at the emitter
    (angle between ``p - x`` and ``n_x``), the second at the wall.
    """
    p, n_p, x, n_x = (np.asarray(v, dtype=float) for v in (p, n_p, x, n_x))
    d = p - x
    r = np.linalg.norm(d, axis=-1)
    if np.any(r == 0):
        raise ValueError("wall and emitter points coincide")
    cos_x = np.einsum("...i,...i->...", d, n_x) / r
    cos_p = np.einsum("...i,...i->...", -d, n_p) / r
    out = np.maximum(cos_x, 0.0) * np.maximum(cos_p, 0.0)
    return float(out) if out.ndim == 0 else out


def build_transport(cfg: SceneConfig) -> TransportMatrix:
    """Dense ``M x N`` transport ``A[m, n] = g / r^2 * pixel_area``."""
    p = wall_pixel_centers(cfg)[:, None, :]
    x = emitter_pixel_centers(cfg)[None, :, :]
    g = lambert_kernel(p, WALL_NORMAL, x, EMITTER_NORMAL)
    r2 = np.sum((x - p) ** 2, axis=-1)
    return TransportMatrix(g / r2 * cfg.emitter_pixel_area, cfg.digest())


@dataclass(frozen=True)
class SparseVisibility:
    """Rays ``x_n -> p_m`` blocked by voxel ``k``, as ``(m, n)`` rows sorted by ``(m, n)``."""

    k: int
    pairs: np.ndarray
    shape: tuple

    def dense(self) -> np.ndarray:
        V = np.zeros(self.shape)
        V[self.pairs[:, 0], self.pairs[:, 1]] = 1.0
        return V


class VisibilitySet:
    """All ``K`` sparse visibility structures in one CSR-like layout.

    ``flat[indptr[k]:indptr[k+1]]`` holds the sorted flat indices ``m * N + n``
    of the pairs blocked by voxel ``k``.
    """

    def __init__(self, M: int, N: int, indptr, flat):
        self.M, self.N = int(M), int(N)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.flat = np.asarray(flat, dtype=np.int64)
        self._matrix = None
        self._matrix_t = None

    @property
    def K(self) -> int:
        return self.indptr.size - 1

    def __len__(self):
        return self.K

    def __getitem__(self, k) -> SparseVisibility:
        if not 0 <= k < self.K:
            raise IndexError(k)
        idx = self.flat_indices(k)
        return SparseVisibility(int(k), np.column_stack(np.divmod(idx, self.N)), (self.M, self.N))

    def __iter__(self):
        return (self[k] for k in range(self.K))

    def flat_indices(self, k) -> np.ndarray:
        return self.flat[self.indptr[k] : self.indptr[k + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def matrix(self) -> sp.csr_matrix:
        """``K x (M*N)`` 0/1 matrix whose row ``k`` is ``vec(V_k)``."""
        if self._matrix is None:
            data = np.ones(self.flat.size)
            self._matrix = sp.csr_matrix((data, self.flat, self.indptr), shape=(self.K, self.M * self.N))
        return self._matrix

    def union_mask(self, active) -> np.ndarray:
        """Boolean ``M x N`` mask of rays blocked by any active voxel."""
        blocked = np.zeros(self.M * self.N, dtype=bool)
        for k in np.flatnonzero(np.asarray(active)):
            blocked[self.flat_indices(k)] = True
        return blocked.reshape(self.M, self.N)

    def weighted_sum(self, weights) -> np.ndarray:
        """``sum_k weights[k] * V_k`` as a dense ``M x N`` array."""
        if self._matrix_t is None:
            self._matrix_t = self.matrix().T.tocsr()
        return (self._matrix_t @ np.asarray(weights, dtype=float)).reshape(self.M, self.N)

    def masked_sums(self, G) -> np.ndarray:
        """``[sum(G * V_k) for k]`` for a dense ``M x N`` array ``G``."""
        return self.matrix() @ np.asarray(G, dtype=float).ravel()

    @property
    def nbytes(self) -> int:
        return self.indptr.nbytes + self.flat.nbytes


def _box_blocks(cfg, wall, emit, lo, hi):
    """Boolean ``(N, res_z, res_x)`` of rays emitter->wall touching one box.

    The per-axis slab intervals are separable over wall rows and columns.
    """
    rx, rz = cfg.wall_res_x, cfg.wall_res_z
    px = wall[:rx, 0]
    pz = wall[::rx, 2]
    ex, ey, ez = emit[:, 0], emit[:, 1], emit[:, 2]
    # every wall point has y == 0 and every emitter point y == D: one y interval
    tylo, tyhi = _slab_interval(ey[:1], wall[:1, 1] - ey[:1], lo[1], hi[1])
    t0 = max(0.0, float(tylo[0]))
    t1 = min(1.0, float(tyhi[0]))
    if t0 > t1:
        return None
    txlo, txhi = _slab_interval(ex[:, None], px[None, :] - ex[:, None], lo[0], hi[0])
    tzlo, tzhi = _slab_interval(ez[:, None], pz[None, :] - ez[:, None], lo[2], hi[2])
    alo = np.maximum(txlo, t0)
    ahi = np.minimum(txhi, t1)
    clo = np.maximum(tzlo, t0)
    chi = np.minimum(tzhi, t1)
    rows = np.any(clo <= chi, axis=0)
    cols = np.any(alo <= ahi, axis=0)
    if not rows.any() or not cols.any():
        return None
    return np.maximum(clo[:, :, None], alo[:, None, :]) <= np.minimum(chi[:, :, None], ahi[:, None, :])


def _box_flat(cfg, wall, emit, lo, hi):
    blk = _box_blocks(cfg, wall, emit, lo, hi)
    if blk is None:
        return np.zeros(0, dtype=np.int64)
    # (N, rz, rx) -> (M, N) order so flat indices come out sorted by (m, n)
    return np.flatnonzero(blk.reshape(cfg.N, cfg.M).T).astype(np.int64)


def build_visibility(cfg: SceneConfig, grid: VoxelGrid) -> VisibilitySet:
    """Sparse pinspeck visibility for every voxel of ``grid``."""
    wall = wall_pixel_centers(cfg)
    emit = emitter_pixel_centers(cfg)
    lo, hi = grid.lo, grid.hi
    chunks = [_box_flat(cfg, wall, emit, lo[k], hi[k]) for k in range(grid.K)]
    indptr = np.zeros(grid.K + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([c.size for c in chunks])
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return VisibilitySet(cfg.M, cfg.N, indptr, flat)


def build_visibility_dense(cfg: SceneConfig, grid: VoxelGrid, dtype=np.float32) -> np.ndarray:
    """Dense ``(K, M, N)`` visibility stack; only for small scenes and benchmarks."""
    wall = wall_pixel_centers(cfg)
    emit = emitter_pixel_centers(cfg)
    out = np.zeros((grid.K, cfg.M, cfg.N), dtype=dtype)
    for k in range(grid.K):
        blk = _box_blocks(cfg, wall, emit, grid.lo[k], grid.hi[k])
        if blk is not None:
            out[k] = blk.reshape(cfg.N, cfg.M).T
    return out


def occlusion_mask(cfg: SceneConfig, lo, hi) -> np.ndarray:
    """Union ``M x N`` blocked-ray mask for an arbitrary list of boxes."""
    wall = wall_pixel_centers(cfg)
    emit = emitter_pixel_centers(cfg)
    blocked = np.zeros((cfg.N, cfg.wall_res_z, cfg.wall_res_x), dtype=bool)
    for l, h in zip(np.atleast_2d(lo), np.atleast_2d(hi)):
        blk = _box_blocks(cfg, wall, emit, l, h)
        if blk is not None:
            blocked |= blk
    return blocked.reshape(cfg.N, cfg.M).T


def _check_sources(f, b):
    f = np.asarray(f, dtype=float)
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ValueError("emitter radiosity must be finite and nonnegative")
    b = np.asarray(b, dtype=float)
    if np.any(b < 0) or not np.all(np.isfinite(b)):
        raise ValueError("background must be finite and nonnegative")
    if f.ndim == 2 and b.ndim == 1:
        b = b[:, None]
    return f, b


def render_masked(A, mask, f, b=0.0) -> np.ndarray:
    """``(A * mask) f + b`` for an explicit ``M x N`` mask."""
    f, b = _check_sources(f, b)
    return (_entries(A) * mask) @ f + b


def render_exact(A, visibility: VisibilitySet, alpha, f, b=0.0) -> np.ndarray:
    """Union occlusion: a ray is blocked if any active voxel blocks it."""
    alpha = np.asarray(alpha)
    if not np.all((alpha == 0) | (alpha == 1)):
        raise ValueError("render_exact needs a binary occupancy vector")
    blocked = visibility.union_mask(alpha)
    return render_masked(A, ~blocked, f, b)


def render_linearized(A, visibility: VisibilitySet, alpha, f, b=0.0) -> np.ndarray:
    """Additive pinspeck model ``(A - sum_k alpha_k A . V_k) f + b``."""
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise ValueError("occupancy must lie in [0, 1]")
    mask = 1.0 - visibility.weighted_sum(alpha)
    return render_masked(A, mask, f, b)


def complementarity_check(A, visibility: VisibilitySet, k: int, f):
    """Return ``(pinhole, pinspeck, unoccluded)`` renders for voxel ``k``.

    The three images are computed along separate paths, so
    ``pinhole + pinspeck == unoccluded`` is a genuine check.
    """
    A = _entries(A)
    f, _ = _check_sources(f, 0.0)
    unoccluded = A @ f
    m, n = visibility[k].pairs.T
    weights = A[m, n]
    pinhole = np.zeros((A.shape[0],) + f.shape[1:])
    np.add.at(pinhole, m, weights[:, None] * f[n] if f.ndim == 2 else weights * f[n])
    alpha = np.zeros(visibility.K)
    alpha[k] = 1
    pinspeck = render_exact(A, visibility, alpha, f)
    return pinhole, pinspeck, unoccluded


def add_noise(y, snr_db, seed=0) -> np.ndarray:
    """Additive white Gaussian noise at ``snr_db`` (``+inf`` or ``None``: no noise)."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("image must be nonnegative")
    if snr_db is None or snr_db == np.inf:
        return y.copy()
    if not np.isfinite(snr_db):
        raise ValueError(f"invalid snr_db {snr_db!r}")
    sigma = np.sqrt(np.mean(y**2) / 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    return np.maximum(y + sigma * rng.standard_normal(y.shape), 0.0)


def constant_background(signal, sbr_db) -> np.ndarray:
    """Constant background field whose power sits ``sbr_db`` below ``signal``."""
    signal = np.asarray(signal, dtype=float)
    level = np.sqrt(np.mean(signal**2) / 10.0 ** (sbr_db / 10.0))
    return np.full(signal.shape, level)


_MAGIC = b"NLSI"
_VERSION = 1


@dataclass
class PenumbraImage:
    """Wall photograph stored as ``(height, width, channels)`` float values."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, C) with C in {{1, 3}}, got {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("penumbra values must be finite and nonnegative")
        self.values = v

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    def vector(self) -> np.ndarray:
        """``(M,)`` for grey images, ``(M, C)`` for colour, pixel order ``m = row * width + col``."""
        v = self.values.reshape(-1, self.channels)
        return v[:, 0] if self.channels == 1 else v

    @classmethod
    def from_vector(cls, y, width: int, height: int) -> "PenumbraImage":
        y = np.asarray(y, dtype=float)
        return cls(y.reshape(height, width, -1))

    def to_bytes(self) -> bytes:
        header = _MAGIC + bytes([_VERSION]) + struct.pack("<III", self.width, self.height, self.channels)
        return header + self.values.astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "PenumbraImage":
        if len(data) < 17 or data[:4] != _MAGIC:
            raise ValueError("not an NLSI image")
        if data[4] != _VERSION:
            raise ValueError(f"unsupported NLSI version {data[4]}")
        width, height, channels = struct.unpack("<III", data[5:17])
        expected = 17 + 4 * width * height * channels
        if len(data) != expected:
            raise ValueError(f"NLSI payload size {len(data)} != expected {expected}")
        vals = np.frombuffer(data, dtype="<f4", offset=17).reshape(height, width, channels)
        return cls(vals.astype(float))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PenumbraImage":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
