"""Procedural (cloud, emitter, shadow) triples for training the shadow-conditioned model."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..geometry import PointCloud, SceneConfig, VoxelGrid, build_cfov_frustum, make_voxel_grid, voxelize_points
from ..transport import PenumbraImage, build_transport, occlusion_mask, render_masked
from .shapes import Primitive, fps_resample, sample_surface_points

CLASSES = ("box", "sphere", "cylinder", "union")
MANIFEST_FIELDS = ("index", "class", "cloud_path", "emitter_path", "measurement_path", "seed")


@dataclass
class DatasetSpec:
    """Placement and sampling settings shared by every instance."""

    classes: tuple = ("box", "sphere", "cylinder")
    n_points: int = 256
    n_dense: int = 4096
    scale: float = 0.4  # meters per normalised unit
    jitter: float = 0.08  # half-width of the uniform translation jitter, meters
    center_depth: float = 0.5  # fraction of D

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["classes"] = tuple(d["classes"])
        return cls(**d)


@dataclass
class Instance:
    index: int
    cls: str
    cloud: PointCloud  # normalised frame
    emitter: np.ndarray  # (N,)
    measurement: np.ndarray  # (M,), noiseless
    translation: np.ndarray
    occupancy: np.ndarray = field(repr=False, default=None)
    seed: int = 0


def random_shape(cls: str, rng: np.random.Generator):
    if cls == "box":
        # flat horizontal slab, so the class is not confused with a sphere
        return Primitive("box", size=(0.5, 0.5 * rng.uniform(0.7, 1.0), rng.uniform(0.12, 0.2)))
    if cls == "sphere":
        return Primitive("sphere", size=(0.5,))
    if cls == "cylinder":
        return Primitive("cylinder", size=(rng.uniform(0.1, 0.18), 0.5), axis=2)
    if cls == "union":
        off = rng.uniform(0.25, 0.4)
        return [Primitive("box", center=(-off, 0.0, 0.0), size=(0.3, 0.3, 0.3)),
                Primitive("sphere", center=(off, 0.0, 0.0), size=(0.3,))]
    raise ValueError(f"unknown class {cls!r}")


def random_emitter(cfg: SceneConfig, rng: np.random.Generator, n_blobs: int = 3) -> np.ndarray:
    """Smooth positive image: a floor plus a few Gaussian blobs."""
    xx, zz = np.meshgrid(np.linspace(0, 1, cfg.emitter_res_x), np.linspace(1, 0, cfg.emitter_res_z))
    img = np.full(xx.shape, rng.uniform(0.1, 0.3))
    for _ in range(n_blobs):
        cx, cz = rng.uniform(0, 1, 2)
        w = rng.uniform(0.15, 0.35)
        img += rng.uniform(0.3, 1.0) * np.exp(-((xx - cx) ** 2 + (zz - cz) ** 2) / (2 * w**2))
    return img.ravel()


def scene_grid(cfg: SceneConfig) -> VoxelGrid:
    return make_voxel_grid(build_cfov_frustum(cfg), cfg.voxel_nx, cfg.voxel_ny, cfg.voxel_nz)


def place(cloud: PointCloud, cfg: SceneConfig, spec: DatasetSpec, translation) -> np.ndarray:
    """Normalised points -> scene coordinates."""
    return cloud.points * spec.scale + np.asarray(translation, dtype=float)


def nominal_center(cfg: SceneConfig, spec: DatasetSpec) -> np.ndarray:
    return np.array([0.0, spec.center_depth * cfg.D, 0.0])


def render_cloud(A, cfg: SceneConfig, grid: VoxelGrid, points, f, b=0.0):
    """Exact union render of the voxelised cloud; returns ``(y, occupancy)``."""
    occ = voxelize_points(points, grid)
    blocked = occlusion_mask(cfg, grid.lo[occ], grid.hi[occ]) if occ.any() else np.zeros((cfg.M, cfg.N), bool)
    return render_masked(A, ~blocked, f, b), occ


def generate_instance(index: int, cfg: SceneConfig, seed: int, spec: DatasetSpec | None = None, A=None,
                      grid: VoxelGrid | None = None) -> Instance:
    """Deterministic in ``(seed, index)``."""
    spec = spec or DatasetSpec()
    A = build_transport(cfg).entries if A is None else np.asarray(A)
    grid = grid or scene_grid(cfg)
    rng = np.random.default_rng([seed, index])
    cls = spec.classes[int(rng.integers(len(spec.classes)))]
    shape = random_shape(cls, rng)
    sub = int(rng.integers(2**31))
    dense = sample_surface_points(shape, spec.n_dense, seed=sub).normalized()
    cloud = fps_resample(dense, spec.n_points, seed=sub + 1)
    translation = nominal_center(cfg, spec) + rng.uniform(-spec.jitter, spec.jitter, 3)
    f = random_emitter(cfg, rng)
    y, occ = render_cloud(A, cfg, grid, place(dense, cfg, spec, translation), f)
    return Instance(index, cls, cloud, f, y, translation, occ, seed)


def generate_dataset(n_instances: int, cfg: SceneConfig, seed: int, spec: DatasetSpec | None = None, out_dir=None,
                     start: int = 0):
    """Generate instances ``start .. start + n - 1``; optionally write them with a manifest."""
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    spec = spec or DatasetSpec()
    A = build_transport(cfg).entries
    grid = scene_grid(cfg)
    items = [generate_instance(i, cfg, seed, spec, A, grid) for i in range(start, start + n_instances)]
    if out_dir is not None:
        write_dataset(out_dir, items, cfg, spec)
    return items


def write_dataset(out_dir, items, cfg: SceneConfig, spec: DatasetSpec) -> str:
    for sub in ("clouds", "emitters", "measurements"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    cfg.save(os.path.join(out_dir, "scene.cfg"))
    translations = {}
    rows = []
    for it in items:
        stem = f"{it.index:06d}"
        paths = (f"clouds/{stem}.xyz", f"emitters/{stem}.nlsi", f"measurements/{stem}.nlsi")
        it.cloud.save_xyz(os.path.join(out_dir, paths[0]))
        PenumbraImage.from_vector(it.emitter, cfg.emitter_res_x, cfg.emitter_res_z).save(os.path.join(out_dir, paths[1]))
        PenumbraImage.from_vector(it.measurement, cfg.wall_res_x, cfg.wall_res_z).save(os.path.join(out_dir, paths[2]))
        rows.append((it.index, it.cls, *paths, it.seed))
        translations[str(it.index)] = [float(v) for v in it.translation]
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump({"spec": spec.to_dict(), "translations": translations}, fh, indent=1)
    return manifest


def load_dataset(out_dir):
    """Inverse of :func:`write_dataset`: ``(cfg, spec, items)``. Occupancies are not stored."""
    cfg = SceneConfig.load(os.path.join(out_dir, "scene.cfg"))
    with open(os.path.join(out_dir, "dataset.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    spec = DatasetSpec.from_dict(meta["spec"])
    items = []
    with open(os.path.join(out_dir, "manifest.csv"), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"manifest header {reader.fieldnames} != {list(MANIFEST_FIELDS)}")
        for row in reader:
            idx = int(row["index"])
            cloud = PointCloud.load_xyz(os.path.join(out_dir, row["cloud_path"]), frame="normalized")
            f = PenumbraImage.load(os.path.join(out_dir, row["emitter_path"])).vector()
            y = PenumbraImage.load(os.path.join(out_dir, row["measurement_path"])).vector()
            items.append(Instance(idx, row["class"], cloud, f, y, np.array(meta["translations"][str(idx)]),
                                  None, int(row["seed"])))
    return cfg, spec, items
