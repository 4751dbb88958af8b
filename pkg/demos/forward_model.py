"""Forward model walkthrough: transport, sparse visibility and the shadow an occluder casts.

Run: python demos/forward_model.py
"""
import numpy as np

from softshadow.geometry import SceneConfig, build_cfov_frustum, make_voxel_grid
from softshadow.transport import (build_transport, build_visibility, complementarity_check, render_exact,
                                  render_linearized)

cfg = SceneConfig(wall_width=1.0, wall_height=1.0, wall_res_x=32, wall_res_z=32, emitter_depth=1.0,
                  emitter_width=1.0, emitter_height=1.0, emitter_res_x=8, emitter_res_z=8,
                  voxel_nx=8, voxel_ny=4, voxel_nz=8)
grid = make_voxel_grid(build_cfov_frustum(cfg), cfg.voxel_nx, cfg.voxel_ny, cfg.voxel_nz)
A = build_transport(cfg).entries
vis = build_visibility(cfg, grid)
print(f"wall {cfg.M} px, emitter {cfg.N} px, {grid.K} voxels")
print(f"sparse visibility: {vis.nbytes / 2**20:.1f} MiB, dense masks would take "
      f"{grid.K * cfg.M * cfg.N / 2**20:.1f} MiB as bytes")

# A smooth emitter: brighter on the left.
xx, _ = np.meshgrid(np.linspace(0, 1, 8), np.linspace(0, 1, 8))
f = (1.2 - xx).ravel()

# Two voxels stacked in depth cast overlapping shadows.
alpha = np.zeros(grid.K, int)
alpha[grid.index(3, 1, 4)] = alpha[grid.index(3, 2, 4)] = 1
free = A @ f
exact = render_exact(A, vis, alpha, f)
lin = render_linearized(A, vis, alpha.astype(float), f)
print(f"unoccluded mean {free.mean():.4f}; occluded mean {exact.mean():.4f}")
print(f"linearised model over-subtracts where shadows overlap: max gap {np.max(exact - lin):.2e}")

# Pinhole + pinspeck = unoccluded, for any single voxel.
pinhole, pinspeck, _ = complementarity_check(A, vis, grid.index(3, 1, 4), f)
print(f"complementarity residual {np.max(np.abs(pinhole + pinspeck - free)):.1e}")

# Coarse text rendering of the shadow (darker = more light removed).
ratio = (exact / free).reshape(cfg.wall_res_z, cfg.wall_res_x)
ramp = " .:-=+*#%@"
for row in ratio[::2]:
    print("".join(ramp[min(int((1 - v) * 40), 9)] for v in row))
