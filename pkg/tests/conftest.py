import numpy as np
import pytest

from softshadow.geometry import SceneConfig, build_cfov_frustum, make_voxel_grid
from softshadow.transport import build_transport, build_visibility


def small_scene(wall=16, emit=8, grid=(2, 2, 2), **kw):
    base = dict(wall_width=1.0, wall_height=1.0, wall_res_x=wall, wall_res_z=wall, emitter_depth=1.0,
                emitter_width=1.0, emitter_height=1.0, emitter_res_x=emit, emitter_res_z=emit,
                voxel_nx=grid[0], voxel_ny=grid[1], voxel_nz=grid[2])
    base.update(kw)
    return SceneConfig(**base)


def assemble(cfg):
    grid = make_voxel_grid(build_cfov_frustum(cfg), cfg.voxel_nx, cfg.voxel_ny, cfg.voxel_nz)
    return grid, build_transport(cfg).entries, build_visibility(cfg, grid)


@pytest.fixture(scope="session")
def tiny():
    cfg = small_scene()
    grid, A, vis = assemble(cfg)
    return cfg, grid, A, vis


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    """Store a one-line verdict for the end-of-run summary and return ``ok``."""
    ACCEPTANCE_LINES.append(f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
