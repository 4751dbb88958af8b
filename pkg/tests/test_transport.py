import struct

import numpy as np
import pytest

from softshadow.geometry import emitter_pixel_centers, segment_intersects_voxel, wall_pixel_centers
from softshadow.transport import (PenumbraImage, VisibilitySet, add_noise, build_transport, build_visibility,
                                  build_visibility_dense, complementarity_check, constant_background, lambert_kernel,
                                  occlusion_mask, render_exact, render_linearized)

from conftest import assemble, small_scene

N_P = np.array([0.0, 1.0, 0.0])
N_X = np.array([0.0, -1.0, 0.0])


def test_lambert_facing_pair():
    assert lambert_kernel([0, 0, 0], N_P, [0, 1, 0], N_X) == pytest.approx(1.0)


def test_lambert_sixty_degrees():
    # x lies on a ray at 60 degrees from both normals
    x = np.array([np.sin(np.pi / 3), np.cos(np.pi / 3), 0.0])
    assert lambert_kernel([0, 0, 0], N_P, x, N_X) == pytest.approx(0.25)


def test_lambert_back_facing_clamped():
    assert lambert_kernel([0, 0, 0], N_P, [0, 1, 0], -N_X) == 0.0


def test_lambert_coincident_rejected():
    with pytest.raises(ValueError):
        lambert_kernel([0, 1, 0], N_P, [0, 1, 0], N_X)


def test_single_pixel_transport_is_one():
    cfg = small_scene(wall=1, emit=1)
    A = build_transport(cfg).entries
    assert A.shape == (1, 1) and A[0, 0] == pytest.approx(1.0)


def test_inverse_square():
    a1 = build_transport(small_scene(wall=1, emit=1)).entries[0, 0]
    a2 = build_transport(small_scene(wall=1, emit=1, emitter_depth=2.0)).entries[0, 0]
    assert a2 / a1 == pytest.approx(0.25)


def test_transport_matches_kernel_definition():
    cfg = small_scene(wall=3, emit=2, wall_width=1.4, emitter_depth=0.8)
    A = build_transport(cfg)
    P, X = wall_pixel_centers(cfg), emitter_pixel_centers(cfg)
    for m in range(cfg.M):
        for n in range(cfg.N):
            r2 = np.sum((X[n] - P[m]) ** 2)
            ref = lambert_kernel(P[m], N_P, X[n], N_X) / r2 * cfg.emitter_pixel_area
            assert A.entries[m, n] == pytest.approx(ref, rel=1e-14)
    assert np.all(A.entries >= 0)
    assert A.scene_digest == cfg.digest()


def test_transport_shape_for_large_scene():
    cfg = small_scene(wall=128, emit=32)
    assert build_transport(cfg).entries.shape == (16384, 1024)


# ---------------------------------------------------------------- visibility

def _brute_force(cfg, grid):
    P, X = wall_pixel_centers(cfg), emitter_pixel_centers(cfg)
    out = np.zeros((grid.K, cfg.M, cfg.N), dtype=bool)
    for k in range(grid.K):
        for m in range(cfg.M):
            for n in range(cfg.N):
                out[k, m, n] = segment_intersects_voxel(X[n], P[m], grid.centers[k], grid.half_extents[k])
    return out


@pytest.mark.parametrize("kw", [
    dict(wall=8, emit=4, grid=(2, 2, 2)),
    dict(wall=6, emit=3, grid=(3, 2, 2), wall_width=1.6, emitter_width=0.7, emitter_height=1.2, emitter_depth=0.9),
])
def test_sparse_visibility_equals_brute_force(kw):
    cfg = small_scene(**kw)
    grid, _, vis = assemble(cfg)
    ref = _brute_force(cfg, grid)
    for k in range(grid.K):
        sv = vis[k]
        np.testing.assert_array_equal(sv.dense().astype(bool), ref[k])
        flat = sv.pairs[:, 0] * cfg.N + sv.pairs[:, 1]
        assert np.all(np.diff(flat) > 0), "pairs must be sorted by (m, n) without duplicates"


def test_voxel_on_segment_blocks_that_pair(tiny):
    cfg, grid, _, vis = tiny
    P, X = wall_pixel_centers(cfg), emitter_pixel_centers(cfg)
    for k in range(grid.K):
        # the segment from an emitter pixel through the voxel centre to the wall
        n0 = 0
        d = grid.centers[k] - X[n0]
        t = -X[n0, 1] / d[1]
        hit = X[n0] + t * d
        m0 = int(np.argmin(np.sum((P - hit) ** 2, axis=1)))
        if segment_intersects_voxel(X[n0], P[m0], grid.centers[k], grid.half_extents[k]):
            assert vis[k].dense()[m0, n0] == 1


def test_visibility_build_deterministic(tiny):
    cfg, grid, _, vis = tiny
    again = build_visibility(cfg, grid)
    assert np.array_equal(vis.indptr, again.indptr) and np.array_equal(vis.flat, again.flat)


# ---------------------------------------------------------------- rendering

def _dense_linearized(A, dense_vis, alpha, f, b=0.0):
    A_eff = A.copy()
    for k in range(len(alpha)):
        A_eff -= alpha[k] * A * dense_vis[k]
    return A_eff @ f + b


def test_no_occluder_renders_unoccluded(tiny, rng):
    cfg, _, A, vis = tiny
    f = rng.uniform(0, 1, cfg.N)
    b = rng.uniform(0, 0.1, cfg.M)
    alpha = np.zeros(vis.K)
    np.testing.assert_allclose(render_exact(A, vis, alpha, f, b), A @ f + b, rtol=1e-15)
    np.testing.assert_allclose(render_linearized(A, vis, alpha, f, b), A @ f + b, rtol=1e-15)


def test_single_voxel_render_subtracts_pinhole(tiny, rng):
    cfg, _, A, vis = tiny
    f = rng.uniform(0, 1, cfg.N)
    alpha = np.zeros(vis.K, int)
    alpha[3] = 1
    pinhole = (A * vis[3].dense()) @ f
    np.testing.assert_allclose(render_exact(A, vis, alpha, f), A @ f - pinhole, rtol=1e-12, atol=1e-15)


def test_overlap_gap_equals_double_counting(tiny, rng):
    cfg, _, A, vis = tiny
    f = rng.uniform(0.1, 1, cfg.N)
    alpha = np.zeros(vis.K, int)
    alpha[[0, 4]] = 1  # same column, different depths: shadows overlap
    count = vis[0].dense() + vis[4].dense()
    assert np.any(count == 2)
    # per-ray enumeration of the double-subtracted light
    gap = np.zeros(cfg.M)
    for m in range(cfg.M):
        for n in range(cfg.N):
            if count[m, n] > 1:
                gap[m] += (count[m, n] - 1) * A[m, n] * f[n]
    exact = render_exact(A, vis, alpha, f)
    lin = render_linearized(A, vis, alpha.astype(float), f)
    assert np.all(lin <= exact + 1e-15)
    np.testing.assert_allclose(exact - lin, gap, rtol=1e-10, atol=1e-15)


def test_disjoint_shadows_linearized_equals_exact(rng):
    cfg = small_scene(wall=16, emit=1, grid=(4, 1, 4), emitter_width=0.01, emitter_height=0.01)
    _, A, vis = assemble(cfg)
    M = vis.matrix()
    f = np.array([0.7])
    for _ in range(20):
        alpha = (rng.random(vis.K) < 0.3).astype(int)
        overlap = np.asarray(M.T @ alpha).max() if alpha.any() else 0
        if overlap > 1:
            continue
        np.testing.assert_allclose(render_linearized(A, vis, alpha.astype(float), f),
                                   render_exact(A, vis, alpha, f), rtol=0, atol=1e-12)


def test_sparse_linearized_matches_dense_reference(rng):
    cfg = small_scene(wall=16, emit=8, grid=(2, 2, 2))
    grid, A, vis = assemble(cfg)
    dense = build_visibility_dense(cfg, grid, np.float64)
    for _ in range(50):
        alpha = rng.uniform(0, 1, vis.K)
        f = rng.uniform(0, 1, cfg.N)
        ref = _dense_linearized(A, dense, alpha, f)
        got = render_linearized(A, vis, alpha, f)
        assert np.max(np.abs(got - ref)) <= 1e-9 * np.max(np.abs(ref))


def test_render_rejects_bad_inputs(tiny):
    cfg, _, A, vis = tiny
    f = np.ones(cfg.N)
    with pytest.raises(ValueError):
        render_exact(A, vis, np.full(vis.K, 0.5), f)
    with pytest.raises(ValueError):
        render_exact(A, vis, np.zeros(vis.K), -f)
    with pytest.raises(ValueError):
        render_linearized(A, vis, np.zeros(vis.K), f, b=-1.0)
    with pytest.raises(ValueError):
        render_linearized(A, vis, np.full(vis.K, 1.5), f)


def test_render_exact_monotone_in_alpha(tiny, rng):
    cfg, _, A, vis = tiny
    f = rng.uniform(0, 1, cfg.N)
    for _ in range(20):
        a = (rng.random(vis.K) < 0.4).astype(int)
        more = a.copy()
        more[rng.integers(vis.K)] = 1
        assert np.all(render_exact(A, vis, more, f) <= render_exact(A, vis, a, f) + 1e-15)


def test_render_monotone_in_emitter(tiny, rng):
    cfg, _, A, vis = tiny
    alpha = (rng.random(vis.K) < 0.5).astype(int)
    f = rng.uniform(0, 1, cfg.N)
    g = f.copy()
    g[rng.integers(cfg.N)] += 0.5
    assert np.all(render_exact(A, vis, alpha, g) >= render_exact(A, vis, alpha, f))


def test_occlusion_mask_equals_union(tiny):
    cfg, grid, _, vis = tiny
    active = np.array([1, 0, 0, 1, 1, 0, 0, 0], bool)
    np.testing.assert_array_equal(occlusion_mask(cfg, grid.lo[active], grid.hi[active]), vis.union_mask(active))


def test_colour_render(tiny, rng):
    cfg, _, A, vis = tiny
    F = rng.uniform(0, 1, (cfg.N, 3))
    alpha = np.zeros(vis.K, int)
    alpha[2] = 1
    out = render_exact(A, vis, alpha, F)
    for c in range(3):
        np.testing.assert_allclose(out[:, c], render_exact(A, vis, alpha, F[:, c]), rtol=1e-14)


# ---------------------------------------------------------------- complementarity

def test_complementarity_identity(tiny, rng):
    cfg, _, A, vis = tiny
    for k in range(vis.K):
        f = rng.uniform(0, 1, cfg.N)
        pinhole, pinspeck, free = complementarity_check(A, vis, k, f)
        np.testing.assert_allclose(pinhole + pinspeck, free, rtol=1e-9, atol=0)


def test_complementarity_zero_emitter(tiny):
    cfg, _, A, vis = tiny
    for img in complementarity_check(A, vis, 0, np.zeros(cfg.N)):
        assert not img.any()


def test_complementarity_voxel_blocking_nothing(tiny, rng):
    cfg, _, A, _ = tiny
    empty = VisibilitySet(cfg.M, cfg.N, np.array([0, 0]), np.array([], dtype=np.int64))
    f = rng.uniform(0, 1, cfg.N)
    pinhole, pinspeck, free = complementarity_check(A, empty, 0, f)
    assert not pinhole.any()
    np.testing.assert_array_equal(pinspeck, free)


# ---------------------------------------------------------------- noise and background

def test_infinite_snr_is_identity(rng):
    y = rng.uniform(0, 1, 100)
    np.testing.assert_array_equal(add_noise(y, np.inf), y)
    np.testing.assert_array_equal(add_noise(y, None), y)


def test_empirical_snr():
    y = np.full(1_000_000, 3.0)
    out = add_noise(y, 10.0, seed=5)
    snr = 10 * np.log10(np.mean(y**2) / np.mean((out - y) ** 2))
    assert abs(snr - 10.0) <= 0.1


def test_noise_seed_determinism(rng):
    y = rng.uniform(0, 1, 1000)
    assert add_noise(y, 5.0, seed=3).tobytes() == add_noise(y, 5.0, seed=3).tobytes()
    assert np.all(add_noise(y, -10.0, seed=3) >= 0)


@pytest.mark.parametrize("bad", [np.nan, -np.inf])
def test_nonfinite_snr_rejected(bad):
    with pytest.raises(ValueError):
        add_noise(np.ones(4), bad)


def test_constant_background_level(rng):
    s = rng.uniform(0, 1, 500)
    b = constant_background(s, 15.0)
    assert np.ptp(b) == 0
    assert 10 * np.log10(np.mean(s**2) / np.mean(b**2)) == pytest.approx(15.0)


# ---------------------------------------------------------------- image format

def test_nlsi_layout_bit_exact():
    vals = np.arange(2 * 3 * 3, dtype=float).reshape(2, 3, 3) / 7.0  # height 2, width 3, 3 channels
    data = PenumbraImage(vals).to_bytes()
    expected = b"NLSI" + b"\x01" + struct.pack("<III", 3, 2, 3) + vals.astype("<f4").tobytes()
    assert data == expected
    assert len(data) == 17 + 4 * 18


def test_nlsi_round_trip(tmp_path, rng):
    img = PenumbraImage(rng.uniform(0, 2, (5, 4, 1)).astype(np.float32).astype(float))
    img.save(tmp_path / "y.nlsi")
    back = PenumbraImage.load(tmp_path / "y.nlsi")
    np.testing.assert_array_equal(back.values, img.values)
    assert (back.width, back.height, back.channels) == (4, 5, 1)


@pytest.mark.parametrize("mutate", [lambda b: b"XLSI" + b[4:], lambda b: b[:4] + b"\x02" + b[5:], lambda b: b[:-1]])
def test_nlsi_rejects_corruption(mutate):
    data = PenumbraImage(np.ones((2, 2, 1))).to_bytes()
    with pytest.raises(ValueError):
        PenumbraImage.from_bytes(mutate(data))


def test_image_values_validated():
    with pytest.raises(ValueError):
        PenumbraImage(-np.ones((2, 2, 1)))
    with pytest.raises(ValueError):
        PenumbraImage(np.ones((2, 2, 2)))
