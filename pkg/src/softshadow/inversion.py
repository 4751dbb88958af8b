"""Separable nonlinear least-squares inversion of the penumbra model.

The linear unknown (emitter radiosity ``f``) is eliminated in closed form by a
Tikhonov solve; the nonlinear unknown (voxel occupancy, relaxed through a
sigmoid) is refined by gradient steps together with a background estimate and
the regularisation weight.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .geometry import PointCloud, SceneConfig, VoxelGrid, build_cfov_frustum, make_voxel_grid, voxelize_points
from .transport import VisibilitySet, _entries, occlusion_mask

log = logging.getLogger(__name__)

__all__ = [
    "SingularSystemError",
    "DivergenceError",
    "InversionState",
    "SolverOptions",
    "AltMinResult",
    "tikhonov_solve",
    "occlusion_weights",
    "effective_transport",
    "gradients",
    "alternating_minimize",
    "vp_objective",
    "projection_matrix",
    "projector_score",
    "localize",
    "tv_value",
    "tv_reconstruct",
    "write_loss_trace",
    "write_occupancy",
    "read_occupancy",
]

LAMBDA_FLOOR = 1e-8


class SingularSystemError(np.linalg.LinAlgError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


def tikhonov_solve(A_v, y, lam, return_factor=False):
    """Minimiser of ``||A_v f - y||^2 + lam ||f||^2`` via Cholesky of the normal equations.

    ``y`` may be ``(M,)`` or ``(M, C)``.
    """
    A_v = _entries(A_v)
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    G = A_v.T @ A_v
    G[np.diag_indices_from(G)] += lam
    try:
        factor = linalg.cho_factor(G, check_finite=False)
    except linalg.LinAlgError:
        raise SingularSystemError("normal equations are singular; use lambda > 0") from None
    if lam == 0:
        d = np.abs(np.diag(factor[0]))
        if d.min() <= np.sqrt(np.finfo(float).eps) * d.max():
            raise SingularSystemError("normal equations are numerically singular at lambda = 0")
    f = linalg.cho_solve(factor, A_v.T @ y, check_finite=False)
    return (f, factor) if return_factor else f


def occlusion_weights(visibility: VisibilitySet, z, occlusion="union"):
    """Relaxed ray transmittance mask (``M x N``) for pre-sigmoid proxies ``z``.

    ``"mean"``: ``1 - (1/K) sum_k sigma(z_k) V_k``;
    ``"sum"``: ``1 - sum_k sigma(z_k) V_k``;
    ``"union"``: ``prod_k (1 - sigma(z_k) V_k)``, computed as
    ``exp(-sum_k V_k softplus(z_k))``. For binary proxies it equals the
    union renderer's transmittance.
    """
    z = np.asarray(z, dtype=float)
    if occlusion == "union":
        return np.exp(-visibility.weighted_sum(_softplus(z)))
    s = _sigmoid(z)
    if occlusion == "mean":
        return 1.0 - visibility.weighted_sum(s) / visibility.K
    if occlusion == "sum":
        return 1.0 - visibility.weighted_sum(s)
    raise ValueError(f"unknown occlusion model {occlusion!r}")


def effective_transport(A, visibility, z, occlusion="union"):
    return _entries(A) * occlusion_weights(visibility, z, occlusion)


@dataclass
class InversionState:
    z: np.ndarray
    b: np.ndarray
    lam: float
    f: np.ndarray
    iteration: int = 0


@dataclass
class SolverOptions:
    """Settings for :func:`alternating_minimize`.

    ``lambda0`` and all quantities inside the loop are in normalised units
    (``A`` scaled to unit spectral norm, ``y`` to unit RMS) when ``normalize``
    is set, so the defaults do not depend on the scene's radiometric scale.
    """

    num_iter: int = 2000
    eta_z: float = 0.1
    eta_b: float = 0.5
    eta_lambda: float = 1e-3
    threshold: float = 0.5
    background: str = "estimate"
    background_model: str = "constant"
    occlusion: str = "union"
    lambda0: float = 0.1
    refit_lambda: float | None = None
    z_init: tuple = (-3.0, -1.0)
    seed: int = 0
    normalize: bool = True

    def __post_init__(self):
        if self.num_iter < 1:
            raise ValueError("num_iter must be >= 1")
        if min(self.eta_z, self.eta_b, self.eta_lambda) <= 0:
            raise ValueError("step sizes must be positive")
        if self.background not in ("estimate", "neglect"):
            raise ValueError(f"background must be 'estimate' or 'neglect', got {self.background!r}")
        if self.background_model not in ("constant", "field"):
            raise ValueError(f"unknown background model {self.background_model!r}")
        if self.occlusion not in ("mean", "sum", "union"):
            raise ValueError(f"unknown occlusion model {self.occlusion!r}")
        if self.lambda0 <= 0:
            raise ValueError("lambda0 must be positive")


def _emitter_step(A_v, y, lam):
    f_star, factor = tikhonov_solve(A_v, y, lam, return_factor=True)
    return np.maximum(f_star, 0.0), f_star, factor


def _fit_with_offset(A_v, y, lam):
    """Ridge fit of ``y ~ A_v f + c`` with the penalty on ``f`` only; ``f`` clamped."""
    M = len(y)
    Aa = np.column_stack([A_v, np.ones(M)])
    G = Aa.T @ Aa
    G[np.diag_indices(A_v.shape[1])] += lam
    sol = linalg.solve(G, Aa.T @ y, assume_a="pos")
    return np.maximum(sol[:-1], 0.0), float(sol[-1])


def gradients(A, visibility, y, state: InversionState, occlusion="union", factor=None, mask=None):
    """Analytic ``(dL/dz, dL/db, dL/dlambda)`` of ``L = ||y - b - A_v f||^2 / M``.

    ``dL/dz`` and ``dL/db`` hold ``f`` fixed at ``state.f``. ``dL/dlambda``
    differentiates through the clamped closed-form emitter solve
    ``f = max(f*(lambda), 0)``, where ``f*`` is the Tikhonov solution for
    ``y``; the background enters only through the residual.
    """
    A = _entries(A)
    M = A.shape[0]
    if mask is None:
        mask = occlusion_weights(visibility, state.z, occlusion)
    A_v = A * mask
    f = np.asarray(state.f, dtype=float)
    r = y - state.b - A_v @ f
    # dL/dmask[m, n] = -2/M r_m A_mn f_n
    G = (-2.0 / M) * (r[:, None] * A * f[None, :])
    if occlusion == "union":
        s = _sigmoid(state.z)
        gz = -s * visibility.masked_sums(G * mask)
    else:
        s = _sigmoid(state.z)
        scale = 1.0 / visibility.K if occlusion == "mean" else 1.0
        gz = -scale * s * (1.0 - s) * visibility.masked_sums(G)
    gb = (-2.0 / M) * r

    if factor is None:
        _, factor = tikhonov_solve(A_v, y, state.lam, return_factor=True)
    f_star = linalg.cho_solve(factor, A_v.T @ y, check_finite=False)
    df = -linalg.cho_solve(factor, f_star, check_finite=False)
    df[f_star <= 0] = 0.0
    glam = float((-2.0 / M) * r @ (A_v @ df))
    return gz, gb, glam


@dataclass
class AltMinResult:
    f: np.ndarray
    alpha: np.ndarray
    b: np.ndarray
    lam: float
    trace: list
    z: np.ndarray = field(repr=False, default=None)
    final_loss: float = float("nan")


def alternating_minimize(A, visibility: VisibilitySet, y, opts: SolverOptions | None = None, callback=None):
    """Alternating minimisation over ``(f, z, b, lambda)``.

    Each iteration forms the relaxed effective transport, solves for the
    emitter in closed form, clamps it nonnegative, evaluates the mean squared
    residual, then takes one gradient step on ``b`` (estimate mode), ``z`` and
    ``lambda``. Returns the clamped emitter, the binarised occupancy
    ``sigmoid(z) > threshold``, the background, ``lambda`` and the loss trace
    ``[(iter, loss, lambda, ||b||), ...]`` in the caller's units.
    """
    opts = opts or SolverOptions()
    A = _entries(A)
    y = np.asarray(y, dtype=float)
    M, N = A.shape
    if y.shape != (M,):
        raise ValueError(f"measurement has shape {y.shape}, expected ({M},)")
    if visibility.M != M or visibility.N != N:
        raise ValueError("visibility does not match the transport matrix")

    sy = sa = 1.0
    if opts.normalize:
        sy = float(np.sqrt(np.mean(y**2))) or 1.0
        sa = float(np.linalg.norm(A, 2)) or 1.0
    An, yn = A / sa, y / sy

    rng = np.random.default_rng(opts.seed)
    z = rng.uniform(opts.z_init[0], opts.z_init[1], size=visibility.K)
    b = np.zeros(M)
    lam = float(opts.lambda0)
    estimate = opts.background == "estimate"
    trace = []
    f = np.zeros(N)

    for it in range(1, opts.num_iter + 1):
        mask = occlusion_weights(visibility, z, opts.occlusion)
        A_v = An * mask
        f, _, factor = _emitter_step(A_v, yn, lam)
        r = yn - b - A_v @ f
        loss = float(r @ r) / M
        trace.append((it, loss * sy**2, lam * sa**2, float(np.linalg.norm(b)) * sy))
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {it}", trace)
        state = InversionState(z, b, lam, f, it)
        gz, gb, glam = gradients(An, visibility, yn, state, opts.occlusion, factor, mask)
        if estimate:
            if opts.background_model == "constant":
                b = b - opts.eta_b * gb.sum()
            else:
                b = b - opts.eta_b * gb
            b = np.maximum(b, 0.0)
        z = z - (opts.eta_z * M) * gz
        lam = max(lam - opts.eta_lambda * glam, LAMBDA_FLOOR)
        if callback is not None:
            callback(it, loss, z, f)

    # Re-score the binarised occupancy with exact union occlusion.
    alpha = (_sigmoid(z) > opts.threshold).astype(int)
    A_t = An * ~visibility.union_mask(alpha)
    lam_fit = lam if opts.refit_lambda is None else opts.refit_lambda
    if estimate and opts.background_model == "constant":
        # joint closed-form fit of (f, b) with the ridge on f only
        f, b0 = _fit_with_offset(A_t, yn, lam_fit)
        b = np.full(M, max(b0, 0.0))
    else:
        f = np.maximum(tikhonov_solve(A_t, yn - b, lam_fit), 0.0)
    r = yn - b - A_t @ f
    return AltMinResult(
        f=f * sy / sa,
        alpha=alpha,
        b=b * sy,
        lam=lam * sa**2,
        trace=trace,
        z=z,
        final_loss=float(r @ r) / M * sy**2,
    )


def vp_objective(A, visibility: VisibilitySet, alpha, y, lam) -> float:
    """Variable-projection residual ``||[A(a) (A(a)^T A(a) + lam I)^-1 A(a)^T - I] y||^2``
    for a binary occupancy ``alpha`` (union occlusion)."""
    A = _entries(A)
    A_t = A * ~visibility.union_mask(alpha)
    f = tikhonov_solve(A_t, y, lam)
    r = A_t @ f - y
    return float(np.sum(r**2))


def projection_matrix(A_v, rtol=None) -> np.ndarray:
    """Orthogonal projector onto ``range(A_v)``; raises on rank deficiency."""
    A_v = _entries(A_v)
    U, s, _ = np.linalg.svd(A_v, full_matrices=False)
    tol = (rtol if rtol is not None else max(A_v.shape) * np.finfo(float).eps) * (s[0] if s.size else 0.0)
    if s.size == 0 or s[-1] <= tol:
        raise SingularSystemError(f"A_v is rank deficient (smallest singular value {s[-1] if s.size else 0:.3e})")
    return U @ U.T


def projector_score(A_t, y, ridge=1e-8) -> float:
    """``||H y||^2`` with the ridge projector ``A (A^T A + ridge I)^-1 A^T``."""
    f = tikhonov_solve(A_t, y, ridge)
    return float(np.sum((A_t @ f) ** 2))


def localize(A, cfg: SceneConfig, shape: PointCloud, candidates, y, scale=1.0, grid: VoxelGrid | None = None,
             visibility: VisibilitySet | None = None, ridge=1e-8, return_scores=False):
    """Grid search for the translation that best explains ``y``.

    The normalised ``shape`` is scaled by ``scale`` (meters per unit), shifted
    by each candidate, voxelised onto the scene grid, and scored by
    ``||H(theta) y||^2``. The first candidate wins ties.
    """
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    if candidates.size == 0:
        raise ValueError("no candidate translations")
    A = _entries(A)
    if grid is None:
        grid = make_voxel_grid(build_cfov_frustum(cfg), cfg.voxel_nx, cfg.voxel_ny, cfg.voxel_nz)
    y = np.asarray(y, dtype=float)
    scores = np.zeros(len(candidates))
    for i, delta in enumerate(candidates):
        occ = voxelize_points(shape.points * scale + delta, grid)
        if visibility is not None:
            blocked = visibility.union_mask(occ)
        else:
            blocked = occlusion_mask(cfg, grid.lo[occ], grid.hi[occ])
        scores[i] = projector_score(A * ~blocked, y, ridge)
    best = int(np.argmax(scores))  # argmax returns the first maximum
    return (candidates[best], scores) if return_scores else candidates[best]


def _tv_parts(img, eps):
    dx = np.zeros_like(img)
    dz = np.zeros_like(img)
    dx[:, :-1] = img[:, 1:] - img[:, :-1]
    dz[:-1, :] = img[1:, :] - img[:-1, :]
    mag = np.sqrt(dx**2 + dz**2 + eps)
    return dx, dz, mag


def tv_value(img, eps=1e-6) -> float:
    """Smoothed isotropic total variation with forward differences."""
    return float(np.sum(_tv_parts(np.asarray(img, dtype=float), eps)[2]))


def _tv_grad(img, eps):
    dx, dz, mag = _tv_parts(img, eps)
    px, pz = dx / mag, dz / mag
    g = -(px + pz)
    g[:, 1:] += px[:, :-1]
    g[1:, :] += pz[:-1, :]
    return g


def tv_reconstruct(A_v, y, lam_tv, emitter_shape, eps=1e-6, tol=1e-7, max_iter=5000, f0=None):
    """Per-channel ``argmin_{f >= 0} ||y - A_v f||^2 + lam_tv * TV(f)^2``.

    Projected gradient descent with Armijo backtracking (initial trial step
    from the Barzilai-Borwein rule). ``y`` is ``(M,)`` or ``(M, C)``; the result
    matches. ``emitter_shape`` is ``(rows, cols)`` of the emitter grid.
    """
    if lam_tv < 0:
        raise ValueError("lam_tv must be nonnegative")
    A_v = _entries(A_v)
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = y[:, None] if single else y
    AtA = A_v.T @ A_v
    F0 = None if f0 is None else np.asarray(f0, dtype=float).reshape(A_v.shape[1], -1)
    out = []
    for c in range(Y.shape[1]):
        Aty = A_v.T @ Y[:, c]
        yy = float(Y[:, c] @ Y[:, c])

        def objective(f):
            data = float(f @ AtA @ f - 2 * f @ Aty + yy)
            tv = tv_value(f.reshape(emitter_shape), eps)
            return data + lam_tv * tv**2

        def grad(f):
            g = 2 * (AtA @ f - Aty)
            if lam_tv > 0:
                img = f.reshape(emitter_shape)
                g = g + 2 * lam_tv * tv_value(img, eps) * _tv_grad(img, eps).ravel()
            return g

        if F0 is not None:
            f = np.maximum(F0[:, c], 0.0)
        else:
            f = np.maximum(tikhonov_solve(A_v, Y[:, c], 1e-10 * np.trace(AtA) / AtA.shape[0]), 0.0)
        loss = objective(f)
        g = grad(f)
        step = 1.0 / max(np.linalg.norm(AtA, 2), 1e-300)
        prev_f = prev_g = None
        for it in range(max_iter):
            if prev_f is not None:
                s, dg = f - prev_f, g - prev_g
                sy = float(s @ dg)
                if sy > 0:
                    step = float(s @ s) / sy
            while True:
                cand = np.maximum(f - step * g, 0.0)
                new = objective(cand)
                if new <= loss - 1e-4 / step * float((cand - f) @ (cand - f)) or step < 1e-300:
                    break
                step *= 0.5
            if not np.isfinite(new):
                raise DivergenceError(f"TV solver diverged at iteration {it}")
            prev_f, prev_g = f, g
            f = cand
            g = grad(f)
            change = abs(loss - new) / max(abs(loss), 1e-300)
            loss = new
            if change <= tol:
                break
        out.append(f)
    F = np.column_stack(out)
    return F[:, 0] if single else F


def write_loss_trace(path, trace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iter,loss,lambda,b_norm\n")
        for it, loss, lam, bn in trace:
            fh.write(f"{it},{loss!r},{lam!r},{bn!r}\n")


def write_occupancy(path, alpha, grid_counts, values=None) -> None:
    """One ``ix iy iz value`` line per active voxel."""
    nx, ny, nz = grid_counts
    alpha = np.asarray(alpha)
    values = alpha if values is None else np.asarray(values)
    with open(path, "w", encoding="utf-8") as fh:
        for k in np.flatnonzero(alpha):
            ix, iz, iy = k % nx, (k // nx) % nz, k // (nx * nz)
            fh.write(f"{ix} {iy} {iz} {values[k]:g}\n")


def read_occupancy(path, grid_counts) -> np.ndarray:
    nx, ny, nz = grid_counts
    alpha = np.zeros(nx * ny * nz, dtype=int)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"line {lineno}: expected 'ix iy iz value'")
            ix, iy, iz = (int(p) for p in parts[:3])
            if not (0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz):
                raise ValueError(f"line {lineno}: voxel ({ix}, {iy}, {iz}) outside grid {grid_counts}")
            alpha[(iy * nz + iz) * nx + ix] = 1 if float(parts[3]) > 0 else 0
    return alpha
