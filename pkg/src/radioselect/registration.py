"""Affine intensity-based registration (12 parameters, multi-resolution).

The transform maps target voxel coordinates to source coordinates through
centered, per-axis normalized coordinates, which makes the same parameter
vector meaningful at every pyramid level. Optimization is plain gradient
descent on the mean-squared intensity error with an analytic gradient
(image gradients sampled under the current warp), 3 pyramid levels, a
fixed step budget per level, and step halving whenever a step fails to
improve. If the optimized transform ends up worse than the identity at
full resolution, the identity is returned instead, so registration never
increases the reported error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .volume import Volume, resize_trilinear

STEPS_PER_LEVEL = 200
INITIAL_STEP = 1e-2
PYRAMID = (4, 2, 1)


@dataclass
class AffineTransform:
    """x_source = matrix @ x_target + translation, in full-res voxel units
    relative to the volume center."""

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.linalg.det(self.matrix) == 0:
            raise InputError("affine matrix must be invertible")

    @staticmethod
    def identity() -> "AffineTransform":
        return AffineTransform(np.eye(3), np.zeros(3))


def _half_extent(n: int) -> float:
    return (n - 1) / 2.0 if n > 1 else 1.0


def sample_trilinear(arr: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample ``arr`` at fractional voxel coords (3, N), edge-clamped."""
    out_shape = coords.shape[1:]
    flat = coords.reshape(3, -1)
    lo = np.floor(flat).astype(np.int64)
    frac = flat - lo
    vals = np.zeros(flat.shape[1], dtype=np.float64)
    idx = []
    for axis in range(3):
        n = arr.shape[axis]
        l = np.clip(lo[axis], 0, n - 1)
        h = np.clip(lo[axis] + 1, 0, n - 1)
        f = np.clip(frac[axis], 0.0, 1.0)
        f = np.where(flat[axis] < 0, 0.0, f)
        f = np.where(flat[axis] > n - 1, 0.0, f)
        idx.append((l, h, f))
    for dz in (0, 1):
        wz = idx[0][2] if dz else 1.0 - idx[0][2]
        iz = idx[0][dz]
        for dy in (0, 1):
            wy = idx[1][2] if dy else 1.0 - idx[1][2]
            iy = idx[1][dy]
            for dx in (0, 1):
                wx = idx[2][2] if dx else 1.0 - idx[2][2]
                ix = idx[2][dx]
                vals += wz * wy * wx * arr[iz, iy, ix]
    return vals.reshape(out_shape)


def _normalized_grid(extents) -> np.ndarray:
    """(3, N) centered normalized coordinates of every voxel."""
    axes = [(np.arange(n) - (n - 1) / 2.0) / _half_extent(n) for n in extents]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids])


def _warp_mse(moving: np.ndarray, fixed: np.ndarray, A: np.ndarray, t: np.ndarray, grid):
    """(warped array, mse) at one pyramid level; grid is the normalized grid."""
    h = np.array([_half_extent(n) for n in moving.shape])
    c = np.array([(n - 1) / 2.0 for n in moving.shape])
    src_norm = A @ grid + t[:, None]
    src_vox = src_norm * h[:, None] + c[:, None]
    warped = sample_trilinear(moving, src_vox).reshape(moving.shape)
    return warped, src_vox, float(np.mean((warped - fixed) ** 2))


def _level_gradient(moving, fixed, warped, src_vox, grid, grads):
    """Analytic dMSE/d(A, t) in normalized coordinates."""
    n = warped.size
    residual = 2.0 * (warped - fixed).ravel() / n
    h = np.array([_half_extent(e) for e in moving.shape])
    dA = np.zeros((3, 3))
    dt = np.zeros(3)
    for i in range(3):
        gi = sample_trilinear(grads[i], src_vox) * h[i]
        w = residual * gi
        dt[i] = w.sum()
        dA[i] = (w[None, :] * grid).sum(axis=1)
    return dA, dt


def affine_register(moving: Volume, fixed: Volume):
    """Returns (AffineTransform in voxel units, resampled moving Volume)."""
    if moving.extents != fixed.extents:
        raise InputError(f"extent mismatch: moving {moving.extents} vs fixed {fixed.extents}")
    full_extents = moving.extents

    A = np.eye(3)
    t = np.zeros(3)
    for factor in PYRAMID:
        extents = tuple(max(1, n // factor) for n in full_extents)
        mov = resize_trilinear(moving, extents).intensities.astype(np.float64)
        fix = resize_trilinear(fixed, extents).intensities.astype(np.float64)
        grid = _normalized_grid(extents)
        grads = np.gradient(mov)
        step = INITIAL_STEP
        warped, src_vox, mse = _warp_mse(mov, fix, A, t, grid)
        for _ in range(STEPS_PER_LEVEL):
            dA, dt = _level_gradient(mov, fix, warped, src_vox, grid, grads)
            A_new = A - step * dA
            t_new = t - step * dt
            warped_new, src_new, mse_new = _warp_mse(mov, fix, A_new, t_new, grid)
            if mse_new < mse:
                A, t, warped, src_vox, mse = A_new, t_new, warped_new, src_new, mse_new
            else:
                step *= 0.5
                if step < 1e-8:
                    break

    grid_full = _normalized_grid(full_extents)
    mov_full = moving.intensities.astype(np.float64)
    fix_full = fixed.intensities.astype(np.float64)
    warped, _, mse_opt = _warp_mse(mov_full, fix_full, A, t, grid_full)
    mse_identity = float(np.mean((mov_full - fix_full) ** 2))
    if mse_opt > mse_identity or np.linalg.det(A) == 0:
        A, t = np.eye(3), np.zeros(3)
        warped = mov_full
    h = np.array([_half_extent(n) for n in full_extents])
    voxel_matrix = np.diag(h) @ A @ np.diag(1.0 / h)
    voxel_translation = t * h
    transform = AffineTransform(voxel_matrix, voxel_translation)
    return transform, Volume(warped.astype(np.float32), moving.spacing)
