"""Multi-Gaussian smoothing of momentum fields and the momentum/velocity pairing."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import GridSpec, VectorField, apply_axis, gaussian_matrix

PAPER_SIGMAS = (0.05, 0.1, 0.15, 0.2, 0.25)
PAPER_WEIGHTS = (0.067, 0.133, 0.2, 0.267, 0.333)


@dataclass(frozen=True)
class MultiGaussianKernel:
    """Weighted sum of normalized Gaussians; sigmas in normalized units."""

    sigmas: tuple[float, ...] = PAPER_SIGMAS
    weights: tuple[float, ...] = PAPER_WEIGHTS

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        weights = tuple(float(w) for w in self.weights)
        if len(sigmas) != len(weights) or not sigmas:
            raise ValueError("sigmas and weights must be non-empty and of equal length")
        if any(s <= 0 for s in sigmas):
            raise ValueError("all sigmas must be positive")
        if any(w < 0 for w in weights):
            raise ValueError("weights must be nonnegative")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {sum(weights)}")
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "weights", weights)

    def axis_matrices(self, grid: GridSpec):
        """Per Gaussian, the list of 1D smoothing matrices (one per axis)."""
        return [[smoothing_matrix(grid.dims[a], s / grid.spacing[a]) for a in range(grid.ndim)]
                for s in self.sigmas]


@lru_cache(maxsize=256)
def smoothing_matrix(n: int, sigma_vox: float) -> np.ndarray:
    """1D Gaussian of width ``sigma_vox`` as B @ B, B the truncated sigma/sqrt(2) Gaussian.

    A single truncated Gaussian matrix has small negative eigenvalues; the
    squared form is symmetric positive semidefinite with unit row sums, so
    <m, K m> >= 0 holds exactly for the multi-Gaussian sum.
    """
    half = gaussian_matrix(n, sigma_vox / math.sqrt(2.0))
    mat = half @ half
    mat = 0.5 * (mat + mat.T)
    mat.setflags(write=False)
    return mat


def smooth_array(values: np.ndarray, grid: GridSpec, kernel: MultiGaussianKernel) -> np.ndarray:
    """Apply the kernel to every component of a ``(C, *dims)`` array.

    The operator is symmetric, so this is also its own adjoint.
    """
    out = np.zeros_like(values, dtype=np.float64)
    for w, mats in zip(kernel.weights, kernel.axis_matrices(grid)):
        part = values
        for a, mat in enumerate(mats):
            part = apply_axis(part, mat, a + 1)
        out += w * part
    return out


def smooth(m: VectorField, kernel: MultiGaussianKernel) -> VectorField:
    return VectorField(m.grid, smooth_array(m.values, m.grid, kernel))


def reg_inner(m: VectorField, v: VectorField) -> float:
    """<m, v> summed over voxels and components, times the voxel volume."""
    if m.grid != v.grid:
        raise ValueError("momentum and velocity must share a grid")
    return float(np.sum(m.values * v.values) * m.grid.voxel_volume)
