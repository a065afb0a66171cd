"""Regular grids, images, transformation maps and multilinear interpolation.

Coordinates are normalized: the longest axis spans [0, 1] and grids built
from voxel counts have isotropic spacing. Maps store absolute target
coordinates (not displacements), channel-first: ``values[a]`` is the a-th
coordinate of the map at every voxel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels

# Interpolation positions closer than this (in voxel units) to a lattice
# point are snapped onto it, so identity maps reproduce data bitwise.
_SNAP = 1e-9


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, ...]
    extent: tuple[float, ...]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        extent = tuple(float(e) for e in self.extent)
        if len(dims) not in (2, 3):
            raise ValueError(f"only 2D and 3D grids are supported, got {len(dims)} axes")
        if len(extent) != len(dims):
            raise ValueError("extent must have one entry per axis")
        if min(dims) < 2:
            raise ValueError(f"every axis needs at least 2 voxels, got {dims}")
        if not all(e > 0 and math.isfinite(e) for e in extent):
            raise ValueError(f"extent must be positive and finite, got {extent}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "extent", extent)

    @classmethod
    def from_dims(cls, dims) -> GridSpec:
        """Grid whose longest axis spans [0, 1] with isotropic spacing."""
        dims = tuple(int(n) for n in dims)
        longest = max(dims) - 1
        return cls(dims, tuple((n - 1) / longest for n in dims))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(e / (n - 1) for e, n in zip(self.extent, self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def min_dim(self) -> int:
        return min(self.dims)

    def axis_coords(self, axis: int) -> np.ndarray:
        return np.arange(self.dims[axis]) * self.spacing[axis]

    def scaled(self, factor) -> GridSpec:
        """Grid over the same extent with voxel counts scaled by ``factor``."""
        factors = _per_axis(factor, self.ndim)
        if any(not (0 < f <= 1) for f in factors):
            raise ValueError(f"scale factor must lie in (0, 1], got {factor}")
        dims = tuple(int(round(n * f)) for n, f in zip(self.dims, factors))
        if min(dims) < 2:
            raise ValueError(f"scaling {self.dims} by {factor} leaves fewer than 2 voxels")
        return GridSpec(dims, self.extent)


def _per_axis(value, ndim):
    if np.ndim(value) == 0:
        return (float(value),) * ndim
    value = tuple(float(v) for v in value)
    if len(value) != ndim:
        raise ValueError(f"expected {ndim} per-axis values, got {len(value)}")
    return value


def _readonly(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarImage:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = _readonly(self.values)
        if values.shape != self.grid.dims:
            raise ValueError(f"image shape {values.shape} does not match grid {self.grid.dims}")
        if not np.all(np.isfinite(values)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = _readonly(self.values)
        expected = (self.grid.ndim, *self.grid.dims)
        if values.shape != expected:
            raise ValueError(f"vector field shape {values.shape}, expected {expected}")
        if not np.all(np.isfinite(values)):
            raise ValueError("vector field contains non-finite values")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class TransformMap(VectorField):
    """Samples of an inverse map: target-space voxel -> source-space coordinate."""


@dataclass(frozen=True, eq=False)
class LabelImage:
    grid: GridSpec
    values: np.ndarray
    labels: tuple[int, ...] = field(default=())

    def __post_init__(self):
        values = np.array(self.values)
        if values.shape != self.grid.dims:
            raise ValueError(f"label shape {values.shape} does not match grid {self.grid.dims}")
        if not np.issubdtype(values.dtype, np.integer):
            if not np.all(values == np.round(values)):
                raise ValueError("label values must be integers")
        values = values.astype(np.int64)
        if values.size and values.min() < 0:
            raise ValueError("labels must be nonnegative")
        labels = tuple(int(v) for v in self.labels) if self.labels else tuple(
            int(v) for v in np.unique(values) if v != 0)
        present = set(np.unique(values).tolist()) - {0}
        if not present <= set(labels):
            raise ValueError(f"labels {sorted(present - set(labels))} not in declared set {labels}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)


def _check_dims(a: GridSpec, b: GridSpec):
    if a.ndim != b.ndim:
        raise ValueError(f"dimension mismatch: {a.ndim}D vs {b.ndim}D")


# ---------------------------------------------------------------------------
# coordinate helpers


def identity_coords(grid: GridSpec) -> np.ndarray:
    axes = [grid.axis_coords(a) for a in range(grid.ndim)]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def identity_map(grid: GridSpec) -> TransformMap:
    return TransformMap(grid, identity_coords(grid))


class Interpolator:
    """Multilinear interpolation of grid data at a fixed set of sample points.

    Applying it to data is a weighted gather and its adjoint a weighted
    scatter. Positions outside the grid are clamped to the boundary.
    """

    def __init__(self, grid: GridSpec, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.shape[0] != grid.ndim:
            raise ValueError(f"points have {points.shape[0]} coordinates, grid is {grid.ndim}D")
        self.grid = grid
        self.out_shape = points.shape[1:]
        self._pts = np.ascontiguousarray(points.reshape(grid.ndim, -1))

    def _run(self, data, want_grad):
        scalar = data.ndim == self.grid.ndim
        flat = np.ascontiguousarray(data.reshape((1, *self.grid.dims)) if scalar else data,
                                    dtype=np.float64)
        if self.grid.ndim == 3:
            out, grad = _kernels.interp3(flat, self._pts, *self.grid.spacing, _SNAP, want_grad)
        else:
            out, grad = _kernels.interp2(flat, self._pts, *self.grid.spacing, _SNAP, want_grad)
        return scalar, out, grad

    def apply(self, data: np.ndarray) -> np.ndarray:
        """Interpolate ``data`` of shape ``(*dims)`` or ``(C, *dims)``."""
        scalar, out, _ = self._run(data, False)
        return out.reshape(self.out_shape) if scalar else out.reshape((-1, *self.out_shape))

    def point_gradient(self, data: np.ndarray) -> np.ndarray:
        """Derivative of the interpolant w.r.t. each sample coordinate.

        Returns shape ``(d, *out)`` for scalar data, ``(C, d, *out)`` otherwise.
        Zero along an axis where the sample was clamped.
        """
        scalar, _, grad = self._run(data, True)
        d = self.grid.ndim
        return grad.reshape((d, *self.out_shape)) if scalar else grad.reshape((-1, d, *self.out_shape))

    def value_and_point_gradient(self, data: np.ndarray):
        scalar, out, grad = self._run(data, True)
        d = self.grid.ndim
        if scalar:
            return out.reshape(self.out_shape), grad.reshape((d, *self.out_shape))
        return out.reshape((-1, *self.out_shape)), grad.reshape((-1, d, *self.out_shape))

    def adjoint(self, grad_out: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`apply` (scatter back onto the grid)."""
        scalar = grad_out.shape == self.out_shape
        g = np.ascontiguousarray(grad_out.reshape((1 if scalar else grad_out.shape[0], -1)),
                                 dtype=np.float64)
        grid = self.grid
        if grid.ndim == 3:
            out = _kernels.scatter3(g, self._pts, *grid.dims, *grid.spacing, _SNAP)
        else:
            out = _kernels.scatter2(g, self._pts, *grid.dims, *grid.spacing, _SNAP)
        return out[0] if scalar else out


def interpolate(data: np.ndarray, grid: GridSpec, points: np.ndarray) -> np.ndarray:
    return Interpolator(grid, points).apply(data)


def warp(image: ScalarImage, tmap: TransformMap) -> ScalarImage:
    """Resample ``image`` at the map's coordinates (I o Phi^-1)."""
    _check_dims(image.grid, tmap.grid)
    return ScalarImage(tmap.grid, interpolate(image.values, image.grid, tmap.values))


def warp_labels(labels: LabelImage, tmap: TransformMap) -> LabelImage:
    """Nearest-neighbour label resampling at the map's coordinates."""
    _check_dims(labels.grid, tmap.grid)
    idx = []
    for a in range(labels.grid.ndim):
        u = tmap.values[a] / labels.grid.spacing[a]
        idx.append(np.clip(np.floor(u + 0.5), 0, labels.grid.dims[a] - 1).astype(np.intp))
    return LabelImage(tmap.grid, labels.values[tuple(idx)], labels.labels)


def compose(outer: TransformMap, inner: TransformMap) -> TransformMap:
    """``outer`` evaluated at ``inner``'s coordinates; lives on ``inner``'s grid."""
    _check_dims(outer.grid, inner.grid)
    return TransformMap(inner.grid, interpolate(outer.values, outer.grid, inner.values))


# ---------------------------------------------------------------------------
# separable linear operators


@lru_cache(maxsize=256)
def _resample_matrix_cached(n_src, h_src, n_dst, h_dst):
    x = np.arange(n_dst) * h_dst
    u = x / h_src
    r = np.rint(u)
    u = np.where(np.abs(u - r) < _SNAP, r, u)
    u = np.clip(u, 0, n_src - 1)
    i0 = np.minimum(np.floor(u), n_src - 2).astype(np.intp)
    t = u - i0
    mat = np.zeros((n_dst, n_src))
    rows = np.arange(n_dst)
    mat[rows, i0] += 1.0 - t
    mat[rows, i0 + 1] += t
    mat.setflags(write=False)
    return mat


def resample_matrix(src: GridSpec, dst: GridSpec, axis: int) -> np.ndarray:
    """1D linear interpolation matrix (dst x src) along one axis."""
    return _resample_matrix_cached(src.dims[axis], src.spacing[axis],
                                   dst.dims[axis], dst.spacing[axis])


def apply_axis(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    """Apply ``mat`` along ``axis`` of ``arr`` (out[..i..] = sum_j mat[i, j] arr[..j..])."""
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ mat.T, -1, axis)


def resample_array(arr: np.ndarray, src: GridSpec, dst: GridSpec) -> np.ndarray:
    """Multilinear resampling of ``(*dims)`` or ``(C, *dims)`` data onto ``dst``."""
    lead = arr.ndim - src.ndim
    out = arr
    for a in range(src.ndim):
        if src.dims[a] == dst.dims[a] and src.spacing[a] == dst.spacing[a]:
            continue
        out = apply_axis(out, resample_matrix(src, dst, a), a + lead)
    return np.array(out, dtype=np.float64)


def resample_array_adjoint(grad: np.ndarray, src: GridSpec, dst: GridSpec) -> np.ndarray:
    lead = grad.ndim - dst.ndim
    out = grad
    for a in range(src.ndim):
        if src.dims[a] == dst.dims[a] and src.spacing[a] == dst.spacing[a]:
            continue
        out = apply_axis(out, resample_matrix(src, dst, a).T, a + lead)
    return np.array(out, dtype=np.float64)


def resample_map(tmap: TransformMap, new_grid: GridSpec) -> TransformMap:
    _check_dims(tmap.grid, new_grid)
    if not np.allclose(tmap.grid.extent, new_grid.extent, rtol=1e-12, atol=1e-12):
        raise ValueError("resampling requires grids with the same normalized extent")
    return TransformMap(new_grid, resample_array(tmap.values, tmap.grid, new_grid))


def _reflect_index(j: np.ndarray, n: int) -> np.ndarray:
    """Half-sample symmetric extension (... b a | a b c ... | c b ...)."""
    j = np.mod(j, 2 * n)
    return np.where(j >= n, 2 * n - 1 - j, j)


@lru_cache(maxsize=256)
def gaussian_matrix(n: int, sigma_vox: float, truncate: float = 4.0) -> np.ndarray:
    """Dense n x n matrix of a truncated, renormalized 1D Gaussian with reflect boundary.

    The matrix is symmetric, and its rows sum to one.
    """
    if sigma_vox <= 0:
        return np.eye(n)
    radius = int(math.ceil(truncate * sigma_vox))
    offsets = np.arange(-radius, radius + 1)
    taps = np.exp(-0.5 * (offsets / sigma_vox) ** 2)
    taps /= taps.sum()
    mat = np.zeros((n, n))
    rows = np.arange(n)
    for k, w in zip(offsets, taps):
        np.add.at(mat, (rows, _reflect_index(rows + k, n)), w)
    mat.setflags(write=False)
    return mat


def gaussian_blur(arr: np.ndarray, sigmas_vox, lead: int = 0) -> np.ndarray:
    out = arr
    for a, s in enumerate(sigmas_vox):
        if s > 0:
            out = apply_axis(out, gaussian_matrix(arr.shape[a + lead], float(s)), a + lead)
    return np.array(out, dtype=np.float64)


def downsample_image(image: ScalarImage, factor) -> ScalarImage:
    """Anti-aliased downsampling: Gaussian pre-blur, then multilinear resampling.

    The blur uses sigma = 0.4 * (1/factor - 1) voxels per axis.
    """
    grid = image.grid
    factors = _per_axis(factor, grid.ndim)
    new_grid = grid.scaled(factors)
    if new_grid == grid:
        return image
    sigmas = [0.4 * (1.0 / f - 1.0) for f in factors]
    blurred = gaussian_blur(image.values, sigmas)
    return ScalarImage(new_grid, resample_array(blurred, grid, new_grid))


# ---------------------------------------------------------------------------
# finite differences


def diff_axis(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """First derivative along ``axis``: central inside, one-sided at both ends."""
    f = np.moveaxis(f, axis, -1)
    out = np.empty_like(f)
    out[..., 1:-1] = (f[..., 2:] - f[..., :-2]) / (2.0 * h)
    out[..., 0] = (f[..., 1] - f[..., 0]) / h
    out[..., -1] = (f[..., -1] - f[..., -2]) / h
    return np.moveaxis(out, -1, axis)


def diff_axis_adjoint(g: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Transpose of :func:`diff_axis`."""
    g = np.moveaxis(g, axis, -1)
    out = np.zeros_like(g)
    out[..., 2:] += g[..., 1:-1] / (2.0 * h)
    out[..., :-2] -= g[..., 1:-1] / (2.0 * h)
    out[..., 1] += g[..., 0] / h
    out[..., 0] -= g[..., 0] / h
    out[..., -1] += g[..., -1] / h
    out[..., -2] -= g[..., -1] / h
    return np.moveaxis(out, -1, axis)


def jacobian_matrix(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """D Phi as an array of shape (d, d, *dims): [c, a] = d Phi_c / d x_a."""
    d = grid.ndim
    return np.stack([np.stack([diff_axis(values[c], a, grid.spacing[a]) for a in range(d)])
                     for c in range(d)])


def jacobian_determinant(tmap: TransformMap) -> ScalarImage:
    if tmap.grid.min_dim < 3:
        raise ValueError(f"jacobian needs at least 3 voxels per axis, got {tmap.grid.dims}")
    jac = jacobian_matrix(tmap.values, tmap.grid)
    det = np.linalg.det(np.moveaxis(jac, (0, 1), (-2, -1)))
    return ScalarImage(tmap.grid, det)
