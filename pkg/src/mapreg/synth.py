"""Synthetic image pairs with known affine + diffeomorphic ground truth.

The template has three nested ellipsoids (two labeled shells between them)
plus a few unlabeled blobs that break its symmetry. The target is the
template warped by ``affine o vSVF``; noise is added independently to both
images after warping.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .affine import AffineParams, affine_to_map
from .grid import (GridSpec, LabelImage, ScalarImage, TransformMap, VectorField,
                   identity_coords, interpolate, resample_array, warp_labels)
from .metrics import count_folds
from .smoothing import MultiGaussianKernel, smooth_array
from .vsvf import advect_map


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple[int, ...] = (64, 64, 64)
    seed: int = 0
    max_rotation_deg: float = 10.0
    scale_range: float = 0.1
    max_translation: float = 0.05
    # largest velocity magnitude, normalized units
    amplitude: float = 0.04
    noise: float = 0.01
    n_time_steps: int = 10
    deform_factor: float = 0.5
    control_points: int = 5
    kernel: MultiGaussianKernel = field(default_factory=MultiGaussianKernel)

    def __post_init__(self):
        if self.amplitude > 0.2:
            raise ValueError("amplitude above 0.2 normalized units is not diffeomorphism-safe")
        if min(self.max_rotation_deg, self.scale_range, self.max_translation,
               self.amplitude, self.noise) < 0:
            raise ValueError("perturbation ranges must be nonnegative")

    @property
    def grid(self) -> GridSpec:
        return GridSpec.from_dims(self.dims)


@dataclass
class SynthPair:
    source: ScalarImage
    target: ScalarImage
    labels_source: LabelImage
    labels_target: LabelImage
    affine: AffineParams
    map: TransformMap
    velocity: VectorField | None = None


def _rotation(angles) -> np.ndarray:
    if len(angles) == 1:
        c, s = np.cos(angles[0]), np.sin(angles[0])
        return np.array([[c, -s], [s, c]])
    rot = np.eye(3)
    for axis, ang in enumerate(angles):
        c, s = np.cos(ang), np.sin(ang)
        i, j = [k for k in range(3) if k != axis]
        r = np.eye(3)
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        rot = r @ rot
    return rot


def random_affine(rng: np.random.Generator, grid: GridSpec, max_rotation_deg: float,
                  scale_range: float, max_translation: float) -> AffineParams:
    """Rotation and per-axis scaling about the grid centre, then a translation."""
    d = grid.ndim
    n_angles = 1 if d == 2 else 3
    angles = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg, n_angles))
    scales = rng.uniform(1 - scale_range, 1 + scale_range, d)
    shift = rng.uniform(-max_translation, max_translation, d)
    A = _rotation(angles) @ np.diag(scales)
    centre = np.array(grid.extent) / 2
    return AffineParams(A, centre - A @ centre + shift)


def _soft_inside(q: np.ndarray, width: float) -> np.ndarray:
    return 0.5 * (1.0 - np.tanh((q - 1.0) / width))


def _ellipsoid_level(coords, centre, radii):
    return np.sqrt(sum(((coords[a] - centre[a]) / radii[a]) ** 2 for a in range(len(radii))))


def make_template(grid: GridSpec, rng: np.random.Generator | None = None):
    """Smooth intensity template and its labels (1: outer shell, 2: inner shell)."""
    coords = identity_coords(grid)
    d = grid.ndim
    ext = np.array(grid.extent)
    centre = ext / 2
    base = np.array([0.36, 0.30, 0.26][:d]) * ext.max()
    if rng is not None:
        base = base * rng.uniform(0.95, 1.05, d)
    shapes = [
        (centre, base),
        (centre + np.array([0.02, -0.015, 0.01][:d]), base * 0.70),
        (centre + np.array([0.035, -0.02, 0.015][:d]), base * 0.40),
    ]
    levels = [_ellipsoid_level(coords, c, r) for c, r in shapes]
    width = 1.0 * min(grid.spacing) / base.min()
    soft = [_soft_inside(q, width) for q in levels]
    intensity = 0.1 + 0.7 * soft[0] - 0.35 * soft[1] + 0.45 * soft[2]
    blobs = [([0.15, 0.2, 0.8], 0.05, 0.5), ([0.85, 0.8, 0.25], 0.06, 0.4),
             ([0.2, 0.85, 0.3], 0.045, 0.6), ([0.5, 0.5, 0.5], 0.04, -0.2)]
    for pos, rad, amp in blobs:
        pos = np.array(pos[:d]) * ext
        r2 = sum((coords[a] - pos[a]) ** 2 for a in range(d))
        intensity = intensity + amp * np.exp(-0.5 * r2 / rad ** 2)
    labels = np.zeros(grid.dims, dtype=np.int64)
    labels[(levels[0] <= 1.0) & (levels[1] > 1.0)] = 1
    labels[(levels[1] <= 1.0) & (levels[2] > 1.0)] = 2
    return intensity, labels


def random_velocity(rng: np.random.Generator, grid: GridSpec, spec: SynthSpec) -> np.ndarray:
    """Smoothed random momentum, scaled so the largest |v| equals the amplitude."""
    d = grid.ndim
    ctrl = GridSpec(tuple([spec.control_points] * d), grid.extent)
    m = resample_array(rng.normal(size=(d, *ctrl.dims)), ctrl, grid)
    v = smooth_array(m, grid, spec.kernel)
    peak = np.sqrt(np.sum(v * v, axis=0)).max()
    return v * (spec.amplitude / peak) if peak > 0 else v


def make_pair(spec: SynthSpec, max_attempts: int = 10) -> SynthPair:
    """Render a template, deform it with a random affine + vSVF map and add noise."""
    grid = spec.grid
    rng = np.random.default_rng(spec.seed)
    template, labels = make_template(grid, rng)
    gamma = random_affine(rng, grid, spec.max_rotation_deg, spec.scale_range, spec.max_translation)
    amp_rng_state = rng.bit_generator.state
    amplitude = spec.amplitude
    for _ in range(max_attempts):
        rng.bit_generator.state = amp_rng_state
        low = grid.scaled(spec.deform_factor)
        velocity = None
        affine_low = affine_to_map(gamma, low)
        if amplitude > 0:
            v = random_velocity(rng, low, replace(spec, amplitude=amplitude))
            velocity = VectorField(low, v)
            phi_low = advect_map(affine_low, velocity, spec.n_time_steps)
            phi = TransformMap(grid, resample_array(phi_low.values, low, grid))
        else:
            phi = affine_to_map(gamma, grid)
        if count_folds(phi)[0] == 0:
            break
        amplitude *= 0.7
    else:
        raise SynthError(f"could not generate a fold-free map in {max_attempts} attempts")
    noise_rng = np.random.default_rng([spec.seed, 1])
    source = template + spec.noise * noise_rng.normal(size=grid.dims)
    target = interpolate(template, grid, phi.values) + spec.noise * noise_rng.normal(size=grid.dims)
    lab0 = LabelImage(grid, labels, (1, 2))
    return SynthPair(ScalarImage(grid, source), ScalarImage(grid, target), lab0,
                     warp_labels(lab0, phi), gamma, phi, velocity)
