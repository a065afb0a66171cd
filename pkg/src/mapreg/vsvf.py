"""Vector-momentum stationary velocity field (vSVF) registration.

A momentum field is smoothed into a stationary velocity, which transports the
inverse map through the advection equation over unit time. Momentum and map
live on a low-resolution grid; maps are upsampled before the source image is
warped, so similarity is always measured at image resolution.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Program, const, ops, rk4_advect
from .grid import (GridSpec, ScalarImage, TransformMap, VectorField, downsample_image,
                   identity_coords, interpolate, resample_array)
from .lbfgs import LbfgsOptions, minimize_lbfgs
from .similarity import MkLnccConfig, WindowSpec, mk_lncc_arrays
from .smoothing import MultiGaussianKernel, smooth_array

log = logging.getLogger(__name__)


def interior_margin(dim: int) -> int:
    """10 voxels at 192 voxels per axis, scaled to the grid, at least 1."""
    return max(1, int(round(10 * dim / 192)))


def interior_slices(grid: GridSpec, lead: int = 0) -> tuple[slice, ...]:
    margins = [interior_margin(n) for n in grid.dims]
    if any(2 * m >= n for m, n in zip(margins, grid.dims)):
        raise ValueError(f"grid {grid.dims} has no interior")
    return (slice(None),) * lead + tuple(slice(m, n - m) for m, n in zip(margins, grid.dims))


@dataclass
class VsvfConfig:
    n_time_steps: int = 10
    kernel: MultiGaussianKernel = field(default_factory=MultiGaussianKernel)
    lambda_vr: float = 10.0
    lambda_vs: float = 1e-4
    symmetry_norm: str = "sum"
    # None selects the per-scale windows from the smallest image dimension
    similarity: MkLnccConfig | None = None
    windows: WindowSpec = field(default_factory=WindowSpec)
    coarse_single_kernel: bool = True
    lowres_factor: float = 0.5
    n_steps: int = 1
    scales: tuple[float, ...] = (0.25, 0.5, 1.0)
    iters_per_scale: tuple[int, ...] = (60, 60, 60)
    lbfgs: LbfgsOptions = field(default_factory=LbfgsOptions)

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.iters_per_scale = tuple(int(n) for n in self.iters_per_scale)
        if self.n_time_steps < 1 or self.n_steps < 1:
            raise ValueError("n_time_steps and n_steps must be >= 1")
        if not (0 < self.lowres_factor <= 1):
            raise ValueError("lowres_factor must lie in (0, 1]")
        if self.symmetry_norm not in SYMMETRY_NORMS:
            raise ValueError(f"symmetry_norm must be one of {SYMMETRY_NORMS}")
        if self.lambda_vr <= 0 or self.lambda_vs < 0:
            raise ValueError("need lambda_vr > 0 and lambda_vs >= 0")
        if len(self.scales) != len(self.iters_per_scale) or not self.scales:
            raise ValueError("scales and iters_per_scale must be non-empty and of equal length")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])) or self.scales[-1] != 1.0:
            raise ValueError("scales must be strictly increasing and end at 1.0")

    def similarity_for(self, grid: GridSpec, scale: float) -> MkLnccConfig:
        if self.similarity is not None:
            return self.similarity
        fine = scale >= 1.0 or not self.coarse_single_kernel
        return self.windows.config(grid.min_dim, fine=fine)


@dataclass
class VsvfResult:
    momentum: list[VectorField]
    momentum_ts: list[VectorField]
    map: TransformMap
    map_ts: TransformMap
    warped: ScalarImage
    warped_ts: ScalarImage
    traces: list[list[float]] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    step_similarity: list[float] = field(default_factory=list)
    step_maps: list[TransformMap] = field(default_factory=list)


# ---------------------------------------------------------------------------
# forward pieces


def advect_map(phi0: TransformMap, v: VectorField, n_steps: int) -> TransformMap:
    """Transport ``phi0`` with the stationary velocity ``v`` for unit time (RK4)."""
    if phi0.grid != v.grid:
        raise ValueError("map and velocity must share a grid")
    if not np.any(v.values):
        return phi0
    out = rk4_advect(phi0.values, v.values, phi0.grid, n_steps)
    return TransformMap(phi0.grid, out.value)


def vsvf_unit(m0: VectorField, phi_init: TransformMap, cfg: VsvfConfig):
    """Momentum -> velocity (smoothing) -> map (advection). Returns ``(v0, phi)``."""
    if m0.grid != phi_init.grid:
        raise ValueError("momentum and initial map must share a grid")
    v0 = VectorField(m0.grid, smooth_array(m0.values, m0.grid, cfg.kernel))
    return v0, advect_map(phi_init, v0, cfg.n_time_steps)


SYMMETRY_NORMS = ("sum", "volume")


def _sym_node(phi: Node, phi_ts: Node, grid: GridSpec, coords: np.ndarray, lam: float,
              norm: str = "sum") -> Node:
    """lam * mean of the two interior composition residuals |phi o phi_ts - id|^2.

    ``norm="sum"`` sums the squared residual over voxels; ``"volume"`` also
    multiplies by the voxel volume, which makes the term resolution independent
    but about 1e5 times smaller at 64^3.
    """
    sl = interior_slices(grid, lead=1)
    fwd = ops.sqnorm(ops.crop(ops.sub(ops.interp(phi, grid, phi_ts), coords), sl))
    bwd = ops.sqnorm(ops.crop(ops.sub(ops.interp(phi_ts, grid, phi), coords), sl))
    weight = grid.voxel_volume if norm == "volume" else 1.0
    return ops.scale(ops.add(fwd, bwd), 0.5 * lam * weight)


def _directional(src, tgt, grid, phi: Node, m: Node, v: Node, low: GridSpec,
                 similarity: MkLnccConfig, lambda_vr: float):
    sim = ops.mk_lncc(ops.interp(src, grid, phi), tgt, similarity)
    reg = ops.scale(ops.inner(m, v), lambda_vr * low.voxel_volume)
    return ops.add(ops.sub(1.0, sim), reg), sim


def vsvf_loss(I0: ScalarImage, I1: ScalarImage, phi: TransformMap, phi_ts: TransformMap,
              m0: VectorField, m0_ts: VectorField, v0: VectorField, v0_ts: VectorField,
              cfg: VsvfConfig, similarity: MkLnccConfig | None = None) -> float:
    """Symmetric one-step vSVF loss for full-resolution maps."""
    grid = I0.grid
    if not (I1.grid == grid == phi.grid == phi_ts.grid):
        raise ValueError("images and maps must share the full-resolution grid")
    similarity = similarity or cfg.similarity_for(grid, 1.0)
    fwd, _ = _directional(I0.values, I1.values, grid, const(phi.values), const(m0.values),
                          const(v0.values), m0.grid, similarity, cfg.lambda_vr)
    bwd, _ = _directional(I1.values, I0.values, grid, const(phi_ts.values), const(m0_ts.values),
                          const(v0_ts.values), m0_ts.grid, similarity, cfg.lambda_vr)
    total = ops.add(fwd, bwd)
    if cfg.lambda_vs > 0:
        total = ops.add(total, _sym_node(const(phi.values), const(phi_ts.values), grid,
                                         identity_coords(grid), cfg.lambda_vs, cfg.symmetry_norm))
    return float(total.value)


class ScaleProblem:
    """The vSVF objective at one image scale, as a function of both momenta."""

    def __init__(self, src: ScalarImage, tgt: ScalarImage, init_low: np.ndarray,
                 init_ts_low: np.ndarray, low: GridSpec, cfg: VsvfConfig,
                 similarity: MkLnccConfig):
        self.src, self.tgt = src.values, tgt.values
        self.grid = src.grid
        self.low = low
        self.cfg = cfg
        self.similarity = similarity
        self.init_low, self.init_ts_low = init_low, init_ts_low
        self.coords = identity_coords(self.grid)
        self.shape = (self.grid.ndim, *low.dims)
        self.program = Program(self.build)

    def maps(self, m, m_ts):
        cfg = self.cfg
        v = ops.smooth(m, self.low, cfg.kernel)
        v_ts = ops.smooth(m_ts, self.low, cfg.kernel)
        phi_low = rk4_advect(self.init_low, v, self.low, cfg.n_time_steps)
        phi_ts_low = rk4_advect(self.init_ts_low, v_ts, self.low, cfg.n_time_steps)
        phi = ops.resample(phi_low, self.low, self.grid)
        phi_ts = ops.resample(phi_ts_low, self.low, self.grid)
        return v, v_ts, phi_low, phi_ts_low, phi, phi_ts

    def build(self, m, m_ts, parts=None):
        cfg = self.cfg
        v, v_ts, _, _, phi, phi_ts = self.maps(m, m_ts)
        fwd, sim = _directional(self.src, self.tgt, self.grid, phi, m, v, self.low,
                                self.similarity, cfg.lambda_vr)
        bwd, sim_ts = _directional(self.tgt, self.src, self.grid, phi_ts, m_ts, v_ts, self.low,
                                   self.similarity, cfg.lambda_vr)
        total = ops.add(fwd, bwd)
        if cfg.lambda_vs > 0:
            total = ops.add(total, _sym_node(phi, phi_ts, self.grid, self.coords, cfg.lambda_vs,
                                                   cfg.symmetry_norm))
        if parts is not None:
            parts["similarity"] = float(sim.value)
            parts["similarity_ts"] = float(sim_ts.value)
        return total

    def split(self, x: np.ndarray):
        n = int(np.prod(self.shape))
        return x[:n].reshape(self.shape), x[n:].reshape(self.shape)

    def objective(self, x: np.ndarray):
        m, m_ts = self.split(x)
        value, (g, g_ts) = self.program.value_and_grad(m, m_ts)
        return value, np.concatenate([g.ravel(), g_ts.ravel()])

    def evaluate(self, m, m_ts):
        parts = {}
        value = float(self.build(const(m), const(m_ts), parts).value)
        return value, parts

    def low_maps(self, m, m_ts):
        _, _, phi_low, phi_ts_low, _, _ = self.maps(const(m), const(m_ts))
        return phi_low.value, phi_ts_low.value


# ---------------------------------------------------------------------------
# optimizers


def optimize_vsvf_multiscale(I0: ScalarImage, I1: ScalarImage, init_map: TransformMap,
                             init_map_ts: TransformMap | None = None,
                             cfg: VsvfConfig | None = None) -> VsvfResult:
    """L-BFGS over both momenta, coarse to fine, starting from zero momentum.

    ``init_map`` (target -> source, e.g. the affine map) and ``init_map_ts``
    (source -> target; identity when omitted) initialize the advection. The
    momentum is resampled multilinearly between scales.
    """
    cfg = cfg or VsvfConfig()
    full = I0.grid
    if I1.grid != full or init_map.grid.ndim != full.ndim:
        raise ValueError("images must share a grid and match the map dimensionality")
    if init_map_ts is None:
        init_map_ts = TransformMap(full, identity_coords(full))
    d = full.ndim
    m = m_ts = None
    prev_low = None
    traces = []
    for scale, n_iter in zip(cfg.scales, cfg.iters_per_scale):
        src = downsample_image(I0, scale)
        tgt = downsample_image(I1, scale)
        low = src.grid.scaled(cfg.lowres_factor)
        init_low = resample_array(init_map.values, init_map.grid, low)
        init_ts_low = resample_array(init_map_ts.values, init_map_ts.grid, low)
        if m is None:
            m = np.zeros((d, *low.dims))
            m_ts = np.zeros((d, *low.dims))
        else:
            m = resample_array(m, prev_low, low)
            m_ts = resample_array(m_ts, prev_low, low)
        problem = ScaleProblem(src, tgt, init_low, init_ts_low, low, cfg,
                               cfg.similarity_for(src.grid, scale))
        x0 = np.concatenate([m.ravel(), m_ts.ravel()])
        res = minimize_lbfgs(problem.objective, x0, n_iter, cfg.lbfgs)
        m, m_ts = problem.split(res.x)
        traces.append(res.trace)
        prev_low = low
        log.info("vsvf scale %.3g: loss %.6f -> %.6f (%d iters, %d evals, %s)", scale,
                 res.trace[0], res.trace[-1], len(res.trace) - 1, res.n_evals, res.message)

    loss, parts = problem.evaluate(m, m_ts)
    phi_low, phi_ts_low = problem.low_maps(m, m_ts)
    phi = TransformMap(full, resample_array(phi_low, low, full))
    phi_ts = TransformMap(full, resample_array(phi_ts_low, low, full))
    warped = ScalarImage(full, interpolate(I0.values, full, phi.values))
    warped_ts = ScalarImage(full, interpolate(I1.values, full, phi_ts.values))
    return VsvfResult([VectorField(low, m)], [VectorField(low, m_ts)], phi, phi_ts,
                      warped, warped_ts, traces, [loss], [parts["similarity"]], [phi])


def multi_step_vsvf(I0: ScalarImage, I1: ScalarImage, init_map: TransformMap,
                    init_map_ts: TransformMap | None = None,
                    cfg: VsvfConfig | None = None) -> VsvfResult:
    """Chain ``cfg.n_steps`` vSVF solves; each starts from the previous final maps.

    Every step optimizes a fresh momentum from zero. The reported loss is
    the sum of the per-step losses.
    """
    cfg = cfg or VsvfConfig()
    result = None
    phi, phi_ts = init_map, init_map_ts
    for tau in range(cfg.n_steps):
        step = optimize_vsvf_multiscale(I0, I1, phi, phi_ts, cfg)
        if result is None:
            result = step
        else:
            result.momentum += step.momentum
            result.momentum_ts += step.momentum_ts
            result.traces += step.traces
            result.step_losses += step.step_losses
            result.step_similarity += step.step_similarity
            result.step_maps += step.step_maps
            result.map, result.map_ts = step.map, step.map_ts
            result.warped, result.warped_ts = step.warped, step.warped_ts
        phi, phi_ts = step.map, step.map_ts
        log.info("vsvf step %d/%d: loss %.6f, similarity %.6f", tau + 1, cfg.n_steps,
                 step.step_losses[0], step.step_similarity[0])
    return result


def total_step_loss(result: VsvfResult) -> float:
    return float(sum(result.step_losses))


def similarity_of(I0: ScalarImage, I1: ScalarImage, tmap: TransformMap,
                  similarity: MkLnccConfig) -> float:
    warped = interpolate(I0.values, I0.grid, tmap.values)
    return mk_lncc_arrays(warped, I1.values, similarity)
