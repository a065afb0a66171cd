"""Synthetic-suite experiments: affine recovery and registration variants per seed."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .affine import AffineOptConfig, affine_to_map, optimize_affine_multiscale
from .grid import identity_map
from .io import PipelineConfig
from .pipeline import evaluate_maps, register
from .synth import SynthPair, SynthSpec, make_pair
from .vsvf import interior_slices


@dataclass
class AffineRecord:
    seed: int
    error_voxels: float
    seconds: float


@dataclass
class RegistrationRecord:
    seed: int
    variant: str
    dice: float
    dice_before: float
    folds: int
    symmetry: float
    seconds: float
    step_similarity: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return asdict(self)


def map_error_voxels(estimate: np.ndarray, truth: np.ndarray, grid) -> float:
    """Mean interior Euclidean distance between two maps, in voxels."""
    sl = interior_slices(grid, lead=1)
    dist = np.sqrt(np.sum((estimate - truth) ** 2, axis=0))[sl[1:]]
    return float(dist.mean() / min(grid.spacing))


def affine_recovery(seed: int, dims=(64, 64, 64), cfg: AffineOptConfig | None = None) -> AffineRecord:
    """Recover a purely affine synthetic warp; error of the recovered map in voxels."""
    pair = make_pair(SynthSpec(dims=dims, seed=seed, amplitude=0.0))
    grid = pair.source.grid
    t0 = time.perf_counter()
    result = optimize_affine_multiscale(pair.source, pair.target, cfg)
    seconds = time.perf_counter() - t0
    err = map_error_voxels(result.map(grid).values, affine_to_map(pair.affine, grid).values, grid)
    return AffineRecord(seed, err, seconds)


# name -> (method, overrides of PipelineConfig)
VARIANTS = {
    "avsm": ("avsm", {}),
    "vsvf_only": ("vsvf", {}),
    "avsm_no_sym": ("avsm", {"lambda_vs": 0.0}),
    "avsm_T3": ("avsm", {"vsvf_steps": 3}),
}


def run_variant(pair: SynthPair, seed: int, variant: str,
                base: PipelineConfig | None = None) -> RegistrationRecord:
    method, overrides = VARIANTS[variant]
    cfg = replace(base or PipelineConfig(), **overrides)
    t0 = time.perf_counter()
    reg = register(pair.source, pair.target, method, cfg)
    seconds = time.perf_counter() - t0
    report = evaluate_maps(reg.map, reg.map_ts, pair.labels_source, pair.labels_target)
    before = evaluate_maps(identity_map(pair.source.grid), None, pair.labels_source,
                           pair.labels_target).dice_mean
    steps = tuple(reg.vsvf.step_similarity) if reg.vsvf is not None else ()
    return RegistrationRecord(seed, variant, report.dice_mean, before, report.folds,
                              report.symmetry, seconds, steps)


def passes_recovery(rec: RegistrationRecord, min_dice: float = 0.90,
                    max_symmetry: float = -8.0) -> bool:
    return rec.dice >= min_dice and rec.folds == 0 and rec.symmetry <= max_symmetry


def synth_pair(seed: int, dims=(64, 64, 64)) -> SynthPair:
    return make_pair(SynthSpec(dims=dims, seed=seed))
