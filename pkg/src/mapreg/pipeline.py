"""Registration drivers: affine, vSVF and affine followed by vSVF (avsm)."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .affine import AffineResult, optimize_affine_multiscale
from .grid import LabelImage, ScalarImage, TransformMap, identity_map, interpolate, warp_labels
from .io import PipelineConfig, atomic_write, normalize_intensity, read_volume, write_volume
from .metrics import MetricsReport, count_folds, dice, symmetry_metric
from .vsvf import VsvfResult, multi_step_vsvf

log = logging.getLogger(__name__)

METHODS = ("affine", "vsvf", "avsm")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Registration:
    """In-memory outcome of one pipeline run."""

    map: TransformMap
    map_ts: TransformMap
    warped: ScalarImage
    affine: AffineResult | None = None
    vsvf: VsvfResult | None = None
    seconds_affine: float | None = None
    seconds_vsvf: float | None = None

    def traces(self) -> dict:
        out = {}
        if self.affine is not None:
            out["affine"] = self.affine.traces
        if self.vsvf is not None:
            out["vsvf"] = self.vsvf.traces
            out["vsvf_step_losses"] = self.vsvf.step_losses
            out["vsvf_step_similarity"] = self.vsvf.step_similarity
        return out


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


def register(source: ScalarImage, target: ScalarImage, method: str = "avsm",
             cfg: PipelineConfig | None = None) -> Registration:
    """Run ``method`` on images already on a common grid.

    ``map`` pulls the source into target space; ``map_ts`` the reverse. For
    avsm the vSVF advection starts from the affine maps, so ``map`` is the
    composed transformation and the source is interpolated once.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    cfg = cfg or PipelineConfig()
    if source.grid != target.grid:
        raise PipelineError("input", ValueError("source and target must share a grid"))
    grid = source.grid
    init, init_ts = identity_map(grid), identity_map(grid)
    aff = vs = None
    t_aff = t_vs = None
    if method in ("affine", "avsm"):
        t0 = time.perf_counter()
        aff = _stage("affine", optimize_affine_multiscale, source, target, cfg.affine())
        t_aff = time.perf_counter() - t0
        init, init_ts = aff.map(grid), aff.map_ts(grid)
    if method in ("vsvf", "avsm"):
        t0 = time.perf_counter()
        vs = _stage("vsvf", multi_step_vsvf, source, target, init, init_ts, cfg.vsvf())
        t_vs = time.perf_counter() - t0
        final, final_ts = vs.map, vs.map_ts
    else:
        final, final_ts = init, init_ts
    warped = ScalarImage(grid, interpolate(source.values, grid, final.values))
    return Registration(final, final_ts, warped, aff, vs, t_aff, t_vs)


def evaluate_maps(tmap: TransformMap, tmap_ts: TransformMap | None = None,
                  labels_source: LabelImage | None = None,
                  labels_target: LabelImage | None = None) -> MetricsReport:
    report = MetricsReport()
    report.folds, report.folds_mean_abs_det = count_folds(tmap)
    if tmap_ts is not None:
        report.symmetry = symmetry_metric(tmap, tmap_ts)
    if labels_source is not None and labels_target is not None:
        warped = warp_labels(labels_source, tmap)
        per, mean = dice(warped, labels_target)
        report.dice_per_label = {str(k): v for k, v in per.items()}
        report.dice_mean = mean
    return report


# ---------------------------------------------------------------------------
# file-based jobs


@dataclass
class RegistrationJob:
    source: Path
    target: Path
    out_dir: Path
    method: str = "avsm"
    labels_source: Path | None = None
    labels_target: Path | None = None
    config: PipelineConfig = field(default_factory=PipelineConfig)
    # wall-clock seconds make metrics differ between runs; off keeps them byte-stable
    record_timing: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if (self.labels_source is None) != (self.labels_target is None):
            raise ValueError("give both label images or neither")


def _read_typed(path, kind, stage):
    try:
        value = read_volume(path)
    except Exception as exc:
        raise PipelineError(stage, exc) from exc
    if not isinstance(value, kind):
        raise PipelineError(stage, TypeError(f"{path} does not hold a {kind.__name__}"))
    return value


def run_job(job: RegistrationJob) -> MetricsReport:
    """Read inputs, register, write artifacts into ``job.out_dir``.

    Artifacts: warped_source.vol, map.vol, map_ts.vol, warped_labels.vol
    (with labels), metrics.json and traces.json.
    """
    source = _read_typed(job.source, ScalarImage, "read source")
    target = _read_typed(job.target, ScalarImage, "read target")
    lab0 = lab1 = None
    if job.labels_source is not None:
        lab0 = _read_typed(job.labels_source, LabelImage, "read source labels")
        lab1 = _read_typed(job.labels_target, LabelImage, "read target labels")
    src, tgt = source, target
    if job.config.normalize:
        src = _stage("normalize", normalize_intensity, source)
        tgt = _stage("normalize", normalize_intensity, target)
    reg = register(src, tgt, job.method, job.config)
    report = _stage("evaluate", evaluate_maps, reg.map, reg.map_ts, lab0, lab1)
    if job.record_timing:
        report.seconds_affine, report.seconds_vsvf = reg.seconds_affine, reg.seconds_vsvf

    out = Path(job.out_dir)
    warped = ScalarImage(source.grid, interpolate(source.values, source.grid, reg.map.values))
    write_volume(warped, out / "warped_source.vol")
    write_volume(reg.map, out / "map.vol")
    write_volume(reg.map_ts, out / "map_ts.vol")
    if lab0 is not None:
        write_volume(warp_labels(lab0, reg.map), out / "warped_labels.vol")
    atomic_write(out / "traces.json", (json.dumps(reg.traces(), indent=1) + "\n").encode())
    atomic_write(out / "metrics.json", report.to_json().encode())
    log.info("%s job written to %s: dice %s, folds %d", job.method, out, report.dice_mean, report.folds)
    return report

