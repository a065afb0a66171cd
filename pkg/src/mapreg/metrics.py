"""Evaluation metrics: Dice overlap, fold counts and the log-symmetry measure."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import LabelImage, TransformMap, identity_coords, interpolate, jacobian_determinant
from .vsvf import interior_slices

LOG_FLOOR = 1e-12


def dice(a: LabelImage, b: LabelImage, labels=None) -> tuple[dict[int, float], float]:
    """Per-label Dice and their mean over the declared label set.

    A label absent from both images scores 1.
    """
    if a.grid != b.grid:
        raise ValueError("dice needs label images on the same grid")
    labels = tuple(labels) if labels is not None else tuple(sorted(set(a.labels) | set(b.labels)))
    if not labels:
        raise ValueError("no labels to evaluate")
    declared = set(a.labels) | set(b.labels)
    for lab in labels:
        if lab not in declared:
            raise ValueError(f"label {lab} is not in the declared label set {sorted(declared)}")
    per = {}
    for lab in labels:
        ma, mb = a.values == lab, b.values == lab
        denom = int(ma.sum()) + int(mb.sum())
        per[lab] = 1.0 if denom == 0 else 2.0 * int(np.sum(ma & mb)) / denom
    return per, float(np.mean([per[lab] for lab in labels]))


def count_folds(tmap: TransformMap) -> tuple[int, float]:
    """Number of voxels with negative Jacobian determinant and their mean |det|."""
    det = jacobian_determinant(tmap).values
    folded = det < 0
    n = int(folded.sum())
    return n, float(np.abs(det[folded]).mean()) if n else 0.0


def symmetry_metric(phi: TransformMap, phi_ts: TransformMap) -> float:
    """ln of the mean squared deviation of phi o phi_ts from identity, in the interior."""
    if phi.grid != phi_ts.grid:
        raise ValueError("symmetry metric needs maps on the same grid")
    grid = phi.grid
    comp = interpolate(phi.values, grid, phi_ts.values)
    resid = (comp - identity_coords(grid))[interior_slices(grid, lead=1)]
    n_vox = resid[0].size
    if n_vox == 0:
        raise ValueError("empty interior")
    value = float(np.sum(resid * resid)) / n_vox
    return math.log(max(value, LOG_FLOOR))


@dataclass
class MetricsReport:
    dice_mean: float | None = None
    dice_per_label: dict[str, float] = field(default_factory=dict)
    folds: int = 0
    folds_mean_abs_det: float = 0.0
    symmetry: float | None = None
    seconds_affine: float | None = None
    seconds_vsvf: float | None = None

    KEYS = ("dice_mean", "dice_per_label", "folds", "folds_mean_abs_det", "symmetry",
            "seconds_affine", "seconds_vsvf")

    def to_json(self) -> str:
        data = asdict(self)
        return json.dumps({k: data[k] for k in self.KEYS}, indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        data = json.loads(text)
        missing = set(cls.KEYS) - set(data)
        if missing:
            raise ValueError(f"metrics JSON lacks keys {sorted(missing)}")
        return cls(**{k: data[k] for k in cls.KEYS})
