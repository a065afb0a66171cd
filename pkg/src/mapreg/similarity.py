"""Image similarity: global NCC, windowed LNCC, multi-kernel LNCC and MSE.

LNCC windows are cubic with ``size`` samples per axis, taken every
``dilation`` voxels, so a window covers ``(size - 1) * dilation + 1`` voxels.
Window origins start at 0 and advance by ``stride``; windows that would
cross the far boundary are dropped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import ScalarImage

EPS = 1e-10


@dataclass(frozen=True)
class LnccConfig:
    size: int
    stride: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"window size must be >= 2, got {self.size}")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")

    @property
    def footprint(self) -> int:
        return (self.size - 1) * self.dilation + 1


@dataclass(frozen=True)
class MkLnccConfig:
    terms: tuple[tuple[float, LnccConfig], ...]

    def __post_init__(self):
        terms = tuple((float(w), c) for w, c in self.terms)
        if not terms:
            raise ValueError("mk-LNCC needs at least one term")
        if any(w < 0 for w, _ in terms):
            raise ValueError("mk-LNCC weights must be nonnegative")
        if abs(sum(w for w, _ in terms) - 1.0) > 1e-9:
            raise ValueError(f"mk-LNCC weights must sum to 1, got {sum(w for w, _ in terms)}")
        # canonical order keeps the weighted sum independent of how terms were listed
        terms = tuple(sorted(terms, key=lambda t: (t[1].size, t[1].stride, t[1].dilation, t[0])))
        object.__setattr__(self, "terms", terms)


@dataclass(frozen=True)
class WindowSpec:
    """mk-LNCC windows relative to the smallest image dimension S.

    Terms are ``(weight, size / S)``; the stride is ``stride * S``. The
    dilation is reduced when the largest dilated window would not fit.
    """

    fine: tuple[tuple[float, float], ...] = ((0.3, 0.25), (0.7, 0.5))
    coarse: tuple[tuple[float, float], ...] = ((1.0, 0.5),)
    stride: float = 0.25
    dilation: int = 2

    def __post_init__(self):
        for name in ("fine", "coarse"):
            terms = tuple((float(w), float(f)) for w, f in getattr(self, name))
            if not terms or any(not 0 < f <= 1 for _, f in terms):
                raise ValueError(f"{name} window fractions must lie in (0, 1]")
            object.__setattr__(self, name, terms)
        if not 0 < self.stride <= 1 or self.dilation < 1:
            raise ValueError("need 0 < stride <= 1 and dilation >= 1")

    def config(self, min_dim: int, fine: bool = True) -> MkLnccConfig:
        terms = self.fine if fine else self.coarse
        sizes = [max(int(min_dim * f), 2) for _, f in terms]
        stride = max(int(min_dim * self.stride), 1)
        dil = self.dilation
        # small images cannot host the largest dilated window
        while dil > 1 and (max(sizes) - 1) * dil + 1 > min_dim:
            dil -= 1
        return MkLnccConfig(tuple((w, LnccConfig(n, stride, dil)) for (w, _), n in zip(terms, sizes)))


def paper_mk_lncc(min_dim: int, fine: bool = True, dilation: int = 2) -> MkLnccConfig:
    """Window sizes S/4 and S/2 (fine) or S/2 only (coarse); stride S/4."""
    return WindowSpec(dilation=dilation).config(min_dim, fine)


# ---------------------------------------------------------------------------


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sxy = float(np.sum(xc * yc))
    denom = float(np.sum(xc * xc) * np.sum(yc * yc))
    return sxy / math.sqrt(max(denom, EPS))


def ncc(x: ScalarImage, y: ScalarImage) -> float:
    """Global Pearson correlation; 0 when both images are constant."""
    if x.grid != y.grid:
        raise ValueError("ncc needs images on the same grid")
    return _pearson(x.values.ravel(), y.values.ravel())


def mse(x: ScalarImage, y: ScalarImage) -> float:
    if x.grid != y.grid:
        raise ValueError("mse needs images on the same grid")
    return float(np.mean((x.values - y.values) ** 2))


@lru_cache(maxsize=128)
def window_indices(shape: tuple[int, ...], size: int, stride: int, dilation: int) -> np.ndarray:
    """Flat voxel indices of every window, shape (n_windows, size**d)."""
    foot = (size - 1) * dilation + 1
    axes = []
    for n in shape:
        if foot > n:
            raise ValueError(f"window footprint {foot} does not fit axis of length {n}")
        starts = np.arange(0, n - foot + 1, stride)
        axes.append(starts[:, None] + dilation * np.arange(size)[None, :])
    d = len(shape)
    strides = np.cumprod((1,) + shape[::-1][:-1])[::-1]
    flat = 0
    for a, idx in enumerate(axes):
        view = [1] * (2 * d)
        view[a], view[d + a] = idx.shape
        flat = flat + (idx * strides[a]).reshape(view)
    out = flat.reshape(int(np.prod([i.shape[0] for i in axes])), size ** d)
    out.setflags(write=False)
    return out


def lncc_windows(x: np.ndarray, y: np.ndarray, cfg: LnccConfig, with_grad: bool = False):
    """Mean per-window NCC of two arrays; optionally the gradients w.r.t. x and y."""
    idx = window_indices(x.shape, cfg.size, cfg.stride, cfg.dilation)
    xw = x.ravel()[idx]
    yw = y.ravel()[idx]
    xc = xw - xw.mean(axis=1, keepdims=True)
    yc = yw - yw.mean(axis=1, keepdims=True)
    sxy = np.sum(xc * yc, axis=1)
    sxx = np.sum(xc * xc, axis=1)
    syy = np.sum(yc * yc, axis=1)
    prod = sxx * syy
    live = prod > EPS
    denom = np.sqrt(np.where(live, prod, EPS))
    per_window = sxy / denom
    n_win = idx.shape[0]
    value = float(np.sum(per_window) / n_win)
    if not with_grad:
        return value
    # d ncc_j / d x_i = yc_i / D - [live] ncc_j * xc_i / sxx
    safe_sxx = np.where(live, sxx, 1.0)
    safe_syy = np.where(live, syy, 1.0)
    live_f = live.astype(np.float64)
    gx_w = (yc / denom[:, None] - (live_f * per_window / safe_sxx)[:, None] * xc) / n_win
    gy_w = (xc / denom[:, None] - (live_f * per_window / safe_syy)[:, None] * yc) / n_win
    flat = idx.ravel()
    gx = np.bincount(flat, weights=gx_w.ravel(), minlength=x.size).reshape(x.shape)
    gy = np.bincount(flat, weights=gy_w.ravel(), minlength=y.size).reshape(y.shape)
    return value, gx, gy


def mk_lncc_arrays(x: np.ndarray, y: np.ndarray, cfg: MkLnccConfig, with_grad: bool = False):
    if not with_grad:
        return float(sum(w * lncc_windows(x, y, c) for w, c in cfg.terms))
    value, gx, gy = 0.0, np.zeros_like(x), np.zeros_like(y)
    for w, c in cfg.terms:
        v, dx, dy = lncc_windows(x, y, c, with_grad=True)
        value += w * v
        gx += w * dx
        gy += w * dy
    return value, gx, gy


def lncc(x: ScalarImage, y: ScalarImage, cfg: LnccConfig) -> float:
    if x.grid != y.grid:
        raise ValueError("lncc needs images on the same grid")
    return lncc_windows(x.values, y.values, cfg)


def mk_lncc(x: ScalarImage, y: ScalarImage, cfg: MkLnccConfig) -> float:
    if x.grid != y.grid:
        raise ValueError("mk_lncc needs images on the same grid")
    return mk_lncc_arrays(x.values, y.values, cfg)
