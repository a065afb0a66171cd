"""Affine registration: parameters, composition, losses and the multi-scale optimizer."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, NonFiniteError, Program, const, ops
from .lbfgs import LbfgsOptions, minimize_lbfgs
from .grid import GridSpec, ScalarImage, TransformMap, downsample_image, identity_coords
from .similarity import MkLnccConfig, WindowSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AffineParams:
    """x -> A x + b in normalized coordinates."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64).reshape(-1)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != b.size:
            raise ValueError(f"incompatible affine shapes A{A.shape}, b{b.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("affine parameters must be finite")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def identity(cls, ndim: int) -> AffineParams:
        return cls(np.eye(ndim), np.zeros(ndim))

    @property
    def ndim(self) -> int:
        return self.b.size

    def inverse(self) -> AffineParams:
        Ainv = np.linalg.inv(self.A)
        return AffineParams(Ainv, -Ainv @ self.b)

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        d = self.ndim
        return (self.A @ coords.reshape(d, -1) + self.b[:, None]).reshape(coords.shape)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.b])

    @classmethod
    def from_vector(cls, vec: np.ndarray, ndim: int) -> AffineParams:
        return cls(vec[: ndim * ndim].reshape(ndim, ndim), vec[ndim * ndim:])


def affine_to_map(gamma: AffineParams, grid: GridSpec) -> TransformMap:
    return TransformMap(grid, gamma(identity_coords(grid)))


def affine_compose_step(prev: AffineParams, update: AffineParams) -> AffineParams:
    """Apply ``update`` after ``prev``: A = A~ A_prev, b = A~ b_prev + b~."""
    return AffineParams(update.A @ prev.A, update.A @ prev.b + update.b)


def affine_reg_loss(gamma: AffineParams, lambda_ar: float) -> float:
    eye = np.eye(gamma.ndim)
    return float(lambda_ar * (np.sum((gamma.A - eye) ** 2) + np.sum(gamma.b ** 2)))


def affine_sym_loss(gamma: AffineParams, gamma_ts: AffineParams, lambda_as: float) -> float:
    eye = np.eye(gamma.ndim)
    return float(lambda_as * (np.sum((gamma_ts.A @ gamma.A - eye) ** 2)
                              + np.sum((gamma_ts.A @ gamma.b + gamma_ts.b) ** 2)))


def lambda_ar_schedule(n: float, c_ar: float = 10.0, k_ar: float = 4.0) -> float:
    """Epoch-dependent affine regularization weight C K / (K + exp(n / K))."""
    if n < 0 or c_ar <= 0 or k_ar <= 0:
        raise ValueError("need n >= 0 and positive C_ar, K_ar")
    # divided through by exp(n / K) so large epochs underflow to 0 instead of overflowing
    decay = math.exp(-n / k_ar)
    return c_ar * k_ar * decay / (k_ar * decay + 1.0)


# ---------------------------------------------------------------------------
# differentiable loss


def _reg_node(A: Node, b: Node, lam: float) -> Node:
    eye = np.eye(A.value.shape[0])
    return ops.scale(ops.add(ops.sqnorm(ops.sub(A, eye)), ops.sqnorm(b)), lam)


def _sym_node(A: Node, b: Node, A_ts: Node, b_ts: Node, lam: float) -> Node:
    eye = np.eye(A.value.shape[0])
    lin = ops.sqnorm(ops.sub(ops.matmul(A_ts, A), eye))
    trans = ops.sqnorm(ops.add(ops.matmul(A_ts, b), b_ts))
    return ops.scale(ops.add(lin, trans), lam)


def _directional_node(src: np.ndarray, tgt: np.ndarray, grid: GridSpec, coords: np.ndarray,
                      A: Node, b: Node, similarity: MkLnccConfig, lambda_ar: float) -> Node:
    warped = ops.interp(src, grid, ops.affine_map(A, b, coords))
    sim = ops.sub(1.0, ops.mk_lncc(warped, tgt, similarity))
    return ops.add(sim, _reg_node(A, b, lambda_ar))


def affine_loss_program(I0: ScalarImage, I1: ScalarImage, similarity: MkLnccConfig,
                        lambda_ar: float, lambda_as: float) -> Program:
    """Program over (A, b, A_ts, b_ts) evaluating the symmetric affine loss."""
    if I0.grid != I1.grid:
        raise ValueError("source and target must share a grid")
    grid = I0.grid
    coords = identity_coords(grid)
    src, tgt = I0.values, I1.values

    def build(A, b, A_ts, b_ts):
        forward = _directional_node(src, tgt, grid, coords, A, b, similarity, lambda_ar)
        reverse = _directional_node(tgt, src, grid, coords, A_ts, b_ts, similarity, lambda_ar)
        return ops.add(ops.add(forward, reverse), _sym_node(A, b, A_ts, b_ts, lambda_as))

    return Program(build)


def affine_total_loss(I0: ScalarImage, I1: ScalarImage, gamma: AffineParams,
                      gamma_ts: AffineParams, similarity: MkLnccConfig,
                      lambda_ar: float = 0.0, lambda_as: float = 10.0) -> float:
    """l_a(I0, I1, G) + l_a(I1, I0, G_ts) + sym(G, G_ts), with l_a = (1 - mk-LNCC) + reg."""
    prog = affine_loss_program(I0, I1, similarity, lambda_ar, lambda_as)
    return prog.value(gamma.A, gamma.b, gamma_ts.A, gamma_ts.b)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AffineOptConfig:
    scales: tuple[float, ...] = (0.25, 0.5, 1.0)
    # None picks (200, 200, 50) for "gd" and (50, 50, 50) for "lbfgs"
    iters_per_scale: tuple[int, ...] | None = None
    optimizer: str = "lbfgs"
    learning_rate: float = 1e-4
    lambda_as: float = 10.0
    c_ar: float = 10.0
    k_ar: float = 4.0
    # None selects the per-scale windows from the smallest image dimension
    similarity: MkLnccConfig | None = None
    windows: WindowSpec = field(default_factory=WindowSpec)
    coarse_single_kernel: bool = True
    lbfgs: LbfgsOptions = field(default_factory=LbfgsOptions)

    def __post_init__(self):
        if self.optimizer not in ("lbfgs", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.iters_per_scale is None:
            self.iters_per_scale = (200, 200, 50) if self.optimizer == "gd" else (50, 50, 50)
        self.scales = tuple(float(s) for s in self.scales)
        self.iters_per_scale = tuple(int(n) for n in self.iters_per_scale)
        if len(self.scales) != len(self.iters_per_scale) or not self.scales:
            raise ValueError("scales and iters_per_scale must be non-empty and of equal length")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])) or self.scales[-1] != 1.0:
            raise ValueError("scales must be strictly increasing and end at 1.0")
        if self.scales[0] <= 0 or any(n < 0 for n in self.iters_per_scale):
            raise ValueError("scales must be positive and iteration counts nonnegative")
        if self.lambda_as < 0 or self.learning_rate <= 0:
            raise ValueError("need lambda_as >= 0 and a positive learning rate")

    def similarity_for(self, grid: GridSpec, scale: float) -> MkLnccConfig:
        if self.similarity is not None:
            return self.similarity
        fine = scale >= 1.0 or not self.coarse_single_kernel
        return self.windows.config(grid.min_dim, fine=fine)


@dataclass
class AffineResult:
    gamma: AffineParams
    gamma_ts: AffineParams
    traces: list[list[float]] = field(default_factory=list)
    scale_end_losses: list[float] = field(default_factory=list)

    def map(self, grid: GridSpec) -> TransformMap:
        return affine_to_map(self.gamma, grid)

    def map_ts(self, grid: GridSpec) -> TransformMap:
        return affine_to_map(self.gamma_ts, grid)


def _to_centred(params, centre):
    """Pack (A, b, A_ts, b_ts) as [A, b + A c, A_ts, b_ts + A_ts c].

    In these coordinates x -> A (x - c) + b', so rotating about the image
    centre does not move the translation; the loss itself is unchanged.
    """
    A, b, At, bt = params
    return np.concatenate([A.ravel(), b + A @ centre, At.ravel(), bt + At @ centre])


def _from_centred(x, centre):
    d = centre.size
    n = d * d + d
    out = []
    for off in (0, n):
        A = x[off:off + d * d].reshape(d, d)
        out += [A, x[off + d * d:off + n] - A @ centre]
    return out


def _centred_grad(grads, centre):
    gA, gb, gAt, gbt = grads
    return np.concatenate([(gA - np.outer(gb, centre)).ravel(), gb,
                           (gAt - np.outer(gbt, centre)).ravel(), gbt])


def optimize_affine_multiscale(I0: ScalarImage, I1: ScalarImage,
                               cfg: AffineOptConfig | None = None) -> AffineResult:
    """Jointly fit both affine directions, coarse to fine.

    Both directions start at the identity and each scale warm-starts from the
    previous one. The regularization weight follows the epoch schedule with
    one epoch per optimizer iteration, counted across all scales. Each trace
    starts with the loss at the scale's initial parameters.
    """
    cfg = cfg or AffineOptConfig()
    if I0.grid != I1.grid:
        raise ValueError("source and target must share a grid")
    d = I0.grid.ndim
    centre = np.array(I0.grid.extent) / 2
    x = _to_centred([np.eye(d), np.zeros(d), np.eye(d), np.zeros(d)], centre)
    traces, ends = [], []
    epoch = 0
    for scale, n_iter in zip(cfg.scales, cfg.iters_per_scale):
        src = downsample_image(I0, scale)
        tgt = downsample_image(I1, scale)
        sim = cfg.similarity_for(src.grid, scale)
        state = {"epoch": epoch}

        def program():
            lam = lambda_ar_schedule(state["epoch"], cfg.c_ar, cfg.k_ar)
            return affine_loss_program(src, tgt, sim, lam, cfg.lambda_as)

        prog = program()

        def objective(xv):
            value, grads = prog.value_and_grad(*_from_centred(xv, centre))
            return value, _centred_grad(grads, centre)

        if cfg.optimizer == "lbfgs":
            def refresh(it):
                nonlocal prog
                state["epoch"] = epoch + it
                prog = program()
                return True

            res = minimize_lbfgs(objective, x, n_iter, cfg.lbfgs, refresh=refresh)
            x, trace = res.x, list(res.trace)
            done = len(trace) - 1
        else:
            trace = []
            for it in range(n_iter):
                state["epoch"] = epoch + it
                prog = program()
                try:
                    value, g = objective(x)
                except NonFiniteError as exc:
                    raise NonFiniteError(f"affine loss non-finite at scale {scale}, iteration {it}") from exc
                trace.append(value)
                x = x - cfg.learning_rate * g
            done = n_iter
        epoch += done
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"affine parameters became non-finite at scale {scale}")
        params = _from_centred(x, centre)
        for A in (params[0], params[2]):
            if abs(np.linalg.det(A)) < 1e-8:
                raise np.linalg.LinAlgError(f"affine matrix became singular at scale {scale}")
        state["epoch"] = epoch
        final = program().value(*params)
        if cfg.optimizer == "gd":
            trace.append(final)
        traces.append(trace)
        ends.append(final)
        log.info("affine scale %.3g: loss %.6f -> %.6f (%d iterations)", scale, trace[0], final, done)
    params = _from_centred(x, centre)
    return AffineResult(AffineParams(params[0], params[1]), AffineParams(params[2], params[3]),
                        traces, ends)
