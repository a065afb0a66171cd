"""Finite-difference checks of the affine and vSVF loss gradients on small seeded problems."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affine import affine_loss_program
from .autodiff import finite_difference_grad
from .grid import GridSpec, ScalarImage, gaussian_blur, identity_coords
from .similarity import paper_mk_lncc
from .vsvf import ScaleProblem, VsvfConfig


@dataclass
class GradCheck:
    name: str
    n_checked: int
    max_rel_error: float

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|), with a floor of 1e-6 times the largest magnitude.

    The floor keeps entries whose true derivative is ~0 from dividing by noise.
    """
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6 * scale)
    return np.abs(analytic - numeric) / denom


def random_images(dims, seed: int):
    rng = np.random.default_rng(seed)
    grid = GridSpec.from_dims(dims)
    imgs = [gaussian_blur(rng.normal(size=grid.dims), [1.5] * len(dims)) for _ in range(2)]
    return ScalarImage(grid, imgs[0]), ScalarImage(grid, imgs[1]), rng


def check_affine(dims=(8, 8, 8), seed: int = 0, h: float = 1e-4, min_coords: int = 50,
                 cell_centred: bool = True) -> GradCheck:
    """Every affine parameter of both directions, at several parameter draws.

    The loss has only 2 d (d + 1) parameters, so draws are repeated on the
    same image pair until at least ``min_coords`` coordinates are checked.

    Multilinear interpolation is only piecewise smooth, so a central
    difference is a valid oracle only if no sample crosses a cell face within
    the stencil. With ``cell_centred`` the parameters are a half-voxel shift
    plus perturbations small enough that every warped sample stays near a
    cell centre; otherwise they are a larger random perturbation of the
    identity (use a smaller ``h`` there).
    """
    I0, I1, rng = random_images(dims, seed)
    d = len(dims)
    prog = affine_loss_program(I0, I1, paper_mk_lncc(I0.grid.min_dim, fine=True),
                               lambda_ar=0.5, lambda_as=10.0)
    n_params = 2 * d * (d + 1)
    worst, checked = 0.0, 0
    while checked < min_coords:
        params = _affine_draw(rng, I0.grid, cell_centred)
        shapes = [p.shape for p in params]
        x = np.concatenate([p.ravel() for p in params])

        def unpack(v, shapes=shapes):
            out, k = [], 0
            for shape in shapes:
                n = int(np.prod(shape))
                out.append(v[k:k + n].reshape(shape))
                k += n
            return out

        _, grads = prog.value_and_grad(*params)
        g = np.concatenate([q.ravel() for q in grads])
        idx = np.arange(n_params)
        fd = finite_difference_grad(lambda v: prog.value(*unpack(v)), x, idx, h)
        worst = max(worst, float(relative_errors(g, fd).max()))
        checked += n_params
    return GradCheck(f"affine {d}D", checked, worst)


def _affine_draw(rng, grid: GridSpec, cell_centred: bool) -> list[np.ndarray]:
    d = grid.ndim
    if not cell_centred:
        return [np.eye(d) + 0.05 * rng.normal(size=(d, d)), 0.03 * rng.normal(size=d),
                np.eye(d) + 0.05 * rng.normal(size=(d, d)), 0.03 * rng.normal(size=d)]
    half = 0.5 * np.array(grid.spacing)
    # |dA| |x| + |db| stays well below a quarter voxel
    dA = 0.02 * min(grid.spacing) / d
    params = []
    for _ in range(2):
        params += [np.eye(d) + dA * rng.uniform(-1, 1, (d, d)), half + dA * rng.uniform(-1, 1, d)]
    return params


def check_vsvf(dims=(8, 8, 8), seed: int = 0, n_coords: int = 50, n_time_steps: int = 3,
               h: float = 1e-4, cell_centred: bool = True) -> GradCheck:
    """Sampled momentum entries of the full symmetric vSVF loss (low-res map, upsampled).

    Image warping and the symmetry composition both interpolate at the map
    positions. Starting from the identity puts those on lattice points, where
    the interpolant has kinks; ``cell_centred`` starts both maps half a voxel
    off instead, with a momentum small enough (~0.1 voxel of displacement)
    to keep every sample near a cell centre.
    """
    I0, I1, rng = random_images(dims, seed)
    grid = I0.grid
    cfg = VsvfConfig(n_time_steps=n_time_steps, lambda_vs=1e-2, lowres_factor=0.5)
    low = grid.scaled(cfg.lowres_factor)
    init = identity_coords(low)
    if cell_centred:
        init = init + 0.5 * np.array(grid.spacing).reshape(-1, *[1] * len(dims))
    problem = ScaleProblem(I0, I1, init, init.copy(), low, cfg, cfg.similarity_for(grid, 1.0))
    x = (0.005 if cell_centred else 0.05) * rng.normal(size=2 * len(dims) * low.size)
    _, g = problem.objective(x)
    idx = rng.choice(x.size, size=min(n_coords, x.size), replace=False)
    fd = finite_difference_grad(lambda v: problem.objective(v)[0], x, idx, h)
    return GradCheck(f"vsvf {len(dims)}D", idx.size, float(relative_errors(g[idx], fd).max()))


def run_all(seed: int = 0) -> list[GradCheck]:
    return [check_affine((8, 8, 8), seed), check_affine((32, 32), seed),
            check_vsvf((8, 8, 8), seed), check_vsvf((32, 32), seed)]
