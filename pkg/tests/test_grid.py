import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mapreg.affine import AffineParams, affine_to_map
from mapreg.grid import (GridSpec, Interpolator, LabelImage, ScalarImage, TransformMap, compose,
                         diff_axis, diff_axis_adjoint, downsample_image, identity_coords,
                         identity_map, interpolate, jacobian_determinant, resample_map, warp,
                         warp_labels)

from conftest import smooth_random
from oracles import blur_axis_loop, interpolate_loop, jacobian_det_loop

dims_st = st.one_of(
    st.tuples(st.integers(2, 9), st.integers(2, 9)),
    st.tuples(st.integers(2, 7), st.integers(2, 7), st.integers(2, 7)),
)


def interior(grid, lead=0, m=1):
    return (slice(None),) * lead + tuple(slice(m, n - m) for n in grid.dims)


def small_affine(rng, d, scale=0.05):
    return AffineParams(np.eye(d) + scale * rng.normal(size=(d, d)), scale * rng.normal(size=d))


# --- grid spec and types ------------------------------------------------------


def test_from_dims_normalizes_longest_axis():
    g = GridSpec.from_dims((33, 17, 9))
    assert g.extent[0] == 1.0
    assert np.allclose(g.spacing, 1 / 32)


@pytest.mark.parametrize("dims", [(1, 4), (4,), (2, 2, 2, 2)])
def test_bad_grids_rejected(dims):
    with pytest.raises(ValueError):
        GridSpec.from_dims(dims)


def test_scaled_rejects_too_small():
    with pytest.raises(ValueError):
        GridSpec.from_dims((4, 4)).scaled(0.25)


def test_images_reject_nonfinite_and_bad_shapes():
    g = GridSpec.from_dims((3, 3))
    with pytest.raises(ValueError):
        ScalarImage(g, np.full((3, 3), np.nan))
    with pytest.raises(ValueError):
        ScalarImage(g, np.zeros((3, 4)))
    with pytest.raises(ValueError):
        TransformMap(g, np.zeros((3, 3, 3)))


def test_values_are_read_only():
    img = ScalarImage(GridSpec.from_dims((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        img.values[0, 0] = 1.0


def test_label_image_checks_declared_set():
    g = GridSpec.from_dims((3, 3))
    vals = np.zeros((3, 3), dtype=int)
    vals[1, 1] = 2
    with pytest.raises(ValueError):
        LabelImage(g, vals, (1,))
    assert LabelImage(g, vals).labels == (2,)


# --- identity -----------------------------------------------------------------


def test_identity_on_2x2_grid():
    ident = identity_map(GridSpec.from_dims((2, 2))).values
    assert set(np.unique(ident[0])) == {0.0, 1.0}
    assert np.array_equal(ident[0], [[0.0, 0.0], [1.0, 1.0]])


@given(dims_st)
def test_warp_by_identity_is_bitwise(dims):
    rng = np.random.default_rng(sum(dims))
    g = GridSpec.from_dims(dims)
    img = ScalarImage(g, rng.normal(size=dims))
    assert np.array_equal(warp(img, identity_map(g)).values, img.values)


@given(st.tuples(st.integers(3, 7), st.integers(3, 7), st.integers(3, 7)))
def test_identity_jacobian_is_one(dims):
    det = jacobian_determinant(identity_map(GridSpec.from_dims(dims))).values
    assert np.allclose(det, 1.0, atol=1e-12)


# --- interpolation -------------------------------------------------------------


def test_integer_translation_shifts_and_clamps(rng):
    g = GridSpec.from_dims((6, 5, 4))
    data = rng.normal(size=g.dims)
    pts = identity_coords(g).copy()
    pts[0] += 2 * g.spacing[0]
    out = interpolate(data, g, pts)
    expected = data[np.minimum(np.arange(6) + 2, 5)]
    assert np.array_equal(out, expected)


def test_half_voxel_shift_of_ramp_is_exact():
    g = GridSpec.from_dims((10, 8))
    x = identity_coords(g)
    ramp = 3.0 * x[0] - 2.0 * x[1] + 0.5
    shift = np.array([0.5 * g.spacing[0], -0.5 * g.spacing[1]])
    out = interpolate(ramp, g, x + shift[:, None, None])
    expected = 3.0 * (x[0] + shift[0]) - 2.0 * (x[1] + shift[1]) + 0.5
    sl = (slice(0, -1), slice(1, None))  # shifted points still inside the grid
    assert np.allclose(out[sl], expected[sl], atol=1e-12)


@given(dims_st, st.integers(0, 2 ** 16))
def test_interpolation_matches_loop_oracle(dims, seed):
    rng = np.random.default_rng(seed)
    g = GridSpec.from_dims(dims)
    data = rng.normal(size=dims)
    pts = rng.uniform(-0.2, 1.2, size=(len(dims), 5, 3)) * np.array(g.extent)[:, None, None]
    assert np.allclose(interpolate(data, g, pts), interpolate_loop(data, g.spacing, pts),
                       atol=1e-13)


@given(dims_st, st.integers(0, 2 ** 16))
def test_interpolation_adjoint_is_transpose(dims, seed):
    rng = np.random.default_rng(seed)
    g = GridSpec.from_dims(dims)
    data = rng.normal(size=(2, *dims))
    pts = rng.uniform(-0.1, 1.1, size=(len(dims), 7)) * np.array(g.extent)[:, None]
    interp = Interpolator(g, pts)
    w = rng.normal(size=(2, 7))
    lhs = np.sum(interp.apply(data) * w)
    rhs = np.sum(data * interp.adjoint(w))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_point_gradient_matches_finite_differences(rng):
    g = GridSpec.from_dims((7, 6, 5))
    data = rng.normal(size=g.dims)
    # keep samples away from cell faces so the interpolant is smooth around them
    cells = rng.integers(0, 4, size=(3, 20)) + rng.uniform(0.2, 0.8, size=(3, 20))
    pts = cells * np.array(g.spacing)[:, None]
    grad = Interpolator(g, pts).point_gradient(data)
    h = 1e-6
    for a in range(3):
        e = np.zeros((3, 1))
        e[a] = h
        fd = (interpolate(data, g, pts + e) - interpolate(data, g, pts - e)) / (2 * h)
        assert np.allclose(grad[a], fd, atol=1e-7)


def test_interpolation_independent_of_point_order(rng):
    g = GridSpec.from_dims((8, 8, 8))
    data = rng.normal(size=g.dims)
    pts = rng.uniform(0, 1, size=(3, 200))
    perm = rng.permutation(200)
    assert np.array_equal(interpolate(data, g, pts)[perm], interpolate(data, g, pts[:, perm]))


def test_warp_labels_nearest_neighbour():
    g = GridSpec.from_dims((5, 5))
    vals = np.zeros((5, 5), dtype=int)
    vals[2, 2] = 1
    lab = LabelImage(g, vals)
    pts = identity_coords(g).copy()
    pts[0] += 0.4 * g.spacing[0]   # rounds back to the same voxel
    assert np.array_equal(warp_labels(lab, TransformMap(g, pts)).values, vals)
    pts[0] += 0.2 * g.spacing[0]   # now past the half-voxel mark
    assert warp_labels(lab, TransformMap(g, pts)).values[1, 2] == 1


# --- composition ----------------------------------------------------------------


@given(dims_st, st.integers(0, 2 ** 16))
def test_compose_with_identity(dims, seed):
    rng = np.random.default_rng(seed)
    g = GridSpec.from_dims(dims)
    inside = rng.uniform(0, 1, size=(len(dims), *dims)) * np.array(g.extent).reshape(-1, *[1] * len(dims))
    m = TransformMap(g, inside)
    ident = identity_map(g)
    assert np.array_equal(compose(m, ident).values, m.values)
    assert np.allclose(compose(ident, m).values, m.values, atol=1e-15)


def test_affine_composition_matches_product(rng):
    g = GridSpec.from_dims((20, 18, 16))
    a1, a2 = small_affine(rng, 3, 0.02), small_affine(rng, 3, 0.02)
    m1, m2 = affine_to_map(a1, g), affine_to_map(a2, g)
    comp = compose(m1, m2).values
    x = identity_coords(g).reshape(3, -1)
    exact = (a1.A @ (a2.A @ x + a2.b[:, None]) + a1.b[:, None]).reshape(comp.shape)
    # compare where the inner map stays inside the domain (no clamping)
    inner = m2.values
    ok = np.all((inner >= 0) & (inner <= np.array(g.extent).reshape(3, 1, 1, 1)), axis=0)
    assert ok.sum() > 0.5 * ok.size
    assert np.abs(comp - exact)[:, ok].max() < 1e-6


def test_composition_associative_on_affine_maps(rng):
    g = GridSpec.from_dims((16, 16, 16))
    maps = [affine_to_map(small_affine(rng, 3, 0.01), g) for _ in range(3)]
    left = compose(compose(maps[0], maps[1]), maps[2]).values
    right = compose(maps[0], compose(maps[1], maps[2])).values
    sl = interior(g, 1, 3)
    assert np.abs(left - right)[sl].max() < 1e-6


# --- resampling -----------------------------------------------------------------


def test_upsampled_affine_map_is_exact(rng):
    coarse = GridSpec.from_dims((9, 9, 9))
    fine = GridSpec((17, 17, 17), coarse.extent)
    a = small_affine(rng, 3)
    up = resample_map(affine_to_map(a, coarse), fine).values
    assert np.abs(up - affine_to_map(a, fine).values).max() < 1e-6


def test_resample_identity_is_identity():
    coarse = GridSpec.from_dims((5, 7))
    fine = GridSpec((9, 13), coarse.extent)
    assert np.allclose(resample_map(identity_map(coarse), fine).values, identity_map(fine).values,
                       atol=1e-15)


def test_resample_round_trip_of_affine(rng):
    g = GridSpec.from_dims((9, 9, 9))
    fine = GridSpec((17, 17, 17), g.extent)
    m = affine_to_map(small_affine(rng, 3), g)
    back = resample_map(resample_map(m, fine), g).values
    assert np.abs(back - m.values).max() < 1e-6


def test_down_up_matches_loop_oracle(rng):
    g = GridSpec.from_dims((9, 9, 9))
    coarse = g.scaled(0.5)
    values = identity_coords(g) + 0.01 * np.stack([smooth_random(rng, g.dims) for _ in range(3)])
    m = TransformMap(g, values)
    round_trip = resample_map(resample_map(m, coarse), g).values
    down = np.stack([interpolate_loop(values[c], g.spacing, identity_coords(coarse)) for c in range(3)])
    oracle = np.stack([interpolate_loop(down[c], coarse.spacing, identity_coords(g)) for c in range(3)])
    assert np.abs(round_trip - oracle).max() < 1e-12


def test_resample_requires_same_extent():
    with pytest.raises(ValueError):
        resample_map(identity_map(GridSpec.from_dims((5, 5))), GridSpec((5, 5), (1.0, 0.5)))


# --- downsampling ---------------------------------------------------------------


def test_downsample_factor_one_is_noop(rng):
    img = ScalarImage(GridSpec.from_dims((6, 6)), rng.normal(size=(6, 6)))
    assert downsample_image(img, 1.0) is img


@given(st.sampled_from([0.25, 0.5, 0.75]), st.floats(-5, 5))
def test_downsample_preserves_constants(factor, c):
    img = ScalarImage(GridSpec.from_dims((16, 12, 8)), np.full((16, 12, 8), c))
    assert np.allclose(downsample_image(img, factor).values, c, atol=1e-12)


def test_downsample_matches_blur_decimate_oracle(rng):
    g = GridSpec.from_dims((16, 14, 12))
    img = ScalarImage(g, rng.normal(size=g.dims))
    out = downsample_image(img, 0.5)
    blurred = img.values
    for a in range(3):
        blurred = blur_axis_loop(blurred, a, 0.4 * (1 / 0.5 - 1))
    oracle = interpolate_loop(blurred, g.spacing, identity_coords(out.grid))
    assert np.abs(out.values - oracle).max() < 1e-6


def test_downsample_too_small_errors():
    with pytest.raises(ValueError):
        downsample_image(ScalarImage(GridSpec.from_dims((4, 4)), np.zeros((4, 4))), 0.2)


# --- derivatives and jacobians --------------------------------------------------


def test_affine_jacobian_is_det_a(rng):
    g = GridSpec.from_dims((8, 9, 10))
    a = small_affine(rng, 3, 0.2)
    det = jacobian_determinant(affine_to_map(a, g)).values
    assert np.abs(det - np.linalg.det(a.A)).max() < 1e-6


def test_jacobian_matches_loop_stencil(rng):
    g = GridSpec.from_dims((6, 5, 4))
    values = identity_coords(g) + 0.02 * rng.normal(size=(3, *g.dims))
    det = jacobian_determinant(TransformMap(g, values)).values
    assert np.allclose(det, jacobian_det_loop(values, g.spacing), atol=1e-10)


def test_jacobian_needs_three_voxels():
    with pytest.raises(ValueError):
        jacobian_determinant(identity_map(GridSpec.from_dims((2, 5))))


@given(st.integers(0, 2 ** 16), st.integers(0, 2))
def test_diff_adjoint(seed, axis):
    rng = np.random.default_rng(seed)
    f, g = rng.normal(size=(2, 5, 4, 6))
    lhs = np.sum(diff_axis(f, axis, 0.1) * g)
    rhs = np.sum(f * diff_axis_adjoint(g, axis, 0.1))
    assert abs(lhs - rhs) < 1e-10
