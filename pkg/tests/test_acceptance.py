"""End-to-end acceptance checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py``; a summary line per criterion is
printed at the end of the session. The synthetic suites take about 35 minutes
on one core.
"""
import itertools
import time

import numpy as np
import pytest
from scipy.linalg import expm

from mapreg import io
from mapreg.affine import AffineOptConfig
from mapreg.experiments import affine_recovery, passes_recovery, run_variant, synth_pair
from mapreg.gradcheck import run_all
from mapreg.grid import GridSpec, ScalarImage, VectorField, identity_coords, identity_map
from mapreg.pipeline import RegistrationJob, run_job
from mapreg.similarity import LnccConfig, MkLnccConfig, lncc, mk_lncc
from mapreg.smoothing import MultiGaussianKernel, smooth_array
from mapreg.synth import SynthSpec, make_pair
from mapreg.vsvf import advect_map, interior_slices

from oracles import dense_smoothing, lncc_loop

N_PAIRS = 20
TREND_SEEDS = (0, 1, 2, 3)


def test_criterion_1_gradients(acceptance):
    t0 = time.perf_counter()
    checks = run_all(seed=0)
    seconds = time.perf_counter() - t0
    ok = all(c.passed(1e-3) and c.n_checked >= 50 for c in checks) and seconds < 60
    detail = ", ".join(f"{c.name} {c.n_checked} coords max rel {c.max_rel_error:.1e}" for c in checks)
    assert acceptance(1, ok, f"{detail}; {seconds:.1f} s"), detail


def test_criterion_2_advection(acceptance):
    g = GridSpec.from_dims((32, 32, 32))
    x = identity_coords(g)
    inner = interior_slices(g, lead=1)
    c = np.array([0.07, -0.03, 0.05])
    v = VectorField(g, np.broadcast_to(c[:, None, None, None], x.shape).copy())
    err_const = np.abs(advect_map(identity_map(g), v, 10).values - (x - c[:, None, None, None]))[inner].max()
    err_lin = 0.0
    rng = np.random.default_rng(0)
    for _ in range(5):
        M = rng.normal(size=(3, 3))
        M *= 0.5 / np.linalg.norm(M, 2)
        phi = advect_map(identity_map(g), VectorField(g, np.tensordot(M, x, axes=1)), 10).values
        err_lin = max(err_lin, np.abs(phi - np.tensordot(expm(-M), x, axes=1))[inner].max())
    ok = err_const < 1e-6 and err_lin < 1e-4
    assert acceptance(2, ok, f"constant {err_const:.1e} (<1e-6), linear {err_lin:.1e} (<1e-4)")


def test_criterion_3_similarity(acceptance):
    rng = np.random.default_rng(0)
    g = GridSpec.from_dims((8, 8, 8))
    worst = 0.0
    for size, stride, dil in itertools.product((2, 4), (1, 2), (1, 2)):
        x, y = rng.normal(size=(2, 8, 8, 8))
        y = 0.5 * x + y
        X, Y = ScalarImage(g, x), ScalarImage(g, y)
        worst = max(worst, abs(lncc(X, Y, LnccConfig(size, stride, dil)) - lncc_loop(x, y, size, stride, dil)))
        other = 6 - size
        cfg = MkLnccConfig(((0.3, LnccConfig(size, stride, dil)), (0.7, LnccConfig(other, stride, dil))))
        oracle = 0.3 * lncc_loop(x, y, size, stride, dil) + 0.7 * lncc_loop(x, y, other, stride, dil)
        worst = max(worst, abs(mk_lncc(X, Y, cfg) - oracle))
    assert acceptance(3, worst < 1e-10, f"max deviation {worst:.1e} over 8 window settings (<1e-10)")


def test_criterion_4_smoothing(acceptance):
    kernel = MultiGaussianKernel()
    g = GridSpec.from_dims((8, 8, 8))
    rng = np.random.default_rng(0)
    err_impulse = 0.0
    for voxel in [(0, 0, 0), (3, 4, 5), (7, 2, 6)]:
        f = np.zeros((3, 8, 8, 8))
        f[(1, *voxel)] = 1.0
        err_impulse = max(err_impulse, np.abs(smooth_array(f, g, kernel) - dense_smoothing(f, g, kernel)).max())
    err_const = 0.0
    for dims in [(8, 8, 8), (16, 12, 10), (20, 13)]:
        gg = GridSpec.from_dims(dims)
        f = np.full((len(dims), *dims), 3.7)
        err_const = max(err_const, np.abs(smooth_array(f, gg, kernel) - 3.7).max())
    err_adj = 0.0
    for _ in range(5):
        a, b = rng.normal(size=(2, 3, 8, 8, 8))
        err_adj = max(err_adj, abs(np.sum(a * smooth_array(b, g, kernel)) - np.sum(smooth_array(a, g, kernel) * b)))
    ok = err_impulse < 1e-10 and err_const < 1e-12 and err_adj < 1e-8
    assert acceptance(4, ok, f"impulse {err_impulse:.1e} (<1e-10), constant {err_const:.1e} (<1e-12), "
                             f"adjoint {err_adj:.1e} (<1e-8)")


def test_criterion_5_affine_recovery(acceptance):
    t0 = time.perf_counter()
    records = [affine_recovery(seed, (64, 64, 64), AffineOptConfig()) for seed in range(N_PAIRS)]
    seconds = time.perf_counter() - t0
    errors = [r.error_voxels for r in records]
    n_ok = sum(e < 0.5 for e in errors)
    ok = n_ok >= 18 and seconds < 300
    assert acceptance(5, ok, f"{n_ok}/{N_PAIRS} pairs below 0.5 voxel (worst {max(errors):.3f}), "
                             f"{seconds:.0f} s (<300)")


@pytest.fixture(scope="session")
def avsm_suite():
    t0 = time.perf_counter()
    records = []
    for seed in range(N_PAIRS):
        records.append(run_variant(synth_pair(seed), seed, "avsm"))
    return records, time.perf_counter() - t0


def test_criterion_6_vsvf_recovery(acceptance, avsm_suite):
    records, seconds = avsm_suite
    n_ok = sum(passes_recovery(r) for r in records)
    for r in records:
        print(f"  seed {r.seed}: dice {r.dice:.4f} folds {r.folds} symmetry {r.symmetry:.2f}")
    ok = n_ok >= 18 and seconds < 1200
    assert acceptance(6, ok, f"{n_ok}/{N_PAIRS} pairs with dice>=0.90, 0 folds, symmetry<=-8 "
                             f"(min dice {min(r.dice for r in records):.3f}, "
                             f"max symmetry {max(r.symmetry for r in records):.2f}); {seconds:.0f} s (<1200)")


def test_criterion_7_trends(acceptance, avsm_suite):
    base = {r.seed: r for r in avsm_suite[0]}
    runs = {v: [] for v in ("vsvf_only", "avsm_no_sym", "avsm_T3")}
    for seed in TREND_SEEDS:
        pair = synth_pair(seed)
        for variant in runs:
            runs[variant].append(run_variant(pair, seed, variant))
    avsm = [base[s] for s in TREND_SEEDS]
    mean = lambda recs, key: float(np.mean([getattr(r, key) for r in recs]))
    for i, seed in enumerate(TREND_SEEDS):
        print(f"  seed {seed}: avsm {avsm[i].dice:.4f}/{avsm[i].symmetry:.2f}/{avsm[i].folds} "
              + " ".join(f"{v} {runs[v][i].dice:.4f}/{runs[v][i].symmetry:.2f}/{runs[v][i].folds}" for v in runs))
    a = mean(avsm, "dice") > mean(runs["vsvf_only"], "dice")
    sym_lower = mean(avsm, "symmetry") < mean(runs["avsm_no_sym"], "symmetry")
    dice_drop = mean(runs["avsm_no_sym"], "dice") - mean(avsm, "dice")
    b = sym_lower and dice_drop < 0.02
    c = mean(runs["avsm_T3"], "dice") >= mean(avsm, "dice")
    # more steps may add folds; logged only
    print(f"  folds T=1 {mean(avsm, 'folds'):.1f}, T=3 {mean(runs['avsm_T3'], 'folds'):.1f}")
    detail = (f"(a) dice avsm {mean(avsm, 'dice'):.4f} vs vsvf-only {mean(runs['vsvf_only'], 'dice'):.4f}: "
              f"{'ok' if a else 'violated'}; "
              f"(b) symmetry {mean(avsm, 'symmetry'):.2f} vs {mean(runs['avsm_no_sym'], 'symmetry'):.2f} "
              f"without, dice drop {dice_drop:+.4f}: {'ok' if b else 'violated'}; "
              f"(c) dice T=3 {mean(runs['avsm_T3'], 'dice'):.4f} vs T=1 {mean(avsm, 'dice'):.4f}: "
              f"{'ok' if c else 'violated'}; means over seeds {list(TREND_SEEDS)}")
    assert acceptance(7, a and b and c, detail)


def test_criterion_8_determinism(acceptance, tmp_path):
    pair = make_pair(SynthSpec(seed=0))
    for name, value in (("s", pair.source), ("t", pair.target), ("ls", pair.labels_source),
                        ("lt", pair.labels_target)):
        io.write_volume(value, tmp_path / f"{name}.vol")
    texts = []
    for run in ("a", "b"):
        job = RegistrationJob(tmp_path / "s.vol", tmp_path / "t.vol", tmp_path / run, "avsm",
                              tmp_path / "ls.vol", tmp_path / "lt.vol")
        run_job(job)
        texts.append((tmp_path / run / "metrics.json").read_bytes())
    same = texts[0] == texts[1]
    assert acceptance(8, same, f"metrics.json of two avsm runs on seed 0 {'identical' if same else 'differ'} "
                               f"({len(texts[0])} bytes)")
