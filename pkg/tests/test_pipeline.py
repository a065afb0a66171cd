import json

import numpy as np
import pytest

from mapreg import io
from mapreg.grid import ScalarImage, identity_map, interpolate, warp
from mapreg.io import PipelineConfig
from mapreg.pipeline import PipelineError, RegistrationJob, evaluate_maps, register, run_job
from mapreg.synth import SynthSpec, make_pair

FAST = PipelineConfig(affine_scales=(0.5, 1.0), affine_iterations=(20, 20), vsvf_scales=(0.5, 1.0),
                      vsvf_iterations=(10, 10), n_time_steps=5)


@pytest.fixture(scope="module")
def pair():
    return make_pair(SynthSpec(dims=(24, 24, 24), seed=1))


@pytest.fixture(scope="module")
def avsm(pair):
    return register(pair.source, pair.target, "avsm", FAST)


def test_avsm_warped_output_is_single_interpolation(pair, avsm):
    assert np.array_equal(avsm.warped.values, warp(pair.source, avsm.map).values)


def test_avsm_starts_vsvf_from_affine_map(pair, avsm):
    # zero vSVF iterations leave the affine map in place (up to low-res resampling of an affine map)
    cfg = PipelineConfig(**{**FAST.__dict__, "vsvf_iterations": (0, 0)})
    reg = register(pair.source, pair.target, "avsm", cfg)
    assert np.abs(reg.map.values - reg.affine.map(pair.source.grid).values).max() < 1e-9


def test_methods_produce_expected_parts(pair, avsm):
    aff = register(pair.source, pair.target, "affine", FAST)
    vs = register(pair.source, pair.target, "vsvf", FAST)
    assert aff.vsvf is None and aff.affine is not None
    assert vs.affine is None and vs.vsvf is not None
    assert set(avsm.traces()) == {"affine", "vsvf", "vsvf_step_losses", "vsvf_step_similarity"}
    before = evaluate_maps(identity_map(pair.source.grid), None, pair.labels_source, pair.labels_target)
    after = evaluate_maps(avsm.map, avsm.map_ts, pair.labels_source, pair.labels_target)
    assert after.dice_mean > before.dice_mean + 0.1


def test_affine_on_identical_images(pair):
    reg = register(pair.source, pair.source, "affine", FAST)
    rep = evaluate_maps(reg.map, reg.map_ts, pair.labels_source, pair.labels_source)
    assert rep.dice_mean == 1.0 and rep.folds == 0


def test_register_validation(pair):
    with pytest.raises(ValueError):
        register(pair.source, pair.target, "demons")
    small = ScalarImage(make_pair(SynthSpec(dims=(8, 8, 8))).source.grid, np.zeros((8, 8, 8)))
    with pytest.raises(PipelineError):
        register(pair.source, small, "affine", FAST)


def test_stage_errors_carry_context(pair):
    # a 0.05 scale of a 24^3 image is too small to build a grid on
    bad = PipelineConfig(**{**FAST.__dict__, "vsvf_scales": (0.05, 1.0)})
    with pytest.raises(PipelineError) as info:
        register(pair.source, pair.target, "vsvf", bad)
    assert info.value.stage == "vsvf"


@pytest.fixture(scope="module")
def files(tmp_path_factory, pair):
    d = tmp_path_factory.mktemp("inputs")
    io.write_volume(pair.source, d / "s.vol")
    io.write_volume(pair.target, d / "t.vol")
    io.write_volume(pair.labels_source, d / "ls.vol")
    io.write_volume(pair.labels_target, d / "lt.vol")
    return d


def job(files, out, **kw):
    return RegistrationJob(files / "s.vol", files / "t.vol", out, labels_source=files / "ls.vol",
                           labels_target=files / "lt.vol", config=FAST, **kw)


def test_run_job_writes_artifacts_deterministically(files, tmp_path):
    rep = run_job(job(files, tmp_path / "a"))
    run_job(job(files, tmp_path / "b"))
    names = {"warped_source.vol", "map.vol", "map_ts.vol", "warped_labels.vol", "traces.json", "metrics.json"}
    assert {p.name for p in (tmp_path / "a").iterdir()} == names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert metrics["seconds_affine"] is None and metrics["dice_mean"] == rep.dice_mean
    traces = json.loads((tmp_path / "a" / "traces.json").read_text())
    assert len(traces["affine"]) == 2 and len(traces["vsvf"]) == 2


def test_run_job_warped_source_matches_map_file(files, tmp_path):
    run_job(job(files, tmp_path))
    tmap = io.read_volume(tmp_path / "map.vol")
    src = io.read_volume(files / "s.vol")
    warped = io.read_volume(tmp_path / "warped_source.vol").values
    # the map file is float32, so recompute from the in-file map with that tolerance
    assert np.abs(warped - interpolate(src.values, src.grid, tmap.values)).max() < 1e-4


def test_run_job_timing_is_opt_in(files, tmp_path):
    run_job(job(files, tmp_path, method="affine", record_timing=True))
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["seconds_affine"] > 0 and metrics["seconds_vsvf"] is None


def test_run_job_input_errors(files, tmp_path):
    with pytest.raises(PipelineError) as info:
        run_job(RegistrationJob(files / "ls.vol", files / "t.vol", tmp_path, config=FAST))
    assert info.value.stage == "read source"
    with pytest.raises(PipelineError):
        run_job(RegistrationJob(files / "missing.vol", files / "t.vol", tmp_path, config=FAST))
    with pytest.raises(ValueError):
        RegistrationJob(files / "s.vol", files / "t.vol", tmp_path, labels_source=files / "ls.vol")
    with pytest.raises(ValueError):
        RegistrationJob(files / "s.vol", files / "t.vol", tmp_path, method="syn")
