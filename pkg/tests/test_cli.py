import json

import pytest

from mapreg import io
from mapreg.cli import build_parser, main
from mapreg.grid import LabelImage, ScalarImage, TransformMap

FAST_CONFIG = """[mapreg]
affine_scales = [0.5, 1.0]
affine_iterations = [15, 15]
vsvf_scales = [0.5, 1.0]
vsvf_iterations = [8, 8]
n_time_steps = 5
"""


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pair")
    assert main(["synth", "--out", str(out), "--seed", "3", "--dims", "24 24 24"]) == 0
    (out / "fast.ini").write_text(FAST_CONFIG)
    return out


def test_synth_writes_typed_volumes(synth_dir):
    assert isinstance(io.read_volume(synth_dir / "source.vol"), ScalarImage)
    assert isinstance(io.read_volume(synth_dir / "labels_target.vol"), LabelImage)
    assert isinstance(io.read_volume(synth_dir / "true_map.vol"), TransformMap)


def register_args(d, out, *extra):
    return ["register", "--source", str(d / "source.vol"), "--target", str(d / "target.vol"),
            "--labels-source", str(d / "labels_source.vol"),
            "--labels-target", str(d / "labels_target.vol"),
            "--config", str(d / "fast.ini"), "--out", str(out), *extra]


def test_register_and_evaluate(synth_dir, tmp_path, capsys):
    assert main(register_args(synth_dir, tmp_path / "r", "--method", "avsm")) == 0
    printed = json.loads(capsys.readouterr().out)
    on_disk = json.loads((tmp_path / "r" / "metrics.json").read_text())
    assert printed == on_disk and on_disk["folds"] == 0
    assert main(["evaluate", "--map", str(tmp_path / "r" / "map.vol"),
                 "--map-ts", str(tmp_path / "r" / "map_ts.vol"),
                 "--labels-source", str(synth_dir / "labels_source.vol"),
                 "--labels-target", str(synth_dir / "labels_target.vol"),
                 "--out", str(tmp_path / "e.json")]) == 0
    again = json.loads((tmp_path / "e.json").read_text())
    # the map is re-read from float32, so the metrics agree closely but not bitwise
    assert again["dice_mean"] == pytest.approx(on_disk["dice_mean"], abs=0.01)


def test_register_flags_override_config(synth_dir, tmp_path):
    args = register_args(synth_dir, tmp_path, "--method", "vsvf", "--steps", "2", "--lowres-factor",
                         "1.0", "--scales", "1.0")
    assert main(args) == 0
    traces = json.loads((tmp_path / "traces.json").read_text())
    assert len(traces["vsvf_step_losses"]) == 2 and len(traces["vsvf"]) == 2


def test_register_timing_flag(synth_dir, tmp_path):
    assert main(register_args(synth_dir, tmp_path, "--method", "affine", "--timing")) == 0
    assert json.loads((tmp_path / "metrics.json").read_text())["seconds_affine"] > 0


def test_errors_exit_nonzero(synth_dir, tmp_path, capsys):
    assert main(["register", "--source", str(synth_dir / "labels_source.vol"),
                 "--target", str(synth_dir / "target.vol"), "--out", str(tmp_path)]) == 2
    assert "read source" in capsys.readouterr().err
    (tmp_path / "bad.ini").write_text("[mapreg]\nlambda_vs = -3\n")
    assert main(["register", "--source", str(synth_dir / "source.vol"), "--target",
                 str(synth_dir / "target.vol"), "--config", str(tmp_path / "bad.ini"),
                 "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["register", "--source", "a", "--target", "b", "--out", "c", "--labels-source", "x"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["register", "--method", "demons"])


def test_gradcheck_verb(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4 and all(line.startswith("PASS") for line in lines)


def test_default_config_verb(tmp_path, capsys):
    assert main(["default-config"]) == 0
    assert io.parse_config(capsys.readouterr().out) == io.PipelineConfig()
    assert main(["default-config", "--out", str(tmp_path / "c.ini")]) == 0
    assert io.read_config(tmp_path / "c.ini") == io.PipelineConfig()
