import json

import numpy as np
import pytest

from hmdface import cli
from hmdface.camera import Camera, camera_set_to_dict
from hmdface.datagen import _nominal_point
from hmdface.errors import ConfigError, NumericError

SMALL = {
    "seed": 3,
    "task": {"n_real_subjects": 2, "n_val_subjects": 1, "n_test_subjects": 1, "n_synthetic_subjects": 1,
             "recordings_per_subject": 3, "synthetic_recordings_per_subject": 3, "n_vertices": 600,
             "hold": 12},
    "train": {"epochs": 2, "h": 8, "hidden": 16},
    "distill": {"rounds": 2, "pool_size": 1, "select_k": 1, "min_improvement": -1.0},
    "fit_frames": 2,
    "fit": {"max_iters": 60},
}


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = _write(root / "config.json", SMALL)
    out = root / "nested" / "run"              # does not exist yet
    for cmd in ("gen", "place", "fit", "train", "distill", "eval", "report"):
        assert cli.main([cmd, "--config", config, "--out", str(out)]) == 0, cmd
    return root, config, out


def test_missing_output_dir_is_created(pipeline):
    _, _, out = pipeline
    assert (out / "manifest.json").exists() and (out / "recordings" / "real.npz").exists()


def test_manifest_records_stages(pipeline):
    _, _, out = pipeline
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["stages"]) == set(cli.COMMANDS)
    assert man["config_hash"] == cli.config_from_dict(SMALL).digest()
    assert "numpy" in man["versions"]
    assert man["stages"]["distill"]["seeds"]["master"] == 3


def test_same_config_same_gen_manifest(pipeline, tmp_path):
    _, config, out = pipeline
    other = tmp_path / "again"
    assert cli.main(["gen", "--config", config, "--out", str(other)]) == 0
    a = json.loads((out / "manifest.json").read_text())["stages"]["gen"]
    b = json.loads((other / "manifest.json").read_text())["stages"]["gen"]
    assert a == b


def test_eval_on_true_labels_gives_full_semantic_accuracy(pipeline):
    _, _, out = pipeline
    metrics = json.loads((out / "eval" / "metrics.json").read_text())
    assert metrics["true labels"]["dataset"]["semantic_accuracy"] == 1.0
    for row in metrics.values():
        assert all(0.0 <= v <= 1.0 for v in row["dataset"].values() if v == v)
    table = (out / "eval" / "metrics.txt").read_text()
    assert "true labels" in table and "final model" in table


def test_round_series_file(pipeline):
    _, _, out = pipeline
    series = json.loads((out / "eval" / "round_series.json").read_text())
    assert len(series["weighted"]) == 3
    assert (out / "eval" / "round_series.txt").read_text().splitlines()[0].split() == ["round", "weighted",
                                                                                         "accepted"]


def test_report_collects_stages(pipeline):
    _, _, out = pipeline
    text = (out / "report.txt").read_text()
    for title in ("Camera placement", "Metrics", "Distillation rounds", "Coefficient fit"):
        assert title in text


def test_resume_keeps_round_files(pipeline):
    _, config, out = pipeline
    before = {p.name: p.read_bytes() for p in (out / "distill" / "round_01").iterdir()}
    assert cli.main(["distill", "--config", config, "--out", str(out), "--resume"]) == 0
    after = {p.name: p.read_bytes() for p in (out / "distill" / "round_01").iterdir()}
    assert before == after


# ---------------------------------------------------------------- placement

def _cams(out, doc, name):
    path = out.parent / name
    path.write_text(json.dumps(doc))
    return path


def test_single_camera_gives_single_row(pipeline):
    root, _, out = pipeline
    mouth = _nominal_point(118.0, 0.0)
    cam = Camera.look_at(mouth + np.array([0.0, -10.0, 60.0]), mouth, name="solo")
    cfg_doc = dict(SMALL, camera_set=str(_cams(out, camera_set_to_dict({"one": ([cam], {"solo": ["mouth"]})}),
                                               "solo.json")))
    config = _write(root / "solo_config.json", cfg_doc)
    assert cli.main(["place", "--config", config, "--out", str(out)]) == 0
    rows = [ln for ln in (out / "placement" / "placement.txt").read_text().splitlines()[2:] if ln.strip()]
    assert len(rows) == 1 and rows[0].split()[:2] == ["1", "solo"]


def test_ordered_incidence_gives_ordered_ranking(pipeline):
    root, _, out = pipeline
    mouth = _nominal_point(118.0, 0.0)
    head_on = Camera.look_at(mouth + np.array([0.0, -25.0, 60.0]), mouth, name="head_on")
    oblique = Camera.look_at(mouth + np.array([55.0, -10.0, 25.0]), mouth, name="oblique")
    doc = camera_set_to_dict({"pair": ([oblique, head_on], {"head_on": ["mouth"], "oblique": ["mouth"]})})
    config = _write(root / "pair_config.json", dict(SMALL, camera_set=str(_cams(out, doc, "pair.json"))))
    assert cli.main(["place", "--config", config, "--out", str(out)]) == 0
    rep = json.loads((out / "placement" / "placement.json").read_text())["pair"]
    vis = {c["name"]: c["visibility"]["mouth"]["mean"] for c in rep["cameras"]}
    assert vis["head_on"] > vis["oblique"]
    rows = (out / "placement" / "placement.txt").read_text().splitlines()
    assert rows[2].split()[1] == "head_on" and rows[3].split()[1] == "oblique"


def test_empty_camera_set_is_an_error(pipeline):
    root, _, out = pipeline
    path = _cams(out, {"configurations": [{"name": "none", "cameras": []}]}, "empty.json")
    config = _write(root / "empty_config.json", dict(SMALL, camera_set=str(path)))
    assert cli.main(["place", "--config", config, "--out", str(out)]) == cli.EXIT_DATA
    path = _cams(out, {"configurations": []}, "nothing.json")
    config = _write(root / "nothing_config.json", dict(SMALL, camera_set=str(path)))
    assert cli.main(["place", "--config", config, "--out", str(out)]) == cli.EXIT_DATA


# ---------------------------------------------------------------- configuration and exit codes

def test_unknown_key_rejected_by_name(tmp_path, capsys):
    config = _write(tmp_path / "bad.json", dict(SMALL, colour="red"))
    assert cli.main(["gen", "--config", config, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "'colour'" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="'epoch'"):
        cli.config_from_dict({"train": {"epoch": 3}})
    with pytest.raises(ConfigError, match="'gamma'"):
        cli.config_from_dict({"task": {"noise": {"gamma": 0.5}}})


def test_invalid_values_are_config_errors(tmp_path):
    for doc in ({"seed": -1}, {"train": {"batch_size": 3}}, {"distill": {"window": 4}}, {"fit_frames": 0},
                {"task": {"noise": {"mute": 2.0}}}):
        with pytest.raises(ConfigError):
            cli.config_from_dict(doc)
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["gen", "--config", str(tmp_path / "broken.json")]) == cli.EXIT_CONFIG
    assert cli.main(["gen", "--config", str(tmp_path / "absent.json")]) == cli.EXIT_CONFIG


def test_missing_stage_input_is_a_data_error(tmp_path, capsys):
    assert cli.main(["eval", "--out", str(tmp_path / "empty")]) == cli.EXIT_DATA
    assert "gen" in capsys.readouterr().err


def test_numeric_failure_exit_code(monkeypatch, tmp_path):
    def boom(*a, **k):
        raise NumericError("diverged")
    monkeypatch.setitem(cli.COMMANDS, "train", boom)
    assert cli.main(["train", "--out", str(tmp_path)]) == cli.EXIT_NUMERIC


def test_exit_codes_are_distinct():
    codes = {cli.EXIT_OK, cli.EXIT_CONFIG, cli.EXIT_DATA, cli.EXIT_NUMERIC}
    assert len(codes) == 4 and cli.EXIT_OK == 0


def test_config_hash_ignores_output_location():
    a = cli.config_from_dict(dict(SMALL, out="a"))
    b = cli.config_from_dict(dict(SMALL, out="b"))
    c = cli.config_from_dict(dict(SMALL, seed=4))
    assert a.digest() == b.digest() != c.digest()
