import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmdface import regressor as reg
from hmdface.dataset import LabeledSet, Recording
from hmdface.datagen import TaskConfig, default_priors, make_task
from hmdface.distill import (DistillConfig, PoolMember, calibrate, distill, ensemble_inference, model_seed,
                             post_process, select, smooth)
from hmdface.errors import ConfigError, DataError
from hmdface.rig import N_BASES, STANDARD_LAYOUT


def _set(labels, lengths=None, subjects=None):
    labels = np.asarray(labels, dtype=float)
    lengths = lengths or [len(labels)]
    subjects = subjects or ["s"] * len(lengths)
    recs, pos = [], 0
    for i, (n, s) in enumerate(zip(lengths, subjects)):
        recs.append(Recording(f"r{i}", s, pos, pos + n))
        pos += n
    return LabeledSet(np.zeros((len(labels), 5, 4)), labels, recs)


def _constant_model(value, d=4, seed=0):
    m = reg.init_model(seed, d=d, h=4, hidden=4, zero_output=True)
    m.params["head_eye_b2"][:] = value
    m.params["head_face_b2"][:] = value
    return m


# ---------------------------------------------------------------- smoothing and calibration

def test_smooth_impulse():
    x = np.zeros(11)
    x[5] = 1.0
    assert smooth(x, 5)[5] == pytest.approx(0.2, abs=1e-15)
    assert smooth(x, 5).sum() == pytest.approx(1.0)


def test_smooth_preserves_constants_exactly():
    x = np.full((9, 3), 0.37)
    assert np.array_equal(smooth(x, 5), x)


def test_smooth_matches_direct_average():
    x = np.random.default_rng(0).uniform(size=(20, 2))
    pad = np.concatenate([x[:1], x[:1], x, x[-1:], x[-1:]])
    direct = np.stack([pad[t:t + 5].mean(axis=0) for t in range(20)])
    assert np.allclose(smooth(x, 5), direct, atol=1e-15)


def test_constant_curves_pass_through_post_process():
    lab = np.full((30, N_BASES), 0.4)
    out = post_process(_set(lab))
    assert np.array_equal(out.labels, lab)


def test_muted_curve_is_rescaled():
    v = np.zeros((100, 1))
    v[40:60, 0] = 0.6
    out = calibrate(v, np.array([0.0]), np.array([0.6]))
    assert out[50, 0] == 1.0 and out[0, 0] == 0.0


def test_calibrate_skip_and_spread_guard():
    v = np.random.default_rng(0).uniform(0.2, 0.5, size=(10, 3))
    out = calibrate(v, np.array([0.2, 0.2, 0.3]), np.array([0.5, 0.5, 0.32]), 0.05, skip=[1])
    assert np.array_equal(out[:, 1:], v[:, 1:])
    assert not np.array_equal(out[:, 0], v[:, 0])


@given(st.integers(0, 2**31))
def test_calibrate_is_idempotent_on_calibrated_range(seed):
    r = np.random.default_rng(seed)
    v = r.uniform(size=(50, 4))
    lo, hi = np.percentile(v, 5, axis=0), np.percentile(v, 95, axis=0)
    once = calibrate(v, lo, hi)
    assert np.allclose(calibrate(once, np.zeros(4), np.ones(4)), once, atol=1e-15)


def test_post_process_muted_recording_reaches_full_range():
    lab = np.zeros((60, N_BASES))
    jaw = STANDARD_LAYOUT.index("jaw_open")
    lab[20:45, jaw] = 0.6
    out = post_process(_set(lab))
    assert out.labels[32, jaw] == pytest.approx(1.0)
    assert out.labels[:, jaw].min() == 0.0


def test_post_process_leaves_gaze_following_alone():
    lab = np.zeros((40, N_BASES))
    g = STANDARD_LAYOUT.gaze_following_idx[0]
    lab[:, g] = np.linspace(0.1, 0.3, 40)
    out = post_process(_set(lab))
    assert np.allclose(out.labels[:, g], smooth(lab[:, g], 5), atol=1e-15)


def test_post_process_is_per_subject():
    lab = np.zeros((80, N_BASES))
    jaw = STANDARD_LAYOUT.index("jaw_open")
    lab[10:30, jaw] = 0.5
    lab[50:70, jaw] = 1.0
    out = post_process(_set(lab, [40, 40], ["a", "b"]))
    assert out.labels[20, jaw] == pytest.approx(1.0) and out.labels[60, jaw] == pytest.approx(1.0)


def test_post_process_short_recording_named():
    with pytest.raises(DataError, match="r1"):
        post_process(_set(np.zeros((23, N_BASES)), [20, 3]))


@given(st.integers(0, 2**31))
def test_post_process_stays_in_unit_box(seed):
    lab = np.random.default_rng(seed).uniform(size=(30, N_BASES))
    out = post_process(_set(lab, [12, 18], ["a", "b"])).labels
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_config_validation():
    for kw in ({"rounds": -1}, {"pool_size": 0}, {"pool_size": 1, "select_k": 3}, {"window": 4},
               {"p_lo": 90, "p_hi": 10}):
        with pytest.raises(ConfigError):
            DistillConfig(**kw)


# ---------------------------------------------------------------- selection and ensembling

def _member(i, score):
    return PoolMember(i, "raw", None, {}, score)


def test_select_single():
    only = _member(3, 0.1)
    assert select([only], 1) == [only]


def test_select_ranks_by_score():
    a, b = _member(0, 0.5), _member(1, 0.6)
    assert [m.id for m in select([a, b], 2)] == [1, 0]


def test_select_ties_prefer_lower_id():
    pool = [_member(5, 0.7), _member(2, 0.7), _member(9, 0.7)]
    assert [m.id for m in select(pool, 2)] == [2, 5]
    with pytest.raises(DataError):
        select([], 1)


def test_ensemble_of_identical_models():
    m = reg.init_model(4, d=4, h=4, hidden=4)
    x = np.random.default_rng(0).standard_normal((7, 5, 4))
    assert np.array_equal(ensemble_inference([m, m.copy(), m.copy()], x), reg.predict(m, x))


def test_ensemble_mean():
    x = np.zeros((3, 5, 4))
    out = ensemble_inference([_constant_model(0.2), _constant_model(0.6)], x)
    assert np.allclose(out, 0.4, atol=1e-15)


def test_ensemble_clamps():
    x = np.zeros((2, 5, 4))
    out = ensemble_inference([_constant_model(1.0), _constant_model(1.0)], x)
    assert out.max() == 1.0
    z = _constant_model(0.0)
    z.params["head_face_b2"][:] = -3.0
    out = ensemble_inference([z, _constant_model(0.5)], x)
    assert out.min() >= 0.0


def test_ensemble_errors():
    with pytest.raises(DataError):
        ensemble_inference([], np.zeros((1, 5, 4)))
    with pytest.raises(DataError):
        ensemble_inference([_constant_model(0.1), _constant_model(0.1, d=6)], np.zeros((1, 5, 4)))


# ---------------------------------------------------------------- the loop

TINY = TaskConfig(n_real_subjects=2, n_val_subjects=1, n_test_subjects=1, n_synthetic_subjects=1,
                  recordings_per_subject=4, synthetic_recordings_per_subject=4, n_vertices=600, hold=10)
FAST = reg.TrainConfig(epochs=2, h=8, hidden=16)


@pytest.fixture(scope="module")
def tiny():
    return make_task(2, TINY)


def _run(tiny, rounds, run_dir=None, resume=False, **kw):
    cfg = DistillConfig(rounds=rounds, pool_size=2, select_k=2, min_improvement=-1.0, **kw)
    return distill(tiny.real, tiny.synthetic, tiny.val, default_priors(), cfg, FAST, run_dir=run_dir,
                   resume=resume)


def test_zero_rounds_trains_on_post_processed_r0(tiny):
    res = _run(tiny, 0)
    assert res.rounds == [] and res.series == [res.initial_score]
    assert np.array_equal(res.labels.labels, tiny.real.labels)
    expected = post_process(tiny.real)
    final_cfg = replace(FAST, seed=model_seed(0, 1, 2, 0))
    direct, _ = reg.train(expected.features, expected.labels, tiny.synthetic.features, tiny.synthetic.labels,
                          final_cfg)
    assert np.array_equal(direct.flat(), res.model.flat())


def _hashes(run_dir, rounds):
    out = {}
    for t in rounds:
        for f in sorted((run_dir / f"round_{t:02d}").iterdir()):
            out[f"{t}/{f.name}"] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


def test_resume_leaves_completed_rounds_untouched(tiny, tmp_path):
    first = _run(tiny, 3, tmp_path)
    before = _hashes(tmp_path, [1, 2, 3])
    again = _run(tiny, 3, tmp_path, resume=True)
    assert _hashes(tmp_path, [1, 2, 3]) == before
    assert again.series == first.series
    assert np.array_equal(again.labels.labels, first.labels.labels)
    assert np.array_equal(again.model.flat(), first.model.flat())


def test_resume_after_partial_run(tiny, tmp_path):
    full = _run(tiny, 3)
    _run(tiny, 3, tmp_path)
    before = _hashes(tmp_path, [1, 2])
    for f in (tmp_path / "round_03").iterdir():
        f.unlink()
    resumed = _run(tiny, 3, tmp_path, resume=True)
    assert _hashes(tmp_path, [1, 2]) == before
    assert resumed.series == full.series
    assert np.array_equal(resumed.model.flat(), full.model.flat())


def test_resume_with_changed_config_is_rejected(tiny, tmp_path):
    _run(tiny, 1, tmp_path)
    with pytest.raises(ConfigError):
        _run(tiny, 1, tmp_path, resume=True, window=7)


def test_round_labels_stay_in_unit_box(tiny, tmp_path):
    res = _run(tiny, 2, tmp_path)
    for t in (1, 2):
        lab = LabeledSet.load(tmp_path / f"round_{t:02d}" / "labels").labels
        assert lab.min() >= 0.0 and lab.max() <= 1.0
    rounds = json.loads((tmp_path / "rounds.json").read_text())
    assert [r["round"] for r in rounds] == [1, 2]
    assert all(len(r["selected"]) == 2 for r in rounds)
    assert res.initial_model is not None


def test_early_stop_keeps_better_labels(tiny):
    cfg = DistillConfig(rounds=3, pool_size=1, select_k=1, min_improvement=10.0)
    res = distill(tiny.real, tiny.synthetic, tiny.val, default_priors(), cfg, FAST)
    assert res.stopped_early and len(res.rounds) == 1 and not res.rounds[0].accepted
    if res.rounds[0].label_score > res.initial_score:
        assert res.labels.round == 1
    else:
        assert np.array_equal(res.labels.labels, tiny.real.labels)


def test_parallel_pool_matches_serial(tiny):
    cfg = DistillConfig(rounds=1, pool_size=2, select_k=2, min_improvement=-1.0)
    a = distill(tiny.real, tiny.synthetic, tiny.val, default_priors(), cfg, FAST, jobs=1)
    b = distill(tiny.real, tiny.synthetic, tiny.val, default_priors(), cfg, FAST, jobs=2)
    assert np.array_equal(a.labels.labels, b.labels.labels)


def test_empty_inputs_rejected(tiny):
    empty = LabeledSet(np.zeros((0, 5, 32)), np.zeros((0, N_BASES)), [])
    with pytest.raises(DataError):
        distill(empty, tiny.synthetic, tiny.val, default_priors())
