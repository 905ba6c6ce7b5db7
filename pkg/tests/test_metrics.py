import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmdface.errors import DataError
from hmdface.metrics import (METRIC_NAMES, RecordingAnnotation, Segment, aggregate, check_priors, evaluate_recording,
                             evaluate_sequences, eye_closure, load_annotations, metric_table, mouth_closure,
                             neutralness, priors_from_dict, priors_to_dict, semantic_accuracy, smoothness,
                             weighted_score)
from hmdface.rig import N_BASES, STANDARD_LAYOUT

L = STANDARD_LAYOUT
JAW = L.index("jaw_open")
MOUTH = L.index("mouth_funnel")
BLINK_L = L.designated_index("eye_close_l")
BLINK_R = L.designated_index("eye_close_r")
MCLOSE = L.designated_index("mouth_close")
PRIORS = {"jaw_drop": [(JAW, 0.8), (MOUTH, 0.5)], "wink_left": [(BLINK_L, 0.8)],
          "eyes_closed": [(BLINK_L, 0.8), (BLINK_R, 0.8)], "mouth_close": [(MCLOSE, 0.8)]}


def ann(peak="jaw_drop", n=30):
    return RecordingAnnotation([Segment(0, 10, "neutral"), Segment(10, 12, "transition"),
                                Segment(12, 20, "peak", peak), Segment(20, 22, "transition"),
                                Segment(22, n, "neutral")], n)


# ---------------------------------------------------------------- semantic accuracy

def test_sa_priors_met_exactly():
    pred = np.zeros((30, N_BASES))
    pred[12:20, JAW], pred[12:20, MOUTH] = 0.8, 0.5
    assert semantic_accuracy(pred, ann(), PRIORS) == 1.0


def test_sa_zero_predictions():
    assert semantic_accuracy(np.zeros((30, N_BASES)), ann(), PRIORS) == 0.0


def test_sa_one_of_two_entries():
    pred = np.zeros((30, N_BASES))
    pred[15, JAW], pred[15, MOUTH] = 0.9, 0.3
    assert semantic_accuracy(pred, ann(), PRIORS) == 0.5


def test_sa_unknown_expression():
    with pytest.raises(DataError):
        semantic_accuracy(np.zeros((30, N_BASES)), ann("nope"), PRIORS)


@given(st.integers(0, 2**31))
def test_sa_monotone_under_increases(seed):
    r = np.random.default_rng(seed)
    pred = r.uniform(size=(30, N_BASES))
    bumped = np.minimum(1.0, pred + r.uniform(size=pred.shape) * (r.uniform(size=pred.shape) < 0.3))
    assert semantic_accuracy(bumped, ann(), PRIORS) >= semantic_accuracy(pred, ann(), PRIORS)


# ---------------------------------------------------------------- neutralness

def test_neutralness_extremes():
    assert neutralness(np.zeros((30, N_BASES)), ann()) == 1.0
    assert neutralness(np.ones((30, N_BASES)), ann()) == 0.0


def test_neutralness_half_violating():
    keep = np.setdiff1d(np.arange(N_BASES), L.gaze_following_idx)
    pred = np.zeros((30, N_BASES))
    neutral_frames = np.r_[0:10, 22:30]
    # first half of the neutral frames violate on every counted coefficient
    pred[np.ix_(neutral_frames[:9], keep)] = 0.5
    # gaze-following coefficients are not counted
    pred[:, L.gaze_following_idx] = 1.0
    assert neutralness(pred, ann()) == 0.5


def test_neutralness_needs_neutral_segment():
    a = RecordingAnnotation([Segment(0, 5, "peak", "jaw_drop")], 5)
    with pytest.raises(DataError):
        neutralness(np.zeros((5, N_BASES)), a)


@given(st.integers(0, 2**31))
def test_neutralness_monotone(seed):
    r = np.random.default_rng(seed)
    pred = r.uniform(0, 0.2, size=(30, N_BASES))
    bumped = pred + r.uniform(0, 0.2, size=pred.shape)
    assert neutralness(bumped, ann()) <= neutralness(pred, ann())


# ---------------------------------------------------------------- smoothness

def test_smoothness_constant_and_ramp():
    assert smoothness(np.full((10, N_BASES), 0.3)) == 1.0
    ramp = np.linspace(0, 1, 10)[:, None] * np.ones(N_BASES)
    assert smoothness(ramp) == pytest.approx(1.0, abs=1e-14)


def test_smoothness_alternating_channel():
    pred = np.zeros((4, N_BASES))
    pred[:, 7] = [0, 1, 0, 1]
    # second differences on that channel: |0 - 2 + 0| = 2 and |1 - 0 + 1| = 2
    assert smoothness(pred) == pytest.approx(np.exp(-(2.0 / N_BASES) / 0.05), rel=1e-14)


def test_smoothness_too_short():
    with pytest.raises(DataError):
        smoothness(np.zeros((2, N_BASES)))


# ---------------------------------------------------------------- closure

def test_eye_closure_cases():
    a = ann("eyes_closed")
    pred = np.zeros((30, N_BASES))
    pred[14, [BLINK_L, BLINK_R]] = 1.0
    assert eye_closure(pred, a) == 1.0
    pred[14, [BLINK_L, BLINK_R]] = 0.5
    assert eye_closure(pred, a) == 0.0


def test_left_wink_with_both_closed_fails():
    a = ann("wink_left")
    pred = np.zeros((30, N_BASES))
    pred[14, BLINK_L] = 1.0
    assert eye_closure(pred, a) == 1.0
    pred[14, BLINK_R] = 1.0
    assert eye_closure(pred, a) == 0.0


def test_mouth_closure_cases():
    a = ann("mouth_close")
    pred = np.zeros((30, N_BASES))
    pred[13, MCLOSE] = 1.0
    assert mouth_closure(pred, a) == 1.0
    pred[13, MCLOSE] = 0.5
    assert mouth_closure(pred, a) == 0.0
    with pytest.raises(DataError):
        mouth_closure(pred, ann("jaw_drop"))


# ---------------------------------------------------------------- aggregation

def _scores(v):
    return {k: v for k in METRIC_NAMES}


def test_single_recording_all_levels_equal():
    rep = aggregate({"r": _scores(0.3)}, {"r": "s"})
    assert rep.recording["r"] == rep.subject["s"] == rep.dataset


def test_two_subject_mean():
    rep = aggregate({"a": _scores(0.4), "b": _scores(0.8)}, {"a": "s1", "b": "s2"})
    assert rep.dataset["semantic_accuracy"] == pytest.approx(0.6, abs=1e-15)


def test_two_level_not_frame_pooling():
    rep = aggregate({"a": _scores(0.0), "b": _scores(1.0), "c": _scores(0.5)}, {"a": "s1", "b": "s1", "c": "s2"})
    assert rep.dataset["neutralness"] == 0.5


@given(st.integers(0, 2**31))
def test_aggregation_identity(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 12))
    recs = {f"r{i}": {k: float(r.uniform()) for k in METRIC_NAMES} for i in range(n)}
    subj = {f"r{i}": f"s{r.integers(3)}" for i in range(n)}
    rep = aggregate(recs, subj)
    for s, vals in rep.subject.items():
        members = [x for x in recs if subj[x] == s]
        for k in METRIC_NAMES:
            assert vals[k] == sum(recs[x][k] for x in members) / len(members)
    for k in METRIC_NAMES:
        assert rep.dataset[k] == sum(rep.subject[s][k] for s in rep.subject) / len(rep.subject)


def test_aggregate_errors():
    with pytest.raises(DataError):
        aggregate({}, {})
    with pytest.raises(DataError):
        aggregate({"a": _scores(0.1)}, {})


def test_nan_metrics_are_skipped():
    recs = {"a": dict(_scores(0.2), eye_closure=float("nan")), "b": _scores(0.6)}
    rep = aggregate(recs, {"a": "s", "b": "s"})
    assert rep.dataset["eye_closure"] == 0.6
    assert np.isnan(weighted_score({k: float("nan") for k in METRIC_NAMES}))


def test_weighted_score_doubles_semantic_accuracy():
    s = dict(_scores(0.0), semantic_accuracy=1.0)
    assert weighted_score(s) == pytest.approx(2.0 / 6.0)


# ---------------------------------------------------------------- fuzz

def test_metrics_bounded_under_fuzz():
    r = np.random.default_rng(8)
    kinds = ["jaw_drop", "wink_left", "eyes_closed", "mouth_close"]
    for _ in range(10_000):
        n = int(r.integers(24, 40))
        pred = r.uniform(size=(n, N_BASES)) ** r.uniform(0.2, 5.0)
        out = evaluate_recording(pred, ann(kinds[r.integers(4)], n), PRIORS)
        for k, v in out.items():
            assert np.isnan(v) or 0.0 <= v <= 1.0, (k, v)


# ---------------------------------------------------------------- files and tables

def test_evaluate_sequences_and_table():
    preds = {"a": np.zeros((30, N_BASES)), "b": np.zeros((30, N_BASES))}
    anns = {"a": ann(), "b": ann("mouth_close")}
    rep = evaluate_sequences(preds, anns, {"a": "s", "b": "s"}, PRIORS)
    table = metric_table({"zeros": rep.dataset})
    assert table.splitlines()[0].split()[:2] == ["Semantic", "Accuracy"]
    assert "zeros" in table


def test_priors_and_annotation_files(tmp_path):
    check_priors(PRIORS)
    back = priors_from_dict(priors_to_dict(PRIORS))
    assert back == {k: [(c, m) for c, m in v] for k, v in PRIORS.items()}
    with pytest.raises(DataError):
        priors_from_dict({"x": []})
    with pytest.raises(DataError):
        check_priors({"x": [(0, 1.5)]})
    import json
    p = tmp_path / "ann.json"
    p.write_text(json.dumps({"r": ann().to_dict()}))
    assert load_annotations(p)["r"] == ann()


def test_annotation_validation():
    with pytest.raises(DataError):
        RecordingAnnotation([Segment(0, 5, "neutral"), Segment(3, 8, "neutral")], 10)
    with pytest.raises(DataError):
        RecordingAnnotation([Segment(0, 11, "neutral")], 10)
    with pytest.raises(DataError):
        RecordingAnnotation([Segment(0, 5, "peak")], 10)
