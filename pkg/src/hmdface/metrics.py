"""Heuristic blendshape metrics with recording / subject / dataset aggregation.

None of the metrics look at ground-truth labels: they only need predicted
coefficient curves, a segment annotation per recording and the art priors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hmdface.errors import DataError
from hmdface.rig import STANDARD_LAYOUT, BasisLayout

METRIC_NAMES = ("semantic_accuracy", "neutralness", "smoothness", "eye_closure", "mouth_closure")
METRIC_TITLES = ("Semantic Accuracy", "Neutralness", "Smoothness", "Eye Closure", "Mouth Closure")

EYE_CLOSURE_PEAKS = {"eyes_closed": "both", "wink_left": "left", "wink_right": "right"}
MOUTH_CLOSURE_PEAKS = ("mouth_close",)


@dataclass(frozen=True)
class Segment:
    start: int
    stop: int          # exclusive
    kind: str          # "neutral" | "transition" | "peak"
    name: str = ""     # expression name for peaks

    def to_list(self):
        return [self.start, self.stop, self.kind, self.name]


@dataclass
class RecordingAnnotation:
    segments: list[Segment]
    length: int

    def __post_init__(self):
        prev = 0
        for s in self.segments:
            if s.kind not in ("neutral", "transition", "peak"):
                raise DataError(f"unknown segment kind {s.kind!r}")
            if s.start < prev or s.stop <= s.start or s.stop > self.length:
                raise DataError(f"segment {s} overlaps, is empty or exceeds length {self.length}")
            if s.kind == "peak" and not s.name:
                raise DataError("peak segments need an expression name")
            prev = s.stop

    def of_kind(self, kind: str) -> list[Segment]:
        return [s for s in self.segments if s.kind == kind]

    def to_dict(self) -> dict:
        return {"length": self.length, "segments": [s.to_list() for s in self.segments]}

    @classmethod
    def from_dict(cls, d: dict) -> "RecordingAnnotation":
        return cls([Segment(int(a), int(b), k, n) for a, b, k, n in d["segments"]], int(d["length"]))


# expression name -> [(coefficient index, minimum activation)]
ArtPriors = dict[str, list[tuple[int, float]]]


def check_priors(priors: ArtPriors) -> None:
    for name, entries in priors.items():
        if not entries:
            raise DataError(f"art prior for {name!r} is empty")
        for _, m in entries:
            if not 0.0 < m <= 1.0:
                raise DataError(f"art prior minimum activation {m} for {name!r} outside (0, 1]")


def semantic_accuracy(pred, annotation: RecordingAnnotation, priors: ArtPriors) -> float:
    pred = np.asarray(pred, dtype=float)
    peaks = annotation.of_kind("peak")
    if not peaks:
        raise DataError("semantic accuracy needs at least one peak segment")
    scores = []
    for seg in peaks:
        if seg.name not in priors:
            raise DataError(f"no art prior for expression {seg.name!r}")
        entries = priors[seg.name]
        peak_max = pred[seg.start:seg.stop].max(axis=0)
        scores.append(np.mean([peak_max[c] >= m for c, m in entries]))
    return float(np.mean(scores))


def neutralness(pred, annotation: RecordingAnnotation, threshold: float = 0.1,
                layout: BasisLayout = STANDARD_LAYOUT) -> float:
    pred = np.asarray(pred, dtype=float)
    neutral = annotation.of_kind("neutral")
    if not neutral:
        raise DataError("neutralness needs at least one neutral segment")
    keep = np.setdiff1d(np.arange(pred.shape[1]), layout.gaze_following_idx)
    frames = np.concatenate([pred[s.start:s.stop] for s in neutral])[:, keep]
    return float(np.mean(frames < threshold))


def smoothness(pred, sigma: float = 0.05) -> float:
    pred = np.asarray(pred, dtype=float)
    if len(pred) < 3:
        raise DataError("smoothness needs at least 3 frames")
    second = np.abs(pred[2:] - 2.0 * pred[1:-1] + pred[:-2])
    return float(np.exp(-second.mean() / sigma))


def eye_closure(pred, annotation: RecordingAnnotation, layout: BasisLayout = STANDARD_LAYOUT,
                closed: float = 0.9, open_bound: float = 0.5) -> float:
    pred = np.asarray(pred, dtype=float)
    left = layout.designated_index("eye_close_l")
    right = layout.designated_index("eye_close_r")
    segs = [s for s in annotation.of_kind("peak") if s.name in EYE_CLOSURE_PEAKS]
    if not segs:
        raise DataError("no eye-closure peaks in annotation")
    hits = []
    for s in segs:
        mx = pred[s.start:s.stop].max(axis=0)
        side = EYE_CLOSURE_PEAKS[s.name]
        if side == "both":
            hits.append(min(mx[left], mx[right]) >= closed)
        else:
            shut, other = (left, right) if side == "left" else (right, left)
            hits.append(mx[shut] >= closed and mx[other] < open_bound)
    return float(np.mean(hits))


def mouth_closure(pred, annotation: RecordingAnnotation, layout: BasisLayout = STANDARD_LAYOUT,
                  closed: float = 0.9) -> float:
    pred = np.asarray(pred, dtype=float)
    idx = layout.designated_index("mouth_close")
    segs = [s for s in annotation.of_kind("peak") if s.name in MOUTH_CLOSURE_PEAKS]
    if not segs:
        raise DataError("no mouth-closure peaks in annotation")
    return float(np.mean([pred[s.start:s.stop, idx].max() >= closed for s in segs]))


@dataclass
class MetricConfig:
    neutral_threshold: float = 0.1
    smoothness_sigma: float = 0.05
    closure_threshold: float = 0.9
    wink_open_bound: float = 0.5
    weights: dict[str, float] = field(default_factory=lambda: {
        "semantic_accuracy": 2.0, "neutralness": 1.0, "smoothness": 1.0,
        "eye_closure": 1.0, "mouth_closure": 1.0,
    })


def evaluate_recording(pred, annotation: RecordingAnnotation, priors: ArtPriors,
                       layout: BasisLayout = STANDARD_LAYOUT,
                       config: MetricConfig | None = None) -> dict[str, float]:
    """All five metrics for one recording; NaN where a metric does not apply."""
    cfg = config or MetricConfig()
    names = {s.name for s in annotation.of_kind("peak")}
    out = {k: float("nan") for k in METRIC_NAMES}
    if names:
        out["semantic_accuracy"] = semantic_accuracy(pred, annotation, priors)
    if annotation.of_kind("neutral"):
        out["neutralness"] = neutralness(pred, annotation, cfg.neutral_threshold, layout)
    if len(pred) >= 3:
        out["smoothness"] = smoothness(pred, cfg.smoothness_sigma)
    if names & set(EYE_CLOSURE_PEAKS):
        out["eye_closure"] = eye_closure(pred, annotation, layout, cfg.closure_threshold, cfg.wink_open_bound)
    if names & set(MOUTH_CLOSURE_PEAKS):
        out["mouth_closure"] = mouth_closure(pred, annotation, layout, cfg.closure_threshold)
    return out


def _mean(values):
    vals = [v for v in values if not np.isnan(v)]
    return sum(vals) / len(vals) if vals else float("nan")


@dataclass
class MetricReport:
    recording: dict[str, dict[str, float]]
    subject: dict[str, dict[str, float]]
    dataset: dict[str, float]
    subject_of: dict[str, str]

    def weighted(self, weights: dict[str, float] | None = None) -> float:
        return weighted_score(self.dataset, weights)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "subject": self.subject,
            "recording": self.recording,
            "subject_of": self.subject_of,
        }


def weighted_score(scores: dict[str, float], weights: dict[str, float] | None = None) -> float:
    """Weighted mean of the available metrics (NaN metrics are skipped)."""
    weights = weights or MetricConfig().weights
    num = den = 0.0
    for k in METRIC_NAMES:
        v = scores.get(k, float("nan"))
        if not np.isnan(v):
            num += weights.get(k, 0.0) * v
            den += weights.get(k, 0.0)
    return num / den if den else float("nan")


def aggregate(recording_scores: dict[str, dict[str, float]], subject_of: dict[str, str]) -> MetricReport:
    """Recording scores -> subject means -> dataset mean (unweighted, NaN-skipping)."""
    if not recording_scores:
        raise DataError("nothing to aggregate")
    missing = [r for r in recording_scores if r not in subject_of]
    if missing:
        raise DataError(f"recordings without subject: {missing}")
    subjects: dict[str, list[str]] = {}
    for rec in recording_scores:
        subjects.setdefault(subject_of[rec], []).append(rec)
    subject = {
        s: {k: _mean([recording_scores[r][k] for r in recs]) for k in METRIC_NAMES}
        for s, recs in subjects.items()
    }
    dataset = {k: _mean([subject[s][k] for s in subject]) for k in METRIC_NAMES}
    return MetricReport(dict(recording_scores), subject, dataset,
                        {r: subject_of[r] for r in recording_scores})


def evaluate_sequences(preds: dict[str, np.ndarray], annotations: dict[str, RecordingAnnotation],
                       subject_of: dict[str, str], priors: ArtPriors,
                       layout: BasisLayout = STANDARD_LAYOUT,
                       config: MetricConfig | None = None) -> MetricReport:
    scores = {r: evaluate_recording(preds[r], annotations[r], priors, layout, config) for r in preds}
    return aggregate(scores, subject_of)


def metric_table(rows: dict[str, dict[str, float]]) -> str:
    """Plain-text table: one row per labelled source, one column per metric."""
    header = ["", *METRIC_TITLES]
    body = [[name, *("-" if np.isnan(s.get(k, np.nan)) else f"{s[k]:.3f}" for k in METRIC_NAMES)]
            for name, s in rows.items()]
    table = [header, *body]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in table]
    return "\n".join(l.rstrip() for l in lines) + "\n"


# ---------------------------------------------------------------- files

def priors_to_dict(priors: ArtPriors, layout: BasisLayout = STANDARD_LAYOUT) -> dict:
    return {e: [[layout.names[c], m] for c, m in entries] for e, entries in priors.items()}


def priors_from_dict(doc: dict, layout: BasisLayout = STANDARD_LAYOUT) -> ArtPriors:
    priors = {e: [(layout.index(n), float(m)) for n, m in entries] for e, entries in doc.items()}
    check_priors(priors)
    return priors


def load_priors(path, layout: BasisLayout = STANDARD_LAYOUT) -> ArtPriors:
    return priors_from_dict(json.loads(Path(path).read_text()), layout)


def load_annotations(path) -> dict[str, RecordingAnnotation]:
    doc = json.loads(Path(path).read_text())
    return {k: RecordingAnnotation.from_dict(v) for k, v in doc.items()}
