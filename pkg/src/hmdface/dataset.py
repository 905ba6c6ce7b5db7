"""Frame sets grouped by (subject, recording), with labels and annotations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hmdface.errors import DataError
from hmdface.metrics import RecordingAnnotation
from hmdface.rig import N_BASES


@dataclass
class Recording:
    name: str
    subject: str
    start: int
    stop: int

    @property
    def length(self) -> int:
        return self.stop - self.start


@dataclass
class LabeledSet:
    """Contiguous per-recording frames.

    ``labels`` are the working labels (pseudo labels for real data); ``truth``
    holds oracle labels when they are known.
    """

    features: np.ndarray                        # (N, 5, d)
    labels: np.ndarray                          # (N, 53)
    recordings: list[Recording]
    annotations: dict[str, RecordingAnnotation] = field(default_factory=dict)
    truth: np.ndarray | None = None
    domain: str = "real"
    round: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        n = len(self.features)
        if self.labels.shape != (n, N_BASES):
            raise DataError(f"need one {N_BASES}-vector label per frame")
        if self.round < 0:
            raise DataError("round index must be non-negative")
        pos = 0
        for r in self.recordings:
            if r.start != pos or r.stop <= r.start:
                raise DataError(f"recording {r.name!r} is not contiguous with the previous one")
            pos = r.stop
            ann = self.annotations.get(r.name)
            if ann is not None and ann.length != r.length:
                raise DataError(f"annotation length mismatch for {r.name!r}")
        if pos != n:
            raise DataError("recordings do not cover every frame")
        if len({r.name for r in self.recordings}) != len(self.recordings):
            raise DataError("recording names must be unique")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def subject_of(self) -> dict[str, str]:
        return {r.name: r.subject for r in self.recordings}

    @property
    def subjects(self) -> list[str]:
        return sorted({r.subject for r in self.recordings})

    @property
    def bounds(self) -> list[tuple[int, int]]:
        return [(r.start, r.stop) for r in self.recordings]

    def subject_frames(self, subject: str) -> np.ndarray:
        return np.concatenate([np.arange(r.start, r.stop) for r in self.recordings if r.subject == subject])

    def split(self, values) -> dict[str, np.ndarray]:
        """Per-recording views of a per-frame array."""
        return {r.name: values[r.start:r.stop] for r in self.recordings}

    def with_labels(self, labels, round: int | None = None) -> "LabeledSet":
        return LabeledSet(self.features, labels, self.recordings, self.annotations, self.truth,
                          self.domain, self.round if round is None else round)

    # ------------------------------------------------------------ files

    def save(self, path) -> None:
        path = Path(path)
        arrays = {"features": self.features, "labels": self.labels}
        if self.truth is not None:
            arrays["truth"] = self.truth
        np.savez(path.with_suffix(".npz"), **arrays)
        meta = {
            "domain": self.domain,
            "round": self.round,
            "recordings": [[r.name, r.subject, r.start, r.stop] for r in self.recordings],
            "annotations": {k: v.to_dict() for k, v in self.annotations.items()},
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "LabeledSet":
        path = Path(path)
        if not path.with_suffix(".npz").exists():
            raise DataError(f"missing frame file {path.with_suffix('.npz')}")
        with np.load(path.with_suffix(".npz")) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(
            arrays["features"], arrays["labels"],
            [Recording(n, s, int(a), int(b)) for n, s, a, b in meta["recordings"]],
            {k: RecordingAnnotation.from_dict(v) for k, v in meta["annotations"].items()},
            arrays.get("truth"), meta["domain"], int(meta["round"]),
        )


def concatenate(parts: list[LabeledSet]) -> LabeledSet:
    if not parts:
        raise DataError("nothing to concatenate")
    recs, off = [], 0
    for p in parts:
        recs += [Recording(r.name, r.subject, r.start + off, r.stop + off) for r in p.recordings]
        off += len(p)
    truth = None
    if all(p.truth is not None for p in parts):
        truth = np.concatenate([p.truth for p in parts])
    anns = {}
    for p in parts:
        anns.update(p.annotations)
    return LabeledSet(np.concatenate([p.features for p in parts]), np.concatenate([p.labels for p in parts]),
                      recs, anns, truth, parts[0].domain, parts[0].round)
