"""Pinhole HMD cameras and the Visibility / Range-of-Motion placement metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hmdface.errors import DataError, ProjectionError
from hmdface.rig import (
    N_BASES,
    FaceRig,
    Mesh,
    RigidPose,
    check_weights,
    compute_normals,
    evaluate,
    keypoint_trajectory,
    yaw_pitch_rotation,
)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera looking along ``optical_axis`` from ``position``.

    The camera frame follows the image convention: x to the image right, y
    down, z along the optical axis.  ``up_hint`` is the world direction that
    should appear toward the top of the image.
    """

    position: np.ndarray
    optical_axis: np.ndarray
    up_hint: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    fx: float = 250.0
    fy: float = 250.0
    cx: float = 200.0
    cy: float = 200.0
    width: int = 400
    height: int = 400
    name: str = "cam"

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        axis = np.asarray(self.optical_axis, dtype=float)
        up = np.asarray(self.up_hint, dtype=float)
        if pos.shape != (3,) or axis.shape != (3,) or up.shape != (3,):
            raise DataError("camera position, axis and up hint must be 3-vectors")
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise DataError(f"camera {self.name!r}: optical axis must be unit length")
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise DataError(f"camera {self.name!r}: focal lengths and resolution must be positive")
        if np.linalg.norm(np.cross(axis, up)) < 1e-9:
            raise DataError(f"camera {self.name!r}: up hint is parallel to the optical axis")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "optical_axis", axis)
        object.__setattr__(self, "up_hint", up)

    @classmethod
    def look_at(cls, position, target, **kw) -> "Camera":
        d = np.asarray(target, dtype=float) - np.asarray(position, dtype=float)
        return cls(position=position, optical_axis=d / np.linalg.norm(d), **kw)

    @property
    def world_to_camera(self) -> np.ndarray:
        """Rows are the camera x, y, z axes in world coordinates."""
        z = self.optical_axis
        y = -(self.up_hint - (self.up_hint @ z) * z)
        y = y / np.linalg.norm(y)
        x = np.cross(y, z)
        return np.stack([x, y, z])

    def to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.position) @ self.world_to_camera.T

    def transformed(self, pose: RigidPose) -> "Camera":
        """The same camera after applying a rigid transform to the world."""
        R = pose.rotation
        return Camera(
            position=pose.apply(self.position), optical_axis=R @ self.optical_axis,
            up_hint=R @ self.up_hint, fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
            width=self.width, height=self.height, name=self.name,
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "position": self.position.tolist(),
            "optical_axis": self.optical_axis.tolist(),
            "up_hint": self.up_hint.tolist(),
            "intrinsics": {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy},
            "resolution": [self.width, self.height],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        intr = d.get("intrinsics", {})
        res = d.get("resolution", [400, 400])
        if "optical_axis" in d:
            axis = np.asarray(d["optical_axis"], dtype=float)
        elif "target" in d:
            axis = np.asarray(d["target"], dtype=float) - np.asarray(d["position"], dtype=float)
        else:
            raise DataError(f"camera {d.get('name')!r} needs optical_axis or target")
        axis = axis / np.linalg.norm(axis)
        return cls(
            position=d["position"], optical_axis=axis, up_hint=d.get("up_hint", [0.0, 1.0, 0.0]),
            fx=float(intr.get("fx", 250.0)), fy=float(intr.get("fy", 250.0)),
            cx=float(intr.get("cx", 200.0)), cy=float(intr.get("cy", 200.0)),
            width=int(res[0]), height=int(res[1]), name=d.get("name", "cam"),
        )


def project_with_flags(camera: Camera, points) -> tuple[np.ndarray, np.ndarray]:
    """Project (..., 3) points; returns pixels (..., 2) and a behind-camera mask.

    Behind-camera points get NaN pixels.
    """
    pc = camera.to_camera(points)
    z = pc[..., 2]
    behind = z <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * pc[..., 0] / z + camera.cx
        v = camera.fy * pc[..., 1] / z + camera.cy
    uv = np.stack([u, v], axis=-1)
    uv[behind] = np.nan
    return uv, behind


def project(camera: Camera, points) -> tuple[np.ndarray, np.ndarray]:
    uv, behind = project_with_flags(camera, points)
    if behind.size and behind.all():
        raise ProjectionError(f"all points lie behind camera {camera.name!r}")
    return uv, behind


def visibility(camera: Camera, mesh: Mesh, region) -> float:
    """Mean clamped cosine between region normals and the reversed optical axis."""
    idx = np.asarray(region, dtype=np.int64)
    if idx.size == 0:
        raise DataError("visibility of an empty region")
    mesh = mesh.with_normals()
    cos = mesh.normals[idx] @ (-camera.optical_axis)
    return float(np.mean(np.maximum(cos, 0.0)))


@dataclass
class ExpressionSet:
    expressions: list[tuple[str, np.ndarray]]

    def __post_init__(self):
        names = [n for n, _ in self.expressions]
        if len(set(names)) != len(names):
            raise DataError("expression names must be unique")
        self.expressions = [(n, check_weights(w)) for n, w in self.expressions]

    @property
    def neutral(self) -> np.ndarray:
        return np.zeros(N_BASES)

    @classmethod
    def from_recipes(cls, recipes: dict[str, dict[str, float]], names) -> "ExpressionSet":
        out = []
        for expr, recipe in recipes.items():
            w = np.zeros(N_BASES)
            for coef, val in recipe.items():
                w[names.index(coef)] = val
            out.append((expr, w))
        return cls(out)


def range_of_motion(camera: Camera, rig: FaceRig, expressions: ExpressionSet,
                    pose: RigidPose | None = None, keypoints=None) -> float:
    """Mean Frobenius norm (pixels) of projected keypoint motion away from neutral.

    ``keypoints`` optionally restricts the computation to a subset of keypoint
    positions (indices into ``rig.keypoint_indices``).
    """
    if not expressions.expressions:
        raise DataError("range of motion needs at least one expression")
    W = np.stack([expressions.neutral] + [w for _, w in expressions.expressions])
    R = None if pose is None else np.broadcast_to(pose.rotation, (len(W), 3, 3))
    t = None if pose is None else np.broadcast_to(pose.translation, (len(W), 3))
    K = keypoint_trajectory(rig, W, rotations=R, translations=t, subset=keypoints)
    uv, behind = project_with_flags(camera, K)
    for row, name in enumerate(["neutral"] + [n for n, _ in expressions.expressions]):
        if behind[row].any():
            raise ProjectionError(f"keypoint behind camera {camera.name!r} for expression {name!r}")
    diffs = uv[1:] - uv[0]
    return float(np.mean(np.sqrt(np.sum(diffs ** 2, axis=(1, 2)))))


def default_pose_samples(angles_deg=(5.0, 10.0)) -> list[RigidPose]:
    """Identity plus +/- yaw and +/- pitch samples (9 poses by default)."""
    poses = [RigidPose.identity()]
    for a in angles_deg:
        r = np.deg2rad(a)
        poses += [
            RigidPose(yaw_pitch_rotation(r, 0.0)), RigidPose(yaw_pitch_rotation(-r, 0.0)),
            RigidPose(yaw_pitch_rotation(0.0, r)), RigidPose(yaw_pitch_rotation(0.0, -r)),
        ]
    return poses


@dataclass
class CameraScore:
    name: str
    visibility: dict[str, tuple[float, float]]    # region -> (mean, min) over samples
    range_of_motion: tuple[float, float]          # (mean, min) over samples
    samples: int

    @property
    def aggregate(self) -> float:
        return float(np.mean([m for m, _ in self.visibility.values()]))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "visibility": {r: {"mean": m, "min": lo} for r, (m, lo) in self.visibility.items()},
            "range_of_motion": {"mean": self.range_of_motion[0], "min": self.range_of_motion[1]},
            "aggregate": self.aggregate,
            "samples": self.samples,
        }


@dataclass
class PlacementReport:
    cameras: list[CameraScore]

    @property
    def aggregate(self) -> float:
        return float(np.mean([c.aggregate for c in self.cameras]))

    def ranking(self) -> list[CameraScore]:
        return sorted(self.cameras, key=lambda c: (-c.aggregate, -c.range_of_motion[0], c.name))

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate,
            "ranking": [c.name for c in self.ranking()],
            "cameras": [c.to_dict() for c in self.cameras],
        }

    def ranking_table(self) -> str:
        rows = [("rank", "camera", "visibility", "vis_min", "range_of_motion", "rom_min")]
        for i, c in enumerate(self.ranking(), 1):
            vis_min = min(lo for _, lo in c.visibility.values())
            rows.append((str(i), c.name, f"{c.aggregate:.3f}", f"{vis_min:.3f}",
                         f"{c.range_of_motion[0]:.3f}", f"{c.range_of_motion[1]:.3f}"))
        return _align(rows)


def _align(rows) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def score_placement(cameras: list[Camera], rigs: list[FaceRig], expressions: ExpressionSet,
                    pose_samples: list[RigidPose], assignment: dict[str, list[str]],
                    keypoint_mode: str = "region") -> PlacementReport:
    """Score each camera over every (rig, head pose) sample.

    The head pose moves the face; cameras stay fixed to the headset.  With
    ``keypoint_mode="region"`` the range of motion only uses keypoints inside the
    camera's assigned regions.
    """
    if not cameras:
        raise DataError("no cameras to score")
    if not pose_samples:
        raise DataError("need at least one head-pose sample")
    for cam in cameras:
        if not assignment.get(cam.name):
            raise DataError(f"camera {cam.name!r} has no assigned region")

    vis = {c.name: {r: [] for r in assignment[c.name]} for c in cameras}
    rom = {c.name: [] for c in cameras}
    zeros = np.zeros(N_BASES)
    for ri, rig in enumerate(rigs):
        for pi, pose in enumerate(pose_samples):
            mesh = compute_normals(evaluate(rig, zeros, None, pose))
            for cam in cameras:
                regions = assignment[cam.name]
                for r in regions:
                    if r not in rig.regions:
                        raise DataError(f"camera {cam.name!r}: rig has no region {r!r}")
                    vis[cam.name][r].append(visibility(cam, mesh, rig.regions[r]))
                subset = None
                if keypoint_mode == "region":
                    subset = rig.region_keypoints(regions)
                    if subset.size == 0:
                        subset = None
                try:
                    rom[cam.name].append(range_of_motion(cam, rig, expressions, pose, subset))
                except ProjectionError as exc:
                    raise ProjectionError(f"rig {ri}, pose sample {pi}: {exc}") from exc

    scores = []
    for cam in cameras:
        v = {r: (float(np.mean(x)), float(np.min(x))) for r, x in vis[cam.name].items()}
        m = rom[cam.name]
        scores.append(CameraScore(cam.name, v, (float(np.mean(m)), float(np.min(m))), len(m)))
    return PlacementReport(scores)


def comparison_table(reports: dict[str, PlacementReport]) -> str:
    """Per-camera sections with Visibility / Range of Motion rows, one column per configuration.

    The best value in each row is marked with ``*``.
    """
    configs = list(reports)
    names = []
    for rep in reports.values():
        for c in rep.cameras:
            if c.name not in names:
                names.append(c.name)
    out = []
    for name in names:
        rows = [(name, *configs)]
        for label, get in (("Visibility", lambda c: c.aggregate),
                           ("Range of Motion", lambda c: c.range_of_motion[0])):
            vals = []
            for cfg in configs:
                match = [c for c in reports[cfg].cameras if c.name == name]
                vals.append(get(match[0]) if match else None)
            best = max((v for v in vals if v is not None), default=None)
            cells = ["-" if v is None else f"{v:.3f}" + ("*" if v == best and len(configs) > 1 else "")
                     for v in vals]
            rows.append((label, *cells))
        out.append(_align(rows))
    return "\n".join(out)


# ---------------------------------------------------------------- camera-set files

def camera_set_from_dict(doc: dict) -> dict[str, tuple[list[Camera], dict[str, list[str]]]]:
    """Parse a camera-set document into ``{config: (cameras, assignment)}``."""
    if "configurations" in doc:
        configs = doc["configurations"]
    elif "cameras" in doc:
        configs = [{"name": doc.get("name", "default"), "cameras": doc["cameras"]}]
    else:
        raise DataError("camera-set document needs 'configurations' or 'cameras'")
    out = {}
    for cfg in configs:
        cams, assign = [], {}
        for cd in cfg["cameras"]:
            cam = Camera.from_dict(cd)
            cams.append(cam)
            assign[cam.name] = list(cd.get("regions", []))
        out[cfg["name"]] = (cams, assign)
    return out


def camera_set_to_dict(configs: dict[str, tuple[list[Camera], dict[str, list[str]]]]) -> dict:
    return {"configurations": [
        {"name": name, "cameras": [dict(c.to_dict(), regions=assign[c.name]) for c in cams]}
        for name, (cams, assign) in configs.items()
    ]}


def load_camera_set(path):
    return camera_set_from_dict(json.loads(Path(path).read_text()))
