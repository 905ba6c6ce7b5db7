"""Blendshape face model: linear expression bases, gaze-following bases, rigid motion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hmdface.errors import DataError

N_BASES = 53
N_GAZE = 8
N_KEYPOINTS = 100

# Sided bases are listed left/right; the per-eye groups are mirror-paired by position.
_EYE_SIDE = (
    "eye_blink", "eye_squint", "eye_wide",
    "brow_down", "brow_inner_up", "brow_outer_up",
    "eye_look_out", "eye_look_in", "eye_look_up", "eye_look_down",
)
_FACE = (
    "cheek_puff", "cheek_squint_l", "cheek_squint_r",
    "jaw_forward", "jaw_left", "jaw_right", "jaw_open",
    "mouth_close", "mouth_dimple_l", "mouth_dimple_r",
    "mouth_frown_l", "mouth_frown_r", "mouth_funnel",
    "mouth_left", "mouth_right",
    "mouth_lower_down_l", "mouth_lower_down_r",
    "mouth_press_l", "mouth_press_r", "mouth_pucker",
    "mouth_roll_lower", "mouth_roll_upper",
    "mouth_shrug_lower", "mouth_shrug_upper",
    "mouth_smile_l", "mouth_smile_r",
    "mouth_stretch_l", "mouth_stretch_r",
    "mouth_upper_up_l", "mouth_upper_up_r",
    "nose_sneer_l", "nose_sneer_r", "tongue_out",
)
BASIS_NAMES: tuple[str, ...] = (
    tuple(f"{n}_l" for n in _EYE_SIDE) + tuple(f"{n}_r" for n in _EYE_SIDE) + _FACE
)
assert len(BASIS_NAMES) == N_BASES

# per eye: look-left, look-right, look-up, look-down (left eye first)
GAZE_NAMES: tuple[str, ...] = tuple(
    f"gaze_{d}_{s}" for s in ("l", "r") for d in ("left", "right", "up", "down")
)

YAW_MAX = np.pi / 4
PITCH_MAX = np.pi / 4

REQUIRED_REGIONS = (
    "eye_l", "eye_r", "mouth", "glabella", "brow_l", "brow_r", "jaw", "eyelid_l", "eyelid_r",
)


@dataclass(frozen=True)
class BasisLayout:
    """Semantic roles of the 53 coefficients.

    ``eye_l`` and ``eye_r`` are ordered so that position ``i`` of one is the
    mirror image of position ``i`` of the other; the shared eye head relies on it.
    """

    names: tuple[str, ...]
    designated: dict[str, str]
    eye_l: tuple[str, ...]
    eye_r: tuple[str, ...]
    gaze_following: tuple[str, ...]
    # label coefficients driven by gaze_to_weights, in GAZE_NAMES order
    gaze_coefficients: tuple[str, ...]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown blendshape coefficient {name!r}") from None

    def designated_index(self, role: str) -> int:
        if role not in self.designated:
            raise DataError(f"rig metadata has no designated coefficient for {role!r}")
        return self.index(self.designated[role])

    @property
    def eye_l_idx(self) -> np.ndarray:
        return np.array([self.index(n) for n in self.eye_l])

    @property
    def eye_r_idx(self) -> np.ndarray:
        return np.array([self.index(n) for n in self.eye_r])

    @property
    def face_idx(self) -> np.ndarray:
        eyes = set(self.eye_l) | set(self.eye_r)
        return np.array([i for i, n in enumerate(self.names) if n not in eyes])

    @property
    def gaze_following_idx(self) -> np.ndarray:
        return np.array([self.index(n) for n in self.gaze_following])

    @property
    def gaze_coefficient_idx(self) -> np.ndarray:
        return np.array([self.index(n) for n in self.gaze_coefficients])

    def to_dict(self) -> dict:
        return {
            "designated": dict(self.designated),
            "eye_subset_l": list(self.eye_l),
            "eye_subset_r": list(self.eye_r),
            "gaze_following": list(self.gaze_following),
            "gaze_coefficients": list(self.gaze_coefficients),
        }

    @classmethod
    def from_dict(cls, names, meta: dict) -> "BasisLayout":
        return cls(
            names=tuple(names),
            designated=dict(meta["designated"]),
            eye_l=tuple(meta["eye_subset_l"]),
            eye_r=tuple(meta["eye_subset_r"]),
            gaze_following=tuple(meta["gaze_following"]),
            gaze_coefficients=tuple(meta["gaze_coefficients"]),
        )


STANDARD_LAYOUT = BasisLayout(
    names=BASIS_NAMES,
    designated={
        "eye_close_l": "eye_blink_l",
        "eye_close_r": "eye_blink_r",
        "jaw_drop": "jaw_open",
        "smile_l": "mouth_smile_l",
        "smile_r": "mouth_smile_r",
        "brow_raise_l": "brow_inner_up_l",
        "brow_raise_r": "brow_inner_up_r",
        "mouth_close": "mouth_close",
    },
    eye_l=tuple(f"{n}_l" for n in _EYE_SIDE),
    eye_r=tuple(f"{n}_r" for n in _EYE_SIDE),
    gaze_following=tuple(f"eye_look_{d}_{s}" for s in ("l", "r") for d in ("out", "in", "up", "down")),
    # left eye looking left is outward; right eye looking left is inward
    gaze_coefficients=(
        "eye_look_out_l", "eye_look_in_l", "eye_look_up_l", "eye_look_down_l",
        "eye_look_in_r", "eye_look_out_r", "eye_look_up_r", "eye_look_down_r",
    ),
)


@dataclass(frozen=True)
class GazePair:
    """Yaw/pitch in radians per eye; positive yaw looks toward the subject's left."""

    left: tuple[float, float] = (0.0, 0.0)
    right: tuple[float, float] = (0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.left, self.right], dtype=float)


@dataclass(frozen=True)
class RigidPose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float)
        if R.shape != (3, 3) or t.shape != (3,):
            raise DataError("pose needs a 3x3 rotation and a 3-vector translation")
        check_rotation(R)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


@dataclass
class FrameLabel:
    weights: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    gaze: np.ndarray | None = None


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None
    degenerate: np.ndarray | None = None

    def with_normals(self) -> "Mesh":
        if self.normals is not None:
            return self
        return compute_normals(self, self.triangles)


@dataclass(frozen=True)
class FaceRig:
    vertices_neutral: np.ndarray            # (V, 3)
    triangles: np.ndarray                   # (F, 3)
    expr_deltas: np.ndarray                 # (53, V, 3)
    gaze_deltas: np.ndarray                 # (8, V, 3)
    keypoint_indices: np.ndarray            # (100,)
    regions: dict[str, np.ndarray]
    basis_names: tuple[str, ...] = BASIS_NAMES
    layout: BasisLayout = STANDARD_LAYOUT
    # keypoint i mirrors keypoint keypoint_mirror[i] across the sagittal plane
    keypoint_mirror: np.ndarray | None = None

    def __post_init__(self):
        V = np.asarray(self.vertices_neutral, dtype=float)
        if V.ndim != 2 or V.shape[1] != 3:
            raise DataError("vertices_neutral must be (V, 3)")
        n = len(V)
        E = np.asarray(self.expr_deltas, dtype=float)
        G = np.asarray(self.gaze_deltas, dtype=float)
        if E.shape != (N_BASES, n, 3):
            raise DataError(f"expr_deltas must be ({N_BASES}, {n}, 3), got {E.shape}")
        if G.shape != (N_GAZE, n, 3):
            raise DataError(f"gaze_deltas must be ({N_GAZE}, {n}, 3), got {G.shape}")
        T = np.asarray(self.triangles, dtype=np.int64)
        if T.ndim != 2 or T.shape[1] != 3 or (T.size and (T.min() < 0 or T.max() >= n)):
            raise DataError("triangles must be (F, 3) vertex indices")
        K = np.asarray(self.keypoint_indices, dtype=np.int64)
        if K.shape != (N_KEYPOINTS,):
            raise DataError(f"need exactly {N_KEYPOINTS} keypoints, got {K.shape}")
        if K.min() < 0 or K.max() >= n or len(np.unique(K)) != N_KEYPOINTS:
            raise DataError("keypoint indices must be distinct valid vertex indices")
        regions = {}
        for name, idx in self.regions.items():
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size == 0 or idx.min() < 0 or idx.max() >= n:
                raise DataError(f"region {name!r} is empty or out of bounds")
            regions[name] = idx
        missing = [r for r in REQUIRED_REGIONS if r not in regions]
        if missing:
            raise DataError(f"rig lacks regions {missing}")
        if len(self.basis_names) != N_BASES:
            raise DataError(f"need {N_BASES} basis names")
        object.__setattr__(self, "vertices_neutral", V)
        object.__setattr__(self, "expr_deltas", E)
        object.__setattr__(self, "gaze_deltas", G)
        object.__setattr__(self, "triangles", T)
        object.__setattr__(self, "keypoint_indices", K)
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "basis_names", tuple(self.basis_names))
        if self.keypoint_mirror is not None:
            object.__setattr__(self, "keypoint_mirror", np.asarray(self.keypoint_mirror, dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices_neutral)

    def region_keypoints(self, region_names) -> np.ndarray:
        """Positions (into keypoint_indices) of keypoints lying in any of the regions."""
        members = np.concatenate([self.regions[r] for r in region_names])
        return np.flatnonzero(np.isin(self.keypoint_indices, members))


def check_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (N_BASES,):
        raise DataError(f"blend weights must have length {N_BASES}, got {w.shape}")
    if not np.all((w >= 0.0) & (w <= 1.0)):
        raise DataError("blend weights must lie in [0, 1]")
    return w


def check_rotation(R: np.ndarray, tol: float = 1e-9) -> None:
    if not np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0) or abs(np.linalg.det(R) - 1.0) > tol:
        raise DataError("rotation is not in SO(3)")


def _gaze_array(gaze) -> np.ndarray:
    if gaze is None:
        return np.zeros((2, 2))
    if isinstance(gaze, GazePair):
        return gaze.as_array()
    g = np.asarray(gaze, dtype=float)
    return g.reshape(2, 2)


def gaze_to_weights(gaze) -> np.ndarray:
    """Map a gaze pair to the 8 eye-following weights.

    Returns, per eye (left then right), ``[look_left, look_right, look_up,
    look_down]``; yaw and pitch saturate at ``YAW_MAX`` and ``PITCH_MAX``.
    """
    g = _gaze_array(gaze)
    if np.any(np.abs(g) > np.pi / 2) or not np.all(np.isfinite(g)):
        raise DataError("gaze angles must lie in [-pi/2, pi/2]")
    return _gaze_weights_batch(g[None])[0]


def _gaze_weights_batch(g: np.ndarray) -> np.ndarray:
    """(T, 2, 2) gaze -> (T, 8) weights, no validation."""
    yaw = g[..., 0] / YAW_MAX
    pitch = g[..., 1] / PITCH_MAX
    w = np.stack([
        np.clip(yaw, 0.0, 1.0), np.clip(-yaw, 0.0, 1.0),
        np.clip(pitch, 0.0, 1.0), np.clip(-pitch, 0.0, 1.0),
    ], axis=-1)
    return w.reshape(len(g), N_GAZE)


def evaluate(rig: FaceRig, w, gaze=None, pose: RigidPose | None = None) -> Mesh:
    """Deform the neutral mesh by blend weights, gaze and rigid pose."""
    w = check_weights(w)
    c = gaze_to_weights(gaze)
    verts = (
        rig.vertices_neutral
        + np.tensordot(w, rig.expr_deltas, axes=1)
        + np.tensordot(c, rig.gaze_deltas, axes=1)
    )
    if pose is not None:
        verts = pose.apply(verts)
    return Mesh(verts, rig.triangles)


def keypoint_trajectory(rig: FaceRig, weights, gaze=None, rotations=None, translations=None,
                        subset=None) -> np.ndarray:
    """Batched keypoint positions, (T, K, 3), without building full meshes."""
    W = np.asarray(weights, dtype=float)
    T = len(W)
    kp = rig.keypoint_indices if subset is None else rig.keypoint_indices[subset]
    D = rig.expr_deltas[:, kp, :].reshape(N_BASES, -1)
    X = rig.vertices_neutral[kp].reshape(1, -1) + W @ D
    if gaze is not None:
        C = _gaze_weights_batch(np.asarray(gaze, dtype=float).reshape(T, 2, 2))
        X = X + C @ rig.gaze_deltas[:, kp, :].reshape(N_GAZE, -1)
    X = X.reshape(T, len(kp), 3)
    if rotations is not None:
        X = np.einsum("tij,tkj->tki", np.asarray(rotations), X)
    if translations is not None:
        X = X + np.asarray(translations)[:, None, :]
    return X


def compute_normals(mesh: Mesh, topology=None) -> Mesh:
    """Area-weighted vertex normals.

    Vertices whose accumulated normal has zero length (isolated or only
    touching degenerate faces) get a zero normal and ``degenerate=True``.
    """
    tri = np.asarray(mesh.triangles if topology is None else topology, dtype=np.int64)
    if tri.size == 0:
        raise DataError("cannot compute normals without triangles")
    v = mesh.vertices
    if tri.min() < 0 or tri.max() >= len(v):
        raise DataError("triangle index out of range")
    # cross product length is twice the face area, which gives the area weighting
    fn = np.cross(v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]])
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, tri[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    degenerate = norm <= 1e-300
    normals = np.zeros_like(v)
    normals[~degenerate] = acc[~degenerate] / norm[~degenerate, None]
    return Mesh(v, tri, normals, degenerate)


def rotation_matrix(axis_angle) -> np.ndarray:
    """Rodrigues formula for an axis-angle vector."""
    w = np.asarray(axis_angle, dtype=float)
    theta = np.linalg.norm(w)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + K
    K = K / theta
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] *= -1
        Q = U @ Vt
    return Q


def yaw_pitch_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Rotation by ``yaw`` about +y followed by ``pitch`` about +x (radians)."""
    return rotation_matrix([pitch, 0.0, 0.0]) @ rotation_matrix([0.0, yaw, 0.0])


# ---------------------------------------------------------------- file format

def rig_to_dict(rig: FaceRig) -> dict:
    return {
        "format": "hmdface-rig",
        "version": 1,
        "vertices": rig.vertices_neutral.tolist(),
        "triangles": rig.triangles.tolist(),
        "expr_deltas": {n: rig.expr_deltas[i].ravel().tolist() for i, n in enumerate(rig.basis_names)},
        "gaze_deltas": {n: rig.gaze_deltas[i].ravel().tolist() for i, n in enumerate(GAZE_NAMES)},
        "keypoints": rig.keypoint_indices.tolist(),
        "keypoint_mirror": None if rig.keypoint_mirror is None else rig.keypoint_mirror.tolist(),
        "regions": {k: v.tolist() for k, v in rig.regions.items()},
        "metadata": rig.layout.to_dict(),
    }


def rig_from_dict(doc: dict) -> FaceRig:
    try:
        verts = np.asarray(doc["vertices"], dtype=float)
        n = len(verts)
        names = tuple(doc["expr_deltas"].keys())
        expr = np.stack([np.asarray(doc["expr_deltas"][k], dtype=float).reshape(n, 3) for k in names])
        gaze = np.stack([np.asarray(doc["gaze_deltas"][k], dtype=float).reshape(n, 3) for k in GAZE_NAMES])
        meta = doc.get("metadata")
        layout = STANDARD_LAYOUT if meta is None else BasisLayout.from_dict(names, meta)
        return FaceRig(
            vertices_neutral=verts,
            triangles=np.asarray(doc["triangles"], dtype=np.int64).reshape(-1, 3),
            expr_deltas=expr,
            gaze_deltas=gaze,
            keypoint_indices=np.asarray(doc["keypoints"], dtype=np.int64),
            regions={k: np.asarray(v, dtype=np.int64) for k, v in doc["regions"].items()},
            basis_names=names,
            layout=layout,
            keypoint_mirror=doc.get("keypoint_mirror"),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed rig document: {exc}") from exc


def save_rig(rig: FaceRig, path) -> None:
    Path(path).write_text(json.dumps(rig_to_dict(rig)))


def load_rig(path) -> FaceRig:
    return rig_from_dict(json.loads(Path(path).read_text()))
