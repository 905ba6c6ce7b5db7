"""Per-frame blendshape and head-pose fitting to multi-camera 2D keypoints."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from hmdface.camera import Camera, project_with_flags
from hmdface.errors import ConfigError, DataError, NumericError, ProjectionError
from hmdface.rig import (
    N_BASES,
    N_KEYPOINTS,
    FaceRig,
    FrameLabel,
    orthonormalize,
    rotation_matrix,
)


@dataclass
class KeypointObservation:
    """One frame: per camera, (100, 2) pixels and (100,) confidences."""

    uv: np.ndarray          # (C, 100, 2)
    conf: np.ndarray        # (C, 100)

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float)
        self.conf = np.asarray(self.conf, dtype=float)
        if self.uv.ndim != 3 or self.uv.shape[1:] != (N_KEYPOINTS, 2):
            raise DataError(f"observation pixels must be (C, {N_KEYPOINTS}, 2), got {self.uv.shape}")
        if self.conf.shape != self.uv.shape[:2]:
            raise DataError("confidence shape does not match pixels")
        if not np.all(np.isfinite(self.uv)):
            raise DataError("observed pixel positions must be finite")
        if np.any((self.conf < 0) | (self.conf > 1)):
            raise DataError("confidences must lie in [0, 1]")


@dataclass(frozen=True)
class RigConstraint:
    kind: str                           # "group_sum_max" | "mutual_exclusion"
    indices: tuple[int, ...]
    bound: float = 1.0                  # group bound or exclusion slack

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if any(i < 0 or i >= N_BASES for i in idx) or not idx:
            raise DataError(f"constraint indices {idx} out of range")
        if self.kind == "group_sum_max":
            if not 0.0 < self.bound <= N_BASES:
                raise DataError("group bound must lie in (0, 53]")
        elif self.kind == "mutual_exclusion":
            if len(idx) != 2 or idx[0] == idx[1]:
                raise DataError("mutual exclusion needs two distinct indices")
            if not 0.0 <= self.bound <= 1.0:
                raise DataError("exclusion slack must lie in [0, 1]")
        else:
            raise DataError(f"unknown constraint kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "indices": list(self.indices), "bound": self.bound}


@dataclass(frozen=True)
class FitConfig:
    lambda_kp: float = 1.0
    lambda_sparse: float = 0.01
    lambda_constraint: float = 10.0
    max_iters: int = 500
    step_size: float = 1e-2
    tol: float = 1e-8
    step_acceptance: bool = True
    rotation_scale: float = 0.1         # step scale of the axis-angle block relative to b
    translation_scale: float = 1.0
    init_jitter: float = 1e-3           # breaks exact symmetries between duplicated bases
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        for k in ("lambda_kp", "lambda_sparse", "lambda_constraint", "step_size", "tol", "init_jitter"):
            if getattr(self, k) < 0:
                raise ConfigError(f"fit config {k} must be non-negative")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")


@dataclass
class FitResult:
    labels: list[FrameLabel]
    final_loss: float
    traces: list[np.ndarray]            # accepted-step total loss per frame
    converged: bool
    frame_converged: list[bool] = field(default_factory=list)

    @property
    def weights(self) -> np.ndarray:
        return np.stack([l.weights for l in self.labels])


# ---------------------------------------------------------------- losses

def _keypoints(rig: FaceRig, b, R, t, gaze_offset=None):
    kp = rig.keypoint_indices
    P = rig.vertices_neutral[kp] + np.tensordot(b, rig.expr_deltas[:, kp], axes=1)
    if gaze_offset is not None:
        P = P + gaze_offset
    return P, P @ R.T + t


def _camera_terms(cam: Camera, X, uv_obs, conf, need_grad: bool):
    """Weighted mean squared residual for one camera and its gradient w.r.t. X."""
    uv, behind = project_with_flags(cam, X)
    if behind.any():
        raise ProjectionError(f"{int(behind.sum())} keypoints behind camera {cam.name!r}")
    csum = conf.sum()
    if csum <= 0:
        return 0.0, (np.zeros_like(X) if need_grad else None)
    r = uv - uv_obs
    loss = float(np.sum(conf * np.sum(r * r, axis=1)) / csum)
    if not need_grad:
        return loss, None
    W = cam.world_to_camera
    pc = (X - cam.position) @ W.T
    z = pc[:, 2]
    g_uv = 2.0 * conf[:, None] * r / csum
    gx = g_uv[:, 0] * cam.fx / z
    gy = g_uv[:, 1] * cam.fy / z
    gz = -(g_uv[:, 0] * cam.fx * pc[:, 0] + g_uv[:, 1] * cam.fy * pc[:, 1]) / z ** 2
    return loss, np.stack([gx, gy, gz], axis=1) @ W


def _pose(label: FrameLabel):
    R = np.eye(3) if label.rotation is None else np.asarray(label.rotation, dtype=float)
    t = np.zeros(3) if label.translation is None else np.asarray(label.translation, dtype=float)
    return R, t


def reprojection_loss(rig: FaceRig, cameras: list[Camera], label: FrameLabel,
                      obs: KeypointObservation) -> float:
    """Confidence-weighted mean squared pixel error, summed over cameras."""
    if len(cameras) != len(obs.uv):
        raise DataError(f"{len(cameras)} cameras but observations for {len(obs.uv)}")
    R, t = _pose(label)
    _, X = _keypoints(rig, np.asarray(label.weights, dtype=float), R, t)
    return sum(_camera_terms(c, X, obs.uv[i], obs.conf[i], False)[0] for i, c in enumerate(cameras))


def sparsity_loss(w) -> float:
    return float(np.sum(np.abs(np.asarray(w, dtype=float))))


def constraint_penalty(w, constraints: list[RigConstraint]) -> float:
    w = np.asarray(w, dtype=float)
    total = 0.0
    for c in constraints:
        idx = list(c.indices)
        if max(idx) >= len(w):
            raise DataError(f"constraint index {max(idx)} out of range")
        if c.kind == "group_sum_max":
            total += max(0.0, w[idx].sum() - c.bound) ** 2
        else:
            total += max(0.0, w[idx[0]] * w[idx[1]] - c.bound) ** 2
    return float(total)


def _penalty_grad(w, constraints):
    g = np.zeros_like(w)
    for c in constraints:
        idx = list(c.indices)
        if c.kind == "group_sum_max":
            ex = w[idx].sum() - c.bound
            if ex > 0:
                g[idx] += 2.0 * ex
        else:
            i, j = idx
            ex = w[i] * w[j] - c.bound
            if ex > 0:
                g[i] += 2.0 * ex * w[j]
                g[j] += 2.0 * ex * w[i]
    return g


def total_loss_and_grad(rig: FaceRig, cameras: list[Camera], b, R, t, obs: KeypointObservation,
                        constraints: list[RigConstraint], cfg: FitConfig, need_grad: bool = True):
    """Total objective and gradients w.r.t. (b, axis-angle increment at 0, t)."""
    b = np.asarray(b, dtype=float)
    P, X = _keypoints(rig, b, R, t)
    rep = 0.0
    gX = np.zeros_like(X)
    for i, cam in enumerate(cameras):
        l, g = _camera_terms(cam, X, obs.uv[i], obs.conf[i], need_grad)
        rep += l
        if need_grad:
            gX += g
    loss = (cfg.lambda_kp * rep + cfg.lambda_sparse * float(np.sum(np.abs(b)))
            + cfg.lambda_constraint * constraint_penalty(b, constraints))
    if not need_grad:
        return loss, None
    gX *= cfg.lambda_kp
    kp = rig.keypoint_indices
    gP = gX @ R                                        # dL/dP = R^T gX
    gb = np.einsum("ikd,kd->i", rig.expr_deltas[:, kp], gP)
    gb += cfg.lambda_sparse * np.sign(b) + cfg.lambda_constraint * _penalty_grad(b, constraints)
    gw = np.sum(np.cross(P @ R.T, gX), axis=0)
    gt = gX.sum(axis=0)
    return loss, (gb, gw, gt)


# ---------------------------------------------------------------- optimization

def _descend(rig, cameras, obs, constraints, cfg: FitConfig, b, R, t, frame: int, max_iters: int):
    """Adam with step acceptance; returns the final state, accepted-step trace and convergence flag."""
    scale = np.concatenate([np.ones(N_BASES), np.full(3, cfg.rotation_scale), np.full(3, cfg.translation_scale)])
    m = np.zeros(N_BASES + 6)
    v = np.zeros(N_BASES + 6)
    beta1, beta2, eps = cfg.beta1, cfg.beta2, 1e-8
    lr = cfg.step_size
    loss, grads = total_loss_and_grad(rig, cameras, b, R, t, obs, constraints, cfg)
    if not np.isfinite(loss):
        raise NumericError(f"frame {frame}: initial loss is not finite")
    trace = [loss]
    converged = False
    step = 0
    for it in range(max_iters):
        g = np.concatenate(grads)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"frame {frame}: non-finite gradient at iteration {it}")
        step += 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        upd = lr * scale * (m / (1 - beta1 ** step)) / (np.sqrt(v / (1 - beta2 ** step)) + eps)
        b_new = np.clip(b - upd[:N_BASES], 0.0, 1.0)
        R_new = orthonormalize(rotation_matrix(-upd[N_BASES:N_BASES + 3]) @ R)
        t_new = t - upd[N_BASES + 3:]
        new_loss, new_grads = total_loss_and_grad(rig, cameras, b_new, R_new, t_new, obs, constraints, cfg)
        if not np.isfinite(new_loss):
            raise NumericError(f"frame {frame}: loss became non-finite at iteration {it}")
        if cfg.step_acceptance and new_loss > loss:
            lr *= 0.5
            if lr < 1e-12:
                converged = True
                break
            continue
        if cfg.step_acceptance:
            lr = min(lr * 1.1, cfg.step_size)
        improvement = loss - new_loss
        b, R, t, loss, grads = b_new, R_new, t_new, new_loss, new_grads
        trace.append(loss)
        if 0 <= improvement < cfg.tol and lr >= cfg.step_size * 0.99:
            converged = True
            break
    return b, R, t, loss, trace, converged


def _fit_frame(rig, cameras, obs, constraints, cfg: FitConfig, R0, t0, frame: int):
    rng = np.random.default_rng([cfg.seed, frame])
    b = np.clip(cfg.init_jitter * rng.random(N_BASES), 0.0, 1.0)
    b, R, t, loss, trace, converged = _descend(rig, cameras, obs, constraints, cfg, b, R0.copy(), t0.copy(),
                                               frame, cfg.max_iters)
    # Exclusion pairs can stall at a symmetric saddle where both bases share the
    # activation.  Retry with the pair's mass moved to either side and keep the
    # lowest loss; the switch counts as one accepted step.
    for c in constraints:
        if c.kind != "mutual_exclusion":
            continue
        i, j = c.indices
        if b[i] * b[j] <= c.bound + 1e-6:
            continue
        best = None
        for keep, drop in ((i, j), (j, i)):
            cand = b.copy()
            cand[keep] = min(1.0, b[i] + b[j])
            cand[drop] = 0.0
            res = _descend(rig, cameras, obs, constraints, cfg, cand, R, t, frame, cfg.max_iters)
            if best is None or res[3] < best[3]:
                best = res
        if best[3] < loss:
            b, R, t, loss = best[:4]
            trace.append(loss)
            converged = converged and best[5]
    label = FrameLabel(weights=b, rotation=R, translation=t)
    return label, np.array(trace), converged


def _fit_frame_star(args):
    return _fit_frame(*args)


def fit_sequence(rig: FaceRig, cameras: list[Camera], observations: list[KeypointObservation],
                 constraints: list[RigConstraint] | None = None, config: FitConfig | None = None,
                 parallel: bool = False, jobs: int = 1) -> FitResult:
    """Fit every frame; sequential mode warm-starts the pose from the previous frame.

    ``parallel`` starts each frame from the identity pose instead, so frames
    can be fitted by ``jobs`` worker processes.
    """
    cfg = config or FitConfig()
    constraints = list(constraints or [])
    if not observations:
        raise DataError("fit_sequence needs at least one frame")
    for o in observations:
        if len(o.uv) != len(cameras):
            raise DataError(f"{len(cameras)} cameras but observations for {len(o.uv)}")
    results = []
    if parallel:
        args = [(rig, cameras, o, constraints, cfg, np.eye(3), np.zeros(3), f)
                for f, o in enumerate(observations)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                results = list(ex.map(_fit_frame_star, args))
        else:
            results = [_fit_frame(*a) for a in args]
    else:
        R, t = np.eye(3), np.zeros(3)
        for f, o in enumerate(observations):
            res = _fit_frame(rig, cameras, o, constraints, cfg, R, t, f)
            R, t = res[0].rotation, res[0].translation
            results.append(res)
    labels = [r[0] for r in results]
    traces = [r[1] for r in results]
    flags = [r[2] for r in results]
    return FitResult(labels, float(sum(tr[-1] for tr in traces)), traces, all(flags), flags)


def default_constraints(layout=None) -> list[RigConstraint]:
    """Opposing bases that should not fire together."""
    from hmdface.rig import STANDARD_LAYOUT
    layout = layout or STANDARD_LAYOUT
    pairs = [("jaw_left", "jaw_right"), ("mouth_left", "mouth_right"),
             ("eye_look_up_l", "eye_look_down_l"), ("eye_look_up_r", "eye_look_down_r"),
             ("eye_look_in_l", "eye_look_out_l"), ("eye_look_in_r", "eye_look_out_r"),
             ("eye_wide_l", "eye_blink_l"), ("eye_wide_r", "eye_blink_r")]
    out = [RigConstraint("mutual_exclusion", (layout.index(a), layout.index(b)), 0.0) for a, b in pairs]
    out.append(RigConstraint("group_sum_max", (layout.index("mouth_pucker"), layout.index("mouth_smile_l"),
                                               layout.index("mouth_smile_r")), 1.0))
    return out


def synthesize_observations(rig: FaceRig, cameras: list[Camera], label: FrameLabel,
                            gaze=None, noise: float = 0.0, seed: int = 0) -> KeypointObservation:
    """Project the rig's keypoints for ``label``; optional Gaussian pixel noise."""
    from hmdface.rig import evaluate, RigidPose
    R, t = _pose(label)
    mesh = evaluate(rig, label.weights, gaze, RigidPose(R, t))
    X = mesh.vertices[rig.keypoint_indices]
    uv = []
    for cam in cameras:
        p, behind = project_with_flags(cam, X)
        if behind.any():
            raise ProjectionError(f"keypoints behind camera {cam.name!r}")
        uv.append(p)
    uv = np.stack(uv)
    if noise > 0:
        uv = uv + noise * np.random.default_rng(seed).standard_normal(uv.shape)
    return KeypointObservation(uv, np.ones(uv.shape[:2]))


# ---------------------------------------------------------------- files

def observations_to_dict(cameras: list[Camera], observations: list[KeypointObservation]) -> dict:
    frames = []
    for f, o in enumerate(observations):
        for c, cam in enumerate(cameras):
            pts = np.concatenate([o.uv[c], o.conf[c][:, None]], axis=1)
            frames.append({"frame": f, "camera": cam.name, "keypoints": pts.tolist()})
    return {"cameras": [c.to_dict() for c in cameras], "records": frames}


def observations_from_dict(doc: dict) -> tuple[list[Camera], list[KeypointObservation]]:
    cameras = [Camera.from_dict(c) for c in doc["cameras"]]
    order = {c.name: i for i, c in enumerate(cameras)}
    by_frame: dict[int, dict[int, np.ndarray]] = {}
    for rec in doc["records"]:
        if rec["camera"] not in order:
            raise DataError(f"observation for unknown camera {rec['camera']!r}")
        pts = np.asarray(rec["keypoints"], dtype=float)
        if pts.shape != (N_KEYPOINTS, 3):
            raise DataError(f"frame {rec['frame']}: expected {N_KEYPOINTS} (u, v, confidence) triples")
        by_frame.setdefault(int(rec["frame"]), {})[order[rec["camera"]]] = pts
    obs = []
    for f in sorted(by_frame):
        cams = by_frame[f]
        if len(cams) != len(cameras):
            raise DataError(f"frame {f} lacks observations for some cameras")
        pts = np.stack([cams[i] for i in range(len(cameras))])
        obs.append(KeypointObservation(pts[..., :2], pts[..., 2]))
    return cameras, obs


def result_to_dict(result: FitResult, names) -> dict:
    frames = []
    for lab, tr, ok in zip(result.labels, result.traces, result.frame_converged):
        q = Rotation.from_matrix(lab.rotation).as_quat()          # x, y, z, w
        frames.append({
            "weights": dict(zip(names, np.asarray(lab.weights).tolist())),
            "rotation_wxyz": [q[3], q[0], q[1], q[2]],
            "translation": np.asarray(lab.translation).tolist(),
            "loss_trace": tr.tolist(),
            "converged": bool(ok),
        })
    return {"final_loss": result.final_loss, "converged": result.converged, "frames": frames}


def result_from_dict(doc: dict, names) -> FitResult:
    labels, traces, flags = [], [], []
    for fr in doc["frames"]:
        w, x, y, z = fr["rotation_wxyz"]
        R = orthonormalize(Rotation.from_quat([x, y, z, w]).as_matrix())
        labels.append(FrameLabel(np.array([fr["weights"][n] for n in names]), R, np.asarray(fr["translation"])))
        traces.append(np.asarray(fr["loss_trace"]))
        flags.append(bool(fr["converged"]))
    return FitResult(labels, float(doc["final_loss"]), traces, bool(doc["converged"]), flags)


def save_result(result: FitResult, names, path) -> None:
    Path(path).write_text(json.dumps(result_to_dict(result, names)))
