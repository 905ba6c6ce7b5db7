"""Synthetic oracle: procedural rigs, scripted animation, per-camera features, label corruption."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

from hmdface.camera import Camera, project_with_flags
from hmdface.dataset import LabeledSet, Recording, concatenate
from hmdface.errors import DataError, ProjectionError
from hmdface.metrics import ArtPriors, RecordingAnnotation, Segment
from hmdface.rig import (
    BASIS_NAMES,
    N_BASES,
    N_GAZE,
    N_KEYPOINTS,
    STANDARD_LAYOUT,
    FaceRig,
    _gaze_weights_batch,
    keypoint_trajectory,
    rotation_matrix,
)

# ---------------------------------------------------------------- face geometry

_BASE_RADII = np.array([75.0, 100.0, 90.0])
# (polar deg, azimuth deg, angular sigma deg, height mm); azimuth > 0 is the subject's left
_BASE_BUMPS = [
    (92.0, 0.0, 7.0, 18.0),     # nose
    (57.0, 22.0, 9.0, 4.0),     # brow ridges
    (57.0, -22.0, 9.0, 4.0),
    (70.0, 22.0, 6.0, -4.0),    # eye sockets
    (70.0, -22.0, 6.0, -4.0),
    (97.0, 35.0, 12.0, 4.0),    # cheekbones
    (97.0, -35.0, 12.0, 4.0),
    (137.0, 0.0, 12.0, 6.0),    # chin
]

# name -> (polar, |azimuth|, angular radius) in degrees; sided regions get _l/_r
_REGIONS = {
    "eye": (70.0, 22.0, 9.0),
    "eyelid": (66.0, 22.0, 13.0),
    "brow": (56.0, 22.0, 13.0),
    "cheek": (100.0, 34.0, 14.0),
    "glabella": (62.0, 0.0, 9.0),
    "nose": (88.0, 0.0, 10.0),
    "mouth": (118.0, 0.0, 17.0),
    "jaw": (136.0, 0.0, 26.0),
    "face": (95.0, 0.0, 65.0),
}
_SIDED_REGIONS = ("eye", "eyelid", "brow", "cheek")

# Basis shapes.  (polar, |azimuth|, radius, (out, up, forward) mm) for sided bases,
# where "out" points away from the midline; midline bases give a world (x, y, z).
_EYE_BASES = {
    "eye_blink": (66.0, 22.0, 11.0, (0.0, -7.0, 1.0)),
    "eye_squint": (75.0, 22.0, 9.0, (0.0, 3.0, 0.5)),
    "eye_wide": (63.0, 22.0, 9.0, (0.0, 3.0, 0.5)),
    "brow_down": (56.0, 20.0, 11.0, (-2.0, -4.0, 0.5)),
    "brow_inner_up": (56.0, 11.0, 9.0, (0.0, 5.0, 0.5)),
    "brow_outer_up": (56.0, 31.0, 9.0, (0.0, 5.0, 0.0)),
    "eye_look_out": (67.0, 25.0, 7.0, (1.5, 0.0, 0.0)),
    "eye_look_in": (67.0, 19.0, 7.0, (-1.5, 0.0, 0.0)),
    "eye_look_up": (65.0, 22.0, 7.0, (0.0, 1.5, 0.0)),
    "eye_look_down": (69.0, 22.0, 7.0, (0.0, -1.5, 0.0)),
}
_FACE_SIDED = {
    "cheek_squint": (95.0, 32.0, 11.0, (0.0, 3.0, 1.0)),
    "mouth_dimple": (118.0, 14.0, 8.0, (1.0, 0.0, -3.0)),
    "mouth_frown": (120.0, 14.0, 9.0, (0.0, -4.0, 0.0)),
    "mouth_lower_down": (123.0, 6.0, 8.0, (0.0, -4.0, 0.5)),
    "mouth_press": (118.0, 8.0, 7.0, (0.0, 2.0, -3.0)),
    "mouth_smile": (117.0, 14.0, 10.0, (3.0, 4.0, -1.0)),
    "mouth_stretch": (119.0, 14.0, 10.0, (5.0, -1.0, -1.0)),
    "mouth_upper_up": (113.0, 6.0, 8.0, (0.0, 4.0, 0.5)),
    "nose_sneer": (85.0, 8.0, 8.0, (0.0, 3.0, 0.0)),
}
_FACE_MID = {
    "jaw_forward": (135.0, 26.0, (0.0, 0.0, 4.0)),
    "jaw_left": (135.0, 26.0, (5.0, 0.0, 0.0)),
    "jaw_right": (135.0, 26.0, (-5.0, 0.0, 0.0)),
    "jaw_open": (136.0, 26.0, (0.0, -12.0, -2.0)),
    "mouth_close": (121.0, 9.0, (0.0, 5.0, 1.0)),
    "mouth_funnel": (118.0, 12.0, (0.0, 0.0, 5.0)),
    "mouth_left": (118.0, 14.0, (5.0, 0.0, 0.0)),
    "mouth_right": (118.0, 14.0, (-5.0, 0.0, 0.0)),
    "mouth_roll_lower": (123.0, 9.0, (0.0, 1.0, -3.0)),
    "mouth_roll_upper": (113.0, 9.0, (0.0, -1.0, -3.0)),
    "mouth_shrug_lower": (127.0, 11.0, (0.0, 3.0, 2.0)),
    "mouth_shrug_upper": (111.0, 10.0, (0.0, 2.0, 2.0)),
    "tongue_out": (124.0, 6.0, (0.0, -1.0, 6.0)),
}
# gaze bases move the eye region: look-left, look-right, look-up, look-down
_GAZE_SHIFT = [(3.0, 0.0, 0.0), (-3.0, 0.0, 0.0), (0.0, 3.0, 0.0), (0.0, -3.0, 0.0)]


def _direction(theta, phi):
    """Unit directions on the parameter sphere (polar from +y, azimuth from +z toward +x)."""
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), np.cos(theta), st * np.cos(phi)], axis=-1)


def _angle_to(dirs, theta_deg, phi_deg):
    c = _direction(np.deg2rad(theta_deg), np.deg2rad(phi_deg))
    return np.rad2deg(np.arccos(np.clip(dirs @ c, -1.0, 1.0)))


def _falloff(angle, radius):
    s = angle / radius
    return np.where(s < 1.0, (1.0 - s ** 2) ** 2, 0.0)


@dataclass(frozen=True)
class _Grid:
    dirs: np.ndarray        # (V, 3) parameter-sphere directions
    triangles: np.ndarray
    mirror: np.ndarray      # vertex -> mirrored vertex
    azimuth: np.ndarray     # radians, per vertex


def _sphere_grid(n_vertices: int) -> _Grid:
    n_lon = max(8, int(round(np.sqrt(1.6 * n_vertices) / 2)) * 2)
    n_lat = int(np.ceil((n_vertices - 2) / n_lon))
    u = np.arange(1, n_lat + 1) / (n_lat + 1)
    theta = np.pi * (u + 0.5 * np.sin(2 * np.pi * u) / (2 * np.pi))    # denser near the equator
    s = 2.0 * np.arange(n_lon) / n_lon - 1.0
    phi = np.pi * (s - 0.5 * np.sin(np.pi * s) / np.pi)                # denser toward the face
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.concatenate([[[0.0, 1.0, 0.0]], _direction(th, ph).reshape(-1, 3), [[0.0, -1.0, 0.0]]])
    azimuth = np.concatenate([[0.0], ph.ravel(), [0.0]])

    def vid(i, k):
        return 1 + i * n_lon + (k % n_lon)

    tris = []
    last = len(dirs) - 1
    for k in range(n_lon):
        tris.append((0, vid(0, k + 1), vid(0, k)))
        tris.append((last, vid(n_lat - 1, k), vid(n_lat - 1, k + 1)))
        for i in range(n_lat - 1):
            a, b, c, d = vid(i, k), vid(i, k + 1), vid(i + 1, k + 1), vid(i + 1, k)
            tris.append((a, b, c))
            tris.append((a, c, d))
    tris = np.array(tris, dtype=np.int64)
    # orient outward: the signed volume of a closed outward surface is positive
    p = dirs[tris]
    if np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() < 0:
        tris = tris[:, ::-1].copy()

    mirror = np.empty(len(dirs), dtype=np.int64)
    mirror[0], mirror[last] = 0, last
    for i in range(n_lat):
        for k in range(n_lon):
            mirror[vid(i, k)] = vid(i, n_lon - k)
    return _Grid(dirs, tris, mirror, azimuth)


def _surface(dirs, radii, bumps):
    r = dirs * radii
    radial = dirs
    for theta, phi, sigma, height in bumps:
        ang = _angle_to(dirs, theta, phi)
        r = r + (height * np.exp(-0.5 * (ang / sigma) ** 2))[:, None] * radial
    return r


def _sided_vector(vec, side):
    out, up, fwd = vec
    return np.array([out * side, up, fwd])


def _basis_deltas(grid: _Grid, surface: np.ndarray):
    dirs = grid.dirs
    V = len(dirs)
    expr = np.zeros((N_BASES, V, 3))
    idx = {n: i for i, n in enumerate(BASIS_NAMES)}
    normals = surface / np.linalg.norm(surface, axis=1, keepdims=True)

    for side, suffix in ((1.0, "_l"), (-1.0, "_r")):
        for base, (th, ph, rad, vec) in _EYE_BASES.items():
            w = _falloff(_angle_to(dirs, th, side * ph), rad)
            expr[idx[base + suffix]] = w[:, None] * _sided_vector(vec, side)
        for base, (th, ph, rad, vec) in _FACE_SIDED.items():
            w = _falloff(_angle_to(dirs, th, side * ph), rad)
            expr[idx[base + suffix]] = w[:, None] * _sided_vector(vec, side)
    for name, (th, rad, vec) in _FACE_MID.items():
        w = _falloff(_angle_to(dirs, th, 0.0), rad)
        expr[idx[name]] = w[:, None] * np.asarray(vec)

    # puff pushes both cheeks along the surface normal
    puff = sum(_falloff(_angle_to(dirs, 103.0, s * 36.0), 16.0) for s in (1.0, -1.0))
    expr[idx["cheek_puff"]] = 6.0 * puff[:, None] * normals
    # pucker draws the lips toward the mouth centre and forward
    center = surface[np.argmin(_angle_to(dirs, 118.0, 0.0))]
    w = _falloff(_angle_to(dirs, 118.0, 0.0), 10.0)
    toward = center - surface
    toward[:, 2] = 0.0
    norm = np.linalg.norm(toward, axis=1, keepdims=True)
    toward = np.divide(toward, norm, out=np.zeros_like(toward), where=norm > 1e-9)
    expr[idx["mouth_pucker"]] = w[:, None] * (4.0 * toward + np.array([0.0, 0.0, 2.0]))

    gaze = np.zeros((N_GAZE, V, 3))
    for e, side in enumerate((1.0, -1.0)):
        th, ph, rad = _REGIONS["eye"]
        w = _falloff(_angle_to(dirs, th, side * ph), rad)
        for j, vec in enumerate(_GAZE_SHIFT):
            gaze[4 * e + j] = w[:, None] * np.asarray(vec)
    return expr, gaze


def _regions(grid: _Grid) -> dict[str, np.ndarray]:
    out = {}
    for name, (th, ph, rad) in _REGIONS.items():
        if name in _SIDED_REGIONS:
            for side, suffix in ((1.0, "_l"), (-1.0, "_r")):
                out[name + suffix] = np.flatnonzero(_angle_to(grid.dirs, th, side * ph) < rad)
        else:
            out[name] = np.flatnonzero(_angle_to(grid.dirs, th, ph) < rad)
    return out


def _select_keypoints(grid: _Grid, expr, gaze, face_region) -> np.ndarray:
    """100 mirror-closed keypoints: the peak vertex of every basis, then spread out."""
    right = grid.azimuth <= 1e-12           # right half plus midline
    chosen: list[int] = []

    def add(v):
        for u in (v, grid.mirror[v]):
            if u not in chosen:
                chosen.append(int(u))

    for delta in list(expr) + list(gaze):
        mag = np.linalg.norm(delta, axis=1)
        mag[~right] = -1.0
        mag[chosen] = -1.0
        if mag.max() > 0:
            add(int(np.argmax(mag)))

    motion = np.linalg.norm(expr, axis=2).sum(axis=0) + np.linalg.norm(gaze, axis=2).sum(axis=0)
    # coarse meshes run out of moving face vertices; widen the pool rather than give up
    pools = [np.intersect1d(face_region, np.flatnonzero(right & (motion > 0.5))),
             np.intersect1d(face_region, np.flatnonzero(right)), np.flatnonzero(right)]
    for cand in pools:
        dist = np.min(np.linalg.norm(grid.dirs[cand, None] - grid.dirs[None, chosen], axis=2), axis=1)
        while len(chosen) < N_KEYPOINTS:
            need = N_KEYPOINTS - len(chosen)
            pick = None
            for j in np.argsort(-dist, kind="stable"):
                v = cand[j]
                if v in chosen or (need == 1 and grid.mirror[v] != v):
                    continue
                pick = v
                break
            if pick is None:
                break
            add(pick)
            dist = np.minimum(dist, np.linalg.norm(grid.dirs[cand] - grid.dirs[pick], axis=1))
        if len(chosen) >= N_KEYPOINTS:
            break
    if len(chosen) < N_KEYPOINTS:
        raise DataError("could not place 100 keypoints on the rig")
    if len(chosen) != N_KEYPOINTS:
        raise DataError("keypoint selection overshot")
    return np.array(chosen, dtype=np.int64)


def gen_rig(seed: int, n_vertices: int = 1500, identity: float = 1.0) -> FaceRig:
    """Procedural head rig.  Topology, regions and keypoints depend only on ``n_vertices``.

    ``identity`` scales how far the subject's neutral shape strays from the
    reference head (0 gives the reference head itself).
    """
    if n_vertices < 300:
        raise DataError("gen_rig needs at least 300 vertices")
    grid = _sphere_grid(n_vertices)
    rng = np.random.default_rng([seed, 0x51])
    k = identity
    radii = _BASE_RADII * (1.0 + 0.01 * k * rng.standard_normal(3))
    bumps = [(th, ph, sg, h * (1.0 + 0.05 * k * rng.standard_normal())) for th, ph, sg, h in _BASE_BUMPS]
    # symmetric identity bumps plus a little asymmetry
    for _ in range(3):
        th, ph = rng.uniform(50, 140), rng.uniform(0, 50)
        sg, h = rng.uniform(8, 20), 0.75 * k * rng.standard_normal()
        bumps += [(th, ph, sg, h), (th, -ph, sg, h)]
    bumps.append((rng.uniform(60, 130), rng.uniform(-40, 40), 15.0, 0.25 * k * rng.standard_normal()))
    surface = _surface(grid.dirs, radii, bumps)

    # deltas use a seed-independent reference surface so every subject shares shape semantics
    expr, gaze = _basis_deltas(grid, _surface(grid.dirs, _BASE_RADII, _BASE_BUMPS))
    regions = _regions(grid)
    kp = _select_keypoints(grid, expr, gaze, regions["face"])
    expr = expr * (1.0 + 0.05 * k * rng.standard_normal())
    pos = {v: i for i, v in enumerate(kp)}
    mirror = np.array([pos[grid.mirror[v]] for v in kp], dtype=np.int64)
    return FaceRig(
        vertices_neutral=surface, triangles=grid.triangles, expr_deltas=expr, gaze_deltas=gaze,
        keypoint_indices=kp, regions=regions, keypoint_mirror=mirror,
    )


def _nominal_point(theta_deg, phi_deg):
    d = _direction(np.deg2rad(theta_deg), np.deg2rad(phi_deg))[None]
    return _surface(d, _BASE_RADII, _BASE_BUMPS)[0]


# ---------------------------------------------------------------- camera sets

@dataclass(frozen=True)
class SensorSpec:
    camera: Camera
    regions: tuple[str, ...]
    encoder: str            # "eye" | "mouth" | "glabella"
    mirrored: bool = False


FEATURE_CAMERAS = ("eye_l", "eye_r", "mouth_l", "mouth_r", "glabella")


def hmd_cameras(fx: float = 250.0) -> list[SensorSpec]:
    """Five headset cameras; left cameras are exact mirrors of the right ones."""
    specs = []
    for side, s in (("l", 1.0), ("r", -1.0)):
        eye = _nominal_point(70.0, s * 22.0)
        cam = Camera.look_at(eye + np.array([0.0, -28.0, 38.0]), eye, fx=fx, fy=fx, name=f"eye_{side}")
        specs.append(SensorSpec(cam, (f"eye_{side}", f"eyelid_{side}", f"brow_{side}"), "eye", side == "l"))
    mouth = _nominal_point(118.0, 0.0)
    for side, s in (("l", 1.0), ("r", -1.0)):
        cam = Camera.look_at(mouth + np.array([s * 40.0, -12.0, 38.0]), mouth, fx=fx, fy=fx,
                             name=f"mouth_{side}")
        specs.append(SensorSpec(cam, ("mouth", "jaw", "cheek_l", "cheek_r", "nose"), "mouth", side == "l"))
    gl = _nominal_point(62.0, 0.0)
    cam = Camera.look_at(gl + np.array([0.0, 26.0, 38.0]), gl, fx=fx, fy=fx, name="glabella")
    specs.append(SensorSpec(cam, ("glabella", "brow_l", "brow_r"), "glabella"))
    by_name = {sp.camera.name: sp for sp in specs}
    return [by_name[n] for n in FEATURE_CAMERAS]


def fitting_cameras(distance: float = 320.0, fx: float = 700.0) -> list[Camera]:
    """Three frontal cameras (left, centre, right) aimed at the face centre."""
    target = _nominal_point(100.0, 0.0)
    cams = []
    for name, yaw in (("front_l", 30.0), ("front_c", 0.0), ("front_r", -30.0)):
        a = np.deg2rad(yaw)
        pos = target + distance * np.array([np.sin(a), 0.05, np.cos(a)])
        cams.append(Camera.look_at(pos, target, fx=fx, fy=fx, name=name))
    return cams


# ---------------------------------------------------------------- expressions & priors

# every listed coefficient reaches full activation at the peak
EXPRESSIONS: dict[str, tuple[str, ...]] = {
    "jaw_drop": ("jaw_open", "mouth_lower_down_l", "mouth_lower_down_r"),
    "smile": ("mouth_smile_l", "mouth_smile_r", "cheek_squint_l", "cheek_squint_r"),
    "brow_raise": ("brow_inner_up_l", "brow_inner_up_r", "brow_outer_up_l", "brow_outer_up_r"),
    "eyes_closed": ("eye_blink_l", "eye_blink_r"),
    "wink_left": ("eye_blink_l",),
    "wink_right": ("eye_blink_r",),
    "mouth_close": ("mouth_close", "mouth_press_l", "mouth_press_r"),
    "pucker": ("mouth_pucker", "mouth_funnel"),
}
SPEECH_COEFFICIENTS = ("jaw_open", "mouth_funnel", "mouth_pucker", "mouth_close",
                       "mouth_lower_down_l", "mouth_lower_down_r",
                       "mouth_upper_up_l", "mouth_upper_up_r", "mouth_stretch_l", "mouth_stretch_r")


def recipe_vector(expression: str, amplitude: float = 1.0) -> np.ndarray:
    if expression not in EXPRESSIONS:
        raise DataError(f"unknown expression {expression!r}")
    w = np.zeros(N_BASES)
    for name in EXPRESSIONS[expression]:
        w[STANDARD_LAYOUT.index(name)] = amplitude
    return w


def default_priors(primary: float = 0.8, secondary: float = 0.7) -> ArtPriors:
    """Sparse art priors: the first coefficient of each recipe is held to a higher bar."""
    return {
        expr: [(STANDARD_LAYOUT.index(n), primary if i == 0 else secondary) for i, n in enumerate(names)]
        for expr, names in EXPRESSIONS.items()
    }


# ---------------------------------------------------------------- animation

@dataclass(frozen=True)
class ScriptSegment:
    expression: str                 # EXPRESSIONS key or "speech-noise"
    amplitude: float = 1.0
    attack: int = 8
    hold: int = 40
    release: int = 8

    def __post_init__(self):
        if not 0.0 < self.amplitude <= 1.0:
            raise DataError("segment amplitude must lie in (0, 1]")
        if min(self.attack, self.hold, self.release) < 1:
            raise DataError("attack/hold/release need at least one frame")


@dataclass(frozen=True)
class AnimationScript:
    segments: tuple[ScriptSegment, ...] = ()
    neutral: int = 12               # neutral frames before, between and after segments
    fps: float = 30.0

    @property
    def length(self) -> int:
        return self.neutral + sum(s.attack + s.hold + s.release + self.neutral for s in self.segments)


def raised_cosine(tau):
    """0 -> 1 on [0, 1] with zero slope at both ends."""
    return 0.5 * (1.0 - np.cos(np.pi * np.asarray(tau)))


def raised_cosine_slope(tau):
    return 0.5 * np.pi * np.sin(np.pi * np.asarray(tau))


def envelope_pieces(start: int, seg: ScriptSegment):
    """Continuous-time pieces ``(t0, t1, value(t), slope(t))`` of one segment's envelope.

    The attack ramps from the last neutral frame ``start - 1`` to the first hold
    frame; the release mirrors it after the last hold frame.
    """
    a0, a1 = start - 1, start + seg.attack
    h1 = a1 + seg.hold - 1
    r1 = h1 + seg.release + 1
    amp = seg.amplitude
    la, lr = seg.attack + 1, seg.release + 1
    return [
        (a0 - 1, a0, lambda t: 0.0 * t, lambda t: 0.0 * t),
        (a0, a1, lambda t: amp * raised_cosine((t - a0) / la), lambda t: amp * raised_cosine_slope((t - a0) / la) / la),
        (a1, h1, lambda t: amp + 0.0 * t, lambda t: 0.0 * t),
        (h1, r1, lambda t: amp * (1.0 - raised_cosine((t - h1) / lr)),
         lambda t: -amp * raised_cosine_slope((t - h1) / lr) / lr),
        (r1, r1 + 1, lambda t: 0.0 * t, lambda t: 0.0 * t),
    ]


def _envelope_frames(seg: ScriptSegment) -> np.ndarray:
    """Envelope sampled on the segment's own frames (attack + hold + release)."""
    att = seg.amplitude * raised_cosine(np.arange(1, seg.attack + 1) / (seg.attack + 1))
    rel = seg.amplitude * (1.0 - raised_cosine(np.arange(1, seg.release + 1) / (seg.release + 1)))
    return np.concatenate([att, np.full(seg.hold, seg.amplitude), rel])


@dataclass
class Animation:
    labels: np.ndarray          # (T, 53)
    gaze: np.ndarray            # (T, 2, 2)
    rotations: np.ndarray       # (T, 3, 3)
    translations: np.ndarray    # (T, 3)
    annotation: RecordingAnnotation


def _smooth_noise(rng, n, sigma_frames, scale):
    x = gaussian_filter1d(rng.standard_normal(n + 8 * int(sigma_frames) + 2), sigma_frames, mode="wrap")
    x = x[: n]
    return scale * x / (np.std(x) + 1e-12)


def gen_animation(seed: int, script: AnimationScript, rig: FaceRig | None = None,
                  gaze_scale: float = 0.15, pose_jitter_deg: float = 0.2,
                  pose_offset_deg: float = 0.5) -> Animation:
    """Neutral-peak-neutral coefficient curves with a matching annotation.

    Gaze wanders slowly (``gaze_scale`` radians) and drives the gaze-following
    coefficients through the same clamp mapping as the rig; the headset sits
    with a small per-recording offset plus slow jitter (headset slip).
    """
    layout = STANDARD_LAYOUT if rig is None else rig.layout
    rng = np.random.default_rng([seed, 0xA7])
    T = script.length
    labels = np.zeros((T, N_BASES))
    segments = [Segment(0, script.neutral, "neutral")]
    t = script.neutral
    for seg in script.segments:
        env = _envelope_frames(seg)
        n = len(env)
        if seg.expression == "speech-noise":
            for name in SPEECH_COEFFICIENTS:
                c = layout.index(name)
                curve = np.abs(_smooth_noise(rng, n, 2.0, 1.0))
                curve = 0.35 * curve / (curve.max() + 1e-12)
                labels[t:t + n, c] = np.clip(curve * env, 0.0, 1.0)
            segments.append(Segment(t, t + n, "transition"))
        else:
            labels[t:t + n] = env[:, None] * recipe_vector(seg.expression)
            segments += [
                Segment(t, t + seg.attack, "transition"),
                Segment(t + seg.attack, t + seg.attack + seg.hold, "peak", seg.expression),
                Segment(t + seg.attack + seg.hold, t + n, "transition"),
            ]
        t += n
        segments.append(Segment(t, t + script.neutral, "neutral"))
        t += script.neutral

    yaw = _smooth_noise(rng, T, 6.0, gaze_scale)
    pitch = _smooth_noise(rng, T, 6.0, 0.6 * gaze_scale)
    verg = 0.02 * rng.standard_normal()
    gaze = np.stack([np.stack([yaw - verg, pitch], 1), np.stack([yaw + verg, pitch], 1)], axis=1)
    gaze = np.clip(gaze, -np.pi / 2, np.pi / 2)
    labels[:, layout.gaze_coefficient_idx] = _gaze_weights_batch(gaze)

    offset = rotation_matrix(np.deg2rad(pose_offset_deg) * rng.standard_normal(3) / np.sqrt(3))
    jit = np.deg2rad(pose_jitter_deg) * np.stack([_smooth_noise(rng, T, 8.0, 1.0) for _ in range(3)], 1) / np.sqrt(3)
    rotations = np.stack([rotation_matrix(j) @ offset for j in jit])
    translations = 0.2 * rng.standard_normal(3) + 0.1 * np.stack(
        [_smooth_noise(rng, T, 8.0, 1.0) for _ in range(3)], 1)
    return Animation(labels, gaze, rotations, translations, RecordingAnnotation(segments, T))


# ---------------------------------------------------------------- features

@dataclass
class DomainShift:
    """Per-camera affine transform ``f -> f @ gain.T + bias`` plus extra noise for "real" frames."""

    gains: np.ndarray           # (5, d, d)
    biases: np.ndarray          # (5, d)
    extra_noise: float = 0.0

    def __post_init__(self):
        for g in self.gains:
            if np.linalg.cond(g) > 1e8:
                raise DataError("domain-shift gain matrix is not invertible")

    @classmethod
    def identity(cls, d: int, n_cameras: int = 5) -> "DomainShift":
        return cls(np.broadcast_to(np.eye(d), (n_cameras, d, d)).copy(), np.zeros((n_cameras, d)))

    @classmethod
    def random(cls, seed: int, d: int, gain: float = 0.05, bias: float = 0.1,
               extra_noise: float = 0.002, n_cameras: int = 5) -> "DomainShift":
        rng = np.random.default_rng([seed, 0xD5])
        gains = np.eye(d) + gain * rng.standard_normal((n_cameras, d, d)) / np.sqrt(d)
        return cls(gains, bias * rng.standard_normal((n_cameras, d)), extra_noise)

    def apply(self, feats: np.ndarray) -> np.ndarray:
        return np.einsum("tcd,ced->tce", feats, self.gains) + self.biases


@dataclass
class FeatureSpace:
    """Fixed per-encoder random embeddings of normalized keypoint coordinates."""

    sensors: list[SensorSpec]
    subsets: list[np.ndarray]           # keypoint positions per camera (mirror-ordered for left cams)
    embeddings: dict[str, np.ndarray]   # encoder -> (2 * n_keypoints, d)
    d: int
    noise: float = 0.01

    @property
    def camera_names(self) -> list[str]:
        return [s.camera.name for s in self.sensors]


def make_feature_space(seed: int, rig: FaceRig, d: int = 32, noise: float = 0.01,
                       sensors: list[SensorSpec] | None = None, gain: float = 4.0) -> FeatureSpace:
    sensors = sensors or hmd_cameras()
    mirror = rig.keypoint_mirror
    base = {}
    for sp in sensors:
        if not sp.mirrored:
            base[sp.encoder] = rig.region_keypoints(sp.regions)
    subsets = []
    for sp in sensors:
        own = base.get(sp.encoder)
        if own is None:
            raise DataError(f"encoder {sp.encoder!r} has no unmirrored camera")
        subsets.append(mirror[own] if sp.mirrored else own)
    rng = np.random.default_rng([seed, 0xE3])
    emb = {}
    for enc in sorted(base):
        n = 2 * len(base[enc])
        emb[enc] = rng.standard_normal((n, d)) * gain * np.sqrt(3.0 / n)
    return FeatureSpace(list(sensors), subsets, emb, d, noise)


def render_features(rig: FaceRig, space: FeatureSpace, anim: Animation | None = None, *,
                    labels=None, gaze=None, rotations=None, translations=None,
                    shift: DomainShift | None = None, domain: str = "synthetic",
                    seed: int = 0) -> np.ndarray:
    """Per-camera feature vectors, shape (T, 5, d).

    Keypoints are projected by each camera, normalized by the intrinsics,
    mirrored for left cameras, embedded linearly, shifted for the real domain
    and perturbed with observation noise.
    """
    if anim is not None:
        labels, gaze, rotations, translations = anim.labels, anim.gaze, anim.rotations, anim.translations
    if domain not in ("real", "synthetic"):
        raise DataError(f"domain must be 'real' or 'synthetic', got {domain!r}")
    labels = np.asarray(labels, dtype=float)
    T = len(labels)
    K = keypoint_trajectory(rig, labels, gaze, rotations, translations)
    feats = np.empty((T, len(space.sensors), space.d))
    for c, (sp, subset) in enumerate(zip(space.sensors, space.subsets)):
        cam = sp.camera
        uv, behind = project_with_flags(cam, K[:, subset])
        if behind.any():
            raise ProjectionError(f"keypoints behind camera {cam.name!r}")
        x = (uv[..., 0] - cam.cx) / cam.fx
        y = (uv[..., 1] - cam.cy) / cam.fy
        if sp.mirrored:
            x = -x
        flat = np.stack([x, y], axis=-1).reshape(T, -1)
        feats[:, c] = flat @ space.embeddings[sp.encoder]
    rng = np.random.default_rng([seed, 0xF7])
    noise = space.noise
    if domain == "real" and shift is not None:
        feats = shift.apply(feats)
        noise = noise + shift.extra_noise
    return feats + noise * rng.standard_normal(feats.shape)


# ---------------------------------------------------------------- label corruption

@dataclass(frozen=True)
class NoiseModel:
    mute: float = 0.6
    sigma: float = 0.05
    outlier_prob: float = 0.02
    outlier_magnitude: float = 1.0
    jitter_prob: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.mute <= 1.0:
            raise DataError("mute factor must lie in (0, 1]")
        for p in (self.outlier_prob, self.jitter_prob):
            if not 0.0 <= p <= 1.0:
                raise DataError("probabilities must lie in [0, 1]")
        if self.sigma < 0:
            raise DataError("noise scale must be non-negative")


def corrupt_labels(true_labels, model: NoiseModel, seed: int, bounds=None) -> np.ndarray:
    """Pseudo labels ``clip(mute * b + eps, 0, 1)`` with outliers and +/-1 frame shifts.

    ``bounds`` lists ``(start, stop)`` recordings; shifts never cross them.
    Outlier frames are replaced by a random expression at a random intensity.
    """
    b = np.asarray(true_labels, dtype=float)
    T = len(b)
    rng = np.random.default_rng([seed, 0xC0])
    bounds = [(0, T)] if bounds is None else bounds
    shifted = b.copy()
    for lo, hi in bounds:
        if hi - lo > 1 and rng.random() < model.jitter_prob:
            rec = b[lo:hi]
            if rng.random() < 0.5:
                shifted[lo:hi] = np.concatenate([rec[:1], rec[:-1]])
            else:
                shifted[lo:hi] = np.concatenate([rec[1:], rec[-1:]])
    out = np.clip(model.mute * shifted + model.sigma * rng.standard_normal(b.shape), 0.0, 1.0)
    outliers = np.flatnonzero(rng.random(T) < model.outlier_prob)
    names = sorted(EXPRESSIONS)
    for t in outliers:
        amp = model.outlier_magnitude * rng.uniform(0.3, 1.0)
        out[t] = np.clip(recipe_vector(names[rng.integers(len(names))], amp)
                         + model.sigma * rng.standard_normal(N_BASES), 0.0, 1.0)
    return out


# ---------------------------------------------------------------- oracle task

@dataclass(frozen=True)
class TaskConfig:
    n_real_subjects: int = 4
    n_val_subjects: int = 2
    n_test_subjects: int = 2
    n_synthetic_subjects: int = 4
    recordings_per_subject: int = 8
    synthetic_recordings_per_subject: int = 8
    n_vertices: int = 1500
    d: int = 32
    feature_noise: float = 0.01
    shift_gain: float = 0.05
    shift_bias: float = 0.1
    shift_noise: float = 0.002
    synthetic_amplitude: tuple[float, float] = (0.3, 1.0)
    noise: NoiseModel = field(default_factory=NoiseModel)
    hold: int = 40

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "noise"}
        out["synthetic_amplitude"] = list(self.synthetic_amplitude)
        out["noise"] = {k: getattr(self.noise, k) for k in self.noise.__dataclass_fields__}
        return out


@dataclass
class OracleTask:
    config: TaskConfig
    seed: int
    space: FeatureSpace
    shift: DomainShift
    rigs: dict[str, FaceRig]
    real: LabeledSet            # labels = corrupted pseudo labels R0, truth = oracle labels
    val: LabeledSet             # held-out real subjects for model selection
    test: LabeledSet            # held-out real subjects for reporting
    synthetic: LabeledSet       # labels = truth


def _subject(seed, task_seed, name, cfg: TaskConfig, space, shift, domain, n_rec, amplitude_rng=None):
    rig = gen_rig(seed, cfg.n_vertices)
    names = sorted(EXPRESSIONS)
    parts = []
    for r in range(n_rec):
        expr = names[r % len(names)]
        amp = 1.0
        if amplitude_rng is not None:
            amp = float(amplitude_rng.uniform(*cfg.synthetic_amplitude))
        script = AnimationScript((ScriptSegment(expr, amp, hold=cfg.hold),))
        rec_seed = int(np.random.SeedSequence([task_seed, seed, r]).generate_state(1)[0])
        anim = gen_animation(rec_seed, script, rig)
        feats = render_features(rig, space, anim, shift=shift, domain=domain, seed=rec_seed)
        rec_name = f"{name}/rec{r:02d}"
        T = len(anim.labels)
        parts.append(LabeledSet(feats, anim.labels, [Recording(rec_name, name, 0, T)],
                                {rec_name: anim.annotation}, anim.labels.copy(), domain))
    return rig, concatenate(parts)


def make_task(seed: int, config: TaskConfig | None = None) -> OracleTask:
    """Real (shifted) and synthetic subjects for the distillation oracle.

    Real subjects hold every scripted expression at full intensity and carry
    corrupted pseudo labels; synthetic subjects use random peak amplitudes
    and exact labels.
    """
    cfg = config or TaskConfig()
    ss = np.random.SeedSequence(seed)
    s_space, s_shift, s_noise, s_amp, s_subj = (int(c.generate_state(1)[0]) for c in ss.spawn(5))
    ref = gen_rig(s_subj, cfg.n_vertices)
    space = make_feature_space(s_space, ref, cfg.d, cfg.feature_noise)
    shift = DomainShift.random(s_shift, cfg.d, cfg.shift_gain, cfg.shift_bias, cfg.shift_noise)
    amp_rng = np.random.default_rng(s_amp)
    rigs, groups = {}, {"real": [], "val": [], "test": [], "synthetic": []}
    plan = ([("real", "real")] * cfg.n_real_subjects + [("val", "real")] * cfg.n_val_subjects
            + [("test", "real")] * cfg.n_test_subjects + [("synthetic", "synthetic")] * cfg.n_synthetic_subjects)
    for i, (group, domain) in enumerate(plan):
        name = f"{group}{len(groups[group]):02d}"
        n_rec = cfg.synthetic_recordings_per_subject if domain == "synthetic" else cfg.recordings_per_subject
        rig, data = _subject(s_subj + 1 + i, seed, name, cfg, space, shift, domain, n_rec,
                             amp_rng if domain == "synthetic" else None)
        rigs[name] = rig
        groups[group].append(data)
    real = concatenate(groups["real"])
    real = real.with_labels(corrupt_labels(real.truth, cfg.noise, s_noise, real.bounds))
    return OracleTask(cfg, seed, space, shift, rigs, real, concatenate(groups["val"]),
                      concatenate(groups["test"]), concatenate(groups["synthetic"]))


def make_domain_toy(seed: int, n_subjects: int = 4, recordings_per_subject: int = 8,
                    config: TaskConfig | None = None) -> dict[str, LabeledSet]:
    """Real/synthetic frames that differ only by the domain shift.

    Both domains draw the same subjects, scripts and amplitude distribution;
    every subject contributes to the training halves and, with fresh
    recordings, to held-out halves.
    """
    cfg = config or TaskConfig()
    ss = np.random.SeedSequence([seed, 0x70])
    s_space, s_shift, s_amp, s_subj = (int(c.generate_state(1)[0]) for c in ss.spawn(4))
    space = make_feature_space(s_space, gen_rig(s_subj, cfg.n_vertices), cfg.d, cfg.feature_noise)
    shift = DomainShift.random(s_shift, cfg.d, cfg.shift_gain, cfg.shift_bias, cfg.shift_noise)
    amp_rng = np.random.default_rng(s_amp)
    out = {}
    for split, offset in (("train", 0), ("heldout", 1000)):
        for domain in ("real", "synthetic"):
            parts = []
            for i in range(n_subjects):
                name = f"{domain}-{split}{i:02d}"
                rec_seed = s_subj + 1 + i
                _, data = _subject(rec_seed, seed + offset + (0 if domain == "real" else 500), name, cfg,
                                   space, shift, domain, recordings_per_subject, amp_rng)
                parts.append(data)
            out[f"{domain}_{split}"] = concatenate(parts)
    return out
