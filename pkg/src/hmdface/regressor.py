"""Multi-branch feed-forward regressor with shared mirrored branches and gradient reversal.

Everything is plain numpy: forward pass, hand-written backward pass and Adam.
Camera order of the five feature vectors is eye_l, eye_r, mouth_l, mouth_r,
glabella.  Left-camera features arrive already mirrored, so one encoder (and
one eye head) serves both sides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from hmdface.errors import ConfigError, DataError, NumericError
from hmdface.rig import N_BASES, STANDARD_LAYOUT, BasisLayout

N_CAMERAS = 5
# camera slot -> encoder name
ENCODER_OF = ("eye", "eye", "mouth", "mouth", "glabella")
CHECKPOINT_FORMAT = "hmdface-regressor"
CHECKPOINT_VERSION = 1


def _relu(x):
    return np.maximum(x, 0.0)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class MultiBranchModel:
    params: dict[str, np.ndarray]
    eye_l_idx: np.ndarray
    eye_r_idx: np.ndarray
    face_idx: np.ndarray
    mu: np.ndarray                  # (5, d) input normalization
    sd: np.ndarray
    lambda_d: float = 0.0

    @property
    def d(self) -> int:
        return self.params["enc_eye_W"].shape[0]

    @property
    def h(self) -> int:
        return self.params["enc_eye_W"].shape[1]

    def copy(self) -> "MultiBranchModel":
        return MultiBranchModel({k: v.copy() for k, v in self.params.items()}, self.eye_l_idx.copy(),
                                self.eye_r_idx.copy(), self.face_idx.copy(), self.mu.copy(),
                                self.sd.copy(), self.lambda_d)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])


def init_model(seed: int, d: int = 32, h: int = 32, hidden: int = 64,
               layout: BasisLayout = STANDARD_LAYOUT, zero_output: bool = False,
               disc_hidden: int = 0) -> MultiBranchModel:
    """Fresh model; ``disc_hidden = 0`` gives a linear (logistic) discriminator."""
    rng = np.random.default_rng([seed, 0x11])
    eye_l, eye_r, face = layout.eye_l_idx, layout.eye_r_idx, layout.face_idx
    if len(eye_l) != len(eye_r):
        raise DataError("left and right eye subsets differ in size")
    n_eye, n_face = len(eye_l), len(face)

    def he(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)

    p = {}
    for enc in ("eye", "mouth", "glabella"):
        p[f"enc_{enc}_W"] = he(d, h)
        p[f"enc_{enc}_b"] = np.zeros(h)
    p["head_eye_W1"], p["head_eye_b1"] = he(h, hidden), np.zeros(hidden)
    p["head_eye_W2"], p["head_eye_b2"] = 0.1 * he(hidden, n_eye), np.zeros(n_eye)
    p["head_face_W1"], p["head_face_b1"] = he(N_CAMERAS * h, hidden), np.zeros(hidden)
    p["head_face_W2"], p["head_face_b2"] = 0.1 * he(hidden, n_face), np.zeros(n_face)
    if disc_hidden:
        p["disc_W1"], p["disc_b1"] = he(N_CAMERAS * h, disc_hidden), np.zeros(disc_hidden)
        p["disc_W2"], p["disc_b2"] = 0.1 * he(disc_hidden, 1), np.zeros(1)
    else:
        p["disc_W"], p["disc_b"] = 0.1 * he(N_CAMERAS * h, 1), np.zeros(1)
    if zero_output:
        for k in ("head_eye_W2", "head_eye_b2", "head_face_W2", "head_face_b2"):
            p[k][:] = 0.0
    return MultiBranchModel(p, eye_l.copy(), eye_r.copy(), face.copy(),
                            np.zeros((N_CAMERAS, d)), np.ones((N_CAMERAS, d)))


def set_normalization(model: MultiBranchModel, features: np.ndarray) -> None:
    x = np.asarray(features, dtype=float)
    model.mu = x.mean(axis=0)
    model.sd = x.std(axis=0) + 1e-6


# ---------------------------------------------------------------- forward / backward

def _check_features(model: MultiBranchModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (N_CAMERAS, model.d):
        raise DataError(f"features must be (B, {N_CAMERAS}, {model.d}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("features contain non-finite values")
    return x


def _forward(model: MultiBranchModel, x):
    p = model.params
    xn = (x - model.mu) / model.sd
    cache = {"xn": xn, "a": [], "hs": []}
    for c, enc in enumerate(ENCODER_OF):
        a = xn[:, c] @ p[f"enc_{enc}_W"] + p[f"enc_{enc}_b"]
        cache["a"].append(a)
        cache["hs"].append(_relu(a))
    H = np.concatenate(cache["hs"], axis=1)
    cache["H"] = H
    z = np.empty((len(x), N_BASES))
    for side, idx in ((0, model.eye_l_idx), (1, model.eye_r_idx)):
        a1 = cache["hs"][side] @ p["head_eye_W1"] + p["head_eye_b1"]
        cache[f"eye{side}_a1"] = a1
        z[:, idx] = _relu(a1) @ p["head_eye_W2"] + p["head_eye_b2"]
    fa1 = H @ p["head_face_W1"] + p["head_face_b1"]
    cache["face_a1"] = fa1
    z[:, model.face_idx] = _relu(fa1) @ p["head_face_W2"] + p["head_face_b2"]
    if "disc_W" in p:
        logit = (H @ p["disc_W"] + p["disc_b"])[:, 0]
    else:
        da1 = H @ p["disc_W1"] + p["disc_b1"]
        cache["disc_a1"] = da1
        logit = (_relu(da1) @ p["disc_W2"] + p["disc_b2"])[:, 0]
    return z, logit, cache


def forward(model: MultiBranchModel, features) -> np.ndarray:
    """Blend weights in [0, 1]^53 for a (B, 5, d) or (5, d) feature array."""
    x = _check_features(model, features)
    z, _, _ = _forward(model, x)
    out = np.clip(z, 0.0, 1.0)
    return out[0] if np.ndim(features) == 2 else out


def predict(model: MultiBranchModel, features, batch: int = 4096) -> np.ndarray:
    x = _check_features(model, features)
    return np.concatenate([forward(model, x[i:i + batch]) for i in range(0, len(x), batch)])


# slope of the output clamp used by the training loss outside [0, 1]
LEAK = 0.05


def _leaky_clamp(z):
    c = np.clip(z, 0.0, 1.0)
    return c + LEAK * (z - c)


def _l1_grad(z, y):
    inside = (z > 0.0) & (z < 1.0)
    return np.sign(_leaky_clamp(z) - y) * np.where(inside, 1.0, LEAK)


def l1_loss(z, y) -> float:
    """Mean l1 between targets and the leaky-clamped output.

    Inside [0, 1] this is the plain l1 on the clamped prediction; beyond the
    clamp a small slope keeps saturated outputs trainable without letting
    inactive outputs (target 0, prediction below 0) dominate the gradient.
    """
    return float(np.mean(np.abs(_leaky_clamp(z) - y)))


def losses(model: MultiBranchModel, x, y, domain) -> tuple[float, float]:
    """Mean l1 training loss and mean domain BCE (real = 1)."""
    z, logit, _ = _forward(model, x)
    l1 = l1_loss(z, y)
    bce = float(np.mean(_softplus(logit) - domain * logit))
    return l1, bce


def _lin_back(g_out, inp, W, a_pre=None):
    """Backprop through ``act(inp @ W + b)``; returns (dW, db, d_inp)."""
    if a_pre is not None:
        g_out = g_out * (a_pre > 0)
    return inp.T @ g_out, g_out.sum(axis=0), g_out @ W.T


def backward(model: MultiBranchModel, x, y, domain, lambda_d: float | None = None):
    """Gradients of every parameter group.

    Heads descend the l1 loss, the discriminator descends the BCE and the
    encoders receive the l1 gradient plus the BCE gradient passed through the
    reversal junction, i.e. multiplied by ``-lambda_d``.  The junction
    gradients are returned for inspection.
    """
    lam = model.lambda_d if lambda_d is None else lambda_d
    p = model.params
    z, logit, cache = _forward(model, x)
    B = len(x)
    hs, H = cache["hs"], cache["H"]
    g = {}
    gz = _l1_grad(z, y) / z.size
    gH = np.zeros_like(H)
    hsz = model.h

    # eye head, shared across sides
    g["head_eye_W1"] = np.zeros_like(p["head_eye_W1"])
    g["head_eye_b1"] = np.zeros_like(p["head_eye_b1"])
    g["head_eye_W2"] = np.zeros_like(p["head_eye_W2"])
    g["head_eye_b2"] = np.zeros_like(p["head_eye_b2"])
    for side, idx in ((0, model.eye_l_idx), (1, model.eye_r_idx)):
        a1 = cache[f"eye{side}_a1"]
        dW2, db2, dr = _lin_back(gz[:, idx], _relu(a1), p["head_eye_W2"])
        dW1, db1, dh = _lin_back(dr, hs[side], p["head_eye_W1"], a1)
        g["head_eye_W2"] += dW2
        g["head_eye_b2"] += db2
        g["head_eye_W1"] += dW1
        g["head_eye_b1"] += db1
        gH[:, side * hsz:(side + 1) * hsz] += dh

    fa1 = cache["face_a1"]
    g["head_face_W2"], g["head_face_b2"], dr = _lin_back(gz[:, model.face_idx], _relu(fa1), p["head_face_W2"])
    g["head_face_W1"], g["head_face_b1"], dH = _lin_back(dr, H, p["head_face_W1"], fa1)
    gH += dH

    # discriminator on the concatenated encodings
    glogit = (_sigmoid(logit) - domain)[:, None] / B
    if "disc_W" in p:
        g["disc_W"], g["disc_b"], junction_out = _lin_back(glogit, H, p["disc_W"])
    else:
        da1 = cache["disc_a1"]
        g["disc_W2"], g["disc_b2"], dr = _lin_back(glogit, _relu(da1), p["disc_W2"])
        g["disc_W1"], g["disc_b1"], junction_out = _lin_back(dr, H, p["disc_W1"], da1)
    junction_in = -lam * junction_out
    gH = gH + junction_in

    for enc in ("eye", "mouth", "glabella"):
        g[f"enc_{enc}_W"] = np.zeros_like(p[f"enc_{enc}_W"])
        g[f"enc_{enc}_b"] = np.zeros_like(p[f"enc_{enc}_b"])
    for c, enc in enumerate(ENCODER_OF):
        dW, db, _ = _lin_back(gH[:, c * hsz:(c + 1) * hsz], cache["xn"][:, c], p[f"enc_{enc}_W"], cache["a"][c])
        g[f"enc_{enc}_W"] += dW
        g[f"enc_{enc}_b"] += db
    return g, {"junction_out": junction_out, "junction_in": junction_in}


def _group(name: str) -> str:
    return "encoder" if name.startswith("enc_") else ("disc" if name.startswith("disc") else "head")


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    worst_param: str
    junction_sign_ok: bool


def gradient_check(model: MultiBranchModel, x, y, domain, n_params: int = 60, h: float = 1e-5,
                   seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central differences on random parameters.

    Each group is checked against its own objective: heads against l1,
    the discriminator against BCE, encoders against ``l1 - lambda_d * BCE``.
    A probe that straddles a ReLU or l1 kink is retried with a smaller step
    and skipped if the kink cannot be avoided.
    """
    x = _check_features(model, x)
    analytic, junction = backward(model, x, y, domain)
    rng = np.random.default_rng(seed)
    names = sorted(model.params)
    sizes = np.array([model.params[k].size for k in names])
    lam = model.lambda_d

    def objective(group):
        l1, bce = losses(model, x, y, domain)
        if group == "head":
            return l1
        if group == "disc":
            return bce
        return l1 - lam * bce

    def pattern():
        z, logit, cache = _forward(model, x)
        keys = [k for k in ("eye0_a1", "eye1_a1", "face_a1", "disc_a1") if k in cache]
        masks = [a > 0 for a in cache["a"]] + [cache[k] > 0 for k in keys]
        masks += [z > 0, z < 1, _leaky_clamp(z) > y]
        return np.concatenate([m.ravel() for m in masks])

    base = pattern()
    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    while checked + skipped < n_params:
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat_idx = rng.integers(model.params[k].size)
        arr = model.params[k].reshape(-1)
        orig = arr[flat_idx]
        step = h
        fd = None
        for _ in range(6):
            arr[flat_idx] = orig + step
            fp, pp = objective(_group(k)), pattern()
            arr[flat_idx] = orig - step
            fm, pm = objective(_group(k)), pattern()
            arr[flat_idx] = orig
            if np.array_equal(pp, base) and np.array_equal(pm, base):
                fd = (fp - fm) / (2 * step)
                break
            step /= 10
        if fd is None:
            skipped += 1
            continue
        a = analytic[k].reshape(-1)[flat_idx]
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        if rel > worst:
            worst, worst_name = rel, k
        checked += 1
    sign_ok = bool(np.array_equal(junction["junction_in"], -lam * junction["junction_out"]))
    return GradCheckReport(worst, checked, skipped, worst_name, sign_ok)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 20
    lambda_schedule: str = "linear"     # "linear" 0 -> lambda_max, "constant", or "off"
    lambda_max: float = 1.0
    seed: int = 0
    h: int = 32
    hidden: int = 64
    disc_hidden: int = 0
    disc_lr_scale: float = 1.0          # discriminator step size relative to lr
    beta1: float = 0.5                  # low momentum damps the adversarial oscillation
    lr_anneal: bool = True              # lr / (1 + 10 p)^0.75 over training progress p
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch size must be even so real and synthetic halves are equal")
        if self.lr <= 0 or self.epochs < 0:
            raise ConfigError("learning rate must be positive and epochs non-negative")
        if self.lambda_schedule not in ("linear", "constant", "off"):
            raise ConfigError(f"unknown lambda schedule {self.lambda_schedule!r}")

    def lambda_at(self, progress: float) -> float:
        if self.lambda_schedule == "off":
            return 0.0
        if self.lambda_schedule == "constant":
            return self.lambda_max
        return self.lambda_max * progress


@dataclass
class History:
    l1: list[float] = field(default_factory=list)
    disc_accuracy: list[float] = field(default_factory=list)
    lambda_d: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8,
                 scale: dict[str, float] | None = None):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.scale = scale or {}
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * self.scale.get(k, 1.0) * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _check_labeled(name, x, y, d):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0:
        raise DataError(f"{name} set is empty")
    if x.ndim != 3 or x.shape[1:] != (N_CAMERAS, d):
        raise DataError(f"{name} features must be (N, {N_CAMERAS}, {d}), got {x.shape}")
    if y.shape != (len(x), N_BASES):
        raise DataError(f"{name} labels must be (N, {N_BASES})")
    if np.any((y < 0) | (y > 1)):
        raise DataError(f"{name} labels must lie in [0, 1]")
    return x, y


def train(real_x, real_y, syn_x, syn_y, config: TrainConfig | None = None,
          model: MultiBranchModel | None = None, layout: BasisLayout = STANDARD_LAYOUT):
    """Train on half-real, half-synthetic batches; returns (model, history)."""
    cfg = config or TrainConfig()
    d = np.shape(real_x)[-1]
    real_x, real_y = _check_labeled("real", real_x, real_y, d)
    syn_x, syn_y = _check_labeled("synthetic", syn_x, syn_y, d)
    if model is None:
        model = init_model(cfg.seed, d, cfg.h, cfg.hidden, layout, disc_hidden=cfg.disc_hidden)
        set_normalization(model, np.concatenate([real_x, syn_x]))
    else:
        model = model.copy()
    rng = np.random.default_rng([cfg.seed, 0x22])
    half = cfg.batch_size // 2
    steps = cfg.steps_per_epoch or max(1, max(len(real_x), len(syn_x)) // half)
    total = max(1, cfg.epochs * steps)
    opt = Adam(model.params, cfg.lr, b1=cfg.beta1,
               scale={k: cfg.disc_lr_scale for k in model.params if k.startswith("disc")})
    hist = History()
    dom = np.concatenate([np.ones(half), np.zeros(half)])
    step = 0
    for epoch in range(cfg.epochs):
        l1s, accs = [], []
        for s in range(steps):
            progress = step / total
            model.lambda_d = cfg.lambda_at(progress)
            if cfg.lr_anneal:
                opt.lr = cfg.lr / (1.0 + 10.0 * progress) ** 0.75
            ir = rng.integers(len(real_x), size=half)
            js = rng.integers(len(syn_x), size=half)
            xb = np.concatenate([real_x[ir], syn_x[js]])
            yb = np.concatenate([real_y[ir], syn_y[js]])
            grads, _ = backward(model, xb, yb, dom)
            z, logit, _ = _forward(model, xb)
            l1 = l1_loss(z, yb)
            if not np.isfinite(l1) or not np.all(np.isfinite(logit)):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {s}")
            l1s.append(l1)
            accs.append(float(np.mean((logit > 0) == (dom > 0.5))))
            opt.step(model.params, grads)
            step += 1
        hist.l1.append(float(np.mean(l1s)))
        hist.disc_accuracy.append(float(np.mean(accs)))
        hist.lambda_d.append(model.lambda_d)
    model.lambda_d = cfg.lambda_at(1.0)
    return model, hist


def discriminator_accuracy(model: MultiBranchModel, real_x, syn_x, seed: int = 0, batch: int = 64,
                           n_batches: int = 20) -> float:
    """Accuracy of the domain discriminator on balanced batches."""
    real_x = _check_features(model, real_x)
    syn_x = _check_features(model, syn_x)
    rng = np.random.default_rng(seed)
    half = batch // 2
    hits = []
    for _ in range(n_batches):
        xb = np.concatenate([real_x[rng.integers(len(real_x), size=half)],
                             syn_x[rng.integers(len(syn_x), size=half)]])
        _, logit, _ = _forward(model, xb)
        hits.append(np.mean((logit > 0) == np.r_[np.ones(half), np.zeros(half)].astype(bool)))
    return float(np.mean(hits))


# ---------------------------------------------------------------- checkpoints

def model_to_dict(model: MultiBranchModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "lambda_d": model.lambda_d,
        "eye_l_idx": model.eye_l_idx.tolist(),
        "eye_r_idx": model.eye_r_idx.tolist(),
        "face_idx": model.face_idx.tolist(),
        "normalization": {"mu": model.mu.tolist(), "sd": model.sd.tolist()},
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(model.params.items())},
    }


def model_from_dict(doc: dict) -> MultiBranchModel:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError("not a regressor checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {doc.get('version')}")
    params = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in doc["params"].items()}
    return MultiBranchModel(
        params, np.array(doc["eye_l_idx"]), np.array(doc["eye_r_idx"]), np.array(doc["face_idx"]),
        np.array(doc["normalization"]["mu"]), np.array(doc["normalization"]["sd"]), float(doc["lambda_d"]),
    )


def save_model(model: MultiBranchModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> MultiBranchModel:
    return model_from_dict(json.loads(Path(path).read_text()))
