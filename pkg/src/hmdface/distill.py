"""Iterative label distillation: pool training, post-processing, selection, ensembling."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from hmdface import regressor as reg
from hmdface.dataset import LabeledSet
from hmdface.errors import ConfigError, DataError, HmdFaceError
from hmdface.metrics import ArtPriors, MetricConfig, evaluate_sequences, weighted_score
from hmdface.rig import STANDARD_LAYOUT, BasisLayout


@dataclass(frozen=True)
class DistillConfig:
    rounds: int = 6
    pool_size: int = 4
    select_k: int = 3
    window: int = 5
    p_lo: float = 5.0
    p_hi: float = 95.0
    min_spread: float = 0.05
    min_improvement: float = 1e-3
    seed: int = 0
    metric_weights: dict = field(default_factory=lambda: dict(MetricConfig().weights))

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("rounds must be non-negative")
        if self.pool_size < 1 or self.select_k < 1:
            raise ConfigError("pool size and select count must be positive")
        if self.select_k > 2 * self.pool_size:
            raise ConfigError("select count cannot exceed twice the pool size")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("smoothing window must be a positive odd number")
        if not 0.0 <= self.p_lo < self.p_hi <= 100.0:
            raise ConfigError("need 0 <= p_lo < p_hi <= 100")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- post-processing

def smooth(curve, window: int) -> np.ndarray:
    """Centred moving average along axis 0 with edge replication.

    Written as ``x + mean(window - x)`` so constant curves come back bit-exact.
    """
    x = np.asarray(curve, dtype=float)
    if len(x) < window:
        raise DataError(f"curve of {len(x)} frames is shorter than the window {window}")
    r = window // 2
    pad = np.concatenate([np.repeat(x[:1], r, axis=0), x, np.repeat(x[-1:], r, axis=0)])
    acc = np.zeros_like(x)
    for k in range(window):
        acc += pad[k:k + len(x)] - x
    return x + acc / window


def percentile_stats(values, p_lo: float, p_hi: float):
    v = np.asarray(values, dtype=float)
    return np.percentile(v, p_lo, axis=0), np.percentile(v, p_hi, axis=0)


def calibrate(values, lo, hi, min_spread: float = 0.05, skip=()) -> np.ndarray:
    """Affine map ``lo -> 0``, ``hi -> 1`` per coefficient, clamped to [0, 1].

    Coefficients whose spread is below ``min_spread`` or listed in ``skip``
    pass through untouched.
    """
    v = np.asarray(values, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    spread = hi - lo
    active = spread >= min_spread
    active[list(skip)] = False
    out = v.copy()
    out[:, active] = np.clip((v[:, active] - lo[active]) / spread[active], 0.0, 1.0)
    return out


def post_process(data: LabeledSet, config: DistillConfig | None = None,
                 layout: BasisLayout = STANDARD_LAYOUT) -> LabeledSet:
    """Per-subject range calibration followed by per-recording smoothing.

    Percentiles are read from the smoothed labels so that single-frame noise
    does not set the range.  Gaze-following coefficients are not calibrated:
    their range is set by where the subject looked, not by expression extent.
    """
    cfg = config or DistillConfig()
    for r in data.recordings:
        if r.length < cfg.window:
            raise DataError(f"recording {r.name!r} has {r.length} frames, fewer than the window {cfg.window}")
    labels = data.labels
    smoothed = np.empty_like(labels)
    for r in data.recordings:
        smoothed[r.start:r.stop] = smooth(labels[r.start:r.stop], cfg.window)
    calibrated = np.empty_like(labels)
    for subject in data.subjects:
        idx = data.subject_frames(subject)
        lo, hi = percentile_stats(smoothed[idx], cfg.p_lo, cfg.p_hi)
        calibrated[idx] = calibrate(labels[idx], lo, hi, cfg.min_spread, layout.gaze_following_idx)
    out = np.empty_like(labels)
    for r in data.recordings:
        out[r.start:r.stop] = np.clip(smooth(calibrated[r.start:r.stop], cfg.window), 0.0, 1.0)
    return data.with_labels(out)


# ---------------------------------------------------------------- pool, selection, ensemble

@dataclass
class PoolMember:
    id: int                     # seed id; lower wins metric ties
    variant: str                # "raw" or "post"
    model: reg.MultiBranchModel
    metrics: dict = field(default_factory=dict)
    score: float = float("nan")


def score_model(model, data: LabeledSet, priors: ArtPriors, weights=None,
                layout: BasisLayout = STANDARD_LAYOUT, metric_config: MetricConfig | None = None):
    pred = reg.predict(model, data.features)
    report = evaluate_sequences(data.split(pred), data.annotations, data.subject_of, priors, layout,
                                metric_config)
    return report.dataset, weighted_score(report.dataset, weights)


def select(pool: list[PoolMember], k: int) -> list[PoolMember]:
    """Top ``k`` members by weighted score; ties go to the lower id."""
    if not pool:
        raise DataError("cannot select from an empty pool")
    ranked = sorted(pool, key=lambda m: (-m.score, m.id))
    return ranked[:k]


def ensemble_inference(models: list[reg.MultiBranchModel], features) -> np.ndarray:
    """Mean of the members' predictions (fixed order), clamped to [0, 1]."""
    if not models:
        raise DataError("ensemble needs at least one model")
    d = models[0].d
    if any(m.d != d for m in models):
        raise DataError("ensemble members disagree on feature dimension")
    # first + mean offset, so identical members reproduce the single-model output bit-exactly
    first = reg.predict(models[0], features)
    acc = np.zeros_like(first)
    for m in models[1:]:
        acc += reg.predict(m, features) - first
    return np.clip(first + acc / len(models), 0.0, 1.0)


# ---------------------------------------------------------------- the loop

@dataclass
class RoundReport:
    round: int
    pool: dict[int, dict]               # id -> {"variant", "metrics", "score"}
    selected: list[int]
    label_delta: dict[str, float]
    label_metrics: dict[str, float]
    label_score: float
    accepted: bool = True

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "pool": {str(k): v for k, v in self.pool.items()},
            "selected": self.selected,
            "label_delta": self.label_delta,
            "label_metrics": self.label_metrics,
            "label_score": self.label_score,
            "accepted": self.accepted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundReport":
        return cls(int(d["round"]), {int(k): v for k, v in d["pool"].items()}, list(d["selected"]),
                   d["label_delta"], d["label_metrics"], float(d["label_score"]), bool(d["accepted"]))


@dataclass
class DistillResult:
    model: reg.MultiBranchModel
    labels: LabeledSet                  # R_T actually used for the final model
    rounds: list[RoundReport]
    initial_score: float                # weighted metric of R_0
    initial_model: reg.MultiBranchModel | None = None
    stopped_early: bool = False

    @property
    def series(self) -> list[float]:
        """Weighted label metric per round, R_0 first."""
        return [self.initial_score] + [r.label_score for r in self.rounds]


def model_seed(master: int, round_: int, variant: int, index: int) -> int:
    return int(np.random.SeedSequence([master, round_, variant, index]).generate_state(1)[0])


def _train_job(args):
    real_x, real_y, syn_x, syn_y, cfg = args
    model, _ = reg.train(real_x, real_y, syn_x, syn_y, cfg)
    return model


def _run_jobs(jobs_args, jobs: int):
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_train_job, jobs_args))
    return [_train_job(a) for a in jobs_args]


def label_score(data: LabeledSet, priors: ArtPriors, weights=None, layout=STANDARD_LAYOUT,
                metric_config: MetricConfig | None = None):
    report = evaluate_sequences(data.split(data.labels), data.annotations, data.subject_of, priors, layout,
                                metric_config)
    return report.dataset, weighted_score(report.dataset, weights)


def _config_hash(*docs) -> str:
    return hashlib.sha256(json.dumps(docs, sort_keys=True, default=str).encode()).hexdigest()[:16]


def distill(r0: LabeledSet, synthetic: LabeledSet, val: LabeledSet, priors: ArtPriors,
            config: DistillConfig | None = None, train_config: reg.TrainConfig | None = None,
            run_dir=None, resume: bool = False, jobs: int = 1,
            layout: BasisLayout = STANDARD_LAYOUT,
            metric_config: MetricConfig | None = None) -> DistillResult:
    """Run the distillation rounds, then train the output model on post-processed R_T.

    ``val`` (held-out real subjects with annotations) drives model selection.
    With ``run_dir`` every completed round is written out; ``resume`` reuses
    completed rounds whose configuration hash matches.
    """
    cfg = config or DistillConfig()
    tcfg = train_config or reg.TrainConfig()
    if len(r0) == 0 or len(synthetic) == 0:
        raise DataError("distillation needs non-empty real and synthetic sets")
    weights = cfg.metric_weights
    run = Path(run_dir) if run_dir is not None else None
    chash = _config_hash(cfg.to_dict(), asdict(tcfg), asdict(metric_config or MetricConfig()))
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        state_path = run / "state.json"
        if resume and state_path.exists():
            state = json.loads(state_path.read_text())
            if state["config_hash"] != chash:
                raise ConfigError("run directory was produced with a different configuration")
        elif not resume:
            for old in run.glob("round_*"):
                if (old / "report.json").exists():
                    (old / "report.json").unlink()

    _, m0 = label_score(r0, priors, weights, layout, metric_config)
    current = r0.with_labels(r0.labels, round=0)
    current_score = m0
    reports: list[RoundReport] = []
    initial_model = None
    stopped = False

    for t in range(1, cfg.rounds + 1):
        rdir = run / f"round_{t:02d}" if run is not None else None
        if resume and rdir is not None and (rdir / "report.json").exists():
            rep = RoundReport.from_dict(json.loads((rdir / "report.json").read_text()))
            if t == 1 and (rdir / "initial_model.json").exists():
                initial_model = reg.load_model(rdir / "initial_model.json")
            reports.append(rep)
            if rep.accepted or rep.label_score > current_score:
                current, current_score = LabeledSet.load(rdir / "labels"), rep.label_score
            if not rep.accepted:
                stopped = True
                break
            continue

        post = post_process(current, cfg, layout)
        args, meta = [], []
        for v, (variant, data) in enumerate((("raw", current), ("post", post))):
            for i in range(cfg.pool_size):
                seed = model_seed(cfg.seed, t, v, i)
                args.append((data.features, data.labels, synthetic.features, synthetic.labels,
                             replace(tcfg, seed=seed)))
                meta.append((v * cfg.pool_size + i, variant))
        try:
            models = _run_jobs(args, jobs)
        except HmdFaceError as exc:
            raise type(exc)(f"round {t}: {exc}") from exc
        pool = []
        for (mid, variant), model in zip(meta, models):
            metrics, score = score_model(model, val, priors, weights, layout, metric_config)
            pool.append(PoolMember(mid, variant, model, metrics, score))
        if t == 1:
            initial_model = pool[0].model
        chosen = select(pool, cfg.select_k)
        new_labels = ensemble_inference([m.model for m in chosen], current.features)
        new = current.with_labels(new_labels, round=t)
        metrics, score = label_score(new, priors, weights, layout, metric_config)
        delta = np.abs(new_labels - current.labels)
        accepted = score - current_score >= cfg.min_improvement
        rep = RoundReport(
            t, {m.id: {"variant": m.variant, "metrics": m.metrics, "score": m.score} for m in pool},
            [m.id for m in chosen], {"mean_abs": float(delta.mean()), "max_abs": float(delta.max())},
            metrics, score, accepted,
        )
        reports.append(rep)
        if rdir is not None:
            rdir.mkdir(parents=True, exist_ok=True)
            new.save(rdir / "labels")
            for m in chosen:
                reg.save_model(m.model, rdir / f"model_{m.id:02d}.json")
            if t == 1:
                reg.save_model(initial_model, rdir / "initial_model.json")
            (rdir / "report.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True))
            (run / "state.json").write_text(json.dumps({"config_hash": chash, "completed": t}))
        if not accepted:
            # keep the better of R_t and R_{t-1}
            if score > current_score:
                current, current_score = new, score
            stopped = True
            break
        current, current_score = new, score

    final_cfg = replace(tcfg, seed=model_seed(cfg.seed, cfg.rounds + 1, 2, 0))
    final_post = post_process(current, cfg, layout)
    model, _ = reg.train(final_post.features, final_post.labels, synthetic.features, synthetic.labels, final_cfg)
    if run is not None:
        reg.save_model(model, run / "final_model.json")
        (run / "rounds.json").write_text(json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True))
    return DistillResult(model, current, reports, m0, initial_model, stopped)
