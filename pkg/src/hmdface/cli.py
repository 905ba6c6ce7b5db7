"""Command-line experiment runner: gen, place, fit, train, distill, eval, report.

Every stage reads and writes plain files under ``--out``.  Each run records
its configuration hash, seeds, package versions and output digests in
``manifest.json``; nothing time-dependent is written so that two runs with the
same configuration produce identical manifests.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from hmdface import __version__
from hmdface import camera as cam_mod
from hmdface import datagen, distill as dist, fitter, regressor as reg
from hmdface.dataset import LabeledSet
from hmdface.errors import ConfigError, DataError, HmdFaceError, NumericError
from hmdface.metrics import (METRIC_NAMES, MetricConfig, evaluate_sequences, load_priors, metric_table,
                             priors_to_dict)
from hmdface.rig import STANDARD_LAYOUT, FrameLabel, load_rig, save_rig

log = logging.getLogger("hmdface")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
SPLITS = ("real", "val", "test", "synthetic")


# ---------------------------------------------------------------- configuration

@dataclasses.dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "run"
    task: datagen.TaskConfig = dataclasses.field(default_factory=datagen.TaskConfig)
    camera_set: str | None = None
    fit: fitter.FitConfig = dataclasses.field(default_factory=fitter.FitConfig)
    fit_frames: int = 6
    fit_noise: float = 0.0
    train: reg.TrainConfig = dataclasses.field(default_factory=reg.TrainConfig)
    distill: dist.DistillConfig = dataclasses.field(default_factory=dist.DistillConfig)
    metrics: MetricConfig = dataclasses.field(default_factory=MetricConfig)

    def to_dict(self) -> dict:
        """Everything that shapes results; the output location is left out."""
        doc = json.loads(json.dumps(dataclasses.asdict(self)))
        doc.pop("out")
        return doc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_SECTIONS = {"task": datagen.TaskConfig, "fit": fitter.FitConfig, "train": reg.TrainConfig,
             "distill": dist.DistillConfig, "metrics": MetricConfig}


def _section(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")
    kw = dict(doc)
    if cls is datagen.TaskConfig:
        if "noise" in kw:
            kw["noise"] = _section(datagen.NoiseModel, kw["noise"], f"{where}.noise")
        if "synthetic_amplitude" in kw:
            kw["synthetic_amplitude"] = tuple(kw["synthetic_amplitude"])
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Validate a config document; unknown keys are rejected by name."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}")
    kw = {}
    for k, v in doc.items():
        if k in _SECTIONS:
            kw[k] = _section(_SECTIONS[k], v, k)
        else:
            kw[k] = v
    if "seed" in kw and (not isinstance(kw["seed"], int) or kw["seed"] < 0):
        raise ConfigError("seed must be a non-negative integer")
    for k in ("fit_frames",):
        if k in kw and (not isinstance(kw[k], int) or kw[k] < 1):
            raise ConfigError(f"{k} must be a positive integer")
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


# ---------------------------------------------------------------- manifest

def _digest_file(path: Path) -> str:
    if path.suffix == ".npz":
        # zip members carry timestamps, so hash the array contents instead
        h = hashlib.sha256()
        with np.load(path) as z:
            for k in sorted(z.files):
                a = z[k]
                h.update(k.encode() + str(a.dtype).encode() + str(a.shape).encode())
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def versions() -> dict:
    import scipy
    return {"hmdface": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def update_manifest(out: Path, stage: str, cfg: ExperimentConfig, seeds: dict, outputs: list[Path]) -> None:
    path = out / "manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc["config_hash"] = cfg.digest()
    doc["config"] = cfg.to_dict()
    doc["versions"] = versions()
    doc.setdefault("stages", {})[stage] = {
        "seeds": seeds,
        "outputs": {str(p.relative_to(out)): _digest_file(p) for p in sorted(outputs)},
    }
    doc["stages"] = dict(sorted(doc["stages"].items()))
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# ---------------------------------------------------------------- stage inputs

def _data_dir(out: Path) -> Path:
    return out / "recordings"


def load_split(out: Path, name: str) -> LabeledSet:
    _require((_data_dir(out) / name).with_suffix(".npz"), "gen")
    return LabeledSet.load(_data_dir(out) / name)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DataError(f"{path} is missing; run `{stage}` first")
    return path


def _priors(out: Path):
    return load_priors(_require(out / "priors.json", "gen"))


# ---------------------------------------------------------------- commands

def cmd_gen(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> list[Path]:
    """Generate the oracle task: rigs, recordings, priors, feature cameras."""
    task = datagen.make_task(cfg.seed, cfg.task)
    outputs = []
    rig_dir = out / "rigs"
    rig_dir.mkdir(parents=True, exist_ok=True)
    for name, rig in sorted(task.rigs.items()):
        p = rig_dir / f"{name}.json"
        save_rig(rig, p)
        outputs.append(p)
    _data_dir(out).mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        data = getattr(task, split)
        data.save(_data_dir(out) / split)
        outputs += [(_data_dir(out) / split).with_suffix(s) for s in (".npz", ".json")]
    outputs.append(_write_json(out / "priors.json", priors_to_dict(datagen.default_priors())))
    specs = datagen.hmd_cameras()
    cams = {"hmd": ([s.camera for s in specs], {s.camera.name: list(s.regions) for s in specs})}
    outputs.append(_write_json(out / "cameras.json", cam_mod.camera_set_to_dict(cams)))
    outputs.append(_write_json(out / "dataset.json", {
        "seed": cfg.seed, "task": cfg.task.to_dict(),
        "frames": {s: len(getattr(task, s)) for s in SPLITS},
        "subjects": {s: getattr(task, s).subjects for s in SPLITS},
    }))
    log.info("gen: %s", {s: len(getattr(task, s)) for s in SPLITS})
    return outputs


def cmd_place(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> list[Path]:
    """Score camera configurations (Visibility, Range of Motion) over the generated rigs."""
    cam_path = Path(cfg.camera_set) if cfg.camera_set else _require(out / "cameras.json", "gen")
    if not cam_path.exists():
        raise DataError(f"camera set {cam_path} not found")
    configs = cam_mod.load_camera_set(cam_path)
    if not configs:
        raise DataError("camera set has no configurations")
    rig_paths = sorted(_require(out / "rigs", "gen").glob("*.json"))
    if not rig_paths:
        raise DataError("no rigs found; run `gen` first")
    rigs = [load_rig(p) for p in rig_paths]
    recipes = {e: {n: 1.0 for n in names} for e, names in datagen.EXPRESSIONS.items()}
    expressions = cam_mod.ExpressionSet.from_recipes(recipes, list(STANDARD_LAYOUT.names))
    poses = cam_mod.default_pose_samples()
    reports = {}
    for name, (cams, assign) in configs.items():
        if not cams:
            raise DataError(f"camera configuration {name!r} is empty")
        reports[name] = cam_mod.score_placement(cams, rigs, expressions, poses, assign)
    text = "\n".join(f"[{n}]\n{r.ranking_table()}" for n, r in reports.items())
    if len(reports) > 1:
        text += "\n" + cam_mod.comparison_table(reports)
    return [_write_json(out / "placement" / "placement.json", {n: r.to_dict() for n, r in reports.items()}),
            _write_text(out / "placement" / "placement.txt", text)]


def cmd_fit(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> list[Path]:
    """Fit rig coefficients to multi-camera keypoints of the first real recording's peak frames."""
    real = load_split(out, "real")
    rec = real.recordings[0]
    rig = load_rig(_require(out / "rigs" / f"{rec.subject}.json", "gen"))
    truth = real.truth if real.truth is not None else real.labels
    idx = np.linspace(rec.start, rec.stop - 1, cfg.fit_frames).round().astype(int)
    cameras = datagen.fitting_cameras()
    rng_seed = int(np.random.SeedSequence([cfg.seed, 7]).generate_state(1)[0])
    obs = [fitter.synthesize_observations(rig, cameras, FrameLabel(truth[i], np.eye(3), np.zeros(3)),
                                          noise=cfg.fit_noise, seed=rng_seed + k)
           for k, i in enumerate(idx)]
    fcfg = dataclasses.replace(cfg.fit, seed=cfg.seed)
    result = fitter.fit_sequence(rig, cameras, obs, fitter.default_constraints(), fcfg,
                                 parallel=jobs > 1, jobs=jobs)
    err = np.abs(result.weights - truth[idx])
    if not np.all(np.isfinite(result.weights)):
        raise NumericError("fit produced non-finite coefficients")
    outputs = [_write_json(out / "fit" / "observations.json", fitter.observations_to_dict(cameras, obs))]
    p = out / "fit" / "result.json"
    fitter.save_result(result, STANDARD_LAYOUT.names, p)
    outputs.append(p)
    outputs.append(_write_json(out / "fit" / "report.json", {
        "recording": rec.name, "frames": idx.tolist(), "mae": float(err.mean()),
        "max_abs_error": float(err.max()), "final_loss": result.final_loss,
        "converged": result.converged,
    }))
    log.info("fit: MAE %.4f over %d frames", err.mean(), len(idx))
    return outputs


def cmd_train(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> list[Path]:
    """Train one regressor on the initial pseudo labels plus synthetic data."""
    real, syn = load_split(out, "real"), load_split(out, "synthetic")
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    model, hist = reg.train(real.features, real.labels, syn.features, syn.labels, tcfg)
    p = out / "train" / "model.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    reg.save_model(model, p)
    return [p, _write_json(out / "train" / "history.json", dataclasses.asdict(hist))]


def cmd_distill(cfg: ExperimentConfig, out: Path, jobs: int = 1, resume: bool = False) -> list[Path]:
    """Iterative distillation; rounds land in ``distill/round_XX``."""
    real, syn, val = load_split(out, "real"), load_split(out, "synthetic"), load_split(out, "val")
    dcfg = dataclasses.replace(cfg.distill, seed=cfg.seed)
    run = out / "distill"
    res = dist.distill(real, syn, val, _priors(out), dcfg, cfg.train, run_dir=run, resume=resume,
                       jobs=jobs, metric_config=cfg.metrics)
    if res.initial_model is not None:
        reg.save_model(res.initial_model, run / "initial_model.json")
    res.labels.save(run / "final_labels")
    outputs = [_write_json(run / "series.json", {
        "weighted": res.series, "accepted": [True] + [r.accepted for r in res.rounds],
        "stopped_early": res.stopped_early,
    })]
    outputs += sorted(p for p in run.rglob("*") if p.is_file() and p.name != "series.json")
    return outputs


def _eval_rows(cfg, out: Path):
    test = load_split(out, "test")
    real = load_split(out, "real")
    priors = _priors(out)

    def score(data, values):
        rep = evaluate_sequences(data.split(values), data.annotations, data.subject_of, priors,
                                 STANDARD_LAYOUT, cfg.metrics)
        return rep

    rows, reports = {}, {}
    reports["pseudo-GT (R0)"] = score(real, real.labels)
    if real.truth is not None:
        reports["true labels"] = score(real, real.truth)
    for label, path in (("initial model", out / "distill" / "initial_model.json"),
                        ("trained model", out / "train" / "model.json"),
                        ("final model", out / "distill" / "final_model.json")):
        if path.exists():
            reports[label] = score(test, reg.predict(reg.load_model(path), test.features))
    for k, rep in reports.items():
        rows[k] = rep.dataset
    return rows, reports


def cmd_eval(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> list[Path]:
    """Metric table over label sources and models, plus the per-round series."""
    rows, reports = _eval_rows(cfg, out)
    if len(rows) == 0:
        raise DataError("nothing to evaluate")
    weights = cfg.metrics.weights
    doc = {k: {"dataset": r.dataset, "subject": r.subject, "recording": r.recording,
               "weighted": r.weighted(weights)} for k, r in reports.items()}
    outputs = [_write_json(out / "eval" / "metrics.json", doc),
               _write_text(out / "eval" / "metrics.txt", metric_table(rows))]
    series_path = out / "distill" / "series.json"
    if series_path.exists():
        series = json.loads(series_path.read_text())
        lines = ["round  weighted  accepted"]
        for t, (v, a) in enumerate(zip(series["weighted"], series["accepted"])):
            lines.append(f"{t:5d}  {v:8.4f}  {'yes' if a else 'no'}")
        outputs.append(_write_text(out / "eval" / "round_series.txt", "\n".join(lines) + "\n"))
        outputs.append(_write_json(out / "eval" / "round_series.json", series))
    return outputs


def cmd_report(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> list[Path]:
    """Collect stage outputs into one plain-text report."""
    parts = [f"seed {cfg.seed}   config {cfg.digest()[:16]}", ""]
    for title, path in (("Camera placement", out / "placement" / "placement.txt"),
                        ("Metrics", out / "eval" / "metrics.txt"),
                        ("Distillation rounds", out / "eval" / "round_series.txt")):
        if path.exists():
            parts += [title, "-" * len(title), path.read_text()]
    fit_path = out / "fit" / "report.json"
    if fit_path.exists():
        fr = json.loads(fit_path.read_text())
        parts += ["Coefficient fit", "---------------",
                  f"MAE {fr['mae']:.4f} over {len(fr['frames'])} frames of {fr['recording']}", ""]
    if len(parts) == 2:
        raise DataError("no stage outputs to report")
    return [_write_text(out / "report.txt", "\n".join(parts))]


COMMANDS = {"gen": cmd_gen, "place": cmd_place, "fit": cmd_fit, "train": cmd_train,
            "distill": cmd_distill, "eval": cmd_eval, "report": cmd_report}


def _stage_seeds(cmd: str, cfg: ExperimentConfig) -> dict:
    seeds = {"master": cfg.seed}
    if cmd == "distill":
        seeds["rounds"] = {t: [dist.model_seed(cfg.seed, t, v, i) for v in (0, 1)
                               for i in range(cfg.distill.pool_size)]
                           for t in range(1, cfg.distill.rounds + 1)}
        seeds["final"] = dist.model_seed(cfg.seed, cfg.distill.rounds + 1, 2, 0)
    return seeds


def run(cmd: str, cfg: ExperimentConfig, out: Path, jobs: int = 1, resume: bool = False) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    fn = COMMANDS[cmd]
    outputs = fn(cfg, out, jobs, resume) if cmd == "distill" else fn(cfg, out, jobs)
    update_manifest(out, cmd, cfg, _stage_seeds(cmd, cfg), outputs)
    return outputs


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmdface", description="Headset face-tracking experiment runner")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes; 1 is the reference path")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--resume", action="store_true", help="reuse completed distillation rounds")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.out:
            cfg = dataclasses.replace(cfg, out=args.out)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        run(args.command, cfg, Path(cfg.out), args.jobs, args.resume)
    except HmdFaceError as exc:
        print(f"hmdface {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hmdface {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"hmdface {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
