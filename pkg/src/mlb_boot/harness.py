"""Experiment orchestration: baseline -> initial labels -> bootstrapped training
-> evaluation, plus the component ablation and weight-map dumps."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import os
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as D
from .meta import HyperConfig, init_labels, mlb_step, train_epoch
from .metrics import evaluate, summarize
from .model import SGD, ModelParams, init_params, predict
from .ple import parse_specs
from .teacher import TeacherState

log = logging.getLogger(__name__)

DEFAULT_PLE = "zoom-in:2,zoom-out:2,zoom-out:4,flip-h"
METRIC_KEYS = ("dice", "jaccard", "hd", "hd95", "asd", "n_degenerate")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # optimisation
    alpha: float = 0.005
    alpha_baseline: float = 0.02
    beta: float = 1.0
    eps: float = 1e-12
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_baseline: int = 2
    batch_clean: int = 4
    batch_noisy: int = 4
    lambda_aug: float = 1.0
    lambda_st: float = 1.0
    gamma: float = 0.1
    mu: float = 0.0
    sigma: float = 1.0
    ema_decay: float = 0.99
    epochs_baseline: int = 10
    epochs_mlb: int = 30
    width: int = 8
    seed: int = 0
    # data
    data_dir: str = ""
    H: int = 32
    W: int = 32
    n_clean: int = 8
    n_meta: int = 4
    n_unlabeled: int = 64
    n_eval: int = 32
    shape_family: str = "mixed"
    noise_level: float = 0.1
    # extra corruption applied to the initial labels
    corrupt_dilate: float = 0.0
    corrupt_erode: float = 0.0
    corrupt_flip_rate: float = 0.0
    # components
    mlb: bool = True
    bootstrap: bool = False
    mean_teacher: bool = False
    ple_specs: str = ""
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.ple_specs and not self.mlb:
            raise ConfigError("ple_specs requires mlb = true")
        if self.mean_teacher and not (self.mlb or self.bootstrap):
            raise ConfigError("mean_teacher requires a bootstrapping stage (mlb or bootstrap)")
        if self.mlb and self.bootstrap:
            raise ConfigError("mlb and bootstrap (fixed weights) are mutually exclusive")
        self.hyper()  # validates the numeric fields

    def hyper(self) -> HyperConfig:
        names = {f.name for f in fields(HyperConfig)}
        kw = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        return HyperConfig(**kw)

    @property
    def stage(self) -> str:
        return "mlb" if self.mlb else ("bootstrap" if self.bootstrap else "baseline")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt_value(getattr(self, f.name))}\n" for f in fields(self))


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(name, raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean for {name}, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>", overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Flat ``key = value`` lines (``#`` comments); ``overrides`` are ``key=value`` strings."""
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    values = {}
    entries = [(f"{source}:{n}", line) for n, line in enumerate(text.splitlines(), 1)]
    entries += [(f"--set {o}", o) for o in overrides]
    for where, line in entries:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
        if key not in defaults:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, str(path) if path else "<defaults>", overrides)


# ---------------------------------------------------------------------- data


def load_splits(cfg: ExperimentConfig) -> dict:
    if cfg.data_dir:
        splits = D.read_manifest(cfg.data_dir)
        missing = {"clean", "meta", "unlabeled", "eval"} - set(splits)
        if missing:
            raise ConfigError(f"manifest in {cfg.data_dir} lacks splits {sorted(missing)}")
        return splits
    counts = {"clean": cfg.n_clean, "meta": cfg.n_meta, "unlabeled": cfg.n_unlabeled, "eval": cfg.n_eval}
    return D.generate_splits(cfg.H, cfg.W, counts, cfg.seed, cfg.shape_family, cfg.noise_level)


def evaluate_params(params: ModelParams, ds: D.Dataset, batch: int = 16) -> dict:
    images = D.standardize(ds.images)
    preds = np.concatenate([predict(params, images[i:i + batch]) for i in range(0, len(ds), batch)])
    return summarize(evaluate(p, g) for p, g in zip(preds, ds.masks))


# ------------------------------------------------------------------ pipeline


@dataclass
class RunState:
    stage: str = "baseline"
    epoch: int = 0  # completed epochs of ``stage``
    global_step: int = 0
    params: Optional[ModelParams] = None
    theta_c: Optional[ModelParams] = None
    optimizer: Optional[dict] = None
    teacher: Optional[TeacherState] = None
    init_labels: Optional[np.ndarray] = None
    rng: Optional[np.random.Generator] = None
    rows: list = dataclasses.field(default_factory=list)
    best: tuple = (-1.0, -1, "")  # (dice, epoch, stage)
    best_params: Optional[ModelParams] = None


def _write_csv(path: Path, rows: list, columns: Sequence[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_csv_cell(r[c]) for c in columns])
    path.write_text(buf.getvalue(), newline="")


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


REPORT_COLUMNS = ("stage", "epoch", "step") + METRIC_KEYS
FINAL_COLUMNS = ("stage", "epochs") + METRIC_KEYS + ("best_stage", "best_epoch", "best_dice")


def _checkpoint(out: Path, state: RunState) -> Path:
    path = out / "checkpoints" / f"{state.stage}_{state.epoch:03d}.pkl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        pickle.dump(state, fh)
    return path


def load_checkpoint(path) -> RunState:
    with open(path, "rb") as fh:
        state = pickle.load(fh)
    if not isinstance(state, RunState):
        raise ValueError(f"{path} is not a run checkpoint")
    return state


def run_experiment(cfg: ExperimentConfig, resume=None, step_hook: Optional[Callable] = None,
                   splits: Optional[dict] = None) -> dict:
    """Run the configured pipeline and write ``report.csv``, ``final.csv``,
    model snapshots and per-epoch checkpoints under ``cfg.output_dir``.

    ``resume`` is a checkpoint path; the run continues after its epoch.
    ``step_hook(step, result, batch_idx, y_n)`` sees every bootstrapping step;
    ``step`` counts from 0 at the start of the bootstrapping stage.
    Returns the final evaluation metrics.
    """
    hp = cfg.hyper()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    splits = load_splits(cfg) if splits is None else splits
    clean = splits["clean"]
    labeled_x = D.standardize(np.concatenate([clean.images, splits["meta"].images]))
    labeled_y = np.concatenate([clean.masks, splits["meta"].masks])
    eval_ds = splits["eval"]

    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    if resume is not None:
        state = load_checkpoint(resume)
    else:
        state = RunState(rng=np.random.default_rng(seeds[1]))
        state.params = init_params(cfg.width, np.random.default_rng(seeds[0]))

    def record(stage, epoch, params):
        m = evaluate_params(params, eval_ds)
        state.rows.append({"stage": stage, "epoch": epoch, "step": state.global_step, **m})
        if m["dice"] > state.best[0]:
            state.best = (m["dice"], epoch, stage)
            state.best_params = params.copy()
        log.info("%s epoch %d: dice %.4f", stage, epoch, m["dice"])
        return m

    # baseline on all clean-labeled data
    if state.stage == "baseline":
        opt = SGD(hp.baseline_lr, hp.momentum, hp.weight_decay)
        if state.optimizer is not None:
            opt.load_state_dict(state.optimizer)
        while state.epoch < hp.epochs_baseline:
            state.params, n = train_epoch(state.params, opt, labeled_x, labeled_y, hp.batch_baseline, state.rng)
            state.global_step += n
            state.epoch += 1
            record("baseline", state.epoch, state.params)
            state.optimizer = opt.state_dict()
            _checkpoint(out, state)
        if hp.epochs_baseline == 0:
            record("baseline", 0, state.params)
        state.theta_c = state.params.copy()
        _save_params(out / "model_baseline.npz", state.theta_c)
        if cfg.stage != "baseline":
            state.stage, state.epoch, state.optimizer = cfg.stage, 0, None
            state.rng = np.random.default_rng(seeds[2])
            state.init_labels = _initial_labels(cfg, state.theta_c, splits["unlabeled"], seeds[3])
            if cfg.mean_teacher:
                state.teacher = TeacherState.from_student(state.theta_c, hp.ema_decay)

    if state.stage != "baseline":
        x_u = D.standardize(splits["unlabeled"].images)
        meta = splits["meta"]
        x_m, y_m = D.standardize(meta.images), meta.masks
        opt = SGD(hp.alpha, hp.momentum, hp.weight_decay)
        if state.optimizer is not None:
            opt.load_state_dict(state.optimizer)
        weighting = "meta" if state.stage == "mlb" else "fixed"
        K = len(x_u)
        n_batches = -(-K // hp.batch_noisy)
        while state.epoch < hp.epochs_mlb:
            order = state.rng.permutation(K)
            for start in range(0, K, hp.batch_noisy):
                idx = order[start:start + hp.batch_noisy]
                c_idx = state.rng.choice(len(x_m), size=hp.batch_clean, replace=len(x_m) < hp.batch_clean)
                res = mlb_step(state.params, opt, x_u[idx], state.init_labels[idx], x_m[c_idx], y_m[c_idx],
                               hp, state.rng, teacher=state.teacher, weighting=weighting)
                if step_hook is not None:
                    step_hook(state.epoch * n_batches + start // hp.batch_noisy, res, idx, state.init_labels[idx])
                state.params, state.teacher = res.params, res.teacher
                state.global_step += 1
            state.epoch += 1
            record(state.stage, state.epoch, state.params)
            state.optimizer = opt.state_dict()
            _checkpoint(out, state)

    final = dict(state.rows[-1])
    _write_csv(out / "report.csv", state.rows, REPORT_COLUMNS)
    final_row = {**{k: final[k] for k in METRIC_KEYS}, "stage": final["stage"], "epochs": final["epoch"],
                 "best_stage": state.best[2], "best_epoch": state.best[1], "best_dice": state.best[0]}
    _write_csv(out / "final.csv", [final_row], FINAL_COLUMNS)
    _save_params(out / "model_final.npz", state.params)
    if state.best_params is not None:
        _save_params(out / "model_best.npz", state.best_params)
    return {k: final[k] for k in METRIC_KEYS}


def _initial_labels(cfg: ExperimentConfig, theta_c, unlabeled: D.Dataset, seed) -> np.ndarray:
    labels = init_labels(theta_c, D.standardize(unlabeled.images))
    if cfg.corrupt_dilate or cfg.corrupt_erode or cfg.corrupt_flip_rate:
        rng = np.random.default_rng(seed)
        labels = np.stack([D.corrupt_mask(m, cfg.corrupt_dilate, cfg.corrupt_erode, cfg.corrupt_flip_rate, rng)
                           for m in labels])
    return labels


def _save_params(path: Path, params: ModelParams) -> None:
    np.savez(path, **params)


def load_params(path) -> ModelParams:
    with np.load(path) as z:
        return ModelParams((k, z[k]) for k in z.files)


# ------------------------------------------------------------------ ablation


def ablation_configs(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Fixed-weight bootstrapping, MLB, MLB+teacher, MLB+PLE, MLB+PLE+teacher."""
    ple = cfg.ple_specs or DEFAULT_PLE
    base = dict(mlb=True, bootstrap=False, mean_teacher=False, ple_specs="")
    rows = [
        ("bootstrap", dict(base, mlb=False, bootstrap=True)),
        ("mlb", base),
        ("mlb+teacher", dict(base, mean_teacher=True)),
        ("mlb+ple", dict(base, ple_specs=ple)),
        ("mlb+ple+teacher", dict(base, ple_specs=ple, mean_teacher=True)),
    ]
    return [(name, cfg.replace(**kw)) for name, kw in rows]


def _run_job(job):
    name, cfg = job
    return name, cfg.seed, run_experiment(cfg)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("MLB_BOOT_THREADS", "1")))
    except ValueError:
        return 1


def run_jobs(jobs: list, workers: Optional[int] = None) -> list:
    workers = min(workers or max_workers(), len(jobs))
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_run_job, jobs))


ABLATION_COLUMNS = ("config", "mlb", "mean_teacher", "ple_q", "n_seeds",
                    "dice_mean", "dice_std", "jaccard_mean", "jaccard_std",
                    "hd_mean", "hd_std", "asd_mean", "asd_std")


def run_ablation(cfg: ExperimentConfig, seeds: Sequence[int], configs=None,
                 workers: Optional[int] = None) -> list[dict]:
    """Run every ablation configuration for every seed and write
    ``ablation.csv`` (mean/std per configuration) and ``ablation_runs.csv``."""
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    configs = ablation_configs(cfg) if configs is None else configs
    root = Path(cfg.output_dir)
    jobs = [(name, c.replace(seed=s, output_dir=str(root / name / f"seed{s}")))
            for name, c in configs for s in seeds]
    results = run_jobs(jobs, workers)
    runs = [{"config": n, "seed": s, **m} for n, s, m in results]
    table = []
    for name, c in configs:
        ms = [r for r in runs if r["config"] == name]
        row = {"config": name, "mlb": c.mlb, "mean_teacher": c.mean_teacher,
               "ple_q": len(parse_specs(c.ple_specs)), "n_seeds": len(ms)}
        for key in ("dice", "jaccard", "hd", "asd"):
            vals = np.array([m[key] for m in ms], dtype=np.float64)
            with np.errstate(invalid="ignore"):  # inf distances (all-empty predictions) give nan std
                row[f"{key}_mean"] = float(vals.mean())
                row[f"{key}_std"] = float(vals.std())
        table.append(row)
    root.mkdir(parents=True, exist_ok=True)
    _write_csv(root / "ablation.csv", table, ABLATION_COLUMNS)
    _write_csv(root / "ablation_runs.csv", runs, ("config", "seed") + METRIC_KEYS)
    return table


# --------------------------------------------------------------- weight maps


def total_steps(cfg: ExperimentConfig, n_unlabeled: Optional[int] = None) -> int:
    n = cfg.n_unlabeled if n_unlabeled is None else n_unlabeled
    return cfg.epochs_mlb * -(-n // cfg.batch_noisy)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary greyscale (P5) rendering scaled to the image's own max."""
    a = np.asarray(image, dtype=np.float64)
    top = a.max()
    pix = np.zeros(a.shape, np.uint8) if top <= 0 else np.round(255.0 * np.clip(a, 0, None) / top).astype(np.uint8)
    H, W = a.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + pix.tobytes())


def dump_weight_maps(cfg: ExperimentConfig, steps: Sequence[int], splits: Optional[dict] = None) -> list[dict]:
    """Run the pipeline and save the normalised weight maps at the given
    bootstrapping steps under ``<output_dir>/weights``.

    Per step: ``step{N}_wn.mseg`` / ``step{N}_wp.mseg`` (weights as float
    images, one per batch sample), ``step{N}_labels.mseg`` (inputs with the
    initial labels), ``step{N}_pseudo.mseg`` (inputs with pseudo labels) and
    one PGM per map.  Returns the captured records.
    """
    if not cfg.mlb:
        raise ConfigError("dump_weight_maps requires mlb = true")
    splits = load_splits(cfg) if splits is None else splits
    n_total = total_steps(cfg, len(splits["unlabeled"]))
    steps = sorted(set(int(s) for s in steps))
    bad = [s for s in steps if not 0 <= s < n_total]
    if bad:
        raise ValueError(f"steps {bad} out of range [0, {n_total})")
    wdir = Path(cfg.output_dir) / "weights"
    wdir.mkdir(parents=True, exist_ok=True)
    x_u = splits["unlabeled"].images
    gt = splits.get("unlabeled_gt")
    records = []

    def hook(step, res, idx, y_n):
        if step not in steps:
            return
        rec = {"step": step, "indices": np.array(idx), "w_n": res.w_n, "w_p": res.w_p,
               "y_n": np.array(y_n), "y_p": res.y_p,
               "gt": None if gt is None else gt.masks[idx]}
        records.append(rec)
        stem = f"step{step:06d}"
        D.save(D.Dataset(res.w_n[:, None], None, "weights"), wdir / f"{stem}_wn.mseg")
        D.save(D.Dataset(res.w_p[:, None], None, "weights"), wdir / f"{stem}_wp.mseg")
        D.save(D.Dataset(x_u[idx], y_n, "initialized"), wdir / f"{stem}_labels.mseg")
        D.save(D.Dataset(x_u[idx], res.y_p, "initialized"), wdir / f"{stem}_pseudo.mseg")
        for j in range(len(idx)):
            write_pgm(wdir / f"{stem}_wn_{j}.pgm", res.w_n[j])
            write_pgm(wdir / f"{stem}_wp_{j}.pgm", res.w_p[j])

    last = max(steps) if steps else -1
    run_cfg = cfg.replace(epochs_mlb=min(cfg.epochs_mlb, last // -(-len(x_u) // cfg.batch_noisy) + 1))
    run_experiment(run_cfg, step_hook=hook, splits=splits)
    return records
