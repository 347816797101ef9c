"""End-to-end experiment: cohorts -> matched images -> trained nets -> effect table."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import images, ols, scm, streams
from .model import CausalNet, ForwardOutput, LossBreakdown, NetConfig, loss_total

log = logging.getLogger(__name__)

REPLICATE_STRIDE = 1_000_003
ROW_ORDER = (
    ("Regression", "t"),
    ("Regression", "t+x'+z'"),
    ("Regression*", "t+z'"),
    ("BiasedNet", "t+image"),
    ("CausalNet", "t+a2..a6"),
)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class Seeds:
    scm: int = 1
    pool_train: int = 2
    pool_val: int = 3
    init: int = 4
    train: int = 5

    def for_replicate(self, r: int) -> "Seeds":
        return Seeds(**{f.name: getattr(self, f.name) + r * REPLICATE_STRIDE for f in fields(self)})


@dataclass(frozen=True)
class ExperimentConfig:
    scm: scm.ScmParams = field(default_factory=scm.ScmParams)
    n_train: int = 3000
    n_val: int = 1000
    pool_size: int = 2609
    batch_size: int = 40
    lr: float = 0.001
    max_epochs: int = 200
    patience: int = 10
    image_size: int = 51
    head_width: int = 6
    dropout_p: float = 0.25
    baseline_noise_seed: int = 6
    oracle_n: int = 100_000
    seeds: Seeds = field(default_factory=Seeds)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.n_train < self.batch_size or self.n_val < self.batch_size:
            raise ConfigError("n_train and n_val must be >= batch_size")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if self.seeds.pool_train == self.seeds.pool_val:
            raise ConfigError("train and validation pools need different seeds")
        if not 0 < self.lr:
            raise ConfigError("lr must be > 0")
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("max_epochs must be >= 1 and patience >= 0")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("dropout_p must be in [0, 1)")
        if not 1 <= self.image_size <= images.SIZE:
            raise ConfigError(f"image_size must be in [1, {images.SIZE}]")
        try:
            self.net_config("causal")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def net_config(self, mode: str) -> NetConfig:
        return NetConfig(head_width=self.head_width, dropout_p=self.dropout_p,
                         input_size=self.image_size, mode=mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "scm" in d:
                d["scm"] = scm.ScmParams.from_dict(d["scm"])
            if "seeds" in d:
                d["seeds"] = Seeds(**{k: int(v) for k, v in d["seeds"].items()})
            for k in ("n_train", "n_val", "pool_size", "batch_size", "max_epochs", "patience",
                      "image_size", "head_width", "baseline_noise_seed", "oracle_n"):
                if k in d:
                    if isinstance(d[k], bool) or int(d[k]) != d[k]:
                        raise ConfigError(f"{k} must be an integer")
                    d[k] = int(d[k])
            return cls(**d)
        except (TypeError, scm.ParameterError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------- data

@dataclass
class Split:
    name: str
    cohort: scm.Cohort
    pool: images.ImagePool
    image_ids: np.ndarray
    pixels: np.ndarray  # normalized (n_pool, 100, 100) of the pool this split draws from

    @property
    def t(self) -> np.ndarray:
        return self.cohort.t

    @property
    def y(self) -> np.ndarray:
        return self.cohort.y

    @property
    def x(self) -> np.ndarray:
        return self.cohort.x

    @property
    def z(self) -> np.ndarray:
        return self.cohort.z

    def __len__(self) -> int:
        return len(self.cohort)

    def images(self, idx) -> np.ndarray:
        return self.pixels[self.image_ids[idx]]

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.image_ids, self.t, self.y, self.x, self.z):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(self.pool.digest().encode())
        return h.hexdigest()


@dataclass
class Dataset:
    train: Split
    val: Split

    def digest(self) -> str:
        return hashlib.sha256((self.train.digest() + self.val.digest()).encode()).hexdigest()


def assemble_dataset(cfg: ExperimentConfig, seeds: Seeds | None = None) -> Dataset:
    """Sample both cohorts and match every subject to its nearest pool image.

    Training and validation draw from separately rendered pools; both are
    normalized with the training pool's global mean and sd.
    """
    seeds = seeds or cfg.seeds
    cohort_tr = scm.sample_cohort(cfg.scm, cfg.n_train, seeds.scm, stream=0)
    cohort_va = scm.sample_cohort(cfg.scm, cfg.n_val, seeds.scm, stream=1)
    pool_tr = images.build_pool(cfg.pool_size, seeds.pool_train)
    pool_va = images.build_pool(cfg.pool_size, seeds.pool_val)
    ids_tr = images.match_images(pool_tr, cohort_tr.x, cohort_tr.z)
    ids_va = images.match_images(pool_va, cohort_va.x, cohort_va.z)
    px_tr = pool_tr.normalized()
    px_va = pool_tr.normalize(pool_va.pixels)
    return Dataset(Split("train", cohort_tr, pool_tr, ids_tr, px_tr),
                   Split("val", cohort_va, pool_va, ids_va, px_va))


def center_crops(split: Split, size: int) -> np.ndarray:
    off = images.CropSpec(size=size, mode="center").center_offset
    return split.pixels[split.image_ids][:, off:off + size, off:off + size]


# ----------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: CausalNet
    log: list[dict]
    best_epoch: int
    best_val: LossBreakdown
    epochs_run: int


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return np.array_split(perm, max(1, n // batch_size))


def evaluate(model: CausalNet, split: Split, mode: str, crops: np.ndarray | None = None,
             chunk: int = 250) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Full-split loss in evaluation mode; also returns (activations, y_hat)."""
    if crops is None:
        crops = center_crops(split, model.config.input_size)
    acts, yhat = [], []
    for lo in range(0, len(split), chunk):
        out = model.forward(crops[lo:lo + chunk], split.t[lo:lo + chunk], training=False)
        acts.append(out.activations.data)
        yhat.append(out.y_hat.data)
    a = np.concatenate(acts).astype(np.float64)
    yh = np.concatenate(yhat).astype(np.float64)
    out = ForwardOutput(ad.Tensor(yh), ad.Tensor(a), model.head_coeffs())
    return loss_total(out, split.y, split.x, mode, z=split.z), a, yh


def train(cfg: ExperimentConfig, data: Dataset, mode: str, seeds: Seeds | None = None,
          log_path=None, progress: bool = False) -> TrainResult:
    """Adam on minibatches with random crops and mirroring; early stopping on validation loss.

    Training stops once the validation total has not improved for
    ``max(patience, 1)`` consecutive epochs, or at ``max_epochs``.  The best
    validation checkpoint is restored.
    """
    seeds = seeds or cfg.seeds
    model = CausalNet(cfg.net_config(mode), seed=seeds.init)
    state = ad.AdamState(lr=cfg.lr)
    spec = images.CropSpec(size=cfg.image_size, mode="random")
    val_crops = center_crops(data.val, cfg.image_size)
    tr = data.train
    rows: list[dict] = []
    best_total, best_state, best_epoch, best_val = np.inf, model.state_dict(), 0, None
    wait = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(4)
        batches = _batches(len(tr), cfg.batch_size, streams.generator(seeds.train, streams.SHUFFLE, epoch))
        for b, idx in enumerate(batches):
            u = streams.uniforms(streams.philox(seeds.train, streams.CROP, epoch, b), 4 * idx.size)
            crops = images.apply_augment(tr.images(idx), images.draw_augment(u.reshape(-1, 4), spec),
                                         cfg.image_size)
            drop_rng = streams.generator(seeds.train, streams.DROPOUT, epoch, b)
            out = model.forward(crops, tr.t[idx], training=True, rng=drop_rng)
            lb = loss_total(out, tr.y[idx], tr.x[idx], mode, z=tr.z[idx])
            if not np.isfinite(lb.total):
                raise TrainingError("non-finite training loss", epoch)
            model.zero_grad()
            lb.tensor.backward()
            ad.adam_step(model.parameters(), state)
            sums += (lb.l_y, lb.l_x, lb.l_reg, lb.total)
        train_mean = sums / len(batches)
        val, _, _ = evaluate(model, data.val, mode, val_crops)
        if not np.isfinite(val.total):
            raise TrainingError("non-finite validation loss", epoch)
        improved = val.total < best_total
        if improved:
            best_total, best_state, best_epoch, best_val = val.total, model.state_dict(), epoch, val
            wait = 0
        else:
            wait += 1
        row = {"mode": mode, "epoch": epoch,
               "train_l_y": train_mean[0], "train_l_x": train_mean[1],
               "train_l_reg": train_mean[2], "train_total": train_mean[3],
               "val_l_y": val.l_y, "val_l_x": val.l_x, "val_l_reg": val.l_reg, "val_total": val.total,
               "improved": int(improved)}
        rows.append(row)
        if progress:
            log.info("%s epoch %d train %.4f val %.4f (%.1fs)%s", mode, epoch, train_mean[3],
                     val.total, time.perf_counter() - t0, " *" if improved else "")
        if wait >= max(cfg.patience, 1):
            break
    model.load_state_dict(best_state)
    if log_path is not None:
        write_training_log(rows, log_path)
    return TrainResult(model, rows, best_epoch, best_val, epoch)


LOG_FIELDS = ("mode", "epoch", "train_l_y", "train_l_x", "train_l_reg", "train_total",
              "val_l_y", "val_l_x", "val_l_reg", "val_total", "improved")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def write_training_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in LOG_FIELDS])


# -------------------------------------------------------------- calibration

@dataclass(frozen=True)
class NoiseCalibration:
    mse_x: float
    mse_z: float

    def __post_init__(self):
        if not (self.mse_x > 0 and self.mse_z > 0):
            raise ValueError("calibration MSEs must be > 0")


def calibrate_noise(cfg: ExperimentConfig, data: Dataset, seeds: Seeds | None = None,
                    log_path=None, progress: bool = False) -> tuple[NoiseCalibration, TrainResult]:
    """Validation MSE of predicting x and z from images with the same architecture."""
    res = train(cfg, data, "calibrate", seeds, log_path=log_path, progress=progress)
    _, acts, _ = evaluate(res.model, data.val, "calibrate")
    mse_x = float(np.mean((acts[:, 0] - data.val.x) ** 2))
    mse_z = float(np.mean((acts[:, 1] - data.val.z) ** 2))
    return NoiseCalibration(mse_x, mse_z), res


# ---------------------------------------------------------------- baselines

@dataclass(frozen=True)
class ResultRow:
    model: str
    variables: str
    mse_y: float
    ate: float


def noisy_views(cohort: scm.Cohort, calib: NoiseCalibration, seed: int, split: int):
    """x' = x + N(0, mse_x), z' = z + N(0, mse_z) (the MSEs are variances)."""
    e = streams.normals(streams.philox(seed, streams.MEASUREMENT_NOISE, split), 2 * len(cohort))
    e = e.reshape(len(cohort), 2)
    return cohort.x + np.sqrt(calib.mse_x) * e[:, 0], cohort.z + np.sqrt(calib.mse_z) * e[:, 1]


def run_baselines(train_cohort: scm.Cohort, val_cohort: scm.Cohort, calib: NoiseCalibration,
                  seed: int) -> list[ResultRow]:
    """Three OLS baselines fitted on training data, MSE_y measured on validation."""
    xp_tr, zp_tr = noisy_views(train_cohort, calib, seed, 0)
    xp_va, zp_va = noisy_views(val_cohort, calib, seed, 1)
    designs = {
        "t": (np.column_stack([train_cohort.t]), np.column_stack([val_cohort.t])),
        "t+x'+z'": (np.column_stack([train_cohort.t, xp_tr, zp_tr]),
                    np.column_stack([val_cohort.t, xp_va, zp_va])),
        "t+z'": (np.column_stack([train_cohort.t, zp_tr]), np.column_stack([val_cohort.t, zp_va])),
    }
    rows = []
    for name, variables in ROW_ORDER[:3]:
        d_tr, d_va = designs[variables]
        f = ols.fit(d_tr, train_cohort.y)
        mse = float(np.mean((ols.predict(f, d_va) - val_cohort.y) ** 2))
        rows.append(ResultRow(name, variables, mse, float(f.coefficients[1])))
    return rows


# ------------------------------------------------------------------- nets

@dataclass
class Activations:
    a: np.ndarray
    t: np.ndarray
    y: np.ndarray
    x: np.ndarray


def extract_activations(model: CausalNet, split: Split) -> Activations:
    _, a, _ = evaluate(model, split, "biased")
    return Activations(a, split.t.astype(np.float64), split.y, split.x)


def evaluate_nets(causal: CausalNet, biased: CausalNet, data: Dataset) -> tuple[list[ResultRow], dict]:
    """Refit y on frozen validation activations (+ t).

    CausalNet drops a_1 from the refit; BiasedNet keeps all activations.
    The reported numbers are the in-sample fit on validation; a variant fitted
    on training-set activations and scored on validation is returned in the
    extras, together with each net's raw head coefficient for t.
    """
    rows, extras = [], {}
    for name, net, first in (("BiasedNet", biased, 0), ("CausalNet", causal, 1)):
        va = extract_activations(net, data.val)
        tr = extract_activations(net, data.train)
        refit = ols.ate_from_refit(va.a[:, first:], va.t, va.y)
        rows.append(ResultRow(name, ROW_ORDER[3 if name == "BiasedNet" else 4][1], refit.mse_y, refit.ate))
        tr_fit = ols.fit(np.column_stack([tr.a[:, first:], tr.t]), tr.y)
        pred = ols.predict(tr_fit, np.column_stack([va.a[:, first:], va.t]))
        extras[name] = {
            "head_ate": float(net.head_coeffs()[1]),
            "head_mse_y": float(np.mean((evaluate(net, data.val, "biased")[2] - va.y) ** 2)),
            "train_fit_ate": float(tr_fit.coefficients[-1]),
            "train_fit_val_mse_y": float(np.mean((pred - va.y) ** 2)),
            "r2_x_on_a2_aN": float(ols.fit(va.a[:, 1:], va.x).r_squared),
            "a1_mse_x": float(np.mean((va.a[:, 0] - va.x) ** 2)),
            "var_x": float(np.var(va.x)),
        }
    return rows, extras


# ------------------------------------------------------------------ report

def results_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model", "variables", "mse_y", "ate"))
    for r in rows:
        w.writerow((r.model, r.variables, _fmt(r.mse_y), _fmt(r.ate)))
    return buf.getvalue()


def _check_rows(rows: list[ResultRow]) -> list[ResultRow]:
    by_key = {(r.model, r.variables): r for r in rows}
    missing = [k for k in ROW_ORDER if k not in by_key]
    if missing:
        raise ReportError(f"missing result rows: {missing}")
    bad = [k for k, r in by_key.items() if not (np.isfinite(r.mse_y) and np.isfinite(r.ate))]
    if bad:
        raise ReportError(f"non-finite result rows: {bad}")
    return [by_key[k] for k in ROW_ORDER]


def _round(obj):
    if isinstance(obj, (float, np.floating)):
        return round(float(obj), 6)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def make_report(rows: list[ResultRow], cfg: ExperimentConfig, calib: NoiseCalibration, out_dir,
                extras: dict | None = None, seeds: Seeds | None = None,
                inputs_digest: str = "") -> tuple[Path, Path]:
    rows = _check_rows(rows)
    seeds = seeds or cfg.seeds
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_csv(rows))
    manifest = {
        "config": cfg.to_dict(),
        "seeds": asdict(seeds),
        "calibration": asdict(calib),
        "inputs_sha256": inputs_digest,
        "reference": {
            "interventional_ate": scm.interventional_ate(cfg.scm, cfg.oracle_n, seeds.scm, stream=2),
            "conditional_bias_oracle": scm.conditional_bias_oracle(cfg.scm, max(cfg.oracle_n, 1000),
                                                                   seeds.scm, stream=3),
        },
        "rows": [asdict(r) for r in rows],
        "extras": extras or {},
    }
    (out / "manifest.json").write_text(json.dumps(_round(manifest), indent=2, sort_keys=True) + "\n")
    return out / "results.csv", out / "manifest.json"


# -------------------------------------------------------------- pipeline

@dataclass
class ReplicateResult:
    index: int
    rows: list[ResultRow]
    calibration: NoiseCalibration
    extras: dict


def run_replicate(cfg: ExperimentConfig, index: int, out_dir, progress: bool = False) -> ReplicateResult:
    seeds = cfg.seeds.for_replicate(index)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = "assemble"
    t0 = time.perf_counter()
    try:
        data = assemble_dataset(cfg, seeds)
        stage = "calibrate"
        calib, cal_res = calibrate_noise(cfg, data, seeds, out / "training_log_calibrate.csv", progress)
        stage = "train-biased"
        biased = train(cfg, data, "biased", seeds, out / "training_log_biased.csv", progress)
        stage = "train-causal"
        causal = train(cfg, data, "causal", seeds, out / "training_log_causal.csv", progress)
        stage = "evaluate"
        net_rows, extras = evaluate_nets(causal.model, biased.model, data)
        base_rows = run_baselines(data.train.cohort, data.val.cohort, calib,
                                  cfg.baseline_noise_seed + index * REPLICATE_STRIDE)
        extras["epochs"] = {"calibrate": cal_res.best_epoch, "biased": biased.best_epoch,
                            "causal": causal.best_epoch}
        extras["causal_val_loss"] = causal.best_val.row()
        stage = "report"
        causal.model.save(out, "causalnet")
        biased.model.save(out, "biasednet")
        rows = base_rows + net_rows
        make_report(rows, cfg, calib, out, extras, seeds, data.digest())
        # wall time is kept apart from the manifest so that reports stay byte-stable
        (out / "timing.json").write_text(json.dumps({"seconds": round(time.perf_counter() - t0, 1)}) + "\n")
    except (TrainingError, ValueError, OSError) as exc:
        raise RuntimeError(f"replicate {index}, stage {stage}: {exc}") from exc
    return ReplicateResult(index, [_as_written(r) for r in _check_rows(rows)], calib, extras)


def _as_written(r: ResultRow) -> ResultRow:
    return ResultRow(r.model, r.variables, float(_fmt(r.mse_y)), float(_fmt(r.ate)))


def load_replicate(out_dir, index: int) -> ReplicateResult:
    """Read back a finished replicate from its results.csv and manifest.json."""
    out = Path(out_dir)
    with open(out / "results.csv", newline="") as fh:
        rows = [ResultRow(r["model"], r["variables"], float(r["mse_y"]), float(r["ate"]))
                for r in csv.DictReader(fh)]
    man = json.loads((out / "manifest.json").read_text())
    return ReplicateResult(index, _check_rows(rows), NoiseCalibration(**man["calibration"]), man["extras"])


def aggregate(results: list[ReplicateResult]) -> tuple[list[ResultRow], str]:
    """Mean rows plus an aggregate CSV with replicate standard deviations."""
    mean_rows = []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model", "variables", "mse_y_mean", "mse_y_sd", "ate_mean", "ate_sd", "replicates"))
    for k, (name, variables) in enumerate(ROW_ORDER):
        mse = np.array([r.rows[k].mse_y for r in results])
        ate = np.array([r.rows[k].ate for r in results])
        sd = (lambda a: float(a.std(ddof=1)) if a.size > 1 else 0.0)
        mean_rows.append(ResultRow(name, variables, float(mse.mean()), float(ate.mean())))
        w.writerow((name, variables, _fmt(float(mse.mean())), _fmt(sd(mse)),
                    _fmt(float(ate.mean())), _fmt(sd(ate)), len(results)))
    return mean_rows, buf.getvalue()


def _replicate_job(args):
    cfg, index, out_dir, progress, resume = args
    if resume and (Path(out_dir) / "manifest.json").exists():
        log.info("replicate %d: reusing %s", index, out_dir)
        return load_replicate(out_dir, index)
    return run_replicate(cfg, index, out_dir, progress)


def reproduce(cfg: ExperimentConfig, replicates: int, out_dir, jobs: int = 1,
              progress: bool = False, resume: bool = False) -> tuple[Path, list[ReplicateResult]]:
    """Run ``replicates`` seeded replicates under ``out_dir/run-<config hash>``.

    With ``resume`` a replicate directory that already holds a manifest is
    read back instead of recomputed; the run directory name pins the config.
    """
    if replicates < 1:
        raise ConfigError("replicates must be >= 1")
    run_dir = Path(out_dir) / f"run-{cfg.digest()[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    jobs_args = [(cfg, r, run_dir / f"replicate_{r:02d}", progress, resume) for r in range(replicates)]
    if jobs > 1 and replicates > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_replicate_job, jobs_args))
    else:
        results = [_replicate_job(a) for a in jobs_args]
    mean_rows, agg = aggregate(results)
    (run_dir / "results.csv").write_text(results_csv(mean_rows))
    (run_dir / "aggregate.csv").write_text(agg)
    return run_dir, results
