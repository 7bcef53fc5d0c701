"""Monte Carlo experiment runner, metrics, configuration and result export."""

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
import json
import math
import time

import numpy as np
from scipy.stats import binom

from juice.baselines import BaselineConfig, irw_l21, msbl, oracle_mmse
from juice.ep import SolverConfig, ep_infer
from juice.errors import BadCount, ConfigError, NonDivisible, ZeroTruth
from juice.model import build_cluster_map, draw_realization

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

ESTIMATORS = ("ep", "ep_uncoupled", "oracle_mmse", "msbl", "irw_l21")
_INT_KEYS = ("n_ues", "n_clusters", "n_antennas", "pilot_len", "k_active_clusters", "l_c")
SWEEPABLE = _INT_KEYS + ("snr_db", "noise_var")
CSV_HEADER = ("trial", "sweep_name", "sweep_value", "estimator", "nmse", "srr",
              "iterations", "wall_time_s", "converged")


def nmse(estimate, truth):
    """``||estimate - truth||_F^2 / ||truth||_F^2``."""
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch: {estimate.shape} vs {truth.shape}")
    denom = float(np.sum(np.abs(truth) ** 2))
    if denom == 0.0:
        raise ZeroTruth("true channel matrix is identically zero")
    return float(np.sum(np.abs(estimate - truth) ** 2)) / denom


def srr(estimated_support, true_support):
    """Jaccard index of two index sets; two empty sets score 1."""
    est, true = set(estimated_support), set(true_support)
    union = est | true
    return 1.0 if not union else len(est & true) / len(union)


@dataclass(frozen=True)
class ExperimentConfig:
    """One Monte Carlo experiment.

    Exactly one of ``snr_db`` and ``noise_var`` is set. With unit-norm pilots
    and unit path gains the per-UE SNR is ``1 / noise_var``. ``eps=None``
    matches the solver's cluster prior to the generator, ``k_active_clusters
    / n_clusters``. ``irw_l21`` uses the penalty ``baseline.lam * noise_var``
    and the smoothing ``baseline.reg_epsilon * sqrt(noise_var)``.
    """

    n_ues: int = 200
    n_clusters: int = 20
    n_antennas: int = 10
    pilot_len: int = 40
    k_active_clusters: int = 2
    l_c: int = 8
    snr_db: float | None = 10.0
    noise_var: float | None = None
    n_trials: int = 500
    master_seed: int = 0
    sweep_name: str = "snr_db"
    sweep_values: tuple = (10.0,)
    estimators: tuple = ESTIMATORS
    activity_mode: str = "exact"
    path_gain_model: str = "unit"
    orthonormal_pilots: bool = False
    eps: float | None = None
    # detection threshold of ep_uncoupled; None shares solver.detection_threshold
    uncoupled_threshold: float | None = 1.6
    solver: SolverConfig = field(default_factory=SolverConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        object.__setattr__(self, "sweep_values", tuple(self.sweep_values))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        for name in _INT_KEYS + ("n_trials",):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")
        if (self.snr_db is None) == (self.noise_var is None):
            raise ConfigError("set exactly one of snr_db and noise_var")
        if self.noise_var is not None and not self.noise_var > 0:
            raise ConfigError("noise_var must be positive")
        if self.sweep_name not in SWEEPABLE:
            raise ConfigError(f"cannot sweep {self.sweep_name!r}; choose from {SWEEPABLE}")
        if not self.sweep_values:
            raise ConfigError("sweep_values must not be empty")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown or not self.estimators:
            raise ConfigError(f"estimators must be a non-empty subset of {ESTIMATORS}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigError("estimators must not repeat")
        if self.eps is not None and not 0.0 < self.eps <= 1.0:
            raise ConfigError("eps must lie in (0, 1]")
        if self.uncoupled_threshold is not None and not self.uncoupled_threshold > 0:
            raise ConfigError("uncoupled_threshold must be positive")
        for value in self.sweep_values:
            self.at(value)

    def at(self, value):
        """The fixed-parameter configuration at one sweep value, validated."""
        if self.sweep_name in _INT_KEYS:
            if float(value) != int(value):
                raise ConfigError(f"{self.sweep_name} sweep values must be integers")
            value = int(value)
        else:
            value = float(value)
        point = {self.sweep_name: value}
        if self.sweep_name == "snr_db":
            point["noise_var"] = None
        elif self.sweep_name == "noise_var":
            point["snr_db"] = None
        cfg = replace(self, sweep_values=(value,), **point) if self.sweep_values != (value,) else self
        if cfg.noise_var is not None and not cfg.noise_var > 0:
            raise ConfigError("noise_var must be positive")
        if cfg.n_ues % cfg.n_clusters:
            raise ConfigError(f"{cfg.n_clusters} clusters do not divide {cfg.n_ues} UEs")
        if cfg.k_active_clusters > cfg.n_clusters:
            raise ConfigError("k_active_clusters exceeds n_clusters")
        if cfg.l_c > cfg.n_ues // cfg.n_clusters:
            raise ConfigError("l_c exceeds the cluster size")
        if cfg.orthonormal_pilots and cfg.pilot_len < cfg.n_ues:
            raise ConfigError("orthonormal pilots need pilot_len >= n_ues")
        return cfg

    @property
    def sigma2(self):
        return self.noise_var if self.noise_var is not None else 10.0 ** (-self.snr_db / 10.0)

    @property
    def cluster_eps(self):
        return self.eps if self.eps is not None else self.k_active_clusters / self.n_clusters

    @property
    def ue_eps(self):
        """Prior activity probability for the uncoupled (one UE per cluster) solver."""
        if self.eps is not None:
            return self.eps
        return self.k_active_clusters * self.l_c / self.n_ues


@dataclass(frozen=True)
class ResultRecord:
    trial_index: int
    sweep_name: str
    sweep_value: float
    estimator_name: str
    nmse: float
    srr: float
    iterations: int
    # timing is not part of a record's identity, so reruns compare equal
    wall_time_seconds: float = field(compare=False)
    converged: bool

    def __post_init__(self):
        if not self.nmse >= 0:
            raise ValueError(f"nmse must be nonnegative, got {self.nmse}")
        if not 0.0 <= self.srr <= 1.0:
            raise ValueError(f"srr must lie in [0, 1], got {self.srr}")


def _scores(name, real, cfg):
    """Run one estimator. Returns ``(estimate, scores, iterations, converged)``.

    ``scores`` are per-UE activity statistics in units of the noise level;
    the detected support is ``{i : scores[i] > threshold}``. Genie-aided
    estimators return ``None`` and report the true support.
    """
    s2 = cfg.sigma2
    Y, Phi = real.received, real.pilots
    M = Y.shape[1]
    if name in ("ep", "ep_uncoupled"):
        n_c = cfg.n_clusters if name == "ep" else cfg.n_ues
        eps = cfg.cluster_eps if name == "ep" else cfg.ue_eps
        cmap = build_cluster_map(cfg.n_ues, n_c)
        summary = ep_infer(Y, Phi, s2, cmap, replace(cfg.solver, eps=eps))
        energy = np.sum(np.abs(summary.means) ** 2, axis=0) / (M * s2)
        on = summary.cluster_probs[cmap.labels] > 0.5
        return summary.means, np.where(on, energy, -np.inf), summary.iterations, summary.converged
    if name == "oracle_mmse":
        X = oracle_mmse(Y, Phi, real.activity.support, real.path_gains, s2)
        return X, None, 1, True
    if name == "msbl":
        info = {}
        X, gamma = msbl(Y, Phi, s2, cfg.baseline, info=info)
        return X, gamma / s2, info["iterations"], info["converged"]
    if name == "irw_l21":
        info = {}
        # penalty and smoothing both in noise units, so the scores are scale free
        bcfg = replace(cfg.baseline, reg_epsilon=cfg.baseline.reg_epsilon * math.sqrt(s2))
        X = irw_l21(Y, Phi, cfg.baseline.lam * s2, bcfg, info=info)
        energy = np.sum(np.abs(X) ** 2, axis=0) / (M * s2)
        return X, energy, info["iterations"], info["converged"]
    raise ConfigError(f"unknown estimator {name!r}")


def _threshold(name, cfg):
    if name == "ep_uncoupled" and cfg.uncoupled_threshold is not None:
        return cfg.uncoupled_threshold
    if name in ("ep", "ep_uncoupled"):
        return cfg.solver.detection_threshold
    return {"msbl": cfg.baseline.msbl_threshold, "irw_l21": cfg.baseline.irw_threshold}.get(name)


def trial_realization(cfg, sweep_index, trial_index):
    """The system draw shared by every estimator in one trial."""
    seq = np.random.SeedSequence([cfg.master_seed, trial_index, sweep_index])
    rng = np.random.default_rng(seq)
    cmap = build_cluster_map(cfg.n_ues, cfg.n_clusters)
    try:
        return draw_realization(cmap, cfg.n_antennas, cfg.pilot_len, cfg.k_active_clusters,
                                cfg.l_c, cfg.sigma2, rng, mode=cfg.activity_mode,
                                path_gain_model=cfg.path_gain_model,
                                orthonormal_pilots=cfg.orthonormal_pilots)
    except (BadCount, NonDivisible) as exc:
        raise ConfigError(str(exc)) from exc


def _run_trial(task):
    cfg, sweep_index, trial_index = task
    real = trial_realization(cfg, sweep_index, trial_index)
    truth = real.effective_channels
    records = []
    for name in sorted(cfg.estimators):
        t0 = time.perf_counter()
        X, scores, iters, conv = _scores(name, real, cfg)
        elapsed = time.perf_counter() - t0
        if scores is None:
            support = real.activity.support
        else:
            support = frozenset(np.flatnonzero(scores > _threshold(name, cfg)).tolist())
        records.append(ResultRecord(
            trial_index=trial_index,
            sweep_name=cfg.sweep_name,
            sweep_value=float(cfg.sweep_values[0]),
            estimator_name=name,
            nmse=nmse(X, truth),
            srr=srr(support, real.activity.support),
            iterations=int(iters),
            wall_time_seconds=elapsed,
            converged=bool(conv),
        ))
    return records


def _tasks(config):
    for s, value in enumerate(config.sweep_values):
        point = config.at(value)
        for t in range(config.n_trials):
            yield point, s, t


def run_experiment(config, workers=1):
    """Run every selected estimator on every trial of every sweep point.

    Trial ``t`` at sweep index ``s`` draws its system from
    ``SeedSequence([master_seed, t, s])``, so the output does not depend on
    ``workers``. Records come back ordered by sweep point, trial and
    estimator name.
    """
    if workers < 1:
        raise ConfigError("workers must be positive")
    tasks = list(_tasks(config))
    if workers == 1:
        batches = map(_run_trial, tasks)
        return [r for batch in batches for r in batch]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        batches = list(pool.map(_run_trial, tasks, chunksize=max(1, len(tasks) // (8 * workers))))
    return [r for batch in batches for r in batch]


def _sort_key(r):
    return (r.sweep_name, r.sweep_value, r.trial_index, r.estimator_name)


def export_results(records, path, format="csv", config=None):
    """Write records as CSV or JSON.

    Rows are ordered by sweep, trial and estimator. Floats are written with
    17 significant digits, so ``load_results`` restores them bit for bit.
    JSON output optionally embeds the experiment configuration.
    """
    rows = sorted(records, key=_sort_key)
    try:
        if format == "csv":
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(CSV_HEADER)
                for r in rows:
                    writer.writerow([r.trial_index, r.sweep_name, f"{r.sweep_value:.17e}",
                                     r.estimator_name, f"{r.nmse:.17e}", f"{r.srr:.17e}",
                                     r.iterations, f"{r.wall_time_seconds:.17e}",
                                     "true" if r.converged else "false"])
        elif format == "json":
            doc = {"records": [asdict(r) for r in rows]}
            if config is not None:
                doc["config"] = config_to_dict(config)
            with open(path, "w") as fh:
                json.dump(doc, fh, indent=1)
                fh.write("\n")
        else:
            raise ConfigError(f"unknown export format {format!r}")
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc.strerror or exc}") from exc


def load_results(path, format=None):
    """Parse a file written by ``export_results``. The format defaults to the file suffix."""
    format = format or ("json" if str(path).endswith(".json") else "csv")
    if format == "json":
        with open(path) as fh:
            return [ResultRecord(**d) for d in json.load(fh)["records"]]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [ResultRecord(trial_index=int(t), sweep_name=n, sweep_value=float(v),
                             estimator_name=e, nmse=float(m), srr=float(s), iterations=int(i),
                             wall_time_seconds=float(w), converged=c == "true")
                for t, n, v, e, m, s, i, w, c in reader]


def _median_ci(sorted_values, level=0.95):
    """Distribution-free confidence interval of the median from order statistics."""
    n = len(sorted_values)
    lo = int(binom.ppf((1 - level) / 2, n, 0.5))
    hi = n - 1 - lo
    if lo < 1:
        return float("nan"), float("nan")
    return sorted_values[lo - 1], sorted_values[hi]


def summarize(records):
    """Aggregate per sweep value and estimator.

    Returns dicts with NMSE in dB (median, its 95% interval, and the mean of
    the linear NMSE in dB), median and mean SRR, convergence rate and mean
    wall time.
    """
    groups = {}
    for r in records:
        groups.setdefault((r.sweep_name, r.sweep_value, r.estimator_name), []).append(r)
    out = []
    for (name, value, est), rs in sorted(groups.items()):
        db = np.sort(10.0 * np.log10(np.maximum([r.nmse for r in rs], 1e-300)))
        lo, hi = _median_ci(db)
        out.append({
            "sweep_name": name,
            "sweep_value": value,
            "estimator": est,
            "n_trials": len(rs),
            "median_nmse_db": float(np.median(db)),
            "median_nmse_db_lo": lo,
            "median_nmse_db_hi": hi,
            "mean_nmse_db": 10.0 * math.log10(max(np.mean([r.nmse for r in rs]), 1e-300)),
            "median_srr": float(np.median([r.srr for r in rs])),
            "mean_srr": float(np.mean([r.srr for r in rs])),
            "converged_rate": float(np.mean([r.converged for r in rs])),
            "mean_wall_time_s": float(np.mean([r.wall_time_seconds for r in rs])),
        })
    return out


def export_summary(summary, path):
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(summary[0]) if summary else ["sweep_name"],
                                    lineterminator="\n")
            writer.writeheader()
            writer.writerows(summary)
    except OSError as exc:
        raise OSError(f"cannot write summary to {path}: {exc.strerror or exc}") from exc


def config_to_dict(config):
    """Flat key-value form of a config, the inverse of ``config_from_dict``."""
    out = {}
    for f in fields(ExperimentConfig):
        value = getattr(config, f.name)
        if f.name in ("solver", "baseline"):
            out.update({f"{f.name}_{k}": v for k, v in asdict(value).items()})
        elif value is not None:
            out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def config_from_dict(flat):
    """Build an ``ExperimentConfig`` from flat keys.

    Solver and baseline settings use ``solver_`` and ``baseline_`` prefixes,
    e.g. ``solver_damping`` or ``baseline_lam``. Unknown keys are errors.
    """
    top = {f.name for f in fields(ExperimentConfig)} - {"solver", "baseline"}
    sub = {"solver": {f.name for f in fields(SolverConfig)},
           "baseline": {f.name for f in fields(BaselineConfig)}}
    kwargs, parts = {}, {"solver": {}, "baseline": {}}
    for key, value in flat.items():
        if isinstance(value, dict):
            raise ConfigError(f"config must be flat; {key!r} is a table")
        prefix, _, rest = key.partition("_")
        if key in top:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
        elif prefix in sub and rest in sub[prefix]:
            parts[prefix][rest] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    # a fixed SNR or noise level in the file replaces the default one
    if "noise_var" in kwargs and "snr_db" not in kwargs:
        kwargs["snr_db"] = None
    if "sweep_values" not in kwargs:
        # no sweep: a single point at the fixed value of the swept parameter
        name = kwargs.get("sweep_name", "snr_db")
        fixed = kwargs.get(name, getattr(ExperimentConfig, name, None))
        if fixed is None:
            raise ConfigError(f"sweep_values missing and {name!r} has no fixed value")
        kwargs["sweep_values"] = (fixed,)
    try:
        kwargs["solver"] = SolverConfig(**parts["solver"])
        kwargs["baseline"] = BaselineConfig(**parts["baseline"])
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path):
    """Read a flat TOML experiment file."""
    try:
        with open(path, "rb") as fh:
            flat = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(flat)


THRESHOLD_GRID = tuple(round(0.1 * k, 1) for k in range(1, 21))
LAMBDA_GRID = (0.1, 0.3, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0, 20.0, 30.0, 50.0, 100.0)


def _calibration_trial(task):
    cfg, trial_index, lam_grid = task
    real = trial_realization(cfg, 0, trial_index)
    truth, support = real.effective_channels, real.activity.support
    out = {}
    for name in ("ep", "ep_uncoupled", "msbl"):
        X, scores, _, _ = _scores(name, real, cfg)
        out[name] = [(nmse(X, truth), scores)]
    out["irw_l21"] = []
    for lam in lam_grid:
        X, scores, _, _ = _scores("irw_l21", real, replace(cfg, baseline=replace(cfg.baseline, lam=lam)))
        out["irw_l21"].append((nmse(X, truth), scores))
    return support, out


def _plateau_center(values, grid):
    """Grid point in the middle of the set of maximizers."""
    best = np.flatnonzero(values >= np.max(values) - 1e-12)
    return grid[best[len(best) // 2]]


def calibrate(config, n_trials=200, seed=None, workers=1,
              thresholds=THRESHOLD_GRID, lam_grid=LAMBDA_GRID):
    """Grid-search detection thresholds and the IRW penalty on held-out trials.

    Validation trials use ``seed`` (default ``master_seed + 1``) so they never
    coincide with experiment trials. The IRW penalty scale minimizes median
    NMSE; each detection threshold then maximizes mean SRR, taking the
    middle of the optimal plateau. Runs at the first sweep point.
    """
    seed = config.master_seed + 1 if seed is None else seed
    cfg = replace(config.at(config.sweep_values[0]), master_seed=seed % 2 ** 64)
    tasks = [(cfg, t, tuple(lam_grid)) for t in range(n_trials)]
    if workers == 1:
        results = list(map(_calibration_trial, tasks))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_calibration_trial, tasks))
    thresholds = np.asarray(thresholds, dtype=float)

    irw_db = np.array([[10 * np.log10(res["irw_l21"][k][0]) for res in (r[1] for r in results)]
                       for k in range(len(lam_grid))])
    k_lam = int(np.argmin(np.median(irw_db, axis=1)))
    report = {"lam": float(lam_grid[k_lam]),
              "irw_median_nmse_db": dict(zip(map(float, lam_grid), np.median(irw_db, axis=1).tolist()))}
    for name, k in (("ep", 0), ("ep_uncoupled", 0), ("msbl", 0), ("irw_l21", k_lam)):
        mean_srr = np.array([np.mean([
            srr(np.flatnonzero(out[name][k][1] > thr).tolist(), support)
            for support, out in results]) for thr in thresholds])
        report[name] = {"threshold": float(_plateau_center(mean_srr, thresholds)),
                        "mean_srr": dict(zip(thresholds.tolist(), mean_srr.tolist()))}
    return report
