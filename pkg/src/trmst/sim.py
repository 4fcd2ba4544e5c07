"""Monte Carlo studies for the time-dependent RMST model.

Survival times follow a Weibull proportional-hazards model with one binary
fixed covariate ``x ~ Bernoulli(0.5)`` and one time-dependent covariate
``Z(t) = 1{t >= t0}``, ``t0 ~ U(0, 4)``:

    h(t) = lambda * nu * t^(nu - 1) * exp(beta_fixed * x + beta_td * Z(t)).

Censoring times are exponential with a rate calibrated to a target
censoring fraction.  Every replicate draws from its own Philox stream
derived from the study seed, so results do not depend on scheduling.
"""

import csv
import dataclasses
import functools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset
from .errors import CalibrationFailed, ConfigError, StudyUnstable, TrmstError
from .evaluate import MODELS, score_models, train_test_split
from .rmst import GRID_POLICIES, WEIGHTINGS, fit_rmst_model

__all__ = [
    "SimConfig",
    "read_config",
    "MetricsReport",
    "PredictionReport",
    "gen_survival_time",
    "cumulative_hazard_true",
    "gen_dataset",
    "calibrate_censoring",
    "true_coefficients",
    "run_coefficient_study",
    "run_prediction_study",
    "aggregate_coefficients",
    "replicate_rng",
]

ADMIN_CENSORING = 1e6
COEF_NAMES = ("(Intercept)", "x", "z")
MAX_FAILURE_FRACTION = 0.05

# spawn-key tags separating the random streams of the different pipelines
_TRUTH, _COEF, _PRED, _PILOT = 0, 1, 2, 3
_PILOT_SEED = 20_240_101


@dataclass(frozen=True)
class SimConfig:
    """Settings of a simulation study.

    ``tau`` defaults to 20, which is beyond essentially all simulated
    follow-up, so the restricted mean is effectively the full mean.
    """

    n: int = 500
    lambda_: float = 0.1
    nu_shape: float = 1.5
    beta_fixed: float = 0.1
    beta_td: float = 0.1
    t0_high: float = 4.0
    p_fixed: float = 0.5
    target_censoring: float = 0.15
    tau: float = 20.0
    replicates: int = 1000
    seed: int = 2024
    big_n: int = 200_000
    link: str = "identity"
    grid_policy: str = "followup-end"
    weighting: str = "double"
    train_fraction: float = 2 / 3
    level: float = 0.95

    def __post_init__(self):
        checks = [
            (self.n >= 2, "n must be >= 2"),
            (self.lambda_ > 0, "lambda must be > 0"),
            (self.nu_shape > 0, "nu_shape must be > 0"),
            (self.t0_high > 0, "t0_high must be > 0"),
            (0 <= self.p_fixed <= 1, "p_fixed must lie in [0, 1]"),
            (0 <= self.target_censoring < 1, "target_censoring must lie in [0, 1)"),
            (self.tau > 0 and math.isfinite(self.tau), "tau must be positive and finite"),
            (self.replicates >= 1, "replicates must be >= 1"),
            (self.big_n >= 2, "big_n must be >= 2"),
            (self.link in ("identity", "log"), "link must be 'identity' or 'log'"),
            (self.grid_policy in GRID_POLICIES, f"grid_policy must be one of {GRID_POLICIES}"),
            (self.weighting in WEIGHTINGS, f"weighting must be one of {WEIGHTINGS}"),
            (0 < self.train_fraction < 1, "train_fraction must lie in (0, 1)"),
            (0 < self.level < 1, "level must lie in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


_ALIASES = {"lambda": "lambda_"}


def read_config(path, **overrides):
    """Parse a flat ``key = value`` file into a :class:`SimConfig`.

    Blank lines and ``#`` comments are ignored; keys are the field names
    (``lambda`` is accepted for ``lambda_``).
    """
    types = {f.name: f.type for f in dataclasses.fields(SimConfig)}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = _ALIASES.get(key, key)
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = val
    values.update({k: v for k, v in overrides.items() if v is not None})
    out = {}
    for key, val in values.items():
        typ = types[key]
        try:
            if typ in (int, "int"):
                out[key] = int(float(val)) if isinstance(val, str) else int(val)
            elif typ in (float, "float"):
                out[key] = float(val)
            else:
                out[key] = str(val)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {val!r}") from None
    return SimConfig(**out)


def replicate_rng(seed, tag, index):
    """Independent Philox generator for replicate ``index`` of pipeline ``tag``."""
    ss = np.random.SeedSequence(seed, spawn_key=(tag, index))
    return np.random.Generator(np.random.Philox(ss))


# -- data generation --------------------------------------------------------------

def cumulative_hazard_true(t, t0, x, cfg):
    """Cumulative hazard of the generating model at ``t``."""
    t, t0, x = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (t, t0, x)))
    base = cfg.lambda_ * np.exp(cfg.beta_fixed * x)
    before = base * t ** cfg.nu_shape
    after = base * t0 ** cfg.nu_shape + base * math.exp(cfg.beta_td) * (
        t ** cfg.nu_shape - t0 ** cfg.nu_shape)
    return np.where(t < t0, before, after)


def gen_survival_time(u, t0, x, cfg):
    """Invert the piecewise Weibull cumulative hazard at ``-log(u)``."""
    u, t0, x = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, t0, x)))
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("u must lie in (0, 1)")
    if np.any(t0 < 0):
        raise ValueError("t0 must be >= 0")
    nu = cfg.nu_shape
    e = -np.log(u)
    base = cfg.lambda_ * np.exp(cfg.beta_fixed * x)
    h0 = base * t0 ** nu
    jump = math.exp(cfg.beta_td)
    t1 = (e / base) ** (1.0 / nu)
    with np.errstate(invalid="ignore"):   # branch not taken when negative
        t2 = ((e - h0 + jump * h0) / (jump * base)) ** (1.0 / nu)
    out = np.where(e < h0, t1, t2)
    return out if out.ndim else float(out)


def _draw(cfg, rng, n):
    x = (rng.random(n) < cfg.p_fixed).astype(float)
    t0 = rng.uniform(0.0, cfg.t0_high, n)
    u = 1.0 - rng.random(n)            # (0, 1]
    u = np.where(u >= 1.0, np.nextafter(1.0, 0.0), u)
    e = rng.standard_exponential(n)
    return x, t0, gen_survival_time(u, t0, x, cfg), e


def _to_dataset(x, t0, t, c):
    n = len(t)
    obs = np.minimum(t, c)
    status = (t <= c).astype(int)
    split = obs > t0
    n_rows = n + int(split.sum())
    ids = np.repeat(np.arange(1, n + 1), 1 + split)
    first = np.cumsum(1 + split) - (1 + split)
    start = np.zeros(n_rows)
    stop = np.repeat(obs, 1 + split)
    st = np.repeat(status, 1 + split)
    z = np.zeros(n_rows)
    s = np.flatnonzero(split)
    stop[first[s]] = t0[s]
    st[first[s]] = 0
    start[first[s] + 1] = t0[s]
    z[first[s] + 1] = 1.0
    return Dataset(ids, start, stop, st, np.repeat(x, 1 + split)[:, None], z[:, None],
                   ("x",), ("z",), require_event=False)


def gen_dataset(cfg, rng=None, rate=None, n=None):
    """One simulated dataset in counting-process form.

    ``rate`` is the exponential censoring rate; by default it is calibrated
    to ``cfg.target_censoring``.  Follow-up is always cut at an
    administrative time of ``1e6``.
    """
    if rng is None:
        rng = replicate_rng(cfg.seed, _COEF, 0)
    if rate is None:
        rate = calibrate_censoring(cfg)
    n = cfg.n if n is None else n
    x, t0, t, e = _draw(cfg, rng, n)
    c = np.full(n, ADMIN_CENSORING) if rate == 0 else np.minimum(e / rate, ADMIN_CENSORING)
    return _to_dataset(x, t0, t, c)


@functools.lru_cache(maxsize=64)
def _calibrate(lambda_, nu_shape, beta_fixed, beta_td, t0_high, p_fixed, target,
               pilot_n, tol, max_steps):
    cfg = SimConfig(lambda_=lambda_, nu_shape=nu_shape, beta_fixed=beta_fixed,
                    beta_td=beta_td, t0_high=t0_high, p_fixed=p_fixed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(_PILOT_SEED)))
    _, _, t, e = _draw(cfg, rng, pilot_n)
    # common random numbers: C = E / rate, so the fraction is monotone in rate
    ratio = e / np.minimum(t, ADMIN_CENSORING)

    def frac(rate):
        return float(np.mean(ratio < rate))

    lo, hi = 0.0, 1.0
    while frac(hi) < target:
        hi *= 2.0
        if hi > 1e12:
            raise CalibrationFailed(f"no censoring rate reaches {target}")
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        f = frac(mid)
        if abs(f - target) <= tol:
            return mid
        lo, hi = (mid, hi) if f < target else (lo, mid)
    raise CalibrationFailed(f"bisection did not reach {target} +- {tol} in {max_steps} steps")


def calibrate_censoring(cfg, pilot_n=100_000, tol=0.005, max_steps=50):
    """Exponential censoring rate giving ``cfg.target_censoring`` censoring.

    Bisection on a fixed-seed pilot sample; results are cached.  A target
    of 0 gives rate 0 (administrative censoring only).
    """
    if cfg.target_censoring == 0:
        return 0.0
    return _calibrate(cfg.lambda_, cfg.nu_shape, cfg.beta_fixed, cfg.beta_td, cfg.t0_high,
                      cfg.p_fixed, cfg.target_censoring, pilot_n, tol, max_steps)


def true_coefficients(cfg, big_n=None):
    """T-RMST coefficients fitted on one large, uncensored dataset."""
    big_n = cfg.big_n if big_n is None else big_n
    data = gen_dataset(cfg, replicate_rng(cfg.seed, _TRUTH, 0), rate=0.0, n=big_n)
    fit, _ = fit_rmst_model(data, cfg.tau, link=cfg.link, policy=cfg.grid_policy)
    return fit.eta.copy()


# -- parallel map -------------------------------------------------------------------

def worker_count(requested=None):
    n = os.cpu_count() or 1
    env = os.environ.get("RMST_TD_THREADS")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            raise ConfigError(f"RMST_TD_THREADS must be an integer, got {env!r}") from None
    if requested is not None:
        n = min(n, max(1, int(requested)))
    return n


def _map(fn, items, workers):
    if workers <= 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# -- coefficient study ----------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    """Monte Carlo summary per coefficient.

    ``mse`` is the mean squared error; ``rmse`` its square root.
    """

    names: tuple
    true_value: np.ndarray
    bias: np.ndarray
    mse: np.ndarray
    rmse: np.ndarray
    rel_se: np.ndarray
    cp: np.ndarray
    mean_ase: np.ndarray
    emp_sd: np.ndarray
    n: int
    censoring_rate: float
    target_censoring: float
    tau: float
    replicates: int
    failures: int = 0
    per_replicate: list = field(default=None, repr=False)

    def rows(self):
        return [
            {"n": self.n, "censoring": self.target_censoring, "coefficient": nm,
             "true": float(self.true_value[k]), "bias": float(self.bias[k]),
             "mse": float(self.mse[k]), "rmse": float(self.rmse[k]),
             "rel_se": float(self.rel_se[k]), "cp": float(self.cp[k])}
            for k, nm in enumerate(self.names)
        ]


def aggregate_coefficients(estimates, ases, covered, truth):
    """Bias, MSE, RMSE, Rel SE and coverage from per-replicate arrays."""
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    ase = np.atleast_2d(np.asarray(ases, dtype=float))
    cov = np.atleast_2d(np.asarray(covered, dtype=float))
    truth = np.asarray(truth, dtype=float)
    err = est - truth
    mse = np.mean(err ** 2, axis=0)
    sd = np.std(est, axis=0, ddof=1) if len(est) > 1 else np.full(est.shape[1], np.nan)
    mean_ase = np.mean(ase, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = mean_ase / sd
    return {"bias": np.mean(err, axis=0), "mse": mse, "rmse": np.sqrt(mse),
            "rel_se": rel, "cp": np.mean(cov, axis=0), "mean_ase": mean_ase, "emp_sd": sd}


class _CoefReplicate:
    def __init__(self, cfg, truth, rate):
        self.cfg, self.truth, self.rate = cfg, np.asarray(truth, dtype=float), rate

    def __call__(self, r):
        cfg = self.cfg
        data = gen_dataset(cfg, replicate_rng(cfg.seed, _COEF, r), rate=self.rate)
        cens = 1.0 - float(np.mean(data.delta))
        try:
            fit, _ = fit_rmst_model(data, cfg.tau, link=cfg.link, policy=cfg.grid_policy,
                                    weighting=cfg.weighting)
        except (TrmstError, np.linalg.LinAlgError) as exc:
            return {"replicate": r, "ok": False, "error": f"{type(exc).__name__}: {exc}",
                    "censoring": cens}
        half = fit.t_quantile(cfg.level) * fit.ase
        covered = np.abs(fit.eta - self.truth) <= half
        return {"replicate": r, "ok": True, "eta": fit.eta, "ase": fit.ase,
                "covered": covered, "censoring": cens}


def _check_failures(results, replicates):
    failed = [r for r in results if not r["ok"]]
    if len(failed) > MAX_FAILURE_FRACTION * replicates:
        raise StudyUnstable(f"{len(failed)} of {replicates} replicates failed; "
                            f"first: {failed[0]['error']}")
    return len(failed)


def run_coefficient_study(cfg, truth, dump=None, workers=None):
    """Bias, MSE, Rel SE and coverage of the T-RMST estimator.

    Parameters
    ----------
    cfg : SimConfig
    truth : array_like
        Reference coefficients, usually from :func:`true_coefficients`.
    dump : str or path, optional
        CSV receiving ``replicate, coefficient, estimate, ase, covered``.
    workers : int, optional
        Process count (capped by ``RMST_TD_THREADS``).

    Returns
    -------
    MetricsReport
    """
    rate = calibrate_censoring(cfg)
    results = _map(_CoefReplicate(cfg, truth, rate), list(range(cfg.replicates)),
                   worker_count(workers))
    failures = _check_failures(results, cfg.replicates)
    ok = [r for r in results if r["ok"]]
    est = np.array([r["eta"] for r in ok])
    ase = np.array([r["ase"] for r in ok])
    cov = np.array([r["covered"] for r in ok])
    agg = aggregate_coefficients(est, ase, cov, truth)
    per = [{"replicate": r["replicate"], "coefficient": nm, "estimate": float(r["eta"][k]),
            "ase": float(r["ase"][k]), "covered": int(r["covered"][k])}
           for r in ok for k, nm in enumerate(COEF_NAMES)]
    if dump is not None:
        write_rows(dump, per, ("replicate", "coefficient", "estimate", "ase", "covered"))
    return MetricsReport(
        names=COEF_NAMES, true_value=np.asarray(truth, dtype=float), n=cfg.n,
        censoring_rate=float(np.mean([r["censoring"] for r in results])),
        target_censoring=cfg.target_censoring, tau=cfg.tau, replicates=len(ok),
        failures=failures, per_replicate=per, **agg)


# -- prediction study ----------------------------------------------------------------

@dataclass(frozen=True)
class PredictionReport:
    """Average test-set C-index and prediction error per model."""

    c_index: dict
    prediction_error: dict
    n: int
    censoring_rate: float
    target_censoring: float
    tau: float
    replicates: int
    failures: int = 0
    per_replicate: list = field(default=None, repr=False)

    def rows(self):
        return [{"n": self.n, "censoring": self.target_censoring, "model": m,
                 "c_index": self.c_index[m], "prediction_error": self.prediction_error.get(m)}
                for m in self.c_index]


class _PredReplicate:
    def __init__(self, cfg, rate, models):
        self.cfg, self.rate, self.models = cfg, rate, models

    def __call__(self, r):
        cfg = self.cfg
        rng = replicate_rng(cfg.seed, _PRED, r)
        data = gen_dataset(cfg, rng, rate=self.rate)
        cens = 1.0 - float(np.mean(data.delta))
        try:
            train, test = train_test_split(data, cfg.train_fraction, rng)
            scores = score_models(train, test, cfg.tau, cfg.link, cfg.grid_policy, self.models,
                                  weighting=cfg.weighting)
        except (TrmstError, np.linalg.LinAlgError) as exc:
            return {"replicate": r, "ok": False, "error": f"{type(exc).__name__}: {exc}",
                    "censoring": cens}
        return {"replicate": r, "ok": True, "scores": scores, "censoring": cens}


def run_prediction_study(cfg, models=MODELS, dump=None, workers=None):
    """Train/test comparison of T-Cox, T-RMST and F-RMST.

    Each replicate splits a simulated dataset by subject, fits every model
    on the training part and scores it on the test part.

    Returns
    -------
    PredictionReport
    """
    rate = calibrate_censoring(cfg)
    results = _map(_PredReplicate(cfg, rate, tuple(models)), list(range(cfg.replicates)),
                   worker_count(workers))
    failures = _check_failures(results, cfg.replicates)
    ok = [r for r in results if r["ok"]]
    per = [{"replicate": r["replicate"], "model": m, "c_index": r["scores"][m][0],
            "prediction_error": r["scores"][m][1]} for r in ok for m in models]
    ci = {m: float(np.mean([r["scores"][m][0] for r in ok])) for m in models}
    pe = {m: float(np.mean([r["scores"][m][1] for r in ok]))
          for m in models if m != "T-Cox"}
    if dump is not None:
        write_rows(dump, per, ("replicate", "model", "c_index", "prediction_error"))
    return PredictionReport(
        c_index=ci, prediction_error=pe, n=cfg.n,
        censoring_rate=float(np.mean([r["censoring"] for r in results])),
        target_censoring=cfg.target_censoring, tau=cfg.tau, replicates=len(ok),
        failures=failures, per_replicate=per)


# -- output ---------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, rows, columns):
    """Write dict rows as CSV atomically; ``None`` becomes an empty cell."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])
    os.replace(tmp, path)

