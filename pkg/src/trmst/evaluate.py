"""Predictive scoring on held-out data: concordance, IPCW prediction error, splits."""

from dataclasses import dataclass

import numpy as np

from .core import restrict
from .cox import fit_cox
from .errors import AllCensored, DegenerateSplit, Divergence, NoUsablePairs, TrmstError
from .rmst import fit_rmst_model

__all__ = [
    "EvalReport",
    "MODELS",
    "c_index",
    "prediction_error",
    "train_test_split",
    "score_models",
    "uninformative_covariates",
    "repeated_evaluation",
]

MODELS = ("T-Cox", "T-RMST", "F-RMST")


@dataclass(frozen=True)
class EvalReport:
    """Scores of one model on one test set.

    ``prediction_error`` is ``None`` for models without an RMST-scale
    prediction (the Cox model).
    """

    c_index: float
    prediction_error: float = None
    n_test: int = 0
    n_usable_pairs: int = 0


def _concordance(scores, time, delta):
    """Return (concordant + 0.5 * ties, usable pairs) with higher score = longer survival."""
    scores = np.asarray(scores, dtype=float)
    time = np.asarray(time, dtype=float)
    delta = np.asarray(delta).astype(bool)
    if not (len(scores) == len(time) == len(delta)):
        raise ValueError("scores, time and delta must have the same length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    num = 0.0
    usable = 0
    # pair (i, j) is usable when i has an event and T_i < T_j; for a tie in
    # time it is usable when i is an event and j is censored
    for i in np.flatnonzero(delta):
        later = (time > time[i]) | ((time == time[i]) & ~delta)
        later[i] = False
        m = int(later.sum())
        if not m:
            continue
        usable += m
        s = scores[later]
        num += np.sum(s > scores[i]) + 0.5 * np.sum(s == scores[i])
    return num, usable


def c_index(scores, time, delta, higher_is_better=True):
    """Harrell's concordance index.

    Parameters
    ----------
    scores : array_like
        Per-subject prediction.  With ``higher_is_better`` (RMST models) a
        larger score predicts longer survival; pass ``False`` for risk
        scores such as a Cox linear predictor.
    time, delta : array_like
        Observed time and event indicator.

    Returns
    -------
    float
        Concordant pairs over usable pairs, score ties counted as 1/2.

    Raises
    ------
    NoUsablePairs
        If no pair has its shorter time observed as an event.
    """
    s = np.asarray(scores, dtype=float)
    num, usable = _concordance(s if higher_is_better else -s, time, delta)
    if usable == 0:
        raise NoUsablePairs("no usable pair: every shorter time is censored")
    return float(num / usable)


def usable_pairs(time, delta):
    return _concordance(np.zeros(len(time)), time, delta)[1]


def prediction_error(mu, view, weights, squared=False):
    """IPCW-weighted mean absolute (or squared) error on the restricted scale.

    ``sum(dt * w * |Y - mu|) / sum(dt * w)`` where ``dt`` is the completeness
    indicator of the restricted view and ``w`` the censoring weight at ``Y``.
    """
    mu = np.asarray(mu, dtype=float)
    y = np.asarray(view.y, dtype=float)
    # incomplete subjects carry zero weight whatever their censoring weight
    w = np.where(np.asarray(view.delta_tilde) == 1, np.asarray(weights, dtype=float), 0.0)
    if not np.all(np.isfinite(mu)):
        raise ValueError("predictions must be finite")
    if not np.all(np.isfinite(w)):
        raise Divergence("non-finite censoring weights")
    den = w.sum()
    if not den > 0:
        raise AllCensored("no complete restricted time with positive weight")
    err = (y - mu) ** 2 if squared else np.abs(y - mu)
    return float(np.sum(w * err) / den)


def train_test_split(data, fraction=2 / 3, seed=None):
    """Random subject-level partition into training and test datasets.

    ``round(fraction * n)`` subjects go to training.  ``seed`` may be an int,
    a ``numpy.random.Generator`` or ``None``.

    Raises
    ------
    DegenerateSplit
        If either part is empty or has no events.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = data.n_subjects
    n_train = int(round(fraction * n))
    if n_train == 0 or n_train == n:
        raise DegenerateSplit(f"fraction {fraction} leaves an empty part for n = {n}")
    perm = rng.permutation(n)
    train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    delta = data.delta
    if not delta[train_idx].any() or not delta[test_idx].any():
        raise DegenerateSplit("a split part has no events")
    return data.subset(train_idx), data.subset(test_idx)


def uninformative_covariates(train):
    """Covariates a training split cannot estimate.

    A fixed covariate is dropped when it is constant over the training
    subjects, over those with an event, or over the risk set at the first
    censoring time (then the censoring model has no information on it).  A
    time-dependent covariate is dropped when it is constant over all rows.
    """
    x, d, u = train.subject_fixed, train.delta.astype(bool), train.time
    groups = [np.ones(len(d), dtype=bool), d]
    if not d.all():
        groups.append(u >= u[~d].min())
    drop = [nm for k, nm in enumerate(train.fixed_names)
            if any(np.ptp(x[g, k]) == 0 for g in groups if g.any())]
    drop += [nm for k, nm in enumerate(train.td_names) if np.ptp(train.td[:, k]) == 0]
    return drop


def score_models(train, test, tau, link="identity", policy="followup-end",
                 models=MODELS, max_weight=None, ties="efron", weighting="double"):
    """Fit the requested models on ``train`` and score them on ``test``.

    Test subjects are scored with the covariates in force at the end of
    their follow-up.  Covariates listed by :func:`uninformative_covariates`
    are dropped from both parts first.  The prediction error uses each RMST model's own
    censoring weights evaluated at the test subjects' restricted times.

    Returns
    -------
    dict
        ``model -> (c_index, prediction_error or None, usable pairs)``.
    """
    drop = uninformative_covariates(train)
    if drop:
        train, test = train.drop_covariates(drop), test.drop_covariates(drop)
    out = {}
    u, d = test.time, test.delta
    pairs = usable_pairs(u, d)
    z_end = test.td_at(u, side="left")
    s_end = np.column_stack([test.subject_fixed, z_end])
    for m in models:
        if m == "T-Cox":
            fit = fit_cox(train, "all", "outcome", ties=ties)
            out[m] = (c_index(s_end @ fit.coefficients, u, d, higher_is_better=False), None, pairs)
            continue
        td = m == "T-RMST"
        fit, _ = fit_rmst_model(train, tau, link=link, policy=policy,
                                max_weight=max_weight, time_dependent=td,
                                weighting=weighting)
        tdata = test if td else test.fixed_only()
        view = restrict(tdata, tau)
        cov = s_end if td else test.subject_fixed
        mu = fit.predict(np.column_stack([np.ones(len(u)), cov]))
        w = fit.weight_model(tdata, view.y, left_limit=True)
        out[m] = (c_index(mu, u, d), prediction_error(mu, view, w), pairs)
    return out


def repeated_evaluation(data, tau, models=MODELS, fraction=2 / 3, repeats=500, seed=0,
                        link="identity", policy="followup-end", max_weight=None,
                        weighting="double", ties="efron", retries=10):
    """Average test-set scores over repeated random subject-level splits.

    A repeat whose split is degenerate, or on which a model cannot be
    fitted, is redrawn up to ``retries`` times; a repeat that still fails
    is skipped and counted.

    Returns
    -------
    (dict, int, list)
        ``model -> EvalReport`` of averaged scores, the number of skipped
        repeats and the per-repeat scores.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    ss = np.random.SeedSequence(seed)
    per, skipped = [], 0
    for r, child in enumerate(ss.spawn(repeats)):
        rng = np.random.Generator(np.random.Philox(child))
        scores = None
        for _ in range(retries + 1):
            try:
                train, test = train_test_split(data, fraction, rng)
                scores = score_models(train, test, tau, link, policy, models, max_weight,
                                      ties, weighting)
                break
            except (TrmstError, np.linalg.LinAlgError):
                continue
        if scores is None:
            skipped += 1
            continue
        per.append({"repeat": r, "n_test": test.n_subjects, "scores": scores})
    if not per:
        raise DegenerateSplit(f"all {repeats} repeats failed")
    out = {}
    for m in models:
        pes = [p["scores"][m][1] for p in per]
        out[m] = EvalReport(
            c_index=float(np.mean([p["scores"][m][0] for p in per])),
            prediction_error=None if pes[0] is None else float(np.mean(pes)),
            n_test=int(round(np.mean([p["n_test"] for p in per]))),
            n_usable_pairs=int(round(np.mean([p["scores"][m][2] for p in per]))),
        )
    return out, skipped, per
