"""Cox proportional hazards for counting-process data.

Tied event times use Breslow's approximation unless ``ties="efron"`` is
requested; the censoring models always use Breslow because the weight
formula consumes the Breslow baseline.  The same engine fits the
outcome model and the censoring-time models behind the IPCW weights: with
``event="censoring"`` the event is ``1 - status`` on a subject's last row,
and subjects dying at a time are removed from the risk set before
censorings at that time are counted.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import StepFunction
from .errors import Divergence, NoEvents, NonIdentifiable, NotConverged

__all__ = [
    "CoxFit",
    "fit_cox",
    "subject_cumhaz",
    "cumulative_hazard",
    "cox_summary",
    "nagelkerke_r2",
    "PartialLikelihood",
]

SELECTORS = ("fixed", "td", "all")
EVENTS = ("outcome", "censoring")

# cap on the dense (event time x row) risk-set matrix held in memory
_DENSE_LIMIT = 20_000_000
# relative log-likelihood gain below which a non-vanishing score means divergence
_FLAT = 1e-13


def design(data, selector):
    if selector == "fixed":
        return np.asarray(data.fixed), list(data.fixed_names)
    if selector == "td":
        return np.asarray(data.td), list(data.td_names)
    if selector == "all":
        return np.hstack([data.fixed, data.td]), list(data.covariate_names)
    raise ValueError(f"selector must be one of {SELECTORS}, got {selector!r}")


def event_flags(data, event):
    """Per-row event indicator and the rows that leave the risk set first at ties."""
    status = np.asarray(data.status)
    last = np.asarray(data.is_last)
    if event == "outcome":
        return status == 1, np.zeros(len(status), dtype=bool)
    if event == "censoring":
        return last & (status == 0), last & (status == 1)
    raise ValueError(f"event must be one of {EVENTS}, got {event!r}")


class PartialLikelihood:
    """Partial likelihood of a counting-process design.

    Parameters
    ----------
    start, stop : ndarray, shape (n_rows,)
    events : bool ndarray
        Row ends in an event of the modelled type.
    exits_first : bool ndarray
        Row ends in a competing outcome at ``stop``; such rows are not at
        risk for events tied at ``stop``.
    x : ndarray, shape (n_rows, p)
    ties : {"breslow", "efron"}
    """

    def __init__(self, start, stop, events, exits_first, x, ties="breslow"):
        if ties not in ("breslow", "efron"):
            raise ValueError(f"ties must be 'breslow' or 'efron', got {ties!r}")
        self.ties = ties
        self.start = np.asarray(start, dtype=float)
        self.stop = np.asarray(stop, dtype=float)
        self.x = np.asarray(x, dtype=float).reshape(len(self.start), -1)
        self.events = np.asarray(events, dtype=bool)
        self.times = np.unique(self.stop[self.events])
        self.d = np.bincount(np.searchsorted(self.times, self.stop[self.events]),
                             minlength=len(self.times)).astype(float)
        self.x_event_sum = self.x[self.events].sum(axis=0)
        self._event_rows = np.flatnonzero(self.events)
        self._event_time = np.searchsorted(self.times, self.stop[self.events])
        self._exits_first = np.asarray(exits_first, dtype=bool)
        self._dense = None
        if len(self.times) * len(self.start) <= _DENSE_LIMIT:
            self._dense = self._risk(slice(None))

    @property
    def p(self):
        return self.x.shape[1]

    def _risk(self, sl):
        t = self.times[sl][:, None]
        at_risk = (self.start < t) & ((t < self.stop) | ((t == self.stop) & ~self._exits_first))
        return at_risk.astype(float)

    def _chunks(self):
        if self._dense is not None:
            yield slice(None), self._dense
            return
        step = max(1, _DENSE_LIMIT // max(1, len(self.start)))
        for lo in range(0, len(self.times), step):
            sl = slice(lo, lo + step)
            yield sl, self._risk(sl)

    def _tied_sums(self, r, rx, rxx):
        k = len(self.times)
        idx = self._event_time
        rows = self._event_rows
        t0 = np.bincount(idx, weights=r[rows], minlength=k)
        t1 = np.stack([np.bincount(idx, weights=rx[rows, j], minlength=k)
                       for j in range(rx.shape[1])], axis=1) if rx.shape[1] else np.zeros((k, 0))
        t2 = None
        if rxx is not None:
            t2 = np.stack([np.bincount(idx, weights=rxx[rows, j], minlength=k)
                           for j in range(rxx.shape[1])], axis=1) if rxx.shape[1] \
                else np.zeros((k, 0))
            t2 = t2.reshape(k, self.p, self.p)
        return t0, t1, t2

    def _fractions(self):
        """Efron weights ``l / d`` as a (k, max d) array, NaN beyond ``d``."""
        dmax = int(self.d.max()) if len(self.d) else 0
        ell = np.arange(dmax)[None, :]
        frac = ell / self.d[:, None]
        frac[ell >= self.d[:, None]] = np.nan
        return frac

    def _terms(self, beta, order):
        beta = np.asarray(beta, dtype=float)
        eta = self.x @ beta
        shift = eta.max() if len(eta) else 0.0
        r = np.exp(eta - shift)
        p = self.p
        rx = r[:, None] * self.x
        rxx = (rx[:, :, None] * self.x[:, None, :]).reshape(len(r), p * p) if order >= 2 else None
        k = len(self.times)
        s0 = np.empty(k)
        s1 = np.empty((k, p))
        s2 = np.empty((k, p, p)) if order >= 2 else None
        for sl, m in self._chunks():
            s0[sl] = m @ r
            s1[sl] = m @ rx
            if order >= 2:
                s2[sl] = (m @ rxx).reshape(-1, p, p)
        if self.ties == "breslow":
            frac = np.zeros((k, 1))
            mult = self.d[:, None]
            t0 = np.zeros(k)
            t1 = np.zeros((k, p))
            t2 = np.zeros((k, p, p)) if order >= 2 else None
        else:
            frac = self._fractions()
            mult = np.where(np.isnan(frac), 0.0, 1.0)
            frac = np.nan_to_num(frac)
            t0, t1, t2 = self._tied_sums(r, rx, rxx)
        return beta, shift, frac, mult, (s0, s1, s2), (t0, t1, t2)

    def log_likelihood(self, beta):
        beta, shift, frac, mult, (s0, _, _), (t0, _, _) = self._terms(beta, 0)
        den = _floor(s0[:, None] - frac * t0[:, None])
        logs = np.where(mult > 0, np.log(np.where(mult > 0, den, 1.0)) + shift, 0.0)
        return float(self.x_event_sum @ beta - np.sum(mult * logs))

    def evaluate(self, beta):
        """Log-likelihood, score and observed information at ``beta``."""
        beta, shift, frac, mult, (s0, s1, s2), (t0, t1, t2) = self._terms(beta, 2)
        ll = self.x_event_sum @ beta
        score = self.x_event_sum.copy()
        info = np.zeros((self.p, self.p))
        for j in range(frac.shape[1]):
            f = frac[:, j]
            w = mult[:, j]
            den = _floor(s0 - f * t0)
            safe = np.where(w > 0, den, 1.0)
            mean = (s1 - f[:, None] * t1) / safe[:, None]
            second = (s2 - f[:, None, None] * t2) / safe[:, None, None]
            ll -= np.sum(w * np.where(w > 0, np.log(safe) + shift, 0.0))
            score -= w @ mean
            info += np.einsum("k,kij->ij", w, second - mean[:, :, None] * mean[:, None, :])
        return float(ll), score, info

    def score(self, beta):
        return self.evaluate(beta)[1]

    def information(self, beta):
        return self.evaluate(beta)[2]

    def null_log_likelihood(self):
        """Value at ``beta = 0``: minus the sum of log risk-set sizes over events."""
        return self.log_likelihood(np.zeros(self.p))

    def baseline_increments(self, beta):
        beta, shift, frac, mult, (s0, _, _), (t0, _, _) = self._terms(beta, 0)
        den = _floor(s0[:, None] - frac * t0[:, None])
        inc = np.sum(np.where(mult > 0, mult / np.where(mult > 0, den, 1.0), 0.0), axis=1)
        return inc * np.exp(-shift)


def _floor(den):
    # Efron denominators can cancel to zero when tied events dominate the risk set
    return np.maximum(den, np.finfo(float).tiny)


@dataclass(frozen=True, eq=False)
class CoxFit:
    coefficients: np.ndarray
    covariance: np.ndarray
    baseline_cumhaz: StepFunction
    log_likelihood_at_solution: float
    null_log_likelihood: float
    n_subjects: int
    n_rows: int
    n_events: int
    converged: bool
    names: tuple = ()
    selector: str = "all"
    event_definition: str = "outcome"
    ties: str = "breslow"
    n_iter: int = 0
    score_max: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def hazard_ratios(self):
        return np.exp(self.coefficients)


def _check_rank(x, names):
    if x.shape[1] == 0:
        return
    centred = x - x.mean(axis=0)
    flat = [names[k] for k in range(x.shape[1]) if np.all(centred[:, k] == 0)]
    if flat:
        raise NonIdentifiable(f"covariates without variation: {flat}")
    if np.linalg.matrix_rank(centred) < x.shape[1]:
        raise NonIdentifiable(f"design is rank deficient in {names}")


def fit_cox(data, selector="all", event="outcome", tol=1e-8, max_iter=100,
            max_halvings=20, init=None, ties="breslow"):
    """Fit a Cox model by Newton-Raphson on the partial likelihood.

    Parameters
    ----------
    data : Dataset
    selector : {"fixed", "td", "all"}
        Which covariate block enters the model.
    event : {"outcome", "censoring"}
        Model the event time or the censoring time.
    tol : float
        Convergence threshold on the max-norm of the score.
    ties : {"breslow", "efron"}

    Iteration also stops once the log-likelihood no longer improves, which
    is how a flat likelihood (a coefficient drifting to infinity) ends;
    such fits carry ``info["stopped_on_likelihood"] = True``.

    Returns
    -------
    CoxFit
    """
    x, names = design(data, selector)
    events, exits_first = event_flags(data, event)
    if not np.any(events):
        raise NoEvents(f"no {event} events")
    _check_rank(x, names)
    pl = PartialLikelihood(data.start, data.stop, events, exits_first, x, ties=ties)
    p = pl.p
    beta = np.zeros(p) if init is None else np.asarray(init, dtype=float).copy()
    ll0 = pl.null_log_likelihood()
    ll, score, info = pl.evaluate(beta)
    converged = p == 0 or np.max(np.abs(score)) < tol
    flat = False
    it = 0
    while not converged and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            if it == 1:
                raise NonIdentifiable("singular information matrix at start") from None
            raise Divergence("information matrix became singular") from None
        for _ in range(max_halvings + 1):
            cand = beta + step
            ll_c, score_c, info_c = pl.evaluate(cand)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            step = step / 2.0
        else:
            if it > 1 and np.all(np.isfinite(beta)):
                # flat log-likelihood: a coefficient is drifting to infinity
                flat = True
                break
            raise Divergence(f"step halving exhausted at iteration {it}")
        gain = ll_c - ll
        beta, ll, score, info = cand, ll_c, score_c, info_c
        converged = np.max(np.abs(score)) < tol
        if not converged and it > 1 and gain <= _FLAT * max(1.0, abs(ll)):
            flat = True
            break
    if flat:
        # same outcome as the usual relative log-likelihood stopping rule
        converged = True

    if p:
        try:
            cov = np.linalg.inv(info)
        except np.linalg.LinAlgError:
            cov = np.linalg.pinv(info)
        cov = (cov + cov.T) / 2.0
    else:
        cov = np.zeros((0, 0))
    inc = pl.baseline_increments(beta)
    base = StepFunction(pl.times, np.cumsum(inc), 0.0)
    return CoxFit(
        coefficients=beta,
        covariance=cov,
        baseline_cumhaz=base,
        log_likelihood_at_solution=ll,
        null_log_likelihood=ll0,
        n_subjects=data.n_subjects,
        n_rows=data.n_rows,
        n_events=int(events.sum()),
        converged=bool(converged),
        names=tuple(names),
        selector=selector,
        event_definition=event,
        ties=ties,
        n_iter=it,
        score_max=float(np.max(np.abs(score))) if p else 0.0,
        info={"stopped_on_likelihood": flat},
    )


def cumulative_hazard(fit, data, t, left_limit=False):
    """Subject-specific cumulative hazard at ``t[i]`` for every subject of ``data``.

    Sums baseline increments ``dH0(u)`` for ``u <= t`` inside the subject's
    follow-up, each scaled by ``exp(coef' x(u))`` with ``x(u)`` read from
    the row covering ``u``.  ``left_limit`` excludes increments at ``t``.
    """
    x, _ = design(data, fit.selector)
    if x.shape[1] != len(fit.coefficients):
        raise ValueError("data does not match the fitted covariates")
    t = np.broadcast_to(np.asarray(t, dtype=float), (data.n_subjects,))
    tr = t[data.row_subject]
    h0 = fit.baseline_cumhaz
    upper = np.minimum(data.stop, tr)
    if left_limit:
        h_up = np.where(data.stop < tr, h0(upper), h0.left_limit(upper))
    else:
        h_up = h0(upper)
    inc = np.where(data.start < tr, h_up - h0(data.start), 0.0)
    # log scale so that a zero increment times an overflowing risk stays zero
    pos = inc > 0
    contrib = np.zeros_like(inc)
    with np.errstate(over="ignore"):
        contrib[pos] = np.exp(np.log(inc[pos]) + (x @ fit.coefficients)[pos])
    return np.bincount(data.row_subject, weights=contrib, minlength=data.n_subjects)


def subject_cumhaz(fit, subject, t):
    """Cumulative hazard at ``t`` for one subject given as a list of records."""
    h0 = fit.baseline_cumhaz
    total = 0.0
    for rec in subject:
        if rec.start >= t:
            continue
        if fit.selector == "fixed":
            cov = np.asarray(rec.fixed_covariates, dtype=float)
        elif fit.selector == "td":
            cov = np.asarray(rec.td_covariates, dtype=float)
        else:
            cov = np.concatenate([rec.fixed_covariates, rec.td_covariates]).astype(float)
        inc = h0(min(rec.stop, t)) - h0(rec.start)
        total += max(inc, 0.0) * float(np.exp(cov @ fit.coefficients))
    return total


def cox_summary(fit, level=0.95):
    """Per-covariate coefficient, hazard ratio with Wald interval, and p-value."""
    if not fit.converged:
        raise NotConverged("Cox fit did not converge")
    z = stats.norm.ppf(0.5 + level / 2.0)
    rows = []
    for name, b, s in zip(fit.names, fit.coefficients, fit.se):
        rows.append({
            "covariate": name,
            "coef": float(b),
            "se": float(s),
            "hr": float(np.exp(b)),
            "ci_low": float(np.exp(b - z * s)),
            "ci_high": float(np.exp(b + z * s)),
            "p": float(2.0 * stats.norm.sf(abs(b / s))) if s > 0 else float("nan"),
        })
    return rows


def nagelkerke_r2(fit, n=None):
    """Nagelkerke's generalised R^2 from the stored log-likelihoods.

    ``n`` defaults to the number of counting-process rows, the convention
    under which each row is a discrete observation.
    """
    if not fit.converged:
        raise NotConverged("Cox fit did not converge")
    n = fit.n_rows if n is None else n
    l0, l1 = fit.null_log_likelihood, fit.log_likelihood_at_solution
    num = 1.0 - np.exp(2.0 * (l0 - l1) / n)
    den = 1.0 - np.exp(2.0 * l0 / n)
    if den <= 0:
        return 0.0
    return float(np.clip(num / den, 0.0, 1.0))
