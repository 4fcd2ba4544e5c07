"""RMST regression with time-dependent covariates via double IPCW.

The model is ``g(mu(tau)) = eta' S(t)`` with ``S(t) = (1, X', Z(t)')'``.
Subjects whose restricted time is complete (``delta_tilde = 1``) enter the
estimating equation

    (1/n) sum_i sum_t S_i(t) delta_tilde_i W_i(t) [Y_i - g^{-1}(eta' S_i(t))] = 0

with ``W_i(t) = exp(H^X_i(t) + H^Z_i(t))`` built from two censoring-time
Cox models, one on the fixed covariates and one on the time-dependent
covariates.  The variance is the sandwich ``A^{-1} B A^{-1}``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import restrict
from .cox import cumulative_hazard, fit_cox
from .errors import (
    Divergence,
    DimensionMismatch,
    EmptyGrid,
    NonIdentifiable,
    NotConverged,
    SingularA,
)

__all__ = [
    "LinkFunction",
    "IDENTITY",
    "LOG",
    "get_link",
    "WeightModel",
    "censoring_weights",
    "WEIGHTINGS",
    "ContributionGrid",
    "GRID_POLICIES",
    "build_grid",
    "RmstFit",
    "fit_rmst",
    "fit_rmst_model",
    "predict_rmst",
    "rmst_r2",
]


@dataclass(frozen=True)
class LinkFunction:
    kind: str

    def forward(self, mu):
        mu = np.asarray(mu, dtype=float)
        return mu if self.kind == "identity" else np.log(mu)

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        return x if self.kind == "identity" else np.exp(x)

    def inverse_deriv(self, x):
        x = np.asarray(x, dtype=float)
        return np.ones_like(x) if self.kind == "identity" else np.exp(x)


IDENTITY = LinkFunction("identity")
LOG = LinkFunction("log")


def get_link(link):
    if isinstance(link, LinkFunction):
        return link
    try:
        return {"identity": IDENTITY, "log": LOG}[link]
    except KeyError:
        raise ValueError(f"unknown link {link!r}; expected 'identity' or 'log'") from None


# -- censoring weights ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WeightModel:
    """Inverse-probability-of-censoring weights ``exp(H^X(t) + H^Z(t))``.

    ``fixed_fit`` and ``td_fit`` are censoring-time Cox fits (either may be
    ``None``, in which case its factor is 1).  The model can be evaluated
    on any dataset with the same covariate layout, e.g. a held-out split.
    """

    fixed_fit: object = None
    td_fit: object = None
    max_weight: float = None

    def cumhaz(self, data, t, left_limit=False):
        h = np.zeros(data.n_subjects)
        for fit in (self.fixed_fit, self.td_fit):
            if fit is not None:
                h = h + cumulative_hazard(fit, data, t, left_limit=left_limit)
        return h

    def __call__(self, data, t, left_limit=False):
        with np.errstate(over="ignore"):
            w = np.exp(self.cumhaz(data, t, left_limit=left_limit))
        if self.max_weight is not None:
            w = np.minimum(w, self.max_weight)
        return w


WEIGHTINGS = ("double", "joint")


def censoring_weights(data, tau=None, max_weight=None, weighting="double"):
    """Fit the censoring-time Cox models and return the weight function.

    ``weighting="double"`` multiplies the factors of two separate models,
    one on the fixed and one on the time-dependent covariates, each with
    its own baseline hazard (the time-dependent model is skipped when
    ``q = 0``).  ``weighting="joint"`` uses a single censoring model on all
    covariates, which counts the baseline censoring hazard once.  With no
    covariates either choice reduces to the Nelson-Aalen censoring hazard.
    Without censored subjects every weight is 1.  ``tau`` is accepted for
    symmetry with the estimating equation; weights are only ever evaluated
    at ``t <= tau``.
    """
    if max_weight is not None and max_weight < 1:
        raise ValueError("max_weight must be >= 1")
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")
    if not np.any(data.delta == 0):
        return WeightModel(None, None, max_weight)
    if weighting == "joint":
        return WeightModel(fit_cox(data, "all", "censoring"), None, max_weight)
    fixed_fit = fit_cox(data, "fixed", "censoring")
    td_fit = fit_cox(data, "td", "censoring") if data.q else None
    return WeightModel(fixed_fit, td_fit, max_weight)


# -- contribution grid -----------------------------------------------------------

GRID_POLICIES = ("followup-end", "interval-starts", "event-times")


@dataclass(frozen=True, eq=False)
class ContributionGrid:
    subject: np.ndarray          # subject position, 0..n-1
    subject_id: np.ndarray
    t: np.ndarray
    S: np.ndarray
    delta_tilde: np.ndarray
    weight: np.ndarray
    y: np.ndarray
    n_subjects: int
    tau: float
    policy: str
    names: tuple
    p: int
    q: int

    @property
    def effective_weight(self):
        return np.where(self.delta_tilde == 1, self.weight, 0.0)

    def __len__(self):
        return len(self.t)


def build_grid(data, view, weights, policy="followup-end"):
    """Expand subjects onto the ``(subject, t)`` rows of the estimating equation.

    Policies
    --------
    ``followup-end``
        One row per subject at ``t = Y_i``; ``S`` carries the covariate
        value in force at the end of restricted follow-up and the weight
        is the left limit at ``Y_i``.
    ``interval-starts``
        One row per counting-process interval starting in ``[0, Y_i)``,
        evaluated at the interval start.
    ``event-times``
        Rows at ``t = 0`` and at every observed event time in
        ``(0, Y_i)``.
    """
    if policy not in GRID_POLICIES:
        raise ValueError(f"grid policy must be one of {GRID_POLICIES}, got {policy!r}")
    n = data.n_subjects
    y_subj = np.asarray(view.y, dtype=float)
    dt_subj = np.asarray(view.delta_tilde, dtype=int)
    if not np.any(dt_subj == 1):
        raise EmptyGrid("no subject has a complete restricted time")
    xs = data.subject_fixed

    if policy == "followup-end":
        subj = np.arange(n)
        t = y_subj.copy()
        z = data.td_at(t, side="left")
        w = weights(data, t, left_limit=True)
    elif policy == "interval-starts":
        keep = data.start < y_subj[data.row_subject]
        subj = np.asarray(data.row_subject)[keep]
        t = np.asarray(data.start)[keep]
        z = np.asarray(data.td)[keep]
        w = _weights_at(data, weights, subj, t)
    else:
        ev = np.unique(data.stop[data.status == 1])
        counts = 1 + np.searchsorted(ev, y_subj, side="left")
        subj = np.repeat(np.arange(n), counts)
        offs = np.arange(len(subj)) - np.repeat(np.cumsum(counts) - counts, counts)
        t = np.concatenate([[0.0], ev])[offs]
        z = _td_at_rows(data, subj, t)
        w = _weights_at(data, weights, subj, t)

    S = np.column_stack([np.ones(len(subj)), xs[subj], z])
    names = ("(Intercept)",) + tuple(data.fixed_names) + tuple(data.td_names)
    return ContributionGrid(
        subject=subj,
        subject_id=np.asarray(data.subject_ids)[subj],
        t=t,
        S=S,
        delta_tilde=dt_subj[subj],
        weight=w,
        y=y_subj[subj],
        n_subjects=n,
        tau=float(view.tau),
        policy=policy,
        names=names,
        p=data.p,
        q=data.q,
    )


def _td_at_rows(data, subj, t):
    # row with start <= t < stop within each subject (last row if t >= U)
    rows = np.empty(len(subj), dtype=int)
    for k in np.unique(subj):
        lo, hi = data.first_row[k], data.last_row[k] + 1
        sel = subj == k
        pos = np.searchsorted(data.start[lo:hi], t[sel], side="right") - 1
        rows[sel] = lo + np.maximum(pos, 0)
    return np.asarray(data.td)[rows]


def _weights_at(data, weights, subj, t):
    # evaluate the subject-level weight function at several times per subject
    out = np.empty(len(subj))
    counts = np.bincount(subj, minlength=data.n_subjects)
    order = np.argsort(subj, kind="stable")
    rank = np.empty(len(subj), dtype=int)
    rank[order] = np.arange(len(subj)) - np.repeat(np.cumsum(counts) - counts, counts)
    for r in range(int(counts.max()) if len(counts) else 0):
        sel = rank == r
        tt = np.full(data.n_subjects, 0.0)
        tt[subj[sel]] = t[sel]
        out[sel] = weights(data, tt)[subj[sel]]
    return out


# -- fitting -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RmstFit:
    eta: np.ndarray
    covariance: np.ndarray
    ase: np.ndarray
    tau: float
    link: LinkFunction
    df: int
    n: int
    converged: bool
    grid_policy: str
    names: tuple = ()
    p: int = 0
    q: int = 0
    A: np.ndarray = None
    B: np.ndarray = None
    residual_max: float = 0.0
    n_iter: int = 0
    weight_model: object = field(default=None, repr=False)

    @property
    def coefficients(self):
        return self.eta

    def t_quantile(self, level=0.95):
        return float(stats.t.ppf(0.5 + level / 2.0, self.df))

    def summary(self, level=0.95):
        """Coefficient table: estimate, ASE, t-based interval and two-sided p."""
        q = self.t_quantile(level)
        rows = []
        for name, b, s in zip(self.names, self.eta, self.ase):
            rows.append({
                "covariate": name,
                "coef": float(b),
                "se": float(s),
                "ci_low": float(b - q * s),
                "ci_high": float(b + q * s),
                "p": float(2.0 * stats.t.sf(abs(b / s), self.df)) if s > 0 else float("nan"),
            })
        return rows

    def linear_predictor(self, S):
        return np.asarray(S, dtype=float) @ self.eta

    def predict(self, S):
        """Predicted RMST ``g^{-1}(eta' S)`` for rows of ``S``."""
        return self.link.inverse(self.linear_predictor(S))


def _estimating_terms(S, w, y, eta, link):
    lp = S @ eta
    mu = link.inverse(lp)
    resid = w * (y - mu)
    return lp, mu, resid


def fit_rmst(grid, link="identity", tol=1e-8, max_iter=100):
    """Solve the weighted estimating equation and compute the sandwich variance.

    Identity link: closed-form weighted least squares.  Log link: Newton
    iteration with the analytic Jacobian.

    Returns
    -------
    RmstFit
    """
    link = get_link(link)
    n = grid.n_subjects
    w = grid.effective_weight.astype(float)
    if not np.all(np.isfinite(w)):
        raise Divergence("censoring weights overflow; the censoring model diverged "
                         "(consider max_weight)")
    use = w > 0
    if not np.any(use):
        raise EmptyGrid("no row carries a positive weight")
    S, y, ws = grid.S[use], grid.y[use], w[use]
    k = S.shape[1]
    if np.linalg.matrix_rank(S) < k:
        raise NonIdentifiable("design over complete subjects is rank deficient")

    it = 0
    if link.kind == "identity":
        sw = S * ws[:, None]
        eta = np.linalg.solve(sw.T @ S, sw.T @ y)
        # one refinement step against round-off with large weights
        eta = eta + np.linalg.solve(sw.T @ S, sw.T @ (y - S @ eta))
    else:
        if np.any(y <= 0):
            raise NonIdentifiable("log link needs positive restricted times")
        eta = np.zeros(k)
        eta[0] = np.log(np.sum(ws * y) / np.sum(ws))
        _, _, r = _estimating_terms(S, ws, y, eta, link)
        u = S.T @ r / n
        while np.max(np.abs(u)) >= tol:
            it += 1
            if it > max_iter:
                raise Divergence(f"Newton iteration did not converge in {max_iter} steps")
            lp = S @ eta
            jac = (S * (ws * link.inverse_deriv(lp))[:, None]).T @ S / n
            step = np.linalg.solve(jac, u)
            norm0 = np.max(np.abs(u))
            for _ in range(30):
                cand = eta + step
                _, _, r = _estimating_terms(S, ws, y, cand, link)
                u_c = S.T @ r / n
                if np.all(np.isfinite(u_c)) and np.max(np.abs(u_c)) < norm0:
                    break
                step = step / 2.0
            else:
                raise Divergence("step halving exhausted")
            eta, u = cand, u_c

    lp_all = grid.S @ eta
    mu_all = link.inverse(lp_all)
    resid_all = w * (grid.y - mu_all)
    contrib = grid.S * resid_all[:, None]
    residual = np.max(np.abs(contrib.sum(axis=0) / n))

    A = (grid.S * (w * link.inverse_deriv(lp_all))[:, None]).T @ grid.S / n
    eps = np.zeros((n, k))
    np.add.at(eps, grid.subject, contrib)
    B = eps.T @ eps / n
    try:
        if np.linalg.cond(A) > 1e14:
            raise np.linalg.LinAlgError
        a_inv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise SingularA("A matrix is not invertible") from None
    V = a_inv @ B @ a_inv
    V = (V + V.T) / 2.0
    ase = np.sqrt(np.clip(np.diag(V), 0.0, None) / n)
    return RmstFit(
        eta=eta,
        covariance=V,
        ase=ase,
        tau=grid.tau,
        link=link,
        df=max(n - k, 1),
        n=n,
        converged=bool(residual < tol),
        grid_policy=grid.policy,
        names=grid.names,
        p=grid.p,
        q=grid.q,
        A=A,
        B=B,
        residual_max=float(residual),
        n_iter=it,
    )


def fit_rmst_model(data, tau, link="identity", policy="followup-end", max_weight=None,
                   time_dependent=True, weighting="double"):
    """Weights, grid and fit in one call.

    ``time_dependent=False`` drops the time-dependent covariates first,
    giving the fixed-covariate model with a single weight factor.

    Returns
    -------
    (RmstFit, ContributionGrid)
    """
    if not time_dependent:
        data = data.fixed_only()
    view = restrict(data, tau)
    wm = censoring_weights(data, tau, max_weight=max_weight, weighting=weighting)
    grid = build_grid(data, view, wm, policy=policy)
    fit = fit_rmst(grid, link=link)
    return _with_weights(fit, wm), grid


def _with_weights(fit, wm):
    return RmstFit(**{**fit.__dict__, "weight_model": wm})


def predict_rmst(fit, profile, level=0.95):
    """Predicted RMST with a delta-method, t-based confidence interval.

    ``profile`` is either the full design vector ``(1, X, Z)`` or the
    covariates ``(X, Z)`` alone.  The interval is clamped to ``[0, tau]``.
    """
    if not fit.converged:
        raise NotConverged("RMST fit did not converge")
    s = np.asarray(profile, dtype=float).ravel()
    k = len(fit.eta)
    if len(s) == k - 1:
        s = np.concatenate([[1.0], s])
    if len(s) != k:
        raise DimensionMismatch(f"profile has {len(s)} entries, model needs {k} (or {k - 1})")
    lp = float(s @ fit.eta)
    mu = float(fit.link.inverse(lp))
    se = abs(float(fit.link.inverse_deriv(lp))) * np.sqrt(max(s @ fit.covariance @ s, 0.0) / fit.n)
    half = fit.t_quantile(level) * se
    lo = float(np.clip(mu - half, 0.0, fit.tau))
    hi = float(np.clip(mu + half, 0.0, fit.tau))
    return mu, lo, hi


def rmst_r2(fit, grid):
    """Weighted pseudo-R^2 ``1 - SSE/SST`` over complete rows."""
    if not fit.converged:
        raise NotConverged("RMST fit did not converge")
    use = grid.delta_tilde == 1
    w = grid.weight[use]
    y = grid.y[use]
    mu = fit.predict(grid.S[use])
    ybar = np.sum(w * y) / np.sum(w)
    sst = np.sum(w * (y - ybar) ** 2)
    if sst == 0:
        return 1.0
    return float(1.0 - np.sum(w * (y - mu) ** 2) / sst)
