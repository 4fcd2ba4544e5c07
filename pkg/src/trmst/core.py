"""Counting-process survival data, Kaplan-Meier, and horizon restriction.

A subject is stored as one or more rows ``(start, stop]`` that partition
``[0, U]``; fixed covariates repeat on every row and time-dependent
covariates are constant within a row.  :class:`Dataset` keeps the rows as
columnar numpy arrays so that simulation-sized inputs stay cheap; the
record view is materialised on demand.
"""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    DataError,
    EmptyInput,
    EventNotTerminal,
    GapInFollowUp,
    InconsistentFixedCovariates,
    NoEvents,
    OverlappingIntervals,
    ParseError,
    TauOutOfRange,
)

__all__ = [
    "SurvivalRecord",
    "Dataset",
    "RestrictedView",
    "StepFunction",
    "build_dataset",
    "read_csv",
    "write_csv",
    "kaplan_meier",
    "restrict",
]


@dataclass(frozen=True)
class SurvivalRecord:
    subject_id: object
    start: float
    stop: float
    status: int
    fixed_covariates: tuple = ()
    td_covariates: tuple = ()


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class Dataset:
    """Validated counting-process dataset.

    Parameters
    ----------
    ids, start, stop, status : array_like, shape (n_rows,)
    fixed : array_like, shape (n_rows, p)
    td : array_like, shape (n_rows, q)
    fixed_names, td_names : sequence of str
    require_event : bool
        Raise :class:`NoEvents` when no row carries ``status == 1``.

    Rows are sorted by ``(subject, start)``.  All arrays are read-only.
    """

    def __init__(self, ids, start, stop, status, fixed=None, td=None,
                 fixed_names=None, td_names=None, require_event=True):
        ids = np.asarray(ids)
        start = np.asarray(start, dtype=float)
        stop = np.asarray(stop, dtype=float)
        status = np.asarray(status)
        n = len(ids)
        if n == 0:
            raise EmptyInput("no rows")
        fixed = np.zeros((n, 0)) if fixed is None else np.asarray(fixed, dtype=float)
        td = np.zeros((n, 0)) if td is None else np.asarray(td, dtype=float)
        fixed = fixed.reshape(n, -1)
        td = td.reshape(n, -1)
        if not (len(start) == len(stop) == len(status) == n):
            raise DataError("column lengths differ")
        fixed_names = list(fixed_names) if fixed_names is not None else [
            f"x{k + 1}" for k in range(fixed.shape[1])]
        td_names = list(td_names) if td_names is not None else [
            f"z{k + 1}" for k in range(td.shape[1])]
        if len(fixed_names) != fixed.shape[1] or len(td_names) != td.shape[1]:
            raise DataError("covariate names do not match covariate columns")

        order = np.lexsort((start, ids))
        ids, start, stop, status = ids[order], start[order], stop[order], status[order]
        fixed, td = fixed[order], td[order]
        self._validate(ids, start, stop, status, fixed, td)

        new_subject = np.ones(n, dtype=bool)
        new_subject[1:] = ids[1:] != ids[:-1]
        first = np.flatnonzero(new_subject)
        last = np.append(first[1:] - 1, n - 1)
        is_last = np.zeros(n, dtype=bool)
        is_last[last] = True

        self.ids = _readonly(ids)
        self.start = _readonly(start)
        self.stop = _readonly(stop)
        self.status = _readonly(status.astype(np.int8))
        self.fixed = _readonly(fixed)
        self.td = _readonly(td)
        self.fixed_names = tuple(fixed_names)
        self.td_names = tuple(td_names)
        self.first_row = _readonly(first)
        self.last_row = _readonly(last)
        self.is_last = _readonly(is_last)
        self.row_subject = _readonly(np.cumsum(new_subject) - 1)
        if require_event and not np.any(self.status == 1):
            raise NoEvents("dataset contains no events")

    @staticmethod
    def _validate(ids, start, stop, status, fixed, td):
        bad = ~(np.isfinite(start) & np.isfinite(stop))
        if np.any(bad):
            raise DataError("non-finite time", subject=ids[np.argmax(bad)])
        if not np.all(np.isfinite(fixed)) or not np.all(np.isfinite(td)):
            k = np.argmax(~np.all(np.isfinite(np.hstack([fixed, td])), axis=1))
            raise DataError("non-finite covariate", subject=ids[k])
        if np.any((status != 0) & (status != 1)):
            raise DataError("status must be 0 or 1",
                            subject=ids[np.argmax((status != 0) & (status != 1))])
        if np.any(start >= stop):
            raise DataError("start must be < stop", subject=ids[np.argmax(start >= stop)])
        same = ids[1:] == ids[:-1]
        firsts = np.append(True, ~same)
        if np.any(start[firsts] != 0.0):
            k = np.flatnonzero(firsts)[np.argmax(start[firsts] != 0.0)]
            raise GapInFollowUp("follow-up must start at 0", subject=ids[k])
        overlap = same & (stop[:-1] > start[1:])
        if np.any(overlap):
            raise OverlappingIntervals("rows overlap", subject=ids[np.argmax(overlap)])
        gap = same & (stop[:-1] < start[1:])
        if np.any(gap):
            raise GapInFollowUp("rows leave a gap", subject=ids[np.argmax(gap)])
        early_event = same & (status[:-1] == 1)
        if np.any(early_event):
            raise EventNotTerminal("event on a non-terminal row",
                                   subject=ids[np.argmax(early_event)])
        if fixed.shape[1]:
            changed = same & np.any(fixed[1:] != fixed[:-1], axis=1)
            if np.any(changed):
                raise InconsistentFixedCovariates(
                    "fixed covariates change between rows", subject=ids[np.argmax(changed)])

    # -- sizes -----------------------------------------------------------
    @property
    def p(self):
        return self.fixed.shape[1]

    @property
    def q(self):
        return self.td.shape[1]

    @property
    def covariate_names(self):
        return self.fixed_names + self.td_names

    @property
    def n_rows(self):
        return len(self.ids)

    @property
    def n_subjects(self):
        return len(self.first_row)

    def __len__(self):
        return self.n_subjects

    def __repr__(self):
        return (f"Dataset(n_subjects={self.n_subjects}, n_rows={self.n_rows}, "
                f"p={self.p}, q={self.q}, events={int(self.delta.sum())})")

    # -- subject-level views ---------------------------------------------
    @property
    def subject_ids(self):
        return self.ids[self.first_row]

    @property
    def time(self):
        """Observed time ``U`` per subject."""
        return self.stop[self.last_row]

    @property
    def delta(self):
        """Event indicator per subject."""
        return self.status[self.last_row].astype(int)

    @property
    def subject_fixed(self):
        return self.fixed[self.first_row]

    @property
    def records(self):
        return [
            SurvivalRecord(self.ids[k].item(), float(self.start[k]), float(self.stop[k]),
                           int(self.status[k]), tuple(self.fixed[k]), tuple(self.td[k]))
            for k in range(self.n_rows)
        ]

    def subject_records(self, index):
        """Rows of the subject at position ``index`` as records."""
        lo, hi = self.first_row[index], self.last_row[index] + 1
        return [SurvivalRecord(self.ids[k].item(), float(self.start[k]), float(self.stop[k]),
                               int(self.status[k]), tuple(self.fixed[k]), tuple(self.td[k]))
                for k in range(lo, hi)]

    def row_at(self, t, side="left"):
        """Row index covering time ``t[i]`` for every subject ``i``.

        ``side="left"`` picks the row with ``start < t <= stop`` (the value
        in force just before ``t``); ``side="right"`` picks
        ``start <= t < stop``.  Times outside follow-up clamp to the first
        or last row.
        """
        t = np.broadcast_to(np.asarray(t, dtype=float), (self.n_subjects,))
        tr = t[self.row_subject]
        hit = self.start < tr if side == "left" else self.start <= tr
        count = np.add.reduceat(hit.astype(np.int64), self.first_row)
        return self.first_row + np.maximum(count - 1, 0)

    def td_at(self, t, side="left"):
        return self.td[self.row_at(t, side)]

    # -- derived datasets -------------------------------------------------
    def subset(self, subjects, require_event=False):
        """Dataset restricted to subject positions ``subjects``."""
        subjects = np.sort(np.asarray(subjects, dtype=int))
        keep = np.isin(self.row_subject, subjects)
        return Dataset(self.ids[keep], self.start[keep], self.stop[keep], self.status[keep],
                       self.fixed[keep], self.td[keep], self.fixed_names, self.td_names,
                       require_event=require_event)

    def fixed_only(self):
        """Collapse to one row per subject, dropping time-dependent covariates."""
        f, l = self.first_row, self.last_row
        return Dataset(self.ids[f], np.zeros(len(f)), self.stop[l], self.status[l],
                       self.fixed[f], None, self.fixed_names, [], require_event=False)

    def drop_covariates(self, names):
        """Dataset without the named covariates."""
        names = set(names)
        unknown = names - set(self.covariate_names)
        if unknown:
            raise DataError(f"unknown covariates {sorted(unknown)}")
        fi = [k for k, nm in enumerate(self.fixed_names) if nm not in names]
        ti = [k for k, nm in enumerate(self.td_names) if nm not in names]
        return Dataset(self.ids, self.start, self.stop, self.status, self.fixed[:, fi],
                       self.td[:, ti], [self.fixed_names[k] for k in fi],
                       [self.td_names[k] for k in ti], require_event=False)

    def with_td_names(self, td_names):
        """Re-split covariate columns so that ``td_names`` are time-dependent."""
        names = list(self.covariate_names)
        allcov = np.hstack([self.fixed, self.td])
        unknown = set(td_names) - set(names)
        if unknown:
            raise DataError(f"unknown covariates {sorted(unknown)}")
        fi = [k for k, nm in enumerate(names) if nm not in td_names]
        ti = [names.index(nm) for nm in td_names]
        return Dataset(self.ids, self.start, self.stop, self.status, allcov[:, fi],
                       allcov[:, ti], [names[k] for k in fi], list(td_names),
                       require_event=False)


def build_dataset(rows, fixed_names=None, td_names=None, require_event=True):
    """Build a :class:`Dataset` from row tuples or records.

    Each row is ``(id, start, stop, status, fixed, td)`` where ``fixed`` and
    ``td`` are sequences, or a :class:`SurvivalRecord`.
    """
    rows = list(rows)
    if not rows:
        raise EmptyInput("no rows")
    recs = [r if isinstance(r, SurvivalRecord) else SurvivalRecord(
        r[0], r[1], r[2], r[3], tuple(r[4]) if len(r) > 4 else (),
        tuple(r[5]) if len(r) > 5 else ()) for r in rows]
    p = {len(r.fixed_covariates) for r in recs}
    q = {len(r.td_covariates) for r in recs}
    if len(p) > 1 or len(q) > 1:
        raise DataError("rows disagree on the number of covariates")
    p, q = p.pop(), q.pop()
    return Dataset(
        [r.subject_id for r in recs],
        [r.start for r in recs],
        [r.stop for r in recs],
        [r.status for r in recs],
        np.array([r.fixed_covariates for r in recs], dtype=float).reshape(len(recs), p),
        np.array([r.td_covariates for r in recs], dtype=float).reshape(len(recs), q),
        fixed_names, td_names, require_event=require_event)


_REQUIRED = ("id", "start", "stop", "status")


def _parse_id(values):
    try:
        return np.array([int(v) for v in values])
    except ValueError:
        return np.array(values)


def read_csv(path, td_columns=(), require_event=True):
    """Read the ``id,start,stop,status,<covariates...>`` CSV format.

    Columns named in ``td_columns`` are time-dependent; every other
    covariate column is fixed.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInput(f"{path}: empty file") from None
        if tuple(header[:4]) != _REQUIRED:
            raise ParseError(f"header must start with {','.join(_REQUIRED)}", line=1)
        covs = header[4:]
        missing = [c for c in td_columns if c not in covs]
        if missing:
            raise ParseError(f"time-dependent columns not in header: {missing}", line=1)
        ids, body = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                vals = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if vals[2] not in (0.0, 1.0):
                raise ParseError("status must be 0 or 1", line=lineno)
            ids.append(row[0].strip())
            body.append(vals)
    if not body:
        raise EmptyInput(f"{path}: no data rows")
    body = np.array(body)
    fi = [k for k, c in enumerate(covs) if c not in td_columns]
    ti = [covs.index(c) for c in td_columns]
    return Dataset(_parse_id(ids), body[:, 0], body[:, 1], body[:, 2].astype(int),
                   body[:, 3 + np.array(fi, dtype=int)], body[:, 3 + np.array(ti, dtype=int)],
                   [covs[k] for k in fi], list(td_columns), require_event=require_event)


def write_csv(data, path):
    """Write ``data`` in the CSV format read by :func:`read_csv` (atomically)."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(_REQUIRED) + list(data.covariate_names))
        for k in range(data.n_rows):
            w.writerow([data.ids[k].item(), repr(float(data.start[k])),
                        repr(float(data.stop[k])), int(data.status[k])]
                       + [repr(float(v)) for v in data.fixed[k]]
                       + [repr(float(v)) for v in data.td[k]])
    os.replace(tmp, path)


class StepFunction:
    """Right-continuous step function.

    ``f(t)`` is ``values[j]`` for the last knot ``knots[j] <= t`` and
    ``value_before_first_knot`` before the first knot.
    """

    def __init__(self, knots, values, value_before_first_knot=0.0):
        knots = np.asarray(knots, dtype=float)
        values = np.asarray(values, dtype=float)
        if knots.shape != values.shape:
            raise ValueError("knots and values differ in length")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        self.knots = _readonly(knots)
        self.values = _readonly(values)
        self.value_before_first_knot = float(value_before_first_knot)

    def __call__(self, t):
        j = np.searchsorted(self.knots, t, side="right") - 1
        return self._pick(j)

    def left_limit(self, t):
        """Value just before ``t``."""
        j = np.searchsorted(self.knots, t, side="left") - 1
        return self._pick(j)

    def _pick(self, j):
        full = np.concatenate([[self.value_before_first_knot], self.values])
        out = full[np.asarray(j) + 1]
        return out.item() if np.ndim(out) == 0 else out

    def integral(self, upper, lower=0.0):
        """Integral of the function over ``[lower, upper]``."""
        if upper <= lower:
            return 0.0
        edges = np.concatenate([[lower], self.knots[(self.knots > lower) & (self.knots < upper)],
                                [upper]])
        heights = self(edges[:-1])
        return math.fsum(np.diff(edges) * heights)

    def __repr__(self):
        return f"StepFunction({len(self.knots)} knots)"


def kaplan_meier(data, use_censoring_as_event=False):
    """Product-limit survival estimate from subject-level ``(U, delta)``.

    With ``use_censoring_as_event`` the indicators are flipped to estimate
    the censoring survival function.  Events precede censorings at tied
    times, so a death at ``t`` is not at risk of censoring at ``t``.
    """
    u = np.asarray(data.time, dtype=float)
    d = np.asarray(data.delta)
    kind = 1 - d if use_censoring_as_event else d
    if not np.any(kind == 1):
        raise NoEvents("no events of the requested kind")
    knots = np.unique(u[kind == 1])
    order = np.sort(u)
    n_ge = len(u) - np.searchsorted(order, knots, side="left")
    n_events = np.bincount(np.searchsorted(knots, u[kind == 1]), minlength=len(knots))
    if use_censoring_as_event:
        deaths_at = np.bincount(np.searchsorted(knots, u[(d == 1) & np.isin(u, knots)]),
                                minlength=len(knots))
        at_risk = n_ge - deaths_at
    else:
        at_risk = n_ge
    # telescoped product: S_k = (n_k - d_k) / n_1 * prod_{j<k} (n_j - d_j) / n_{j+1};
    # without losses between knots every ratio is exactly 1, so the
    # estimate is the empirical survival fraction to the last bit
    left = at_risk - n_events
    ratios = np.concatenate([[1.0], left[:-1] / at_risk[1:]])
    surv = np.cumprod(ratios) * (left / at_risk[0])
    return StepFunction(knots, surv, 1.0)


@dataclass(frozen=True)
class RestrictedView:
    tau: float
    y: np.ndarray
    delta_tilde: np.ndarray
    subject_ids: np.ndarray

    @property
    def time(self):
        return self.y

    @property
    def delta(self):
        return self.delta_tilde


def restrict(data, tau):
    """Restricted times ``Y = min(U, tau)`` and completeness flags.

    ``data`` may be a :class:`Dataset` or a :class:`RestrictedView`; in the
    latter case the view's ``y`` and ``delta_tilde`` play the role of
    ``U`` and ``delta``, which makes restriction idempotent.  A horizon
    beyond the last observed time is accepted and leaves every ``U``
    unchanged.
    """
    tau = float(tau)
    if not (np.isfinite(tau) and tau > 0):
        raise TauOutOfRange(f"tau must be a positive finite time, got {tau}")
    u = np.asarray(data.time, dtype=float)
    d = np.asarray(data.delta)
    y = np.minimum(u, tau)
    dt = ((d == 1) | (u >= tau)).astype(int)
    ids = data.subject_ids
    return RestrictedView(tau, _readonly(y), _readonly(dt), ids)
