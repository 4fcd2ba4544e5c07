"""Stanford heart transplant data prepared for the time-dependent analysis.

The raw table (``data/jasa.csv``, the ``jasa`` data frame of R's survival
package) has one row per patient.  :func:`load_stanford` turns it into
counting-process form:

* time in years from acceptance (days / 365.25);
* a death on the day of acceptance is moved to 0.5 day;
* a transplant on the day of death is moved 0.5 day earlier;
* transplant status is split into ``[0, wait)`` untransplanted and
  ``[wait, futime]`` transplanted rows (a day-0 transplant gives a single
  transplanted row);
* age enters as dummies for 45-60 and >= 60 (reference < 45);
* enrollment time is the acceptance date minus 1967-10-01, in years.
"""

import csv
import datetime as _dt
from importlib import resources

import numpy as np

from .core import Dataset

DAYS_PER_YEAR = 365.25
STUDY_START = _dt.date(1967, 10, 1)
FIXED = ("age_45_60", "age_60plus", "enrollment", "surgery")
TD = ("transplant",)
# longest follow-up, rounded as reported for the horizon
TAU = 4.93


def _date(s):
    return _dt.date.fromisoformat(s) if s else None


def read_jasa(path=None):
    """Raw patient table as a list of dicts."""
    if path is None:
        fh = resources.files("trmst").joinpath("data/jasa.csv").open("r", encoding="utf-8")
    else:
        fh = open(path, encoding="utf-8")
    with fh:
        return list(csv.DictReader(fh))


def counting_process_rows(jasa, unit=DAYS_PER_YEAR):
    """``(id, start, stop, status, fixed..., transplant)`` tuples, times in ``unit`` days."""
    out = []
    for r in jasa:
        pid = int(r["id"])
        futime = max(float(r["futime"]), 0.5)
        status = int(r["fustat"])
        age = float(r["age"])
        enroll = (_date(r["accept.dt"]) - STUDY_START).days / DAYS_PER_YEAR
        fixed = (float(45 <= age < 60), float(age >= 60), enroll, float(r["surgery"]))
        if int(r["transplant"]) == 1:
            wait = float(r["wait.time"])
            if wait >= futime:
                wait = futime - 0.5
            if wait > 0:
                out.append((pid, 0.0, wait / unit, 0, fixed, (0.0,)))
            out.append((pid, wait / unit, futime / unit, status, fixed, (1.0,)))
        else:
            out.append((pid, 0.0, futime / unit, status, fixed, (0.0,)))
    return out


def load_stanford(path=None, unit=DAYS_PER_YEAR):
    """Stanford heart data as a :class:`~trmst.core.Dataset` (p = 4, q = 1)."""
    rows = counting_process_rows(read_jasa(path), unit)
    return Dataset(
        np.array([r[0] for r in rows]),
        np.array([r[1] for r in rows]),
        np.array([r[2] for r in rows]),
        np.array([r[3] for r in rows]),
        np.array([r[4] for r in rows]),
        np.array([r[5] for r in rows]),
        FIXED, TD,
    )
