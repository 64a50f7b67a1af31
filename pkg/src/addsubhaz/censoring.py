"""Censoring-distribution estimation and IPCW weights.

The censoring survival function G is estimated by the Kaplan-Meier
product-limit applied to ``(Z, 1 - Delta)``: censorings are the events and
failures (of any cause) leave the risk set. Weights are built from the
right-continuous step estimate, ``w(t) = r(t) * G(t) / G(min(Z, t))``.

With tied failure and censoring times, failures are ordered first: every
subject with ``Z >= u`` is in the censoring risk set at ``u``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import ClusteredDataset, SubjectRecord, TimeGrid
from .errors import (
    CensoringTimeUnavailable,
    DivisionByZeroGhat,
    GhatZeroBeforeTau,
    InputError,
)

DEFAULT_G_FLOOR = 1e-10


@dataclass(frozen=True)
class CensoringModel:
    """Kaplan-Meier censoring survival and its hazard machinery.

    Attributes
    ----------
    km_times : distinct censoring-event times in (0, tau].
    km_values : right-continuous G-hat immediately after each km_time.
    cum_hazard : Nelson-Aalen cumulative censoring hazard at each km_time.
    risk_totals : pi-hat(u) = (number at risk at u) / n_clusters.
    """

    km_times: np.ndarray
    km_values: np.ndarray
    cum_hazard: np.ndarray
    risk_totals: np.ndarray
    tau: float
    n_clusters: int
    sorted_observed: np.ndarray
    g_floor: float = DEFAULT_G_FLOOR

    def survival(self, t) -> np.ndarray | float:
        """G-hat(t), right-continuous, vectorized over ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.km_times, t, side="right")
        vals = np.concatenate([[1.0], self.km_values])
        out = vals[idx]
        return out if out.ndim else float(out)

    def cum_hazard_at(self, t) -> np.ndarray | float:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.km_times, t, side="right")
        vals = np.concatenate([[0.0], self.cum_hazard])
        out = vals[idx]
        return out if out.ndim else float(out)

    def pi_at(self, t) -> np.ndarray | float:
        """pi-hat(t): at-risk fraction (per cluster) of the censoring KM."""
        t = np.asarray(t, dtype=float)
        n_at_risk = self.sorted_observed.size - np.searchsorted(
            self.sorted_observed, t, side="left"
        )
        out = n_at_risk / self.n_clusters
        return out if out.ndim else float(out)

    def km_table(self) -> np.ndarray:
        """Two-column (time, G-hat) export of the censoring KM curve."""
        return np.column_stack([self.km_times, self.km_values])


def fit_censoring_km(ds: ClusteredDataset, g_floor: float = DEFAULT_G_FLOOR) -> CensoringModel:
    """Product-limit estimate of the censoring survival on (0, tau].

    Raises
    ------
    GhatZeroBeforeTau
        If G-hat(tau) falls to (or below) the division floor, the IPCW
        weights are undefined on the full analysis window.
    """
    times = ds.time
    is_cens = ds.status == 0
    cens_times = times[is_cens & (times <= ds.tau)]
    sorted_obs = np.sort(times)

    if cens_times.size == 0:
        km_times = np.empty(0)
        km_values = np.empty(0)
        cum_haz = np.empty(0)
        risk = np.empty(0)
    else:
        km_times, counts = np.unique(cens_times, return_counts=True)
        at_risk = sorted_obs.size - np.searchsorted(sorted_obs, km_times, side="left")
        frac = counts / at_risk
        km_values = np.cumprod(1.0 - frac)
        cum_haz = np.cumsum(frac)
        risk = at_risk / ds.n_clusters

    model = CensoringModel(
        km_times=km_times,
        km_values=km_values,
        cum_hazard=cum_haz,
        risk_totals=risk,
        tau=ds.tau,
        n_clusters=ds.n_clusters,
        sorted_observed=sorted_obs,
        g_floor=g_floor,
    )
    if model.survival(ds.tau) <= g_floor:
        raise GhatZeroBeforeTau(
            "estimated censoring survival reaches 0 on (0, tau]; "
            "IPCW weights are undefined"
        )
    return model


def ipcw_weight(model: CensoringModel, record: SubjectRecord, t: float) -> float:
    """Time-dependent weight ``r(t) * G(t) / G(min(Z, t))`` for one subject.

    ``r(t)`` is 1 for uncensored subjects at all times and for censored
    subjects up to their censoring time, 0 afterwards.
    """
    t = float(t)
    if t < 0 or t > model.tau + 1e-12:
        raise InputError(f"weight requested at t={t} outside [0, tau]")
    if record.cause.censored and t > record.time:
        return 0.0
    g_t = model.survival(t)
    g_z = model.survival(min(record.time, t))
    if g_z <= model.g_floor:
        raise DivisionByZeroGhat(f"G-hat(min(Z, t)) vanished at t={t}")
    return float(g_t / g_z)


def cc_weight(record: SubjectRecord, t: float) -> int:
    """Censoring-complete weight ``I(C > t)`` (strict inequality)."""
    if record.ctime is None:
        raise CensoringTimeUnavailable(
            "record has no censoring time; censoring-complete weights need "
            "the ctime column"
        )
    return int(record.ctime > float(t))


class WeightMatrix:
    """Sparse per-subject IPCW weights on a grid.

    The weight path of subject ``i`` is 1 up to its observed time, then 0
    (censored) or ``G(t)/G(Z_i)`` (failed from any cause), so only the
    observed time, censored flag, and ``G(Z_i)`` are stored.
    """

    def __init__(self, model: CensoringModel, ds: ClusteredDataset, grid: TimeGrid):
        self.grid = grid
        self.model = model
        self._time = ds.time
        self._censored = ds.status == 0
        g_z = np.asarray(model.survival(np.minimum(ds.time, grid.tau)))
        if np.any(g_z <= model.g_floor):
            raise DivisionByZeroGhat("G-hat(Z) vanished for some subject")
        self._g_z = g_z

    def weight(self, i: int, t) -> np.ndarray | float:
        t = np.asarray(t, dtype=float)
        g_t = np.asarray(self.model.survival(t))
        after = t > self._time[i]
        if self._censored[i]:
            out = np.where(after, 0.0, 1.0)
        else:
            out = np.where(after, g_t / self._g_z[i], 1.0)
        return out if out.ndim else float(out)

    def row(self, i: int) -> np.ndarray:
        return np.asarray(self.weight(i, self.grid.knots))

    def to_dense(self) -> np.ndarray:
        return np.vstack([self.row(i) for i in range(self._time.size)])
