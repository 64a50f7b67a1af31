"""Weighted least-squares fit of the additive subdistribution hazards model.

The coefficient estimate is closed form: the estimating function is
affine in beta, ``U(beta, t) = b(t) - n A-hat(t) beta``, where ``A-hat``
integrates the weighted covariate scatter around the risk-set mean and
``b`` cumulates centered covariates over cause-k events. The baseline
cumulative subdistribution hazard mixes jumps at event times with an
absolutely continuous drift.

Two weighting modes share all formulas: ``ipcw`` (right-censored data,
Kaplan-Meier censoring weights) and ``cc`` (censoring-complete data,
indicator weights ``I(C > t)``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._engine import MODE_CC, MODE_IPCW, PanelEngine
from .censoring import CensoringModel, fit_censoring_km
from .dataset import ClusteredDataset, TimeGrid, build_grid
from .errors import InputError

DEFAULT_Q_TIME_VARYING = 16
FEW_EVENTS_WARN = 5


@dataclass(frozen=True)
class RiskAggregates:
    """Weighted risk-set sums at the grid knots: S0, S1, and X-hat = S1/S0."""

    knots: np.ndarray
    S0: np.ndarray
    S1: np.ndarray
    Xhat: np.ndarray


@dataclass(frozen=True)
class BaselineHazard:
    """Jump part (event times) plus absolutely continuous drift part."""

    jump_times: np.ndarray
    jump_sizes: np.ndarray
    _engine: PanelEngine = field(repr=False)

    def at(self, t) -> np.ndarray | float:
        return self._engine.baseline_at(t)

    def curve(self) -> np.ndarray:
        """Two-column (t, Lambda0-hat(t)) table at the grid knots."""
        kn = self._engine.knots
        return np.column_stack([kn, self._engine.baseline_at(kn)])


@dataclass(frozen=True)
class FitResult:
    """Fitted coefficients, design matrix paths, and baseline hazard."""

    beta: np.ndarray
    A_tau: np.ndarray
    A_path: np.ndarray
    baseline: BaselineHazard
    risk: RiskAggregates
    cause: int
    mode: str
    grid: TimeGrid
    n_clusters: int
    n_subjects: int
    covariate_names: tuple[str, ...]
    censoring: CensoringModel | None
    _engine: PanelEngine = field(repr=False)

    @property
    def tau(self) -> float:
        return self.grid.tau

    def score_at(self, beta, t) -> np.ndarray:
        """U(beta, t) for this fit's weights and grid (raw sum scale)."""
        return self._engine.score_at(beta, t)

    def baseline_at(self, t) -> np.ndarray | float:
        return self._engine.baseline_at(t)

    def residual_path(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Martingale residual path of subject ``i`` at the grid knots."""
        return self.grid.knots, self._engine.residual_path_unweighted(i)

    def residual_increments(self, i: int) -> np.ndarray:
        """Increments of the residual path over the knot intervals."""
        path = self._engine.residual_path_unweighted(i)
        return np.diff(np.concatenate([[0.0], path]))


def default_refinement(ds: ClusteredDataset) -> int:
    return 1 if ds.all_constant_bases else DEFAULT_Q_TIME_VARYING


def fit(
    ds: ClusteredDataset,
    cause: int = 1,
    mode: str = MODE_IPCW,
    grid: TimeGrid | None = None,
    Q: int | None = None,
    censoring: CensoringModel | None = None,
) -> FitResult:
    """Fit the marginal additive subdistribution hazards model for one cause.

    Parameters
    ----------
    ds : validated dataset.
    cause : failure cause of interest, 1..K.
    mode : ``"ipcw"`` (right-censored) or ``"cc"`` (censoring complete,
        requires the ctime column).
    grid : evaluation grid; built from the data when omitted.
    Q : quadrature refinement per knot interval when the grid is built
        here; defaults to 16 with time-varying covariates, 1 otherwise.
    censoring : reuse an already fitted censoring model (IPCW mode).
    """
    if not 1 <= int(cause) <= ds.n_causes:
        raise InputError(f"cause must be in 1..{ds.n_causes}, got {cause}")
    if grid is None:
        grid = build_grid(ds, Q if Q is not None else default_refinement(ds))
    if mode == MODE_IPCW and censoring is None:
        censoring = fit_censoring_km(ds)

    n_events = int(np.sum((ds.status == int(cause)) & (ds.time <= grid.tau)))
    if n_events < FEW_EVENTS_WARN:
        warnings.warn(
            f"only {n_events} cause-{cause} events before tau; "
            "estimates may be unstable",
            RuntimeWarning,
            stacklevel=2,
        )

    engine = PanelEngine(ds, int(cause), mode, grid, censoring=censoring)
    beta = engine.solve_beta()

    S0, S1, Xh = engine.knot_aggregates()
    risk = RiskAggregates(knots=grid.knots, S0=S0, S1=S1, Xhat=Xh)
    baseline = BaselineHazard(
        jump_times=engine.pts[engine.event_pt],
        jump_sizes=engine.event_dj,
        _engine=engine,
    )
    return FitResult(
        beta=beta,
        A_tau=engine.Araw_tau / ds.n_clusters,
        A_path=engine.A_at_knots(),
        baseline=baseline,
        risk=risk,
        cause=int(cause),
        mode=mode,
        grid=grid,
        n_clusters=ds.n_clusters,
        n_subjects=ds.n_subjects,
        covariate_names=ds.covariate_names,
        censoring=censoring,
        _engine=engine,
    )


def score(
    ds: ClusteredDataset,
    cause: int,
    beta: Sequence[float],
    t,
    mode: str = MODE_IPCW,
    grid: TimeGrid | None = None,
    Q: int | None = None,
    censoring: CensoringModel | None = None,
) -> np.ndarray:
    """Estimating-function process U(beta, t) without solving the fit."""
    if grid is None:
        grid = build_grid(ds, Q if Q is not None else default_refinement(ds))
    if mode == MODE_IPCW and censoring is None:
        censoring = fit_censoring_km(ds)
    engine = PanelEngine(ds, int(cause), mode, grid, censoring=censoring)
    beta = np.asarray(beta, dtype=float)
    engine.set_beta(beta)
    return engine.score_at(beta, t)


def baseline_at(fit_result: FitResult, t) -> np.ndarray | float:
    """Cumulative baseline subdistribution hazard of a fit at time t."""
    return fit_result.baseline_at(t)


def residual_path(fit_result: FitResult, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Martingale residual step path of subject ``i``: (knots, values)."""
    return fit_result.residual_path(i)
