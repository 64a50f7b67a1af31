"""Model checking via weighted cumulative residual processes.

The additivity checks track the weighted score-type process over time;
the functional-form check cumulates weighted residuals over covariate
thresholds at the end of follow-up. Null distributions come from
Gaussian-multiplier perturbation: per-cluster influence terms are
reweighted by independent standard normals, which reproduces the
limiting law of the observed process given the data.

Suprema are taken over the grid knots; with the panel refinement the
within-interval deviation of the drift part is absorbed into the same
order of approximation as the quadrature itself.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ._engine import PanelEngine
from .censoring import CensoringModel
from .dataset import ClusteredDataset, basis_values
from .errors import DegenerateCovariate, InputError
from .fitter import FitResult

OVERALL = "overall"
DEFAULT_DRAWS = 1000
MAX_THRESHOLDS = 512
_XI_TAG_ADDITIVITY = 1
_XI_TAG_FUNCTIONAL = 2


@dataclass(frozen=True)
class TestProcess:
    """One observed process with its perturbation draws.

    ``axis`` is time (score kind) or covariate thresholds (functional
    form); the leading axis entry is the zero starting point of the
    process. ``sigma_ll`` is the normalizing diagonal of the inverse
    score covariance (score kind only).
    """

    kind: str
    axis: np.ndarray
    observed: np.ndarray
    perturbed: np.ndarray
    sigma_ll: float | None = None


@dataclass(frozen=True)
class GofEntry:
    name: str
    kind: str
    statistic: float
    p_value: float
    process: TestProcess | None = None


@dataclass(frozen=True)
class GofReport:
    """Test statistics and Monte Carlo p-values for one fitted model."""

    entries: tuple[GofEntry, ...]
    B: int
    seed: int
    cause: int

    def entry(self, name: str) -> GofEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "test": [e.kind for e in self.entries],
                "target": [e.name for e in self.entries],
                "statistic": [e.statistic for e in self.entries],
                "p_value": [e.p_value for e in self.entries],
            }
        )


def _xi_draws(n: int, B: int, seed: int, tag: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, tag))))
    return rng.standard_normal((B, n))


def perturb(Q: np.ndarray, B: int, seed: int) -> np.ndarray:
    """Multiplier draws ``W-hat = sum_i Q_i xi_i`` with xi ~ N(0, 1).

    ``Q`` has the cluster axis first; returns ``B`` stacked draws.
    """
    if B < 1:
        raise InputError("need at least one perturbation draw")
    Q = np.asarray(Q, dtype=float)
    xi = _xi_draws(Q.shape[0], B, seed, 0)
    flat = Q.reshape(Q.shape[0], -1)
    return (xi @ flat).reshape((B,) + Q.shape[1:])


def _p_value(draws: np.ndarray, observed: float, add_one: bool) -> float:
    exceed = int(np.sum(draws > observed))
    if add_one:
        return (1.0 + exceed) / (draws.size + 1.0)
    return exceed / draws.size


def _engine_of(fit_result: FitResult, ds: ClusteredDataset) -> PanelEngine:
    engine = fit_result._engine
    if engine.ds is not ds:
        raise InputError("fit result does not belong to this dataset")
    return engine


# ---------------------------------------------------------------------------
# additivity (score-type) tests
# ---------------------------------------------------------------------------


def _additivity_machinery(engine: PanelEngine, B: int, seed: int):
    n, p = engine.n, engine.p
    phi = engine.phi_cluster_paths()  # (n, T, p)
    eta = phi[:, -1, :]
    Sigma = eta.T @ eta / n
    eigs = np.linalg.eigvalsh(0.5 * (Sigma + Sigma.T))
    if eigs[-1] <= 0 or eigs[0] / eigs[-1] < 1e-12:
        warnings.warn(
            "score covariance nearly singular; normalized statistics may be "
            "unstable",
            RuntimeWarning,
            stacklevel=3,
        )
    weights = np.sqrt(np.diag(np.linalg.inv(Sigma)))

    A_kn = engine.A_at_knots()
    corr = A_kn @ np.linalg.inv(A_kn[-1])  # A(t) A(tau)^-1, (T, p, p)
    Q = phi - np.einsum("tab,ib->ita", corr, eta)

    U = engine.U_at_knots() / np.sqrt(n)  # (T, p)
    xi = _xi_draws(n, B, seed, _XI_TAG_ADDITIVITY)
    PU = (xi @ Q.reshape(n, -1)).reshape(B, engine.T, p) / np.sqrt(n)
    return U, PU, weights, Sigma


def additivity_test(
    ds: ClusteredDataset,
    fit_result: FitResult,
    censoring: CensoringModel | None = None,
    covariate: int | str = OVERALL,
    B: int = DEFAULT_DRAWS,
    seed: int = 0,
    add_one: bool = False,
    keep_process: bool = True,
) -> GofEntry:
    """Supremum test of the additive structure for one covariate or overall.

    ``covariate`` is a 0-based index, a covariate name, or ``"overall"``
    for the joint statistic (sum of normalized per-covariate deviations).
    The p-value is the proportion of perturbed suprema strictly exceeding
    the observed statistic; ``add_one`` switches to (1 + exceed)/(B + 1).
    """
    if B < 100:
        raise InputError("additivity test needs B >= 100 draws")
    engine = _engine_of(fit_result, ds)
    U, PU, weights, Sigma = _additivity_machinery(engine, B, seed)
    return _additivity_entry(
        fit_result, U, PU, weights, Sigma, covariate, add_one, keep_process
    )


def _resolve_covariate(fit_result: FitResult, covariate) -> int:
    if isinstance(covariate, str):
        if covariate in fit_result.covariate_names:
            return fit_result.covariate_names.index(covariate)
        raise InputError(f"unknown covariate {covariate!r}")
    l = int(covariate)
    if not 0 <= l < len(fit_result.covariate_names):
        raise InputError(f"covariate index {l} out of range")
    return l


def _additivity_entry(
    fit_result, U, PU, weights, Sigma, covariate, add_one, keep_process
) -> GofEntry:
    knots = fit_result.grid.knots
    axis = np.concatenate([[0.0], knots])
    if covariate == OVERALL:
        obs_path = np.sum(weights[None, :] * np.abs(U), axis=1)
        draw_paths = np.sum(weights[None, None, :] * np.abs(PU), axis=2)
        name = OVERALL
    else:
        l = _resolve_covariate(fit_result, covariate)
        obs_path = weights[l] * np.abs(U[:, l])
        draw_paths = weights[l] * np.abs(PU[:, :, l])
        name = fit_result.covariate_names[l]
    stat = float(obs_path.max())
    draw_stats = draw_paths.max(axis=1)
    p = _p_value(draw_stats, stat, add_one)
    process = None
    if keep_process:
        # signed normalized processes for plotting; overall uses the sum
        # of absolute normalized components
        if covariate == OVERALL:
            obs = np.concatenate([[0.0], obs_path])
            drw = np.concatenate([np.zeros((PU.shape[0], 1)), draw_paths], axis=1)
            sig = None
        else:
            l = _resolve_covariate(fit_result, covariate)
            obs = np.concatenate([[0.0], weights[l] * U[:, l]])
            drw = np.concatenate(
                [np.zeros((PU.shape[0], 1)), weights[l] * PU[:, :, l]], axis=1
            )
            sig = float(np.linalg.inv(Sigma)[l, l])
        process = TestProcess(
            kind="score_additivity",
            axis=axis,
            observed=obs,
            perturbed=drw,
            sigma_ll=sig,
        )
    return GofEntry(
        name=name, kind="score_additivity", statistic=stat, p_value=p, process=process
    )


def additivity_report(
    ds: ClusteredDataset,
    fit_result: FitResult,
    B: int = DEFAULT_DRAWS,
    seed: int = 0,
    add_one: bool = False,
    keep_processes: bool = False,
) -> list[GofEntry]:
    """Per-covariate additivity entries plus the overall entry.

    All entries share one set of multiplier draws, so a joint report
    costs one perturbation pass.
    """
    engine = _engine_of(fit_result, ds)
    U, PU, weights, Sigma = _additivity_machinery(engine, B, seed)
    entries = [
        _additivity_entry(fit_result, U, PU, weights, Sigma, l, add_one, keep_processes)
        for l in range(len(fit_result.covariate_names))
    ]
    entries.append(
        _additivity_entry(
            fit_result, U, PU, weights, Sigma, OVERALL, add_one, keep_processes
        )
    )
    return entries


# ---------------------------------------------------------------------------
# functional-form test
# ---------------------------------------------------------------------------


def _thresholds_for(values: np.ndarray, cap: int) -> np.ndarray:
    uniq = np.unique(values)
    if uniq.size <= cap:
        return uniq
    qs = np.linspace(0.0, 1.0, cap)
    return np.unique(np.quantile(values, qs, method="inverted_cdf"))


def functional_form_test(
    ds: ClusteredDataset,
    fit_result: FitResult,
    censoring: CensoringModel | None = None,
    covariate: int | str = 0,
    B: int = DEFAULT_DRAWS,
    seed: int = 0,
    add_one: bool = False,
    max_thresholds: int = MAX_THRESHOLDS,
    keep_process: bool = True,
    chunk: int = 512,
) -> GofEntry:
    """Supremum test of the functional form of one covariate.

    Cumulates weighted residuals over thresholds of the observed
    covariate values at the end of follow-up and compares the supremum
    against multiplier perturbation draws.
    """
    if B < 100:
        raise InputError("functional-form test needs B >= 100 draws")
    l = _resolve_covariate(fit_result, covariate)
    base_vals = ds.X[:, l]
    if np.unique(base_vals).size < 2:
        raise DegenerateCovariate(
            f"covariate {fit_result.covariate_names[l]!r} has fewer than 2 "
            "distinct values"
        )
    engine = _engine_of(fit_result, ds)
    thr = _thresholds_for(base_vals, max_thresholds)
    knots = engine.knots
    T, n, p = engine.T, engine.n, engine.p
    basis_l = basis_values(ds.bases, knots)[:, l]
    B_kn = basis_values(ds.bases, knots)
    xh_kn = engine.knot_aggregates()[2]
    dts = np.diff(np.concatenate([[0.0], knots]))

    s0raw = engine.point_levels(knots)[0]
    eta = engine.cluster_sum(engine.eta_per_subject())
    y = np.linalg.solve(engine.Araw_tau, eta.T).T  # (n, p): Araw^-1 eta_i
    ci = ds.cluster_index

    obs_W = np.zeros(thr.size)
    first = np.zeros((n, thr.size))
    hvec = np.zeros((thr.size, p))
    s0x = np.zeros((thr.size, T))
    mu_cluster = np.zeros((n, T))

    for start in range(0, ds.n_subjects, chunk):
        idx = np.arange(start, min(start + chunk, ds.n_subjects))
        mu = engine.residual_measure_rows(idx)  # (c, T)
        w = engine.weight_rows(idx, knots)  # (c, T)
        np.add.at(mu_cluster, ci[idx], mu)
        xpath_l = base_vals[idx][:, None] * basis_l[None, :]  # (c, T)
        wx = (
            w[:, :, None]
            * (ds.X[idx][:, None, :] * B_kn[None, :, :] - xh_kn[None, :, :])
            * dts[None, :, None]
        )
        for j, x in enumerate(thr):
            ind = xpath_l <= x
            contrib = np.where(ind, mu, 0.0)
            obs_W[j] += contrib.sum()
            np.add.at(first[:, j], ci[idx], contrib.sum(axis=1))
            s0x[j] += np.where(ind, w, 0.0).sum(axis=0)
            hvec[j] += np.where(ind[:, :, None], wx, 0.0).sum(axis=(0, 1))

    ghat = s0x / np.where(s0raw > 0, s0raw, 1.0)[None, :]
    ghat[:, s0raw <= 0] = 0.0
    first -= mu_cluster @ ghat.T

    Q = first - y @ hvec.T  # (n, n_thr)
    stat = float(np.max(np.abs(obs_W)))
    xi = _xi_draws(n, B, seed, _XI_TAG_FUNCTIONAL)
    draws = xi @ Q
    draw_stats = np.max(np.abs(draws), axis=1)
    p_val = _p_value(draw_stats, stat, add_one)

    process = None
    if keep_process:
        lead = thr[0] - (thr[-1] - thr[0]) / max(thr.size, 2) if thr.size > 1 else thr[0] - 1.0
        axis = np.concatenate([[lead], thr])
        process = TestProcess(
            kind="functional_form",
            axis=axis,
            observed=np.concatenate([[0.0], obs_W]),
            perturbed=np.concatenate([np.zeros((B, 1)), draws], axis=1),
        )
    name = fit_result.covariate_names[l]
    return GofEntry(
        name=name, kind="functional_form", statistic=stat, p_value=p_val, process=process
    )


# ---------------------------------------------------------------------------
# general cluster influence terms
# ---------------------------------------------------------------------------


def cluster_influence(
    ds: ClusteredDataset,
    fit_result: FitResult,
    censoring: CensoringModel | None = None,
    t: float | None = None,
    x: np.ndarray | float = np.inf,
    f_choice: str = "identity",
) -> np.ndarray:
    """Per-cluster influence terms Q_i(t, x) of the residual process class.

    ``f_choice`` selects f(X) = X ("identity", p columns) or f = 1
    ("one", a single column). ``x`` is broadcast to a joint threshold
    vector; the indicator compares every covariate coordinate. ``t``
    defaults to tau and is evaluated at knot resolution.
    """
    engine = _engine_of(fit_result, ds)
    if f_choice not in ("identity", "one"):
        raise InputError("f_choice must be 'identity' or 'one'")
    t = engine.tau if t is None else float(t)
    xvec = np.broadcast_to(np.asarray(x, dtype=float), (engine.p,))

    knots = engine.knots
    keep = knots <= t + 1e-12
    Tt = int(np.sum(keep))
    n, p = engine.n, engine.p
    d = p if f_choice == "identity" else 1

    B_kn = basis_values(ds.bases, knots)
    X = ds.X
    xh_kn = engine.knot_aggregates()[2]
    s0raw = engine.point_levels(knots)[0]
    dts = np.diff(np.concatenate([[0.0], knots]))

    mu = engine.residual_measure_rows(np.arange(ds.n_subjects))
    w = engine.weight_rows(np.arange(ds.n_subjects), knots)
    paths = X[:, None, :] * B_kn[None, :, :]  # (N, T, p)
    ind = np.all(paths <= xvec[None, None, :], axis=2)  # (N, T)
    fv = paths if f_choice == "identity" else np.ones((ds.n_subjects, knots.size, 1))

    wf = w[:, :, None] * fv * ind[:, :, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        ghat = wf.sum(axis=0) / np.where(s0raw > 0, s0raw, 1.0)[:, None]
    ghat[s0raw <= 0] = 0.0

    integrand = (fv * ind[:, :, None] - ghat[None, :, :]) * mu[:, :, None]
    first = engine.cluster_sum(integrand[:, keep, :].sum(axis=1))

    cdiff = paths - xh_kn[None, :, :]
    hmat = np.einsum("ntd,ntp,t->dp", wf[:, keep, :], cdiff[:, keep, :], dts[keep])
    eta = engine.cluster_sum(engine.eta_per_subject())
    y = np.linalg.solve(engine.Araw_tau, eta.T).T
    return first - y @ hmat.T


def export_test_process(tp: TestProcess, n_draws_to_plot: int = 20) -> pd.DataFrame:
    """Plot-ready table: axis, observed process, and the first m draws."""
    if n_draws_to_plot < 0:
        raise InputError("n_draws_to_plot must be >= 0")
    m = min(n_draws_to_plot, tp.perturbed.shape[0])
    data = {"axis": tp.axis, "observed": tp.observed}
    for b in range(m):
        data[f"draw_{b + 1}"] = tp.perturbed[b]
    return pd.DataFrame(data)


def build_gof_report(
    ds: ClusteredDataset,
    fit_result: FitResult,
    tests: str = "additivity",
    covariate: int | str | None = None,
    B: int = DEFAULT_DRAWS,
    seed: int = 0,
    add_one: bool = False,
    keep_processes: bool = False,
    max_thresholds: int = MAX_THRESHOLDS,
) -> GofReport:
    """Assemble a report over the requested tests.

    ``tests`` is ``"additivity"``, ``"functional-form"``, or ``"all"``;
    ``covariate`` limits to one covariate (default: every covariate, and
    for additivity also the overall statistic).
    """
    if tests not in ("additivity", "functional-form", "all"):
        raise InputError(f"unknown test selection {tests!r}")
    entries: list[GofEntry] = []
    if tests in ("additivity", "all"):
        if covariate is None:
            entries.extend(
                additivity_report(
                    ds, fit_result, B=B, seed=seed, add_one=add_one,
                    keep_processes=keep_processes,
                )
            )
        else:
            entries.append(
                additivity_test(
                    ds, fit_result, covariate=covariate, B=B, seed=seed,
                    add_one=add_one, keep_process=keep_processes,
                )
            )
    if tests in ("functional-form", "all"):
        targets = (
            range(len(fit_result.covariate_names)) if covariate is None else [covariate]
        )
        for cv in targets:
            entries.append(
                functional_form_test(
                    ds, fit_result, covariate=cv, B=B, seed=seed, add_one=add_one,
                    max_thresholds=max_thresholds, keep_process=keep_processes,
                )
            )
    return GofReport(entries=tuple(entries), B=B, seed=seed, cause=fit_result.cause)
