"""Data model for clustered competing-risks samples.

A dataset is a flat table of subjects: cluster label, observed time
``Z = min(T, C)``, a status code (0 = censored, 1..K = cause of failure),
and a fixed covariate vector per subject. Covariates may be declared
time-varying through a small catalog of separable time bases, so a
subject's covariate path is ``X(t) = base * b(t)`` coordinatewise.

All estimation routines consume the array-backed :class:`ClusteredDataset`;
:class:`SubjectRecord` objects are lightweight per-subject views for the
record-level operations.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .errors import (
    EmptyCluster,
    InputError,
    MissingColumn,
    NonPositiveTime,
    TauBeyondFollowUp,
    UnknownCauseCode,
)

CONSTANT = "constant"
EXP_DECAY = "exp_decay"
_BASIS_CATALOG = (CONSTANT, EXP_DECAY)

RESERVED_COLUMNS = ("cluster", "time", "status", "ctime")
TRUTH_COLUMNS = ("true_time", "true_cause", "frailty")


def basis_values(bases: Sequence[str], t) -> np.ndarray:
    """Evaluate the per-coordinate time bases at ``t``.

    Returns an array of shape ``t.shape + (p,)`` with ``b_l(t)`` in the last
    axis: 1 for the constant basis, ``exp(-t)`` for the decaying basis.
    """
    t = np.asarray(t, dtype=float)
    out = np.empty(t.shape + (len(bases),))
    for l, b in enumerate(bases):
        out[..., l] = 1.0 if b == CONSTANT else np.exp(-t)
    return out


def basis_integral(bases: Sequence[str], t) -> np.ndarray:
    """Exact ``integral_0^t b_l(u) du`` for each coordinate basis."""
    t = np.asarray(t, dtype=float)
    out = np.empty(t.shape + (len(bases),))
    for l, b in enumerate(bases):
        out[..., l] = t if b == CONSTANT else -np.expm1(-t)
    return out


def _check_basis(name: str) -> str:
    if name not in _BASIS_CATALOG:
        raise InputError(
            f"unknown time basis {name!r}; catalog is {_BASIS_CATALOG}"
        )
    return name


class CauseCode(int):
    """Status code: 0 means censored, 1..K are failure causes."""

    def __new__(cls, value: int, n_causes: int | None = None):
        v = int(value)
        if v < 0:
            raise UnknownCauseCode(f"cause code must be >= 0, got {v}")
        if n_causes is not None and v > n_causes:
            raise UnknownCauseCode(
                f"cause code {v} exceeds declared number of causes {n_causes}"
            )
        return super().__new__(cls, v)

    @property
    def censored(self) -> bool:
        return int(self) == 0


@dataclass(frozen=True)
class CovariatePath:
    """Separable covariate path ``X(t) = base * b(t)`` coordinatewise."""

    base: np.ndarray
    bases: tuple[str, ...]

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        if base.ndim != 1 or base.size < 1:
            raise InputError("covariate base must be a length-p vector, p >= 1")
        if not np.all(np.isfinite(base)):
            raise InputError("covariate values must be finite")
        if len(self.bases) != base.size:
            raise InputError("one time basis per covariate coordinate required")
        for b in self.bases:
            _check_basis(b)
        object.__setattr__(self, "base", base)

    @property
    def p(self) -> int:
        return self.base.size

    def at(self, t: float) -> np.ndarray:
        """Covariate vector X(t)."""
        return self.base * basis_values(self.bases, float(t))

    def integral(self, t: float) -> np.ndarray:
        """Exact coordinatewise ``integral_0^t X_l(u) du``."""
        return self.base * basis_integral(self.bases, float(t))


@dataclass(frozen=True)
class SubjectRecord:
    """One participant: cluster label, observed time, status, covariates."""

    cluster_id: object
    time: float
    cause: CauseCode
    covariates: CovariatePath
    ctime: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.time) or self.time <= 0:
            raise NonPositiveTime(f"observed time must be positive, got {self.time}")
        if self.ctime is not None and (not np.isfinite(self.ctime) or self.ctime <= 0):
            raise NonPositiveTime(f"censoring time must be positive, got {self.ctime}")


class CountingState(NamedTuple):
    N: int
    Y: int


def counting_process(record: SubjectRecord, k: int, t: float) -> CountingState:
    """Subdistribution counting and risk process of cause ``k`` at time ``t``.

    ``N(t)`` jumps to 1 when the subject fails from cause ``k``;
    ``Y(t) = 1 - N(t-)``, so subjects who failed from other causes (and
    censored subjects) never leave the subdistribution risk set.
    """
    failed = int(record.cause) == int(k)
    n_now = 1 if failed and record.time <= t else 0
    n_left = 1 if failed and record.time < t else 0
    return CountingState(N=n_now, Y=1 - n_left)


@dataclass(frozen=True)
class TimeGrid:
    """Event-time knots on (0, tau] plus the quadrature refinement factor."""

    knots: np.ndarray
    refinement: int

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        if knots.ndim != 1 or knots.size == 0:
            raise InputError("grid needs at least one knot")
        if np.any(np.diff(knots) <= 0):
            raise InputError("grid knots must be strictly increasing")
        if knots[0] <= 0:
            raise InputError("grid knots must be positive")
        if self.refinement < 1:
            raise InputError("refinement Q must be >= 1")
        object.__setattr__(self, "knots", knots)

    @property
    def tau(self) -> float:
        return float(self.knots[-1])

    def refined_points(self, extra_cuts: np.ndarray | None = None) -> np.ndarray:
        """Panel boundaries: 0, the knots, Q-fold subdivisions, extra cuts.

        Extra cuts (e.g. observed censoring times in censoring-complete
        mode) are inserted so that piecewise-constant integrands jump only
        at panel boundaries, keeping the panel quadrature exact.
        """
        bounds = np.concatenate([[0.0], self.knots])
        if extra_cuts is not None and extra_cuts.size:
            cuts = np.unique(extra_cuts[(extra_cuts > 0) & (extra_cuts < self.tau)])
            bounds = np.unique(np.concatenate([bounds, cuts]))
        if self.refinement == 1:
            return bounds
        pieces = [np.array([0.0])]
        for a, b in zip(bounds[:-1], bounds[1:]):
            pieces.append(np.linspace(a, b, self.refinement + 1)[1:])
        return np.concatenate(pieces)


class ClusteredDataset:
    """Validated, immutable collection of subjects grouped by cluster.

    Parameters
    ----------
    cluster : sequence of hashable labels, one per subject.
    time : positive observed times ``Z``.
    status : ints in ``{0..K}``; 0 is censored.
    X : (N, p) covariate base values.
    covariate_names : optional names, defaults to x1..xp.
    bases : per-coordinate time basis from the catalog; default constant.
    tau : analysis horizon; defaults to the largest observed failure time.
    n_causes : declared K; defaults to ``max(status)``.
    ctime : censoring times when the data are censoring complete.
    """

    def __init__(
        self,
        cluster: Sequence,
        time: Sequence[float],
        status: Sequence[int],
        X: np.ndarray,
        covariate_names: Sequence[str] | None = None,
        bases: Sequence[str] | None = None,
        tau: float | None = None,
        n_causes: int | None = None,
        ctime: Sequence[float] | None = None,
    ):
        time = np.asarray(time, dtype=float)
        status = np.asarray(status)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] != time.size and X.shape[1] == time.size:
            X = X.T
        n_sub = time.size
        if n_sub == 0:
            raise InputError("dataset has no subjects")
        if X.shape[0] != n_sub:
            raise InputError("covariate matrix row count does not match subjects")
        if not np.all(np.isfinite(time)):
            raise NonPositiveTime("non-finite observed time")
        if np.any(time <= 0):
            raise NonPositiveTime("observed times must be positive")
        if not np.all(np.isfinite(X)):
            raise InputError("non-finite covariate value")

        if np.asarray(status).dtype.kind == "f":
            if np.any(~np.isfinite(np.asarray(status, dtype=float))):
                raise UnknownCauseCode("non-finite status value")
            if np.any(np.asarray(status, dtype=float) % 1 != 0):
                raise UnknownCauseCode("status codes must be integers")
        status = np.asarray(status, dtype=int)
        if np.any(status < 0):
            raise UnknownCauseCode("status codes must be >= 0")
        k_seen = int(status.max()) if n_sub else 0
        if n_causes is None:
            n_causes = max(k_seen, 1)
        elif k_seen > n_causes:
            bad = int(status.max())
            raise UnknownCauseCode(
                f"status {bad} exceeds declared number of causes K={n_causes}"
            )

        labels = list(cluster)
        if len(labels) != n_sub:
            raise InputError("cluster label count does not match subjects")
        for lab in labels:
            if lab is None or (isinstance(lab, float) and np.isnan(lab)) or lab == "":
                raise EmptyCluster("missing cluster label")
        uniq: list = []
        seen: dict = {}
        idx = np.empty(n_sub, dtype=np.intp)
        for i, lab in enumerate(labels):
            j = seen.get(lab)
            if j is None:
                j = len(uniq)
                seen[lab] = j
                uniq.append(lab)
            idx[i] = j
        if len(uniq) < 2:
            raise InputError("at least 2 clusters are required")

        if ctime is not None:
            ctime = np.asarray(ctime, dtype=float)
            if ctime.size != n_sub or not np.all(np.isfinite(ctime)):
                raise NonPositiveTime("censoring-time column must be finite")
            if np.any(ctime <= 0):
                raise NonPositiveTime("censoring times must be positive")
            if np.any(ctime < time - 1e-12):
                raise InputError("ctime earlier than the observed time")

        t_events = time[status > 0]
        if tau is None:
            tau = float(t_events.max()) if t_events.size else float(time.max())
        else:
            tau = float(tau)
            if tau <= 0:
                raise TauBeyondFollowUp("tau must be positive")
            if tau > time.max():
                raise TauBeyondFollowUp(
                    f"tau={tau} exceeds the maximum observed time {time.max()}"
                )

        p = X.shape[1]
        if covariate_names is None:
            covariate_names = tuple(f"x{l + 1}" for l in range(p))
        else:
            covariate_names = tuple(covariate_names)
            if len(covariate_names) != p:
                raise InputError("covariate name count does not match p")
        if bases is None:
            bases = (CONSTANT,) * p
        else:
            bases = tuple(_check_basis(b) for b in bases)
            if len(bases) != p:
                raise InputError("one basis per covariate required")

        self.cluster_labels = tuple(uniq)
        self.cluster_index = idx
        self.time = time
        self.status = status
        self.X = X
        self.covariate_names = covariate_names
        self.bases = bases
        self.tau = tau
        self.n_causes = int(n_causes)
        self.ctime = ctime
        for a in (self.cluster_index, self.time, self.status, self.X):
            a.setflags(write=False)
        if self.ctime is not None:
            self.ctime.setflags(write=False)

    # -- basic shape ---------------------------------------------------------

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @property
    def n_subjects(self) -> int:
        return self.time.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_index, minlength=self.n_clusters)

    @property
    def censoring_observed(self) -> bool:
        return self.ctime is not None

    @property
    def all_constant_bases(self) -> bool:
        return all(b == CONSTANT for b in self.bases)

    # -- record views ----------------------------------------------------------

    def record(self, i: int) -> SubjectRecord:
        return SubjectRecord(
            cluster_id=self.cluster_labels[self.cluster_index[i]],
            time=float(self.time[i]),
            cause=CauseCode(int(self.status[i]), self.n_causes),
            covariates=CovariatePath(self.X[i].copy(), self.bases),
            ctime=None if self.ctime is None else float(self.ctime[i]),
        )

    def subjects(self) -> Iterator[SubjectRecord]:
        for i in range(self.n_subjects):
            yield self.record(i)

    def covariate_path(self, base: Sequence[float]) -> CovariatePath:
        """Build a query path with this dataset's basis declaration."""
        return CovariatePath(np.asarray(base, dtype=float), self.bases)

    # -- persistence -----------------------------------------------------------

    def to_frame(self, truth: dict | None = None) -> pd.DataFrame:
        data = {
            "cluster": [self.cluster_labels[j] for j in self.cluster_index],
            "time": self.time,
            "status": self.status,
        }
        for l, name in enumerate(self.covariate_names):
            data[name] = self.X[:, l]
        if self.ctime is not None:
            data["ctime"] = self.ctime
        if truth:
            for key, col in truth.items():
                data[key] = col
        return pd.DataFrame(data)

    def with_tau(self, tau: float) -> "ClusteredDataset":
        """Copy of the dataset with a different analysis horizon."""
        return ClusteredDataset(
            cluster=[self.cluster_labels[j] for j in self.cluster_index],
            time=self.time.copy(),
            status=self.status.copy(),
            X=self.X.copy(),
            covariate_names=self.covariate_names,
            bases=self.bases,
            tau=tau,
            n_causes=self.n_causes,
            ctime=None if self.ctime is None else self.ctime.copy(),
        )


def load_dataset(
    source,
    schema: dict | None = None,
    tau: float | None = None,
    n_causes: int | None = None,
    bases: Sequence[str] | str | None = None,
    delimiter: str = ",",
) -> ClusteredDataset:
    """Read a delimited text file into a validated dataset.

    Parameters
    ----------
    source : path, file object, or bytes with a header row.
    schema : optional column mapping with keys ``cluster``, ``time``,
        ``status``, ``ctime`` and ``covariates`` (list of column names).
        Unmapped non-reserved columns become covariates in file order.
    tau : analysis horizon; default is the largest observed failure time.
    n_causes : declared K; default is inferred from the status column.
    bases : a time basis name applied to all covariates, or one per column.

    Missing values anywhere in a mapped column are errors, not imputed.
    """
    schema = dict(schema or {})
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    # leading '#' lines hold the embedded run manifest of generated files
    df = pd.read_csv(source, sep=delimiter, comment="#")

    col_cluster = schema.get("cluster", "cluster")
    col_time = schema.get("time", "time")
    col_status = schema.get("status", "status")
    col_ctime = schema.get("ctime", "ctime")
    for col, what in ((col_cluster, "cluster"), (col_time, "time"), (col_status, "status")):
        if col not in df.columns:
            raise MissingColumn(f"required column {col!r} ({what}) not in file")

    covs = schema.get("covariates")
    if covs is None:
        reserved = {col_cluster, col_time, col_status, col_ctime}
        reserved.update(TRUTH_COLUMNS)
        covs = [c for c in df.columns if c not in reserved]
    else:
        covs = list(covs)
        for c in covs:
            if c not in df.columns:
                raise MissingColumn(f"covariate column {c!r} not in file")
    if not covs:
        raise MissingColumn("no covariate columns found")

    used = [col_cluster, col_time, col_status] + covs
    has_ctime = col_ctime in df.columns
    if has_ctime:
        used.append(col_ctime)
    sub = df[used]
    if sub.isna().any().any():
        bad = [c for c in used if sub[c].isna().any()]
        raise InputError(f"missing values in columns {bad}; not imputed")

    if isinstance(bases, str):
        bases = (bases,) * len(covs)

    return ClusteredDataset(
        cluster=df[col_cluster].tolist(),
        time=df[col_time].to_numpy(dtype=float),
        status=df[col_status].to_numpy(),
        X=df[covs].to_numpy(dtype=float),
        covariate_names=covs,
        bases=bases,
        tau=tau,
        n_causes=n_causes,
        ctime=df[col_ctime].to_numpy(dtype=float) if has_ctime else None,
    )


def save_dataset(ds: ClusteredDataset, path, truth: dict | None = None) -> None:
    """Write a dataset in the same delimited format `load_dataset` reads."""
    ds.to_frame(truth).to_csv(path, index=False)


def build_grid(ds: ClusteredDataset, Q: int = 1) -> TimeGrid:
    """Event-time grid: distinct observed times in (0, tau] plus tau.

    When every covariate uses the constant basis the integrands are
    piecewise constant between knots, so the refinement is forced to 1
    (panel quadrature is already exact).
    """
    if Q < 1:
        raise InputError("refinement Q must be >= 1")
    knots = np.unique(ds.time[ds.time <= ds.tau])
    if knots.size == 0 or knots[-1] < ds.tau:
        knots = np.append(knots, ds.tau)
    if ds.all_constant_bases:
        Q = 1
    return TimeGrid(knots=knots, refinement=int(Q))
