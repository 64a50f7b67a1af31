"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import warnings

import numpy as np
import pytest

from addsubhaz.dataset import ClusteredDataset

CRITERION_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str):
    line = f"[criterion {number}] {'PASS' if passed else 'FAIL'} - {detail}"
    CRITERION_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)


def random_clustered_dataset(
    rng: np.random.Generator,
    p: int = 1,
    bases: tuple[str, ...] | None = None,
    n_clusters: tuple[int, int] = (3, 8),
    max_cluster_size: int = 4,
    min_cause1_events: int = 2,
) -> ClusteredDataset:
    """Small random competing-risks dataset with a ctime column."""
    n_cl = int(rng.integers(*n_clusters))
    m = rng.integers(1, max_cluster_size + 1, size=n_cl)
    N = int(m.sum())
    cluster = np.repeat(np.arange(n_cl), m)
    T = rng.exponential(1.0, N) + 0.05
    C = rng.exponential(1.5, N) + 0.05
    eps = rng.integers(1, 3, N)
    Z = np.minimum(T, C)
    st = np.where(T <= C, eps, 0)
    X = rng.normal(0.0, 1.0, (N, p))
    have = int(np.sum(st == 1))
    if have < min_cause1_events:
        for i in rng.choice(N, size=min_cause1_events, replace=False):
            st[i] = 1
            C[i] = Z[i] + 0.5
    return ClusteredDataset(
        cluster=cluster.tolist(),
        time=Z,
        status=st,
        X=X,
        bases=bases or ("constant",) * p,
        ctime=C,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240809)


@pytest.fixture(autouse=True)
def _quiet_few_event_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield
