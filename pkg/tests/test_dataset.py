"""Dataset ingestion, validation, counting processes, and the time grid."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from addsubhaz import (
    CauseCode,
    ClusteredDataset,
    CovariatePath,
    SubjectRecord,
    build_grid,
    counting_process,
    load_dataset,
    save_dataset,
)
from addsubhaz.dataset import EXP_DECAY, basis_integral, basis_values
from addsubhaz.errors import (
    EmptyCluster,
    InputError,
    MissingColumn,
    NonPositiveTime,
    TauBeyondFollowUp,
    UnknownCauseCode,
)
from conftest import random_clustered_dataset


def _csv(text: str) -> bytes:
    return text.strip().encode()


class TestLoad:
    def test_three_row_file(self):
        ds = load_dataset(_csv("cluster,time,status,x1\nA,1,1,0.1\nA,2,0,0.4\nB,3,2,0.2"))
        assert ds.n_clusters == 2
        assert tuple(ds.cluster_sizes) == (2, 1)
        assert ds.n_causes == 2
        assert ds.p == 1

    def test_negative_time_rejected(self):
        with pytest.raises(NonPositiveTime):
            load_dataset(_csv("cluster,time,status,x1\nA,-1,1,0.1\nB,2,0,0.4"))

    def test_status_beyond_declared_causes(self):
        with pytest.raises(UnknownCauseCode):
            load_dataset(
                _csv("cluster,time,status,x1\nA,1,3,0.1\nB,2,0,0.4"), n_causes=2
            )

    def test_missing_column(self):
        with pytest.raises(MissingColumn):
            load_dataset(_csv("cluster,time,x1\nA,1,0.1\nB,2,0.4"))

    def test_missing_values_are_errors(self):
        with pytest.raises(InputError, match="missing"):
            load_dataset(_csv("cluster,time,status,x1\nA,1,1,\nB,2,0,0.4"))

    def test_empty_cluster_label(self):
        with pytest.raises(EmptyCluster):
            ClusteredDataset(
                cluster=["", "B"], time=[1.0, 2.0], status=[1, 0], X=[[0.1], [0.2]]
            )

    def test_tau_beyond_followup(self):
        with pytest.raises(TauBeyondFollowUp):
            load_dataset(
                _csv("cluster,time,status,x1\nA,1,1,0.1\nB,2,0,0.4"), tau=5.0
            )

    def test_tau_defaults_to_last_failure(self):
        ds = load_dataset(
            _csv("cluster,time,status,x1\nA,1,1,0.1\nA,4,0,0.2\nB,3,2,0.4")
        )
        assert ds.tau == 3.0

    def test_ctime_column_marks_censoring_complete(self):
        ds = load_dataset(
            _csv("cluster,time,status,x1,ctime\nA,1,1,0.1,2\nB,2,0,0.4,2")
        )
        assert ds.censoring_observed

    def test_ctime_before_observed_time_rejected(self):
        with pytest.raises(InputError):
            load_dataset(
                _csv("cluster,time,status,x1,ctime\nA,1,1,0.1,0.5\nB,2,0,0.4,2")
            )

    def test_single_cluster_rejected(self):
        with pytest.raises(InputError, match="2 clusters"):
            ClusteredDataset(
                cluster=["A", "A"], time=[1.0, 2.0], status=[1, 0], X=[[0.1], [0.2]]
            )


class TestRoundTrip:
    def test_save_load_identity(self, rng, tmp_path):
        for trial in range(5):
            ds = random_clustered_dataset(rng, p=2)
            path = tmp_path / f"rt{trial}.csv"
            save_dataset(ds, path)
            back = load_dataset(path, bases=ds.bases, tau=ds.tau)
            assert np.allclose(back.time, ds.time)
            assert np.array_equal(back.status, ds.status)
            assert np.allclose(back.X, ds.X)
            assert np.allclose(back.ctime, ds.ctime)
            assert back.tau == ds.tau
            assert back.cluster_index.tolist() == ds.cluster_index.tolist()


class TestCountingProcess:
    def _record(self, time, cause, ctime=None):
        return SubjectRecord(
            cluster_id="A",
            time=time,
            cause=CauseCode(cause, 2),
            covariates=CovariatePath(np.array([0.5]), ("constant",)),
            ctime=ctime,
        )

    def test_failed_from_cause_of_interest(self):
        state = counting_process(self._record(2.0, 1), k=1, t=3.0)
        assert state == (1, 0)

    def test_other_cause_failure_stays_at_risk(self):
        state = counting_process(self._record(2.0, 2), k=1, t=3.0)
        assert state == (0, 1)

    def test_time_zero(self):
        state = counting_process(self._record(2.0, 1), k=1, t=0.0)
        assert state == (0, 1)

    @given(
        z=st.floats(0.1, 50.0),
        cause=st.integers(0, 2),
        t=st.floats(0.0, 60.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_y_plus_lagged_n_is_one(self, z, cause, t):
        rec = self._record(z, cause)
        now = counting_process(rec, 1, t)
        just_before = counting_process(rec, 1, np.nextafter(t, -np.inf))
        assert now.Y + just_before.N == 1
        assert now.N >= just_before.N


class TestGrid:
    def test_knots_sorted_unique_truncated(self):
        ds = ClusteredDataset(
            cluster=["A", "A", "B", "B"],
            time=[2.0, 1.0, 2.0, 5.0],
            status=[1, 1, 2, 1],
            X=[[0.1], [0.2], [0.3], [0.4]],
            tau=4.0,
        )
        grid = build_grid(ds, Q=1)
        assert grid.knots.tolist() == [1.0, 2.0, 4.0]

    def test_constant_bases_force_q1(self, rng):
        ds = random_clustered_dataset(rng, p=1)
        assert build_grid(ds, Q=8).refinement == 1

    def test_exp_basis_keeps_refinement(self, rng):
        ds = random_clustered_dataset(rng, p=1, bases=(EXP_DECAY,))
        grid = build_grid(ds, Q=4)
        assert grid.refinement == 4
        pts = grid.refined_points()
        # each of the knots.size intervals is split into 4 panels
        assert pts.size == 4 * grid.knots.size + 1
        assert np.isclose(pts[-1], grid.tau)
        assert np.all(np.diff(pts) > 0)
        for k in grid.knots:
            assert np.any(np.isclose(pts, k))

    def test_risk_set_nonincreasing(self, rng):
        ds = random_clustered_dataset(rng)
        grid = build_grid(ds, Q=1)
        sizes = [
            sum(counting_process(ds.record(i), 1, t).Y for i in range(ds.n_subjects))
            for t in grid.knots
        ]
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))


class TestBasis:
    def test_values_and_integrals(self):
        bases = ("constant", EXP_DECAY)
        t = np.array([0.0, 0.5, 2.0])
        vals = basis_values(bases, t)
        assert np.allclose(vals[:, 0], 1.0)
        assert np.allclose(vals[:, 1], np.exp(-t))
        ints = basis_integral(bases, t)
        assert np.allclose(ints[:, 0], t)
        assert np.allclose(ints[:, 1], 1 - np.exp(-t))

    def test_covariate_path_evaluation(self):
        path = CovariatePath(np.array([2.0, 3.0]), ("constant", EXP_DECAY))
        assert np.allclose(path.at(1.0), [2.0, 3.0 * np.exp(-1.0)])
        assert np.allclose(path.integral(1.0), [2.0, 3.0 * (1 - np.exp(-1.0))])

    def test_unknown_basis_rejected(self):
        with pytest.raises(InputError):
            CovariatePath(np.array([1.0]), ("quadratic",))
