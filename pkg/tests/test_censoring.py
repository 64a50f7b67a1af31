"""Censoring Kaplan-Meier, IPCW weights, and their invariants."""

import numpy as np
import pytest

from addsubhaz import (
    ClusteredDataset,
    build_grid,
    cc_weight,
    fit_censoring_km,
    ipcw_weight,
)
from addsubhaz.censoring import WeightMatrix
from addsubhaz.errors import CensoringTimeUnavailable, GhatZeroBeforeTau
from conftest import random_clustered_dataset
from oracles import km_censoring_oracle


def _ds(times, statuses, **kw):
    n = len(times)
    return ClusteredDataset(
        cluster=[f"c{i}" for i in range(n)],
        time=times,
        status=statuses,
        X=np.linspace(0.1, 0.9, n).reshape(-1, 1),
        **kw,
    )


class TestKaplanMeier:
    def test_hand_product_limit(self):
        # censoring event only at t=2 with two subjects still at risk
        ds = _ds([1.0, 2.0, 3.0], [1, 0, 2])
        cm = fit_censoring_km(ds)
        assert cm.survival(1.9) == 1.0
        assert cm.survival(2.0) == pytest.approx(0.5)
        assert cm.survival(3.0) == pytest.approx(0.5)

    def test_no_censoring_events(self):
        ds = _ds([1.0, 2.0, 3.0], [1, 2, 1])
        cm = fit_censoring_km(ds)
        assert np.all(np.asarray(cm.survival(np.linspace(0, 3, 7))) == 1.0)

    def test_all_censored_distinct_times_hits_zero(self):
        with pytest.raises(GhatZeroBeforeTau):
            fit_censoring_km(_ds([1.0, 2.0, 3.0], [0, 0, 0]))

    def test_matches_oracle_on_random_data(self, rng):
        for _ in range(40):
            ds = random_clustered_dataset(rng, max_cluster_size=3)
            cm = fit_censoring_km(ds)
            G = km_censoring_oracle(ds.time, ds.status)
            for t in np.linspace(0, ds.tau, 9):
                assert cm.survival(t) == pytest.approx(G(t), abs=1e-14)

    def test_nelson_aalen_first_order_agreement(self, rng):
        # |G - exp(-Lambda_c)| <= Lambda_c^2 when all risk sets are large
        n = 60
        T = rng.exponential(4.0, n) + 0.1
        C = rng.exponential(6.0, n) + 0.1
        Z = np.minimum(T, C)
        st = np.where(T <= C, 1, 0)
        tau = float(np.quantile(Z, 0.5))  # risk sets stay >= 10
        ds = _ds(Z, st, tau=tau)
        cm = fit_censoring_km(ds)
        for t in np.linspace(0, tau, 15):
            lam = cm.cum_hazard_at(t)
            assert abs(cm.survival(t) - np.exp(-lam)) <= lam**2 + 1e-12

    def test_clustered_censoring_consistency_trend(self):
        # cluster-shared gamma frailty on the censoring rate; known marginal
        # G(t) = (1 + t * gamma / a)^(-a); sup error shrinks with n
        a, gam, m = 4.0, 0.8, 5
        sup_err = []
        for n in (50, 200, 800):
            rng = np.random.default_rng(1000 + n)
            w = rng.gamma(shape=a, scale=1.0 / a, size=n).repeat(m)
            C = rng.exponential(1.0 / (gam * w))
            T = rng.exponential(2.0, n * m) + 0.01
            Z = np.minimum(T, C)
            st = np.where(T <= C, 1, 0)
            ds = ClusteredDataset(
                cluster=np.repeat(np.arange(n), m).tolist(),
                time=Z,
                status=st,
                X=np.ones((n * m, 1)) * 0.5,
                tau=float(np.quantile(Z, 0.9)),
            )
            cm = fit_censoring_km(ds)
            ts = np.linspace(0.01, ds.tau, 50)
            g_true = (1 + ts * gam / a) ** (-a)
            g_hat = np.asarray(cm.survival(ts))
            sup_err.append(float(np.max(np.abs(g_hat - g_true))))
        assert sup_err[0] > sup_err[1] > sup_err[2]

    def test_km_table_export(self, rng):
        ds = random_clustered_dataset(rng)
        cm = fit_censoring_km(ds)
        table = cm.km_table()
        assert table.shape[1] == 2
        assert np.all(np.diff(table[:, 0]) > 0)
        assert np.all(np.diff(table[:, 1]) <= 0)


class TestWeights:
    def test_uncensored_before_observed_time(self, rng):
        ds = random_clustered_dataset(rng)
        cm = fit_censoring_km(ds)
        i = int(np.flatnonzero(ds.status > 0)[0])
        rec = ds.record(i)
        assert ipcw_weight(cm, rec, min(rec.time, ds.tau) * 0.5) == 1.0

    def test_other_cause_failure_weight_formula(self):
        # G(1) = 1 and G(2) = 0.5: weight at t=2 is G(2)/G(1) = 0.5
        ds = _ds([1.0, 2.0, 3.0], [2, 0, 1])
        cm = fit_censoring_km(ds)
        assert cm.survival(1.0) == 1.0
        assert cm.survival(2.0) == pytest.approx(0.5)
        rec = ds.record(0)
        assert ipcw_weight(cm, rec, 2.0) == pytest.approx(0.5)

    def test_censored_after_exit_is_zero(self):
        ds = _ds([1.0, 2.0, 3.0], [0, 1, 1])
        cm = fit_censoring_km(ds)
        assert ipcw_weight(cm, ds.record(0), 2.0) == 0.0

    def test_cc_weight_indicator(self):
        ds = _ds([1.0, 2.0], [1, 0], ctime=[5.0, 2.0])
        assert cc_weight(ds.record(0), 3.0) == 1
        assert cc_weight(ds.record(1), 3.0) == 0
        assert cc_weight(ds.record(0), 5.0) == 0  # strict inequality at C = t

    def test_cc_weight_requires_ctime(self, rng):
        ds = random_clustered_dataset(rng)
        rec = ds.record(0)
        object.__setattr__(rec, "ctime", None)
        with pytest.raises(CensoringTimeUnavailable):
            cc_weight(rec, 1.0)

    def test_weight_matrix_bounds_and_sparsity(self, rng):
        for _ in range(10):
            ds = random_clustered_dataset(rng)
            cm = fit_censoring_km(ds)
            grid = build_grid(ds, Q=1)
            wm = WeightMatrix(cm, ds, grid)
            dense = wm.to_dense()
            g_tau = cm.survival(ds.tau)
            bound = np.asarray(cm.survival(grid.knots)) / g_tau
            assert np.all(dense >= 0)
            assert np.all(dense <= bound[None, :] + 1e-12)
            for i in range(ds.n_subjects):
                pre = grid.knots <= ds.time[i]
                assert np.all(dense[i, pre] == 1.0)
                if ds.status[i] == 0:
                    assert np.all(dense[i, ~pre] == 0.0)
