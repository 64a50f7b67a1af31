"""Simulation generator: frailty, cause assignment, inverse draws, output."""

import numpy as np
import pytest

from addsubhaz import fit
from addsubhaz.errors import InputError, InvalidProbability
from addsubhaz.simgen import (
    SimConfig,
    accepted_frailty_mean,
    assign_cause,
    cause1_probability,
    draw_failure_time,
    draw_frailty,
    frailty_acceptance_probability,
    generate,
    true_cause1_cif,
)

# MC oracle values frozen at first computation (1e6 raw draws on a fixed
# Philox stream); the analytic acceptance probability is 0.2628055...
FROZEN_ACCEPTANCE_MC = 0.263317
# empirical censoring fractions of the production generator (50 reps of
# n=200, m=10 at the table parameterization)
FROZEN_CENSORING = {0.35: 0.2301, 0.95: 0.4407, 1.65: 0.5744}


def _cfg(**kw):
    base = dict(
        n_clusters=50, cluster_size=10, rho=0.5, theta=0.7,
        beta1=[1.0], beta2=[0.2], gamma=0.35, seed=0,
    )
    base.update(kw)
    return SimConfig(**base)


class TestFrailty:
    def test_accepted_values_in_band(self, rng):
        for _ in range(200):
            nu = draw_frailty(0.7, 0.5, rng)
            assert 0.0 < 0.5 + nu < 1.0

    def test_acceptance_probability_guard(self):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(20240809)))
        E = rng.exponential(1 / 0.7, 1_000_000)
        nu = E - 1 / 0.7
        acc = float(np.mean((0.5 + nu > 0) & (0.5 + nu < 1)))
        assert acc == pytest.approx(FROZEN_ACCEPTANCE_MC, abs=1e-6)
        assert acc == pytest.approx(frailty_acceptance_probability(0.7, 0.5), abs=0.002)

    def test_large_theta_concentrates_at_zero(self, rng):
        draws = np.array([draw_frailty(1000.0, 0.5, rng) for _ in range(2000)])
        assert np.mean(np.abs(draws)) < 0.01

    def test_accepted_mean_matches_analytic(self, rng):
        draws = np.array([draw_frailty(0.7, 0.5, rng) for _ in range(20000)])
        assert draws.mean() == pytest.approx(accepted_frailty_mean(0.7, 0.5), abs=0.01)


class TestAssignCause:
    def test_additive_reduction_at_zero_covariate(self, rng):
        assert cause1_probability([0.0], 0.0, 0.5, [1.0], "m1") == pytest.approx(0.5)

    def test_proportional_reduction_at_zero_covariate(self, rng):
        assert cause1_probability([0.0], 0.0, 0.66, [1.0], "m2") == pytest.approx(0.66)

    def test_additive_formula(self, rng):
        p = cause1_probability([1.0], 0.0, 0.5, [1.0], "m1")
        assert p == pytest.approx(1.0 - 0.5 * np.exp(-1.0))

    def test_invalid_probability_raises_unless_clamped(self, rng):
        # strongly negative covariate effect pushes P1 below 0
        with pytest.raises(InvalidProbability):
            assign_cause([-3.0], -0.4, 0.5, [1.0], "m1", rng)
        eps = assign_cause([-3.0], -0.4, 0.5, [1.0], "m1", rng, clamp=True)
        assert eps == 2  # clamped to zero probability of cause 1

    def test_assignment_frequency(self, rng):
        p = cause1_probability([0.3], 0.1, 0.5, [1.0], "m1")
        draws = [assign_cause([0.3], 0.1, 0.5, [1.0], "m1", rng) for _ in range(4000)]
        assert np.mean(np.array(draws) == 1) == pytest.approx(p, abs=0.025)


class TestFailureTimes:
    def test_closed_form_reduction(self, rng):
        # X=0, nu=0, rho=.5, cause 1, additive model: T = -log(1-U)
        for _ in range(50):
            state = rng.bit_generator.state
            t = draw_failure_time([0.0], 0.0, 1, 0.5, [1.0], [0.2], "m1", rng)
            rng.bit_generator.state = state
            u = rng.random()
            assert t == pytest.approx(-np.log1p(-u), abs=1e-9)

    def test_boundary_behavior(self, rng):
        ts = [
            draw_failure_time([0.2], 0.0, 1, 0.5, [1.0], [0.2], "m1", rng)
            for _ in range(2000)
        ]
        assert min(ts) > 0
        assert np.isfinite(ts).all()

    def test_distributional_ks(self, rng):
        # empirical CDF of draws vs the analytic conditional CDF
        from addsubhaz.simgen import _conditional_cdf

        n = 100_000
        x, nu, rho = 0.4, 0.1, 0.5
        b1 = np.full(n, 0.4 * 1.0)
        c = np.full(n, rho + nu)
        eps = np.ones(n, dtype=int)
        from addsubhaz.simgen import _invert_times

        u = rng.random(n)
        t = _invert_times("m1", eps, b1, c, u)
        cdf, _ = _conditional_cdf("m1", eps, b1, c)
        emp = np.arange(1, n + 1) / n
        theo = cdf(np.sort(t))
        assert float(np.max(np.abs(emp - theo))) < 0.01

    def test_proportional_cause2_degenerate_branch(self, rng):
        # non-positive covariate effect has no finite-time mass
        t = draw_failure_time([-0.5, 0.0], 0.0, 2, 0.66, [0.5, 1.0], [0.5, 1.0], "m2", rng)
        assert np.isinf(t)

    def test_all_generated_events_have_interior_quantiles(self, rng):
        from addsubhaz.simgen import _conditional_cdf

        cfg = _cfg(seed=5)
        sim = generate(cfg, replicate=0)
        finite = np.isfinite(sim.true_time)
        b = np.where(
            sim.true_cause == 1,
            sim.dataset.X @ cfg.beta1,
            sim.dataset.X @ cfg.beta2,
        )
        cdf, _ = _conditional_cdf(
            "m1", sim.true_cause[finite], b[finite],
            cfg.rho + np.repeat(sim.frailty, cfg.cluster_size)[finite],
        )
        vals = cdf(sim.true_time[finite])
        assert np.all((vals > 0) & (vals < 1))


class TestGenerate:
    def test_observed_data_consistency(self):
        sim = generate(_cfg(seed=3), replicate=0)
        ds = sim.dataset
        assert np.allclose(ds.time, np.minimum(sim.true_time, sim.censoring_time))
        expect = np.where(sim.true_time <= sim.censoring_time, sim.true_cause, 0)
        assert np.array_equal(ds.status, expect)
        assert ds.censoring_observed

    def test_deterministic_under_seed(self):
        a = generate(_cfg(seed=9), replicate=4)
        b = generate(_cfg(seed=9), replicate=4)
        assert np.array_equal(a.dataset.time, b.dataset.time)
        assert np.array_equal(a.dataset.X, b.dataset.X)
        assert np.array_equal(a.frailty, b.frailty)

    def test_replicates_differ(self):
        a = generate(_cfg(seed=9), replicate=0)
        b = generate(_cfg(seed=9), replicate=1)
        assert not np.array_equal(a.dataset.time, b.dataset.time)

    @pytest.mark.parametrize("gamma,target", [(0.35, 0.20), (0.95, 0.40)])
    def test_censoring_fraction(self, gamma, target):
        # the paper's "around 20% / 40%"; the DGP lands a bit above the
        # labels, so the frozen value guards regressions and the loose
        # band checks the qualitative claim
        cfg = _cfg(n_clusters=200, gamma=gamma, seed=77)
        fr = np.mean(
            [np.mean(generate(cfg, replicate=r).dataset.status == 0) for r in range(20)]
        )
        assert fr == pytest.approx(FROZEN_CENSORING[gamma], abs=0.012)
        assert abs(fr - target) < 0.05

    def test_cause1_frequency_near_zero_covariate(self):
        # clusters' cause-1 share at X ~ 0 tracks rho + E[nu | accepted];
        # independent covariates keep the low-X stratum spread over many
        # clusters so the frailty averages out
        cfg = _cfg(n_clusters=400, cluster_size=10, seed=21, covariate_cluster_corr=0.0)
        emp, theo = [], []
        for rep in range(6):
            sim = generate(cfg, replicate=rep)
            x = sim.dataset.X[:, 0]
            low = x < np.quantile(x, 0.10)
            emp.append(np.mean(sim.true_cause[low] == 1))
            x_low = float(np.mean(x[low]))
            theo.append(
                1 - (1 - (0.5 + accepted_frailty_mean(0.7, 0.5))) * np.exp(-x_low)
            )
        assert np.mean(emp) == pytest.approx(np.mean(theo), abs=0.03)

    def test_invalid_config_rejected(self):
        with pytest.raises(InputError):
            _cfg(rho=1.5)
        with pytest.raises(InputError):
            _cfg(gamma=None)
        with pytest.raises(InputError):
            _cfg(beta1=[1.0, 2.0])

    def test_admin_horizon_censoring(self):
        cfg = SimConfig(
            n_clusters=30, cluster_size=5, rho=0.5, theta=0.7,
            beta1=[1.0], beta2=[0.2], admin_horizon=1.5, seed=2,
        )
        sim = generate(cfg, replicate=0)
        assert np.all(sim.censoring_time == 1.5)
        assert np.all(sim.dataset.time <= 1.5)

    @pytest.mark.slow
    def test_marginal_additive_structure_recovered(self):
        # fitting cause 1 on a large sample recovers beta1; the frailty
        # only shifts the baseline after marginalization
        cfg = _cfg(n_clusters=2000, cluster_size=10, gamma=None, admin_horizon=50.0, seed=8)
        sim = generate(cfg, replicate=0)
        res = fit(sim.dataset, cause=1, Q=2)
        se_guess = 0.2 * np.sqrt(100 / 2000)
        assert abs(res.beta[0] - 1.0) < 3 * se_guess

    def test_true_cif_helper_monotone(self):
        cfg = _cfg()
        t = np.linspace(0, 5, 40)
        vals = true_cause1_cif(cfg, t, [0.5])
        assert vals[0] == 0.0
        assert np.all(np.diff(vals) >= -1e-12)
        assert vals[-1] < 1.0
