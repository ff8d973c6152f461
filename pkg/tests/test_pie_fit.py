"""The alternating interactive-effects fit and its comparator."""

import numpy as np
import pytest

from piepanel import (
    FactorLoadings,
    FitOptions,
    NotIdentified,
    PanelDataset,
    beta_step,
    cross_section_demean,
    lambda_step,
    ls_factor_fit,
    nls_objective,
    pie_fit,
    subspace_angle,
    theta_recover,
    twfe_fit,
)
from conftest import (
    make_additive_panel,
    make_exact_ie_panel,
    make_exact_model1_panel,
    make_noisy_ie_panel,
)
from oracles import direct_nls_minimum


class TestPieFitExactRecovery:
    def test_model1_shaped_noiseless(self):
        panel, beta0, lam0, theta0 = make_exact_model1_panel(n=200, T=4, seed=0)
        est = pie_fit(panel, 1)
        assert est.converged
        assert np.abs(est.beta - beta0).max() < 1e-6
        assert subspace_angle(est.loadings.orthonormal, lam0) < 1e-6
        assert np.abs(est.theta - theta0).max() < 1e-6
        assert est.objective < 1e-12

    @pytest.mark.parametrize("T", [3, 4])
    def test_generic_exact_designs(self, T):
        panel, beta0, lam0, theta0 = make_exact_ie_panel(n=80, T=T, K=2, seed=T)
        est = pie_fit(panel, 1, FitOptions(n_starts=4, seed=1))
        assert np.abs(est.beta - beta0).max() < 1e-6
        assert subspace_angle(est.loadings.orthonormal, lam0) < 1e-6
        assert np.abs(est.theta - theta0).max() < 1e-6

    def test_two_factor_exact_design(self):
        panel, beta0, lam0, theta0 = make_exact_ie_panel(n=150, T=5, K=2, q=2, seed=5)
        est = pie_fit(panel, 2, FitOptions(n_starts=4, seed=2))
        assert np.abs(est.beta - beta0).max() < 1e-6
        assert subspace_angle(est.loadings.orthonormal, lam0) < 1e-6
        # fitted factor component matches in either parameterization
        dp = cross_section_demean(panel)
        fit_est = (dp.z_dot @ est.theta) @ est.loadings.normalized.T
        fit_true = (dp.z_dot @ theta0) @ lam0.T
        assert np.abs(fit_est - fit_true).max() < 1e-6


class TestPieFitBehaviour:
    def test_matches_direct_nls_oracle(self):
        panel, _, _, _ = make_exact_ie_panel(n=30, T=3, K=1, seed=7, theta_scale=0.8)
        rng = np.random.default_rng(8)
        noisy = PanelDataset.from_arrays(
            panel.y + 0.3 * rng.standard_normal(panel.y.shape), panel.X
        )
        est = pie_fit(noisy, 1, FitOptions(n_starts=6, seed=3))
        dp = cross_section_demean(noisy)
        oracle_obj, oracle_beta = direct_nls_minimum(dp, 1, n_starts=12, seed=4)
        assert est.objective <= oracle_obj + 1e-6
        assert np.abs(est.beta - oracle_beta).max() < 1e-4

    def test_null_dgp_close_to_twfe(self):
        # constant loading and effects uncorrelated over time with the
        # regressors: both estimators are consistent for the same target
        rng = np.random.default_rng(9)
        n, T = 4000, 4
        eta = rng.standard_normal(n)
        X = np.stack(
            [eta[:, None] + rng.standard_normal((n, T)) for _ in range(2)], axis=2
        )
        y = X @ np.array([-1.0, 1.0]) + 2.0 * eta[:, None] + rng.standard_normal((n, T))
        panel = PanelDataset.from_arrays(y, X)
        est = pie_fit(panel, 1)
        fe = twfe_fit(panel)
        assert np.abs(est.beta - fe.beta).max() < 0.05
        assert np.abs(est.beta - np.array([-1.0, 1.0])).max() < 0.05

    def test_monotone_trace_random_fits(self):
        for seed in range(8):
            panel, _ = make_noisy_ie_panel(n=40, T=4, K=2, seed=seed, noise=1.0)
            est = pie_fit(panel, 1)
            assert np.all(np.diff(est.objective_trace) <= 1e-10)

    def test_objective_reproduced_by_residuals(self):
        panel, _ = make_noisy_ie_panel(n=50, T=4, K=2, seed=30)
        est = pie_fit(panel, 1)
        from_resid = float(np.sum(est.residuals**2)) / (2.0 * panel.n)
        assert abs(est.objective - from_resid) < 1e-10
        assert abs(est.objective - est.objective_trace[-1]) < 1e-10

    def test_theta_consistent_with_recover(self):
        panel, _ = make_noisy_ie_panel(n=50, T=4, K=2, seed=31)
        est = pie_fit(panel, 1)
        dp = cross_section_demean(panel)
        assert np.abs(est.theta - theta_recover(dp, est.loadings)).max() < 1e-12
        assert abs(nls_objective(dp, est.beta, est.theta, est.loadings) - est.objective) < 1e-12

    def test_not_identified_gate(self):
        # pure treatment design: first-period column constant, adoption
        # fixed afterwards, so the stack has a single column
        rng = np.random.default_rng(10)
        n, T = 60, 2
        treated = (rng.random(n) < 0.5).astype(float)
        X = np.stack([np.zeros(n), treated], axis=1)[:, :, None]
        y = rng.standard_normal((n, T)) + X[:, :, 0]
        panel = PanelDataset.from_arrays(y, X)
        with pytest.raises(NotIdentified, match=r"\(T-q\)\*\(m-q\)"):
            pie_fit(panel, 1)

    def test_projection_needs_more_units_than_columns(self):
        # pruning keeps m below n for any real panel, so exercise the
        # feasibility guard through a hand-built demeaned panel
        from piepanel import DemeanedPanel

        panel, _, _, _ = make_exact_ie_panel(n=4, T=4, K=2, seed=11)
        z = np.eye(4) - 0.25
        dp = DemeanedPanel(
            y_dot=panel.y - panel.y.mean(axis=0),
            X_dot=panel.X - panel.X.mean(axis=0),
            z_dot=z,
            column_map=tuple((t, 1) for t in range(1, 5)),
            source=panel,
        )
        with pytest.raises(NotIdentified, match="n > m"):
            pie_fit(panel, 1, dp=dp)

    def test_max_iter_returns_unconverged(self):
        panel, _ = make_noisy_ie_panel(n=40, T=4, K=2, seed=12)
        est = pie_fit(panel, 1, FitOptions(max_iter=1, tol=1e-14))
        assert not est.converged
        assert est.iterations == 1

    def test_unit_permutation_invariance(self):
        panel, _ = make_noisy_ie_panel(n=60, T=4, K=2, seed=13)
        perm = np.random.default_rng(14).permutation(panel.n)
        shuffled = PanelDataset.from_arrays(panel.y[perm], panel.X[perm])
        opts = FitOptions(tol=1e-13, max_iter=5000)
        est = pie_fit(panel, 1, opts)
        est_p = pie_fit(shuffled, 1, opts)
        assert np.abs(est.beta - est_p.beta).max() < 1e-12
        assert abs(est.objective - est_p.objective) < 1e-12
        fe, fe_p = twfe_fit(panel), twfe_fit(shuffled)
        assert np.abs(fe.beta - fe_p.beta).max() < 1e-12

    def test_refit_from_recombined_loadings_is_stationary(self):
        # the loop sees loadings only through their span: recombining the
        # converged loadings and taking one more round leaves the fit alone
        panel, _ = make_noisy_ie_panel(n=60, T=4, K=2, seed=15)
        opts = FitOptions(tol=1e-12, max_iter=5000)
        est = pie_fit(panel, 1, opts)
        dp = cross_section_demean(panel)
        recombined = FactorLoadings(orthonormal=-est.loadings.orthonormal)
        beta_again = beta_step(dp, recombined)
        assert np.abs(beta_again - est.beta).max() < 1e-9
        loadings_again = lambda_step(dp, beta_again, 1)
        beta_final = beta_step(dp, loadings_again)
        assert np.abs(beta_final - est.beta).max() < 1e-9

    def test_multi_start_picks_best_objective(self):
        panel, _ = make_noisy_ie_panel(n=40, T=4, K=2, seed=16)
        single = pie_fit(panel, 1, FitOptions(init="random", n_starts=1, seed=5))
        multi = pie_fit(panel, 1, FitOptions(init="random", n_starts=6, seed=5))
        assert multi.objective <= single.objective + 1e-12


class TestLsFactorFit:
    def test_exact_factor_structure_recovers_beta(self):
        # factor component unrelated to the regressors, no noise
        rng = np.random.default_rng(17)
        n, T, K = 120, 4, 2
        X = rng.standard_normal((n, T, K))
        beta0 = np.array([0.5, -1.5])
        f = rng.standard_normal(n)
        lam = np.array([1.0, 0.4, -0.3, 2.0])
        y = X @ beta0 + f[:, None] * lam[None, :]
        panel = PanelDataset.from_arrays(y, X)
        est = ls_factor_fit(panel, 1, FitOptions(n_starts=4, seed=6))
        assert np.abs(est.beta - beta0).max() < 1e-6
        assert est.objective < 1e-12
        assert est.theta is None

    def test_ones_fixed_point_on_additive_data(self):
        panel, beta0 = make_additive_panel(n=80, T=4, K=2, seed=18, noise=0.0)
        est = ls_factor_fit(panel, 1)
        assert np.abs(est.beta - beta0).max() < 1e-8
        ones = np.full(panel.T, 1.0 / np.sqrt(panel.T))
        assert subspace_angle(est.loadings.orthonormal, ones[:, None]) < 1e-6

    def test_monotone_trace(self):
        for seed in range(5):
            panel, _ = make_noisy_ie_panel(n=40, T=4, K=2, seed=40 + seed, noise=1.0)
            est = ls_factor_fit(panel, 1)
            assert np.all(np.diff(est.objective_trace) <= 1e-10)

    def test_objective_matches_residuals(self):
        panel, _ = make_noisy_ie_panel(n=40, T=4, K=2, seed=19)
        est = ls_factor_fit(panel, 1)
        assert abs(est.objective - float(np.sum(est.residuals**2)) / (2 * panel.n)) < 1e-12

    def test_gate_is_q_less_than_T(self):
        panel, _ = make_noisy_ie_panel(n=40, T=3, K=2, seed=20)
        with pytest.raises(NotIdentified):
            ls_factor_fit(panel, 3)
