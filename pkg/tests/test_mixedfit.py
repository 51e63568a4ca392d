import numpy as np
import pytest
from scipy.optimize import minimize_scalar
from scipy.special import expit, logit

from oracles import dense_reml_objective, irls_logistic
from util import closed_form_oneway, make_design, oneway_design, simulate_lmm
from twopartnet.dyaddesign import ModelSpec
from twopartnet.mixedfit import (
    ConvergenceError,
    SeparationError,
    VarianceComponents,
    _build_suffstats,
    _core_eval,
    drop_zero_variance,
    fit_two_part,
    pql_fit,
    reml_fit,
    reml_objective,
    reml_objective_grad,
    set_threads,
)
from twopartnet.netdata import DataError


class TestRemlObjective:
    def test_matches_dense_oracle(self, rng):
        design = make_design(S=4, rows=12, p=3, q=2, seed=1)
        y = simulate_lmm(design, [1.0, 0.5, -0.3], [0.8, 0.2], 0.6, seed=2)
        w = rng.uniform(0.5, 2.0, size=len(y))
        for _ in range(5):
            theta = rng.normal(size=3)
            fast = reml_objective(theta, design, y, w)
            dense = dense_reml_objective(theta, design.X, design.Z, y,
                                         design.subject_index, design.vc_map, w)
            assert fast == pytest.approx(dense, abs=1e-8)

    def test_zero_tau_equals_ols_reml(self):
        design = make_design(S=3, rows=10, p=2, q=2, seed=3)
        y = simulate_lmm(design, [0.5, 1.0], [0.0, 0.0], 1.3, seed=4)
        s2 = 0.9
        got = reml_objective(np.array([-np.inf, -np.inf, np.log(s2)]), design, y)
        X, (N, p) = design.X, design.X.shape
        b = np.linalg.lstsq(X, y, rcond=None)[0]
        rss = float(((y - X @ b) ** 2).sum())
        want = ((N - p) * np.log(2 * np.pi) + (N - p) * np.log(s2)
                + np.linalg.slogdet(X.T @ X)[1] + rss / s2)
        assert got == pytest.approx(want, abs=1e-10)

    def test_gradient_matches_central_differences(self, rng):
        design = make_design(S=3, rows=15, p=3, q=3, seed=5)
        y = simulate_lmm(design, [0.2, -0.4, 0.9], [0.5, 0.3, 0.1], 0.8, seed=6)
        w = rng.uniform(0.5, 1.5, size=len(y))
        h = 1e-6
        for _ in range(20):
            theta = rng.normal(scale=0.7, size=4)
            grad = reml_objective_grad(theta, design, y, w)
            for i in range(4):
                e = np.zeros(4)
                e[i] = h
                fd = (reml_objective(theta + e, design, y, w)
                      - reml_objective(theta - e, design, y, w)) / (2 * h)
                assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_shared_variance_map(self, rng):
        design = make_design(S=4, rows=10, p=2, q=2, seed=7, shared_map=True)
        y = simulate_lmm(design, [0.5, 0.2], [0.4], 0.7, seed=8)
        theta = np.array([np.log(0.4), np.log(0.7)])
        fast = reml_objective(theta, design, y)
        dense = dense_reml_objective(theta, design.X, design.Z, y,
                                     design.subject_index, design.vc_map)
        assert fast == pytest.approx(dense, abs=1e-8)

    def test_overflow_flagged_not_crashed(self):
        design = make_design(S=2, rows=8, p=2, q=1, seed=9)
        y = simulate_lmm(design, [0.1, 0.1], [0.5], 1.0, seed=9)
        obj = reml_objective(np.array([800.0, 0.0]), design, y)
        assert np.isinf(obj)


class TestRemlFit:
    def test_pure_noise_intercept_only(self):
        # seed chosen so the closed-form estimate is exactly at the zero
        # boundary (between-group mean square below the within mean square)
        design = make_design(S=6, rows=20, p=1, q=1, seed=10)
        rng = np.random.default_rng(13)
        y = rng.normal(loc=2.5, scale=1.0, size=design.X.shape[0])
        assert closed_form_oneway(y, 6, 20)[0] == 0.0
        fit = reml_fit(design, y)
        assert fit.beta[0] == pytest.approx(y.mean(), abs=0.05)
        assert fit.vc.tau[0] == 0.0
        assert fit.vc.at_bound[0]

    def test_balanced_oneway_closed_form(self):
        for seed in range(20):
            G, n = 10, 10
            design = oneway_design(G, n)
            y = simulate_lmm(design, [0.0], [1.0], 1.0, seed=seed)
            fit = reml_fit(design, y)
            tau, sigma2 = closed_form_oneway(y, G, n)
            assert fit.vc.tau[0] == pytest.approx(tau, abs=1e-6)
            assert fit.vc.sigma2 == pytest.approx(sigma2, abs=1e-6)

    def test_random_intercept_recovery(self):
        errs_tau, errs_sig = [], []
        design = make_design(S=40, rows=50, p=1, q=1, seed=0)
        for rep in range(50):
            y = simulate_lmm(design, [0.0], [1.0], 1.0, seed=1000 + rep)
            fit = reml_fit(design, y)
            errs_tau.append(abs(fit.vc.tau[0] - 1.0))
            errs_sig.append(abs(fit.vc.sigma2 - 1.0))
        assert np.median(errs_tau) < 0.15
        assert np.median(errs_sig) < 0.15

    def test_gls_normal_equations(self, rng):
        design = make_design(S=5, rows=25, p=4, q=2, seed=12)
        y = simulate_lmm(design, [1.0, 0.3, -0.2, 0.5], [0.6, 0.2], 0.9, seed=13)
        fit = reml_fit(design, y)
        ss = _build_suffstats(design, y)
        res = _core_eval(fit.vc.tau, fit.vc.sigma2, ss, want_grad=False, want_fit=True)
        # X'V^{-1}(y - X beta) == g - H beta, both from the same evaluation
        H = np.linalg.inv(res["beta_cov"])
        g = H @ res["beta"]
        resid_norm = np.max(np.abs(g - H @ fit.beta))
        assert resid_norm < 1e-6 * max(np.max(np.abs(g)), 1.0)

    def test_beta_cov_is_symmetric_psd(self, rng):
        design = make_design(S=5, rows=20, p=3, q=2, seed=14)
        y = simulate_lmm(design, [0.1, 0.2, 0.3], [0.4, 0.1], 0.5, seed=15)
        fit = reml_fit(design, y)
        np.testing.assert_allclose(fit.beta_cov, fit.beta_cov.T, atol=1e-12)
        assert np.all(np.linalg.eigvalsh(fit.beta_cov) > -1e-12)
        assert fit.residual_df == design.X.shape[0] - design.X.shape[1]

    def test_blup_shrinkage_limits(self):
        # two subjects with distinct offsets: small tau shrinks predictions
        # toward zero, large tau approaches per-subject mean offsets
        design = make_design(S=2, rows=40, p=1, q=1, seed=16)
        rng = np.random.default_rng(17)
        offsets = np.array([1.0, -1.0])
        y = offsets[design.subject_index] + rng.normal(scale=0.5, size=80)
        ss = _build_suffstats(design, y)
        small = _core_eval(np.array([1e-6]), 0.25, ss, want_grad=False, want_fit=True)
        large = _core_eval(np.array([1e6]), 0.25, ss, want_grad=False, want_fit=True)
        assert np.max(np.abs(small["blups"])) < 1e-3
        per_subject_offset = np.array(
            [y[design.subject_index == s].mean() for s in range(2)]
        ) - small["beta"][0]
        np.testing.assert_allclose(large["blups"][:, 0],
                                   y.reshape(2, 40).mean(axis=1) - large["beta"][0],
                                   atol=1e-3)

    def test_rank_deficient_names_column(self):
        design = make_design(S=3, rows=10, p=3, q=1, seed=18)
        design.X[:, 2] = 2.0 * design.X[:, 1]
        y = np.arange(30.0)
        with pytest.raises(DataError, match="x2|x1"):
            reml_fit(design, y)

    def test_threads_do_not_change_results(self):
        design = make_design(S=6, rows=30, p=3, q=2, seed=19)
        y = simulate_lmm(design, [0.5, -0.5, 0.2], [0.3, 0.2], 0.6, seed=20)
        fit1 = reml_fit(design, y)
        set_threads(4)
        try:
            fit4 = reml_fit(design, y)
        finally:
            set_threads(1)
        np.testing.assert_array_equal(fit1.beta, fit4.beta)
        np.testing.assert_array_equal(fit1.vc.tau, fit4.vc.tau)


class TestPql:
    def test_reduces_to_irls_without_random_part(self, rng):
        N = 600
        X = np.column_stack([np.ones(N), rng.normal(size=(N, 2))])
        eta = X @ np.array([0.4, 0.9, -0.6])
        y = (rng.uniform(size=N) < expit(eta)).astype(float)
        design = make_design(S=2, rows=N // 2, p=3, q=0, seed=21)
        design.X = X
        fit = pql_fit(design, y)
        beta_irls = irls_logistic(X, y)
        np.testing.assert_allclose(fit.beta, beta_irls, atol=1e-6)

    def test_all_zero_response_separation(self):
        design = make_design(S=2, rows=10, p=2, q=1, seed=22)
        with pytest.raises(SeparationError):
            pql_fit(design, np.zeros(20))

    def test_perfectly_separating_column(self, rng):
        design = make_design(S=2, rows=20, p=2, q=0, seed=23)
        y = (design.X[:, 1] > 0).astype(float)
        with pytest.raises(SeparationError, match="separates"):
            pql_fit(design, y)

    def test_binary_response_required(self):
        design = make_design(S=2, rows=10, p=2, q=1, seed=24)
        with pytest.raises(DataError, match="binary"):
            pql_fit(design, np.linspace(0, 1, 20))

    def test_tiny_instance_matches_brute_force(self, rng):
        # 3 subjects x 10 dyads, one random intercept variance: at
        # convergence the estimated (tau, sigma2) must maximize the
        # restricted likelihood of the final working model, found here by
        # grid search plus 1-D polish on the dense evaluation
        design = make_design(S=3, rows=10, p=2, q=1, seed=25)
        eta_true = design.X @ np.array([0.3, 0.8])
        eta_true += np.repeat(np.array([0.5, -0.2, -0.3]), 10)
        y = (np.random.default_rng(26).uniform(size=30) < expit(eta_true)).astype(float)
        fit = pql_fit(design, y)
        mu = fit.fitted_probs
        w = mu * (1 - mu)
        b_rows = fit.blups[design.subject_index]
        eta = design.X @ fit.beta + (design.Z * b_rows).sum(axis=1)
        ystar = eta + (y - mu) / w

        def dense_at(log_tau, log_s2):
            return dense_reml_objective(
                np.array([log_tau, log_s2]), design.X, design.Z, ystar,
                design.subject_index, design.vc_map, w,
            )

        # grid over tau with sigma2 profiled per grid point, then a joint
        # derivative-free polish from the best grid point
        best = (np.inf, None, None)
        for lt in np.linspace(np.log(1e-6), np.log(10.0), 60):
            r = minimize_scalar(lambda ls: dense_at(lt, ls),
                                bounds=(np.log(1e-4), np.log(100.0)), method="bounded")
            if r.fun < best[0]:
                best = (r.fun, lt, r.x)
        from scipy.optimize import minimize as sp_minimize

        polish = sp_minimize(lambda t: dense_at(t[0], t[1]),
                             np.array([best[1], best[2]]), method="Nelder-Mead",
                             options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 2000})
        tau_star, s2_star = np.exp(polish.x[0]), np.exp(polish.x[1])
        assert fit.vc.tau[0] == pytest.approx(tau_star, abs=1e-4)
        assert fit.vc.sigma2 == pytest.approx(s2_star, abs=1e-4)

    def test_fitted_probs_in_open_interval(self, small_fit):
        p = small_fit.presence.fitted_probs
        assert np.all(p > 0) and np.all(p < 1)


class TestDropZeroVariance:
    def _fit_with_bounds(self, names, bounds):
        vc = VarianceComponents(
            names=tuple(names), tau=np.array([0.0 if b else 0.1 for b in bounds]),
            sigma2=1.0, at_bound=np.array(bounds),
        )
        return type("FakeFit", (), {"vc": vc})()

    def test_unchanged_without_bounds(self):
        spec = ModelSpec()
        names = ["intercept", "C_avg", "E_avg", "k_diff", "Q_net", "l_avg",
                 "dist", "dist2"] + [f"node_{v}" for v in range(5)]
        fit = self._fit_with_bounds(names, [False] * len(names))
        assert drop_zero_variance(fit, spec).to_dict() == spec.to_dict()

    def test_two_components_drop_q_by_two(self, small_tables):
        from twopartnet.dyaddesign import build_design

        table, _ = small_tables
        spec = ModelSpec()
        full = build_design(table, spec, 10)
        names = list(full.vc_names)
        bounds = [False] * len(names)
        bounds[names.index("E_avg")] = True
        bounds[names.index("node_3")] = True
        fit = self._fit_with_bounds(names, bounds)
        reduced = drop_zero_variance(fit, spec)
        shrunk = build_design(table, reduced, 10)
        assert shrunk.q == full.q - 2
        assert "E_avg" not in reduced.random
        assert 3 in reduced.excluded_random_nodes

    def test_all_at_bound_empties_random_part(self):
        spec = ModelSpec(random=("intercept", "dist"))
        fit = self._fit_with_bounds(["intercept", "dist"], [True, True])
        reduced = drop_zero_variance(fit, spec)
        assert reduced.random == ()


class TestFitTwoPart:
    def test_constant_presence_rejected(self, small_study):
        table = small_study.dyads.copy()
        table["R"] = 1
        table["S"] = table["S"].fillna(0.5)
        with pytest.raises(DataError, match="presence response constant"):
            fit_two_part(table, ModelSpec(random=("intercept",)), n_nodes=10)

    def test_parts_share_columns(self, small_fit):
        assert small_fit.presence.beta_names == small_fit.strength.beta_names

    def test_strength_rows_subset(self, small_fit, small_study):
        assert small_fit.strength.n_rows == int(small_study.dyads["R"].sum())
        assert small_fit.presence.n_rows == len(small_study.dyads)

    def test_errors_labeled_by_part(self, small_study):
        table = small_study.dyads.copy()
        table["R"] = 0
        table["S"] = np.nan
        with pytest.raises((DataError, SeparationError), match="presence part|presence"):
            fit_two_part(table, ModelSpec(random=("intercept",)), n_nodes=10)
