import numpy as np
import pytest
from scipy import stats

from penfmr.errors import EmptySetError
from penfmr.model import FmrParams
from penfmr.penalties import PenaltySpec
from penfmr.selection import TuningGrid
from penfmr.simbench import (
    SamScenario,
    SimScenario,
    center_across_methods,
    coefficient_partition,
    generate_dataset,
    generate_sam_dataset,
    make_test_dataset,
    p_n_for,
    predicted_log_likelihood,
    resolve_labels,
    run_campaign,
    sensitivity_specificity,
    stability_experiment,
    summarize_campaign,
    true_beta_standardized,
    true_params,
    variance_ratio_f_test,
    _draw_raw,
)
from penfmr.solver import FitControl, FitResult


class TestScenarioDefinitions:
    def test_p_n_table(self):
        assert p_n_for(100) == 7
        assert p_n_for(200) == 9
        assert p_n_for(400) == 12

    def test_p_n_formula_fallback(self):
        # ceil(4 * 150**0.25) - 5 = 14 - 5
        assert p_n_for(150) == 9
        assert p_n_for(50) == 6

    def test_true_coefficients_model_I(self):
        truth = true_params(SimScenario("I", 400))
        np.testing.assert_allclose(truth.intercepts, [1.0, -0.5])
        np.testing.assert_allclose(
            truth.beta[0], [0.7, 2.0, -2.0, 1.5, 0, 0, 0, 0, 0, 0, 0, 0])
        np.testing.assert_allclose(
            truth.beta[1], [2.0, 0, 0, 0, 1.0, -2.0, 0.5, 0, 0, 0, 0, 0])

    def test_true_coefficients_other_models(self):
        for model, nonzero2 in (("II", [1, 4, 5, 6]), ("III", [1, 3, 4, 5]),
                                ("IV", [1, 2, 3, 4])):
            truth = true_params(SimScenario(model, 100))
            got = sorted(l + 1 for l in np.nonzero(truth.beta[1])[0])
            assert got == nonzero2

    def test_partition_hand_counts(self):
        # (|A|, |B|) per model; |C| fills the rest
        expected = {"I": (8, 6), "II": (8, 4), "III": (8, 2), "IV": (8, 0)}
        for model, (na, nb) in expected.items():
            for n in (100, 400):
                truth = true_params(SimScenario(model, n))
                part = coefficient_partition(truth.beta)
                p = truth.beta.shape[1]
                assert len(part.set_a) == na
                assert len(part.set_b) == nb
                assert len(part.set_c) == 2 * p - na - nb

    def test_model_I_partly_uninformative_covariates(self):
        truth = true_params(SimScenario("I", 100))
        part = coefficient_partition(truth.beta)
        partly = sorted({l + 1 for (_, l) in part.set_b})
        assert partly == [2, 3, 4, 5, 6, 7]


class TestGenerator:
    def test_deterministic_bytes(self):
        scen = SimScenario("II", 200, seed=42)
        a, truth_a, labels_a = generate_dataset(scen)
        b, truth_b, labels_b = generate_dataset(scen)
        assert a.X.tobytes() == b.X.tobytes()
        assert a.y.tobytes() == b.y.tobytes()
        assert np.array_equal(labels_a, labels_b)

    def test_empirical_correlation(self):
        scen = SimScenario("I", 100, seed=7)
        rng = np.random.default_rng(7)
        X, _, _ = _draw_raw(scen, 100000, true_params(scen), rng)
        corr = np.corrcoef(X[:, 0], X[:, 1])[0, 1]
        assert corr == pytest.approx(0.5, abs=0.01)
        corr2 = np.corrcoef(X[:, 0], X[:, 2])[0, 1]
        assert corr2 == pytest.approx(0.25, abs=0.015)

    def test_degenerate_mixing(self):
        scen = SimScenario("I", 100, pi1=1.0, seed=3)
        _, _, labels = generate_dataset(scen)
        assert np.all(labels == 0)

    def test_responses_within_trial_range(self):
        ds, _, _ = generate_dataset(SimScenario("III", 100, seed=1))
        assert ds.y.min() >= 0 and ds.y.max() <= 10

    def test_dataset_is_standardized(self):
        ds, _, _ = generate_dataset(SimScenario("I", 200, seed=2))
        np.testing.assert_allclose(ds.X.mean(axis=0), 0, atol=1e-10)
        np.testing.assert_allclose(ds.X.var(axis=0, ddof=1), 1, atol=1e-8)

    def test_test_dataset_uses_training_scale(self):
        scen = SimScenario("I", 100, seed=5)
        ds, truth, _ = generate_dataset(scen)
        test = make_test_dataset(scen, truth, 99, 500,
                                 ds.standardization_stats)
        assert test.n == 500
        assert np.array_equal(test.standardization_stats,
                              ds.standardization_stats)


class TestResolveLabels:
    def test_identity(self):
        beta = np.array([[1.0, 0.0], [0.0, 2.0]])
        assert resolve_labels(beta, beta) == (0, 1)

    def test_swap(self):
        beta = np.array([[1.0, 0.0], [0.0, 2.0]])
        assert resolve_labels(beta[::-1], beta) == (1, 0)

    def test_tie_breaks_to_identity(self):
        beta = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert resolve_labels(beta, beta) == (0, 1)

    def test_three_components(self):
        rng = np.random.default_rng(0)
        beta = rng.standard_normal((3, 4))
        perm = (2, 0, 1)
        shuffled = beta[list(perm)]
        got = resolve_labels(shuffled, beta)
        np.testing.assert_allclose(shuffled[list(got)], beta)


class TestScoring:
    def test_perfect_pattern(self):
        truth = true_params(SimScenario("I", 100))
        part = coefficient_partition(truth.beta)
        sens, spec = sensitivity_specificity(truth.beta, part)
        assert (sens, spec) == (1.0, 1.0)

    def test_dense_estimate(self):
        truth = true_params(SimScenario("I", 100))
        part = coefficient_partition(truth.beta)
        sens, spec = sensitivity_specificity(np.ones_like(truth.beta), part)
        assert (sens, spec) == (1.0, 0.0)

    def test_empty_sets_raise(self):
        with pytest.raises(EmptySetError):
            sensitivity_specificity(np.ones((2, 2)),
                                    coefficient_partition(np.ones((2, 2))))
        with pytest.raises(EmptySetError):
            sensitivity_specificity(np.zeros((2, 2)),
                                    coefficient_partition(np.zeros((2, 2))))


class TestCentering:
    def test_identical_methods_center_to_zero(self):
        values = {"a": np.array([1.0, 2.0]), "b": np.array([1.0, 2.0])}
        centered = center_across_methods(values)
        assert np.all(centered["a"] == 0.0) and np.all(centered["b"] == 0.0)

    def test_centered_values_sum_to_zero(self):
        rng = np.random.default_rng(1)
        values = {m: rng.normal(size=6) for m in "abcd"}
        centered = center_across_methods(values)
        total = sum(centered.values())
        np.testing.assert_allclose(total, 0.0, atol=1e-9)

    def test_truth_beats_corruption_out_of_sample(self):
        scen = SimScenario("I", 200, seed=11)
        ds, truth, _ = generate_dataset(scen)
        test = make_test_dataset(scen, truth, 12, 4000, ds.standardization_stats)
        beta_std = true_beta_standardized(truth, ds.standardization_stats)
        icpt_std = truth.intercepts + truth.beta @ ds.standardization_stats[:, 0]
        params_std = FmrParams(beta=beta_std, intercepts=icpt_std,
                               dispersions=truth.dispersions,
                               mixing=truth.mixing)
        good = FitResult(params=params_std, responsibilities=None, loglik=0.0,
                         penalized_objective=0.0, n_nonzero=0,
                         objective_trace=np.zeros(1), converged=True,
                         start_index=0)
        rng = np.random.default_rng(13)
        corrupted = FmrParams(
            beta=params_std.beta + rng.normal(scale=0.8,
                                              size=params_std.beta.shape),
            intercepts=params_std.intercepts,
            dispersions=params_std.dispersions, mixing=params_std.mixing)
        bad = FitResult(params=corrupted, responsibilities=None, loglik=0.0,
                        penalized_objective=0.0, n_nonzero=0,
                        objective_trace=np.zeros(1), converged=True,
                        start_index=0)
        assert predicted_log_likelihood(good, test) > predicted_log_likelihood(
            bad, test)


class TestVarianceRatioFTest:
    def test_matches_scipy_tail(self):
        F, p = variance_ratio_f_test(2.0, 1.0, 30, 40)
        assert F == pytest.approx(2.0)
        assert p == pytest.approx(2 * stats.f.sf(2.0, 30, 40), rel=1e-12)

    def test_symmetric_in_inversion(self):
        _, p1 = variance_ratio_f_test(1.8, 1.0, 49, 49)
        _, p2 = variance_ratio_f_test(1.0, 1.8, 49, 49)
        assert p1 == pytest.approx(p2, rel=1e-12)

    def test_unit_ratio_has_p_one(self):
        _, p = variance_ratio_f_test(1.0, 1.0, 49, 49)
        assert p == pytest.approx(1.0)


class TestStabilityExperiment:
    def test_identical_specs_ratio_one(self):
        scen = SamScenario(n=80, s=15, K=2, p=4, seed=21)
        data, _, _ = generate_sam_dataset(scen)
        control = FitControl(seed=1, max_em_iter=100)
        result = stability_experiment(data, 2, PenaltySpec("NONE"),
                                      PenaltySpec("NONE"), n_restarts=3,
                                      seed=5, control=control)
        assert result.variance_ratio == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(result.loglik_penalized,
                                   result.loglik_unpenalized)

    def test_requires_two_restarts(self):
        scen = SamScenario(n=50, s=10, K=2, p=4, seed=22)
        data, _, _ = generate_sam_dataset(scen)
        with pytest.raises(ValueError):
            stability_experiment(data, 2, PenaltySpec("NONE"),
                                 PenaltySpec("NONE"), n_restarts=1)


class TestCampaign:
    def test_single_replicate_rows(self):
        scen = SimScenario("IV", 100, seed=0)
        grid = TuningGrid(n_lambdas=4, gammas=(1.0,))
        control = FitControl(n_starts=3, max_em_iter=200)
        rows = run_campaign([scen], methods=("MIXGL1",), n_replicates=2,
                            grid=grid, control=control, n_test=500,
                            base_seed=3, n_jobs=1)
        assert len(rows) == 2
        for row in rows:
            assert 0.0 <= row["sensitivity"] <= 1.0
            assert 0.0 <= row["specificity"] <= 1.0
            assert row["pred_loglik_centered"] == 0.0  # single method centers out
        summary = summarize_campaign(rows)
        assert len(summary) == 1
        assert summary[0]["n_ok"] == 2

    def test_campaign_deterministic_across_jobs(self):
        scen = SimScenario("IV", 100, seed=0)
        grid = TuningGrid(n_lambdas=3, gammas=(1.0,))
        control = FitControl(n_starts=2, max_em_iter=150)
        kwargs = dict(methods=("MIXGL2",), n_replicates=2, grid=grid,
                      control=control, n_test=200, base_seed=9)
        rows1 = run_campaign([scen], n_jobs=1, **kwargs)
        rows2 = run_campaign([scen], n_jobs=2, **kwargs)
        for r1, r2 in zip(rows1, rows2):
            for key in ("sensitivity", "specificity", "pred_loglik"):
                assert r1[key] == r2[key]
