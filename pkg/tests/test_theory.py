"""Closed-form energy-reduction results checked against quadrature and MC."""

import numpy as np
import pytest
from scipy import integrate, stats

from owlab.data import SyntheticSpec, gen_esn_samples, gen_unit_contributions
from owlab.theory import (ContributionStats, EsnParams, dice_var_reduction,
                          dice_var_reduction_correlated, esn_pdf,
                          esn_rect_clip_mean, esn_rect_mean, id_reduction,
                          ood_reduction, rect_gauss_mean, var_sum_check)


def mc_mean(values, true_value, n_se=4.0):
    se = values.std(ddof=1) / np.sqrt(values.size)
    assert abs(values.mean() - true_value) <= n_se * se, (
        f"MC mean {values.mean()} vs analytic {true_value} (se {se})")


def esn_draw(mu, sigma, eps, n, seed):
    return gen_esn_samples(SyntheticSpec("esn-samples", seed=seed, mu=mu,
                                         sigma=sigma, eps=eps, count=n))


def unit_draw(means, sigmas, n, seed):
    return gen_unit_contributions(SyntheticSpec(
        "unit-contributions", seed=seed, unit_means=list(means),
        unit_sigmas=list(sigmas), count=n))


class TestRectGaussMean:
    def test_centered(self):
        assert rect_gauss_mean(0.0, 1.0) == pytest.approx(
            1 / np.sqrt(2 * np.pi), abs=1e-14)

    def test_far_right_tail(self):
        assert rect_gauss_mean(10.0, 1.0) == pytest.approx(10.0, rel=1e-10)

    def test_against_monte_carlo(self):
        rng = np.random.default_rng(0)
        x = 0.5 + 2.0 * rng.standard_normal(400_000)
        mc_mean(np.maximum(x, 0.0), rect_gauss_mean(0.5, 2.0))


class TestIdReduction:
    def test_huge_clip_changes_nothing(self):
        assert id_reduction(0.5, 1.0, 0.5 + 40.0) < 1e-12

    def test_clip_at_mean(self):
        # E[relu(x)] - E[min(relu(x), mu)] at c = mu equals sigma*phi(0)
        got = id_reduction(1.0, 1.0, 1.0)
        assert got == pytest.approx(1 / np.sqrt(2 * np.pi), abs=1e-12)

    def test_against_monte_carlo(self):
        rng = np.random.default_rng(1)
        x = 1.0 + 0.7 * rng.standard_normal(400_000)
        r = np.maximum(x, 0.0)
        mc_mean(r - np.minimum(r, 1.2), id_reduction(1.0, 0.7, 1.2))


class TestEsnPdf:
    def test_eps_zero_is_normal(self):
        grid = np.linspace(-4, 6, 101)
        params = EsnParams(mu=1.0, sigma=1.5, eps=0.0)
        np.testing.assert_allclose(esn_pdf(grid, params),
                                   stats.norm.pdf(grid, 1.0, 1.5), atol=1e-14)

    def test_integrates_to_one(self):
        params = EsnParams(mu=0.5, sigma=1.0, eps=-0.4)
        total, _ = integrate.quad(lambda x: esn_pdf(x, params), -30, 30,
                                  limit=200)
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_continuous_at_mode(self):
        params = EsnParams(mu=0.5, sigma=1.0, eps=-0.3)
        left = esn_pdf(0.5 - 1e-9, params)
        right = esn_pdf(0.5 + 1e-9, params)
        assert left == pytest.approx(right, rel=1e-6)


class TestEsnRectMean:
    def test_eps_zero_recovers_gaussian_case(self):
        for mu, sigma in [(0.25, 0.5), (1.0, 2.0), (-0.5, 1.0)]:
            assert esn_rect_mean(EsnParams(mu, sigma, 0.0)) == pytest.approx(
                rect_gauss_mean(mu, sigma), abs=1e-12)

    def test_against_monte_carlo(self):
        x = esn_draw(0.5, 1.0, -0.4, 400_000, seed=2)
        mc_mean(np.maximum(x, 0.0), esn_rect_mean(EsnParams(0.5, 1.0, -0.4)))

    def test_skew_raises_rectified_mean(self):
        # fattening the positive side lifts E[relu]
        skewed = esn_rect_mean(EsnParams(0.5, 1.0, -0.4))
        plain = esn_rect_mean(EsnParams(0.5, 1.0, 0.0))
        assert skewed > plain


class TestEsnRectClipMean:
    def test_large_c_recovers_rect_mean(self):
        params = EsnParams(0.5, 1.0, -0.25)
        assert esn_rect_clip_mean(params, 50.0) == pytest.approx(
            esn_rect_mean(params), abs=1e-10)

    def test_tiny_c_bounded(self):
        got = esn_rect_clip_mean(EsnParams(0.5, 1.0, -0.25), 0.01)
        assert 0.0 <= got <= 0.01

    def test_against_monte_carlo_grid(self):
        seed = 3
        for mu, sigma, eps, c in [(0.25, 0.5, -0.1, 0.5), (1.0, 2.0, -0.4, 1.0),
                                  (0.5, 1.0, -0.25, 2.0)]:
            x = esn_draw(mu, sigma, eps, 400_000, seed)
            seed += 1
            mc_mean(np.minimum(np.maximum(x, 0.0), c),
                    esn_rect_clip_mean(EsnParams(mu, sigma, eps), c))

    def test_against_quadrature_including_small_c(self):
        # c < mu included on purpose: the piecewise integral must handle a
        # clip threshold left of the density's mode.
        for mu, sigma, eps, c in [(1.0, 1.0, -0.4, 0.5), (0.5, 1.0, -0.25, 1.0),
                                  (0.25, 2.0, -0.1, 2.0)]:
            params = EsnParams(mu, sigma, eps)
            oracle, _ = integrate.quad(
                lambda x: min(max(x, 0.0), c) * esn_pdf(x, params),
                -30, 30, limit=400, points=[0.0, mu, c])
            assert esn_rect_clip_mean(params, c) == pytest.approx(
                oracle, abs=1e-9)


class TestOodReduction:
    def test_eps_zero_equals_id_formula(self):
        for mu, sigma, c in [(0.25, 0.5, 0.5), (1.0, 2.0, 1.0), (0.5, 1.0, 2.0)]:
            assert ood_reduction(EsnParams(mu, sigma, 0.0), c) == pytest.approx(
                id_reduction(mu, sigma, c), abs=1e-12)

    def test_internal_identity_rect_minus_clip(self):
        params = EsnParams(0.5, 1.0, -0.3)
        for c in np.linspace(0.05, 5.0, 100):
            direct = esn_rect_mean(params) - esn_rect_clip_mean(params, c)
            assert ood_reduction(params, c) == pytest.approx(direct, abs=1e-10)

    def test_nonnegative_and_nonincreasing_in_c(self):
        params = EsnParams(0.5, 1.0, -0.25)
        values = [ood_reduction(params, c) for c in np.linspace(0.1, 6.0, 60)]
        assert min(values) >= 0.0
        assert np.all(np.diff(values) <= 1e-12)

    def test_monotone_in_skew_and_scale(self):
        eps_grid = [0.0, -0.1, -0.2, -0.3, -0.4, -0.5]
        sigma_grid = [0.5, 1.0, 1.5, 2.0]
        table = np.array([[ood_reduction(EsnParams(0.5, s, e), 1.0)
                           for s in sigma_grid] for e in eps_grid])
        assert np.all(np.diff(table, axis=0) >= -1e-12)  # more skew, more cut
        assert np.all(np.diff(table, axis=1) >= -1e-12)  # wider, more cut


def make_stats(seed=4, m=10, t=4):
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.1, 2.0, m)
    variances = rng.uniform(0.2, 1.5, m)
    return ContributionStats(means, variances, np.argsort(means, kind="stable"),
                             t)


class TestDiceVarReduction:
    def test_t_zero_removes_nothing(self):
        stats_ = make_stats(t=0)
        samples = unit_draw(stats_.means, np.sqrt(stats_.variances), 2_000,
                            seed=5)
        result = dice_var_reduction(stats_, samples)
        assert result.analytic == 0.0
        assert result.empirical == pytest.approx(0.0, abs=1e-12)

    def test_t_full_removes_total_variance(self):
        stats_ = make_stats(t=10)
        samples = unit_draw(stats_.means, np.sqrt(stats_.variances), 2_000,
                            seed=6)
        assert dice_var_reduction(stats_, samples).analytic == pytest.approx(
            stats_.variances.sum(), abs=1e-12)

    def test_analytic_vs_empirical(self):
        stats_ = make_stats()
        samples = unit_draw(stats_.means, np.sqrt(stats_.variances), 300_000,
                            seed=7)
        result = dice_var_reduction(stats_, samples)
        assert result.empirical == pytest.approx(result.analytic, rel=0.05)


class TestDiceVarReductionCorrelated:
    def test_diagonal_cov_matches_independent_formula(self):
        stats_ = make_stats(t=3)
        cov = np.diag(stats_.variances[stats_.order])
        want = stats_.variances[stats_.order[:3]].sum()
        assert dice_var_reduction_correlated(cov, 3) == pytest.approx(
            want, abs=1e-12)

    def test_single_offdiagonal_hand_case(self):
        # dropping units 0,1 of three: var0 + var1 + 2*cov01
        cov = np.array([[1.0, 0.3, 0.1], [0.3, 2.0, 0.2], [0.1, 0.2, 3.0]])
        # cross terms with the kept unit count once each as covariance with
        # the dropped *sum*: Var(S) - Var(S - X0 - X1)
        want = 1.0 + 2.0 + 2 * 0.3 + 2 * 0.1 + 2 * 0.2
        assert dice_var_reduction_correlated(cov, 2) == pytest.approx(
            want, abs=1e-12)

    def test_against_monte_carlo(self):
        rng = np.random.default_rng(8)
        sigmas = 0.3 + 0.05 * np.arange(6)
        cov = np.outer(sigmas, sigmas) * 0.3 ** np.abs(
            np.subtract.outer(np.arange(6), np.arange(6)))
        draws = rng.multivariate_normal(np.zeros(6), cov, 400_000,
                                        method="cholesky")
        t = 2
        emp = draws.sum(axis=1).var(ddof=1) - draws[:, t:].sum(axis=1).var(
            ddof=1)
        assert emp == pytest.approx(dice_var_reduction_correlated(cov, t),
                                    rel=0.05)


class TestVarSumCheck:
    def test_constants_give_zero(self):
        check = var_sum_check(np.full(100, 3.0), np.full(100, -1.0))
        assert check.passed and check.expected == 0.0

    def test_independent_unit_pair(self):
        rng = np.random.default_rng(9)
        check = var_sum_check(rng.standard_normal(200_000),
                              rng.standard_normal(200_000))
        assert check.passed
        assert check.expected == pytest.approx(2.0, abs=0.05)

    def test_quarter_plus_four(self):
        rng = np.random.default_rng(10)
        check = var_sum_check(0.5 * rng.standard_normal(200_000),
                              2.0 * rng.standard_normal(200_000))
        assert check.passed
        assert check.expected == pytest.approx(4.25, abs=0.1)


class TestPositiveWeightsTransfer:
    def test_activation_cut_lowers_logits(self):
        # with strictly positive weights, every unit of activation removed by
        # clipping comes straight out of each logit
        rng = np.random.default_rng(11)
        W = rng.uniform(0.2, 1.0, (8, 3))
        x = esn_draw(0.5, 1.0, -0.4, 100_000, seed=12)
        h = np.maximum(rng.uniform(0.5, 1.5, 8)[None, :] * x[:, None], 0.0)
        clipped = np.minimum(h, 1.0)
        drop = (h - clipped) @ W
        assert np.all(drop.mean(axis=0) > 0.0)
        np.testing.assert_allclose((h @ W).mean(axis=0) - (clipped @ W).mean(
            axis=0), drop.mean(axis=0), atol=1e-10)
