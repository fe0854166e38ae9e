import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from underq.error import ConvergenceError, DomainError, ParameterError
from underq.finite_mdp import FiniteMdp, greedy_policy, policy_evaluation_linear, random_mdp
from underq.operators import (Interpretation, UnderestimateConfig, fixed_point, noisy_targets,
                              optimal_backup, standard_backup, underestimated_backup,
                              underestimation_gap, value_iteration, verify_contraction)

READINGS = [
    UnderestimateConfig(iota=0.8),
    UnderestimateConfig(iota=0.3, interpretation="quantile", noise_scale=0.5),
    UnderestimateConfig(iota=0.8, interpretation="expectile", noise_scale=0.5, tau=0.3),
]


class TestUnderestimateConfig:
    """Validation of operator settings."""

    def test_iota_zero_is_domain_error(self):
        """iota = 0 collapses the operator."""
        with pytest.raises(DomainError):
            UnderestimateConfig(iota=0.0)

    @pytest.mark.parametrize("iota", [-0.5, 1.5])
    def test_iota_range(self, iota):
        """iota outside (0, 1] is a parameter error."""
        with pytest.raises(ParameterError):
            UnderestimateConfig(iota=iota)

    def test_interpretation_from_string(self):
        """String readings are coerced to the enum."""
        assert UnderestimateConfig(interpretation="quantile").interpretation is Interpretation.NOISY_QUANTILE

    def test_too_few_noise_draws(self):
        """Noisy readings need at least 1000 draws."""
        with pytest.raises(ParameterError):
            UnderestimateConfig(interpretation="expectile", n_noise=10)

    def test_modulus_bounds(self):
        """Scaling contracts at iota * gamma, the noisy readings at gamma."""
        assert UnderestimateConfig(iota=0.5).modulus_bound(0.9) == pytest.approx(0.45)
        assert UnderestimateConfig(iota=0.5, interpretation="quantile").modulus_bound(0.9) == 0.9


class TestBackups:
    """Single sweeps of the tabular operators."""

    def test_scaling_is_iota_times_optimal(self, small_mdp):
        """The scaling reading multiplies the optimal target."""
        q = np.random.default_rng(0).normal(size=(6, 3))
        np.testing.assert_allclose(
            underestimated_backup(small_mdp, q, UnderestimateConfig(iota=0.7)),
            0.7 * optimal_backup(small_mdp, q))

    @pytest.mark.parametrize("interpretation", ["quantile", "expectile"])
    def test_noise_free_is_optimal(self, small_mdp, interpretation):
        """Without noise the noisy readings reduce to the optimal backup."""
        q = np.random.default_rng(1).normal(size=(6, 3))
        cfg = UnderestimateConfig(iota=0.2, interpretation=interpretation, tau=0.2)
        np.testing.assert_allclose(underestimated_backup(small_mdp, q, cfg), optimal_backup(small_mdp, q))

    def test_quantile_monotone_in_iota(self, small_mdp):
        """A lower quantile level gives a lower target everywhere."""
        q = np.random.default_rng(2).normal(size=(6, 3))
        low = underestimated_backup(small_mdp, q, UnderestimateConfig(0.2, "quantile", noise_scale=1.0))
        high = underestimated_backup(small_mdp, q, UnderestimateConfig(0.8, "quantile", noise_scale=1.0))
        assert np.all(low <= high)

    def test_explicit_noise(self, small_mdp):
        """Supplied noise replaces the seeded draws."""
        q = np.zeros((6, 3))
        cfg = UnderestimateConfig(0.5, "quantile", noise_scale=1.0)
        targets = noisy_targets(small_mdp, q, cfg, noise=np.zeros((4, 6, 3)))
        np.testing.assert_allclose(targets, np.broadcast_to(small_mdp.reward, (4, 6, 3)))

    def test_policy_mask(self):
        """A mask limits the max over next actions."""
        mdp = FiniteMdp(np.ones((1, 2, 1)), np.zeros((1, 2)), np.ones(1), 0.5)
        q = np.array([[1.0, 3.0]])
        np.testing.assert_allclose(optimal_backup(mdp, q), [[1.5, 1.5]])
        np.testing.assert_allclose(optimal_backup(mdp, q, policy_mask=[[True, False]]), [[0.5, 0.5]])

    def test_empty_mask_row_rejected(self):
        """Every state must keep an allowed action."""
        mdp = FiniteMdp(np.ones((1, 2, 1)), np.zeros((1, 2)), np.ones(1), 0.5)
        with pytest.raises(ParameterError):
            optimal_backup(mdp, np.zeros((1, 2)), policy_mask=[[False, False]])

    def test_standard_backup_fixed_point(self, small_mdp):
        """Q^pi is a fixed point of the policy operator."""
        policy = greedy_policy(np.random.default_rng(3).normal(size=(6, 3)))
        q_pi = policy_evaluation_linear(small_mdp, policy)
        np.testing.assert_allclose(standard_backup(small_mdp, q_pi, policy), q_pi, atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-20, 20), st.floats(0.05, 1.0))
    def test_scaling_shift(self, shift, iota):
        """Shifting Q by c shifts the scaled backup by iota * gamma * c."""
        mdp = FiniteMdp(np.full((2, 1, 2), 0.5), np.array([[1.0], [0.0]]), np.array([0.5, 0.5]), 0.9)
        q = np.array([[0.3], [-0.7]])
        cfg = UnderestimateConfig(iota=iota)
        diff = underestimated_backup(mdp, q + shift, cfg) - underestimated_backup(mdp, q, cfg)
        np.testing.assert_allclose(diff, iota * 0.9 * shift, atol=1e-9)

    @pytest.mark.parametrize("cfg", READINGS, ids=lambda c: c.interpretation.value)
    def test_monotone(self, small_mdp, cfg):
        """Q <= Q' entrywise gives T Q <= T Q' under shared noise draws."""
        rng = np.random.default_rng(4)
        for _ in range(20):
            q = rng.uniform(-10, 10, size=(6, 3))
            q_up = q + rng.uniform(0, 5, size=(6, 3))
            assert np.all(underestimated_backup(small_mdp, q, cfg) <= underestimated_backup(small_mdp, q_up, cfg) + 1e-9)


class TestContraction:
    """Empirical sup-norm moduli."""

    @pytest.mark.parametrize("cfg", READINGS, ids=lambda c: c.interpretation.value)
    def test_every_reading_contracts(self, small_mdp, cfg):
        """The observed modulus stays within the reading's bound."""
        report = verify_contraction(small_mdp, cfg, n_pairs=25, seed=1)
        assert report.passed
        assert report.max_ratio <= report.bound + 1e-9
        assert report.pairs_tested == 26

    def test_scaling_bound_is_tight(self, small_mdp):
        """The constant-shift pair attains at least 0.9 iota gamma."""
        report = verify_contraction(small_mdp, UnderestimateConfig(iota=0.6), n_pairs=5)
        assert report.constant_shift_ratio >= 0.9 * 0.6 * 0.9
        assert report.constant_shift_ratio == pytest.approx(0.54)

    def test_report_record(self, small_mdp):
        """Reports flatten to plain records."""
        record = verify_contraction(small_mdp, UnderestimateConfig(iota=0.5), n_pairs=3).as_record()
        assert record["interpretation"] == "scaling"
        assert record["bound"] == pytest.approx(0.45)

    def test_pair_count_checked(self, small_mdp):
        """At least one random pair is required."""
        with pytest.raises(ParameterError):
            verify_contraction(small_mdp, UnderestimateConfig(), n_pairs=0)

    @pytest.mark.parametrize("cfg", [
        READINGS[0],
        pytest.param(READINGS[1], marks=pytest.mark.slow),
        pytest.param(READINGS[2], marks=pytest.mark.slow),
    ], ids=lambda c: c.interpretation.value)
    def test_contracts_on_many_mdps(self, cfg):
        """Twenty random MDPs with 200 pairs each stay within the bound."""
        for seed in range(20):
            mdp = random_mdp(8, 3, seed=seed, discount=0.9)
            report = verify_contraction(mdp, cfg, n_pairs=200, seed=seed)
            assert report.passed
            assert report.max_ratio <= report.bound + 1e-9
            if cfg.interpretation is Interpretation.SCALING:
                assert report.max_ratio >= 0.9 * report.bound


class TestFixedPoint:
    """Iterating the underestimated operator."""

    def test_one_state_closed_form(self, one_state_mdp):
        """A single self-looping state with reward r converges to iota r / (1 - iota gamma)."""
        result = fixed_point(one_state_mdp, UnderestimateConfig(iota=0.8))
        assert result.q[0, 0] == pytest.approx(0.8 / (1 - 0.8 * 0.9), abs=1e-8)
        assert result.final_residual < 1e-10
        assert len(result.residuals) == result.iterations

    def test_residuals_shrink_geometrically(self, small_mdp):
        """Successive residuals contract by at most iota gamma."""
        residuals = np.array(fixed_point(small_mdp, UnderestimateConfig(iota=0.5)).residuals)
        residuals = residuals[residuals > 1e-8]
        ratios = residuals[1:] / residuals[:-1]
        assert np.all(ratios <= 0.45 + 1e-6)

    def test_iota_one_is_value_iteration(self, small_mdp):
        """With iota = 1 the fixed point is Q*, which is greedy-consistent."""
        q_star = value_iteration(small_mdp)
        q_greedy = policy_evaluation_linear(small_mdp, greedy_policy(q_star))
        np.testing.assert_allclose(q_star, q_greedy, atol=1e-8)

    def test_gap_is_non_negative(self, small_mdp):
        """With non-negative rewards the scaled fixed point never exceeds Q*."""
        assert np.all(underestimation_gap(small_mdp, UnderestimateConfig(iota=0.7)) >= -1e-9)

    def test_noisy_quantile_fixed_point(self, small_mdp):
        """The noisy quantile reading converges, and a lower level gives a lower fixed point."""
        low = fixed_point(small_mdp, UnderestimateConfig(0.1, "quantile", noise_scale=0.3), tol=1e-8)
        high = fixed_point(small_mdp, UnderestimateConfig(0.9, "quantile", noise_scale=0.3), tol=1e-8)
        assert low.final_residual < 1e-8
        assert np.all(low.q <= high.q + 1e-6)

    def test_budget_exhausted(self, small_mdp):
        """Too few sweeps raise a convergence error."""
        with pytest.raises(ConvergenceError):
            fixed_point(small_mdp, UnderestimateConfig(iota=0.9), max_iters=2)

    @pytest.mark.parametrize("cfg", READINGS[:2], ids=lambda c: c.interpretation.value)
    def test_fixed_point_is_unique(self, small_mdp, cfg):
        """Ten random starts reach the same fixed point."""
        reference = fixed_point(small_mdp, cfg).q
        rng = np.random.default_rng(5)
        for _ in range(10):
            start = rng.uniform(-50, 50, size=(6, 3))
            np.testing.assert_allclose(fixed_point(small_mdp, cfg, q0=start).q, reference, atol=1e-8)

    def test_gap_shrinks_as_iota_grows(self):
        """On twenty MDPs the gap to Q* never grows with iota."""
        for seed in range(20):
            mdp = random_mdp(8, 3, seed=seed, discount=0.9)
            gaps = [underestimation_gap(mdp, UnderestimateConfig(iota=iota)) for iota in (0.6, 0.8, 1.0)]
            assert np.all(gaps[0] >= gaps[1] - 1e-9)
            assert np.all(gaps[1] >= gaps[2] - 1e-9)
            np.testing.assert_allclose(gaps[2], 0.0, atol=1e-9)
