import numpy as np
import pytest

from underq.approx import GradClip, MlpSpec, Network, OptimState, zeros_like
from underq.diffusion_policy import (ActorLossWeights, DiffusionSchedule, PolicyNet, actor_loss,
                                     behavior_clone, bimodal_actions, denoise_loss, energy_distance,
                                     forward_noise, make_schedule, sample_action, sample_actions_batch)
from underq.error import ParameterError


@pytest.fixture
def schedule():
    return make_schedule()


@pytest.fixture
def policy():
    return PolicyNet.create(state_dim=2, action_dim=1, n_steps=5, hidden=(8, 8), seed=0)


def quadratic_critic(states, actions):
    """Q(s, a) = -(a - 0.3)^2 summed over action dims."""
    q = -np.sum((actions - 0.3) ** 2, axis=1)
    return q, -2.0 * (actions - 0.3)


class TestSchedule:
    """Noise schedules for short chains."""

    def test_default_endpoints(self, schedule):
        """Five steps from 0.1 to 0.8, nearly all signal gone at the end."""
        assert schedule.n_steps == 5
        assert schedule.betas[0] == pytest.approx(0.1)
        assert schedule.betas[-1] == pytest.approx(0.8)
        assert schedule.alpha_bar[5] < 0.05
        assert np.all(np.diff(schedule.betas) > 0)

    def test_alpha_bar_is_cumulative_product(self, schedule):
        """alpha_bar starts at 1 and multiplies in 1 - beta per step."""
        assert schedule.alpha_bar[0] == 1.0
        np.testing.assert_allclose(schedule.alpha_bar[1:], np.cumprod(1 - np.array(schedule.betas)))

    def test_posterior_variance(self, schedule):
        """The first step has zero posterior variance and later ones follow the closed form."""
        assert schedule.posterior_variance[1] == 0.0
        n = 3
        expected = schedule.beta(n) * (1 - schedule.alpha_bar[n - 1]) / (1 - schedule.alpha_bar[n])
        assert schedule.posterior_variance[n] == pytest.approx(expected)

    def test_single_step(self):
        """A one-step chain uses beta_max."""
        assert make_schedule(1).betas == (0.8,)

    @pytest.mark.parametrize("args", [(0,), (5, 0.0, 0.5), (5, 0.1, 1.0), (5, 0.6, 0.5)])
    def test_invalid(self, args):
        """Empty chains and endpoints outside (0, 1) or out of order are rejected."""
        with pytest.raises(ParameterError):
            make_schedule(*args)

    def test_explicit_betas_validated(self):
        """Betas must lie strictly inside (0, 1)."""
        with pytest.raises(ParameterError):
            DiffusionSchedule((0.1, 1.0))

    def test_metadata(self, schedule):
        """Metadata carries the step count and the exact betas."""
        meta = schedule.metadata()
        assert meta["diffusion_steps"] == 5
        assert tuple(float(b) for b in meta["diffusion_betas"].split(";")) == schedule.betas

    def test_forward_noise(self, schedule):
        """At step 0 the action is untouched; at step N it is mostly noise."""
        a = np.full((3, 1), 0.5)
        eps = np.ones((3, 1))
        np.testing.assert_allclose(forward_noise(schedule, a, 0, eps), a)
        noisy = forward_noise(schedule, a, np.array([5, 5, 5]), eps)
        assert np.all(np.abs(noisy - eps) < 0.2)

    def test_forward_noise_variance(self, schedule):
        """Noised actions have variance alpha_bar var(a) + 1 - alpha_bar at every step."""
        rng = np.random.default_rng(0)
        a = rng.uniform(-1, 1, size=(200_000, 1))
        for n in range(1, 6):
            noisy = forward_noise(schedule, a, n, rng.standard_normal(a.shape))
            ab = schedule.alpha_bar[n]
            assert noisy.var() == pytest.approx(ab * a.var() + 1 - ab, rel=0.02)


class TestPolicyNet:
    """Shape checks of the noise predictor."""

    def test_input_layout(self, policy):
        """Inputs are [noisy action, state, one-hot step]."""
        x = policy.inputs(np.array([[0.2]]), np.array([[1.0, -1.0]]), np.array([2]))
        np.testing.assert_array_equal(x, [[0.2, 1.0, -1.0, 0, 1, 0, 0, 0]])

    def test_mismatched_network(self, policy):
        """A network whose width does not fit the dims is rejected."""
        with pytest.raises(ParameterError):
            PolicyNet(policy.params, state_dim=3, action_dim=1, n_steps=5)


class TestSampling:
    """The reverse chain."""

    def test_actions_bounded(self, policy, schedule):
        """Sampled actions lie in [-1, 1]."""
        states = np.random.default_rng(0).normal(size=(200, 2))
        actions = sample_actions_batch(policy, schedule, states, np.random.default_rng(1)).actions
        assert actions.shape == (200, 1)
        assert np.all(np.abs(actions) <= 1.0)

    def test_seeded_sampling_is_deterministic(self, policy, schedule):
        """Same params, state and seed give the same action."""
        state = np.array([0.1, 0.2])
        np.testing.assert_array_equal(sample_action(policy, schedule, state, 3),
                                      sample_action(policy, schedule, state, 3))

    def test_needs_a_noise_source(self, policy, schedule):
        """Sampling without rng or noise is an error."""
        with pytest.raises(ParameterError):
            sample_actions_batch(policy, schedule, np.zeros((1, 2)))

    def test_noise_shape_checked(self, policy, schedule):
        """Explicit noise must have one row per chain step."""
        with pytest.raises(ParameterError):
            sample_actions_batch(policy, schedule, np.zeros((2, 2)), noise=np.zeros((4, 2, 1)))

    def test_last_step_clips_the_prediction(self):
        """With a zero noise predictor one step returns clip(a^1 / sqrt(alpha_bar_1)); clipped rows pass no gradient."""
        one_step = make_schedule(1)
        net = PolicyNet(zeros_like(MlpSpec(3, 1, (4,))), state_dim=1, action_dim=1, n_steps=1)
        noise = np.array([[[0.1], [2.0]]])
        result = sample_actions_batch(net, one_step, np.zeros((2, 1)), noise=noise, reparameterized=True)
        np.testing.assert_allclose(result.actions[:, 0], [0.1 / np.sqrt(0.2), 1.0])
        assert not np.any(result.backward(np.array([[0.0], [1.0]])))
        assert np.any(result.backward(np.array([[1.0], [0.0]])))

    def test_reparameterized_gradient(self, policy, schedule):
        """The chain gradient matches central differences with the noise held fixed."""
        rng = np.random.default_rng(4)
        states = rng.normal(size=(6, 2))
        noise = 0.3 * rng.standard_normal((5, 6, 1))
        upstream = rng.normal(size=(6, 1))
        result = sample_actions_batch(policy, schedule, states, noise=noise, reparameterized=True)
        grad = result.backward(upstream)

        def objective(flat):
            net = policy.with_params(policy.params.with_flat(flat))
            return np.sum(upstream * sample_actions_batch(net, schedule, states, noise=noise).actions)

        h = 1e-6
        for i in range(0, policy.params.flat.size, 7):
            plus, minus = policy.params.flat.copy(), policy.params.flat.copy()
            plus[i] += h
            minus[i] -= h
            numeric = (objective(plus) - objective(minus)) / (2 * h)
            assert grad[i] == pytest.approx(numeric, rel=1e-4, abs=1e-7)


class TestLosses:
    """Denoising and actor objectives."""

    def test_denoise_gradient(self, policy, schedule):
        """Denoising gradient matches central differences with steps and noise fixed."""
        rng = np.random.default_rng(0)
        states = rng.normal(size=(5, 2))
        actions = rng.uniform(-1, 1, size=(5, 1))
        steps = np.array([1, 2, 3, 4, 5])
        noise = rng.standard_normal((5, 1))
        result = denoise_loss(policy, schedule, states, actions, rng, steps, noise)
        h = 1e-6
        for i in range(0, policy.params.flat.size, 5):
            plus, minus = policy.params.flat.copy(), policy.params.flat.copy()
            plus[i] += h
            minus[i] -= h
            lp = denoise_loss(policy.with_params(policy.params.with_flat(plus)), schedule, states, actions, rng, steps, noise).loss
            lm = denoise_loss(policy.with_params(policy.params.with_flat(minus)), schedule, states, actions, rng, steps, noise).loss
            assert result.grad[i] == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-8)

    def test_eta_zero_is_pure_denoising(self, policy, schedule):
        """With eta = 0 the actor loss is exactly zeta times the denoising loss."""
        rng = np.random.default_rng(0)
        states = rng.normal(size=(8, 2))
        actions = rng.uniform(-1, 1, size=(8, 1))
        combined = actor_loss(policy, schedule, quadratic_critic, states, actions,
                              ActorLossWeights(0.0, 2.0), np.random.default_rng(9))
        plain = denoise_loss(policy, schedule, states, actions, np.random.default_rng(9))
        assert combined.loss == 2.0 * plain.loss
        np.testing.assert_array_equal(combined.grad, 2.0 * plain.grad)

    def test_actor_gradient(self, policy, schedule):
        """The combined actor gradient matches central differences under a fixed seed."""
        rng = np.random.default_rng(1)
        states = rng.normal(size=(4, 2))
        actions = rng.uniform(-1, 1, size=(4, 1))
        weights = ActorLossWeights(1.0, 0.5)

        def loss_at(flat):
            net = policy.with_params(policy.params.with_flat(flat))
            return actor_loss(net, schedule, quadratic_critic, states, actions, weights, np.random.default_rng(2))

        grad = loss_at(policy.params.flat).grad
        h = 1e-6
        for i in range(0, policy.params.flat.size, 11):
            plus, minus = policy.params.flat.copy(), policy.params.flat.copy()
            plus[i] += h
            minus[i] -= h
            numeric = (loss_at(plus).loss - loss_at(minus).loss) / (2 * h)
            assert grad[i] == pytest.approx(numeric, rel=1e-4, abs=1e-7)

    def test_weights_validated(self):
        """eta and zeta cannot both vanish or go negative."""
        with pytest.raises(ParameterError):
            ActorLossWeights(0.0, 0.0)
        with pytest.raises(ParameterError):
            ActorLossWeights(-1.0, 1.0)

    def test_untrained_loss_is_action_dim(self, schedule):
        """A predictor that outputs zero scores the noise energy, action_dim per sample."""
        rng = np.random.default_rng(3)
        states = rng.normal(size=(20_000, 2))
        actions = rng.uniform(-1, 1, size=(20_000, 3))
        silent = PolicyNet(zeros_like(MlpSpec(3 + 2 + 5, 3, (8,))), 2, 3, 5)
        assert denoise_loss(silent, schedule, states, actions, rng).loss == pytest.approx(3.0, rel=0.1)
        fresh = PolicyNet.create(2, 3, 5, hidden=(8, 8), seed=0)
        assert 0.9 * 3 < denoise_loss(fresh, schedule, states, actions, rng).loss < 1.25 * 3

    @pytest.mark.slow
    def test_critic_only_objective_finds_the_maximizer(self, schedule):
        """With zeta = 0 the policy follows a quadratic critic to its peak at 0.3."""
        net = PolicyNet.create(2, 1, 5, hidden=(32, 32), seed=0)
        trainer = Network(net.params, OptimState.for_params(net.params, 1e-3), GradClip(10.0))
        rng = np.random.default_rng(4)
        states = rng.normal(size=(512, 2))
        weights = ActorLossWeights(1.0, 0.0)
        before = sample_actions_batch(net, schedule, states, np.random.default_rng(6)).actions
        for _ in range(1500):
            idx = rng.integers(0, 512, size=64)
            result = actor_loss(net.with_params(trainer.params), schedule, quadratic_critic,
                                states[idx], np.zeros((64, 1)), weights, rng)
            trainer.apply_gradient(result.grad)
        after = sample_actions_batch(net.with_params(trainer.params), schedule, states, np.random.default_rng(6)).actions
        assert abs(after.mean() - 0.3) < 0.05
        assert np.mean(np.abs(after - 0.3)) < 0.1
        assert np.mean(np.abs(after - 0.3)) < np.mean(np.abs(before - 0.3)) / 3


class TestBehaviorCloning:
    """Fitting the policy to behavior data."""

    def test_energy_distance(self):
        """Identical samples are at distance zero, shifted ones are not."""
        x = np.random.default_rng(0).normal(size=(100, 1))
        assert energy_distance(x, x) == pytest.approx(0.0, abs=1e-12)
        assert energy_distance(x, x + 2.0) > 0.5

    def test_bimodal_actions(self):
        """Behavior actions sit near the two modes."""
        actions = bimodal_actions(1000, seed=1)
        assert actions.shape == (1000, 1)
        assert np.all(np.min(np.abs(actions - np.array([-0.8, 0.8])), axis=1) < 0.3)
        assert 0.4 < np.mean(actions < 0) < 0.6

    def test_loss_decreases(self, schedule):
        """A few hundred cloning steps reduce the denoising loss."""
        net = PolicyNet.create(1, 1, 5, hidden=(32, 32), seed=0)
        states = np.zeros((512, 1))
        _, history = behavior_clone(net, schedule, states, bimodal_actions(512), steps=300, batch_size=128)
        assert np.mean(history[-50:]) < np.mean(history[:50])

    @pytest.mark.slow
    def test_recovers_both_modes(self, schedule):
        """A cloned policy puts its samples on both behavior modes at the right places."""
        net = PolicyNet.create(1, 1, 5, hidden=(64, 64), seed=0)
        data = bimodal_actions(2000, seed=0)
        states = np.zeros((2000, 1))
        trained, history = behavior_clone(net, schedule, states, data, steps=6000, batch_size=256)
        before = sample_actions_batch(net, schedule, np.zeros((2000, 1)), np.random.default_rng(5)).actions[:, 0]
        after = sample_actions_batch(trained, schedule, np.zeros((2000, 1)), np.random.default_rng(5)).actions[:, 0]
        assert np.mean(history[-200:]) <= 0.5 * np.mean(history[:50])
        assert energy_distance(after, data) < energy_distance(before, data)
        assert 0.3 < np.mean(after < 0) < 0.7
        assert abs(after[after < 0].mean() + 0.8) < 0.1
        assert abs(after[after > 0].mean() - 0.8) < 0.1
