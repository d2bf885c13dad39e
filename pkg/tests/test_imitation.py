"""Expert data, the projected-gradient reward player and the imitation loop."""

import math

import numpy as np
import pytest

from errors import RejectedInputError
from imitation import (ExpertDataset, OgdRewardPlayer, RewardWeightState, estimate_expert_features,
                       fra_il_run, generate_expert_dataset, ogd_reward_step, project_ball, regret_decomposition,
                       sample_from_occupancy)
from instances import Instance, hard_instance_tau, tabular_to_linear
from learner import Hyperparams, theoretical_hyperparams
from mdp_core import TabularPolicy, feature_expectation, occupancy_measure


def _imitation_hp(mdp):
    return Hyperparams(eta=0.5, beta=0.5, omega=2.0, alpha=4.0, gamma=mdp.gamma, d=mdp.dim,
                       n_actions=mdp.n_actions, r_max=mdp.r_max)


class TestExpertDataset:

    def test_empty_dataset(self, hard_tau, rng):
        data = generate_expert_dataset(hard_tau.mdp, hard_tau.expert, 0, rng, hard_tau.reward_features)
        assert data.size == 0
        with pytest.raises(RejectedInputError):
            estimate_expert_features(data)

    def test_single_state_samples(self, rng):
        mdp = tabular_to_linear([[[1.0], [1.0]]], [[0.2, 0.7]], 0.9, nu0=[1.0])
        pi = TabularPolicy(np.array([[0.25, 0.75]]))
        data = generate_expert_dataset(mdp, pi, 500, rng)
        assert data.samples.shape == (500, 2)
        assert all(row.tolist() in ([1.0, 0.0], [0.0, 1.0]) for row in data.samples)

    def test_state_frequencies_match_closed_form(self, hard_tau, rng):
        n = 100_000
        data = generate_expert_dataset(hard_tau.mdp, hard_tau.expert, n, rng, hard_tau.reward_features)
        nu0 = occupancy_measure(hard_tau.mdp, hard_tau.expert).state[0]
        sigma = math.sqrt(nu0 * (1 - nu0) / n)
        assert abs(data.samples[:, 0].mean() - nu0) <= 4 * sigma

    def test_csv_round_trip(self, hard_tau, rng, tmp_path):
        data = generate_expert_dataset(hard_tau.mdp, hard_tau.expert, 20, rng, hard_tau.reward_features)
        path = str(tmp_path / "expert.csv")
        data.save_csv(path)
        np.testing.assert_array_equal(ExpertDataset.load_csv(path, 2).samples, data.samples)


class TestFeatureEstimate:

    def test_identical_samples(self):
        data = ExpertDataset(np.tile([0.3, 0.7], (5, 1)))
        np.testing.assert_allclose(estimate_expert_features(data), [0.3, 0.7])

    def test_opposite_samples(self):
        data = ExpertDataset(np.array([[1.0, -2.0], [-1.0, 2.0]]))
        np.testing.assert_allclose(estimate_expert_features(data), [0.0, 0.0])

    def test_error_shrinks_with_dataset_size(self, hard_tau, rng):
        exact = feature_expectation(hard_tau.reward_features, occupancy_measure(hard_tau.mdp, hard_tau.expert))
        errors = {}
        for tau in (100, 10_000):
            errors[tau] = np.mean([
                np.linalg.norm(estimate_expert_features(generate_expert_dataset(
                    hard_tau.mdp, hard_tau.expert, tau, rng, hard_tau.reward_features)) - exact)
                for _ in range(50)])
        assert errors[10_000] < errors[100] / 5


class TestProjectBall:

    def test_inside_is_unchanged(self):
        np.testing.assert_array_equal(project_ball([0.3, 0.4], 1.0), [0.3, 0.4])

    def test_outside_is_scaled(self):
        np.testing.assert_allclose(project_ball([3.0, 4.0], 1.0), [0.6, 0.8])

    def test_idempotent(self, rng):
        for _ in range(50):
            v = rng.normal(scale=3.0, size=4)
            once = project_ball(v, 1.5)
            np.testing.assert_allclose(project_ball(once, 1.5), once)

    def test_rejects_non_positive_radius(self):
        with pytest.raises(RejectedInputError):
            project_ball([1.0], 0.0)


class TestOgdRewardStep:

    def test_zero_gradient(self):
        state = RewardWeightState(w=np.array([0.2, 0.1]), w_max=1.0, eta_r=0.5, lambda_hat=np.array([0.4, 0.6]))
        np.testing.assert_array_equal(ogd_reward_step(state, [0.4, 0.6]).w, [0.2, 0.1])

    def test_unit_step(self):
        state = RewardWeightState(w=np.zeros(3), w_max=100.0, eta_r=0.1, lambda_hat=np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(ogd_reward_step(state, np.zeros(3)).w, [0.1, 0.0, 0.0])

    def test_step_is_projected(self):
        state = RewardWeightState(w=np.zeros(2), w_max=1.0, eta_r=10.0, lambda_hat=np.array([1.0, 0.0]))
        assert np.linalg.norm(ogd_reward_step(state, np.zeros(2)).w) == pytest.approx(1.0)


class TestSampleFromOccupancy:

    def test_zero_discount_samples_start_state(self, rng):
        mdp = tabular_to_linear([[[0.0, 1.0]], [[1.0, 0.0]]], [[0.0], [0.0]], 0.0, nu0=[1.0, 0.0])
        assert all(sample_from_occupancy(mdp, TabularPolicy.uniform(2, 1), rng) == (0, 0) for _ in range(50))

    def test_single_state_action_marginal(self, rng):
        mdp = tabular_to_linear([[[1.0], [1.0]]], [[0.0, 0.0]], 0.8, nu0=[1.0])
        pi = TabularPolicy(np.array([[0.3, 0.7]]))
        n = 20_000
        actions = np.array([sample_from_occupancy(mdp, pi, rng)[1] for _ in range(n)])
        assert abs(actions.mean() - 0.7) <= 4 * math.sqrt(0.21 / n)

    def test_pair_frequencies_match_occupancy(self, hard_tau, rng):
        pi = TabularPolicy(np.array([[0.6, 0.4], [0.2, 0.8]]))
        mu = occupancy_measure(hard_tau.mdp, pi).state_action
        n = 20_000
        counts = np.zeros_like(mu)
        for _ in range(n):
            counts[sample_from_occupancy(hard_tau.mdp, pi, rng)] += 1
        assert 0.5 * np.abs(counts / n - mu).sum() <= 0.02

    def test_unbiased_feature_estimate(self, hard_tau, rng):
        pi = TabularPolicy.uniform(2, 2)
        exact = feature_expectation(hard_tau.reward_features, occupancy_measure(hard_tau.mdp, pi))
        n = 20_000
        samples = np.array([hard_tau.reward_features[sample_from_occupancy(hard_tau.mdp, pi, rng)]
                            for _ in range(n)])
        sigma = math.sqrt(exact[0] * (1 - exact[0]) / n)
        assert abs(samples[:, 0].mean() - exact[0]) <= 4 * sigma


class TestRewardPlayer:

    def test_feeds_zero_transition_weights(self, hard_tau, rng):
        lambda_hat = np.array([0.7, 0.3])
        player = OgdRewardPlayer(hard_tau.mdp, hard_tau.reward_features, lambda_hat, 1.0, 100)
        fed = player.reward_weights(1, hard_tau.expert, rng)
        assert fed.shape == (hard_tau.mdp.dim,)
        np.testing.assert_array_equal(fed[2:], 0.0)
        assert len(player.weights) == 1

    def test_negative_rewards_are_clipped(self, hard_tau):
        player = OgdRewardPlayer(hard_tau.mdp, hard_tau.reward_features, np.zeros(2), 1.0, 100)
        fed = player._feed(np.array([0.5, -0.5]))
        np.testing.assert_allclose(fed[:2], [0.5, 0.0], atol=1e-12)
        assert player.clip_events == 1


class TestImitationRun:

    def test_uniform_expert_under_constant_reward(self, rng):
        P = rng.dirichlet(np.ones(2), size=(2, 2))
        mdp = tabular_to_linear(P, np.full((2, 2), 0.5), 0.8)
        instance = Instance(mdp, expert=TabularPolicy.uniform(2, 2))
        result = fra_il_run(instance, None, 20, _imitation_hp(mdp), seed=1)
        assert result.subopt == pytest.approx(0.0, abs=1e-9)
        assert result.mean_subopt == pytest.approx(0.0, abs=1e-9)

    def test_exact_expert_features(self, hard_tau):
        result = fra_il_run(hard_tau, None, 50, _imitation_hp(hard_tau.mdp), seed=2)
        assert result.expert_feature_error == 0.0
        assert len(result.ogd_weights) == 50
        assert all(np.linalg.norm(w) <= hard_tau.mdp.w_max + 1e-12 for w in result.ogd_weights)

    def test_decomposition_identity(self, hard_tau):
        result = fra_il_run(hard_tau, None, 40, _imitation_hp(hard_tau.mdp), seed=3, decompose=True)
        lhs, learner_term, player_term = result.decomposition
        assert lhs == pytest.approx(learner_term + player_term, abs=1e-9)

    def test_decomposition_of_expert_is_zero(self, hard_tau):
        w_true = hard_tau.mdp.reward_weights[:2]
        lhs, learner_term, player_term = regret_decomposition(
            hard_tau.mdp, hard_tau.reward_features, hard_tau.expert, [hard_tau.expert] * 3, [w_true] * 3, w_true)
        assert lhs == pytest.approx(0.0, abs=1e-12)
        assert learner_term == pytest.approx(0.0, abs=1e-12)
        assert player_term == pytest.approx(0.0, abs=1e-12)

    def test_requires_an_expert(self, hard_tau):
        with pytest.raises(RejectedInputError):
            fra_il_run(Instance(hard_tau.mdp), None, 5, _imitation_hp(hard_tau.mdp), seed=0)

    def test_expert_is_never_beaten(self):
        inst = hard_instance_tau(0.9, 0.1, 1.0, 0)
        result = fra_il_run(inst, None, 60, _imitation_hp(inst.mdp), seed=4)
        assert 0 <= result.training.output_index < 60
        assert result.subopt >= -1e-9
        assert result.mean_subopt >= -1e-9

    def test_suboptimality_decreases_with_K(self, hard_tau):
        mdp = hard_tau.mdp
        subopt = {}
        for K in (100, 1000):
            hp = theoretical_hyperparams(K, mdp.gamma, mdp.dim, mdp.features.bound, mdp.n_actions, 0.1,
                                         mdp.w_max).model_copy(update={"beta": 0.5, "eta": 0.5})
            subopt[K] = np.mean([fra_il_run(hard_tau, None, K, hp, seed=seed).mean_subopt for seed in (0, 1)])
        assert subopt[1000] < subopt[100]
