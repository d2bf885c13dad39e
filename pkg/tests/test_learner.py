"""Optimistic regularized value iteration: bonuses, epochs, regression and policy updates."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from errors import RejectedInputError
from instances import one_hot_table, random_tabular_mdp
from learner import (CompactPolicy, EpisodeDiagnostics, ExplicitPolicy, Hyperparams, QIterate, act,
                     augmented_bonus_valid, bonus, bonus_valid, epoch_boundary_check,
                     epoch_bound, new_learner_state, policy_update, process_episode, q_linear_param,
                     ridge_regress_value, theoretical_hyperparams, to_checkpoint, value_update)
from mdp_core import FeatureMap
from numerics import rank_one_update


def _hp(d, n_actions, **overrides):
    params = dict(eta=1.0, beta=1.0, omega=1.0, alpha=1.0, gamma=0.9, d=d, n_actions=n_actions)
    params.update(overrides)
    return Hyperparams(**params)


def _one_hot_features(n_states=2, n_actions=2):
    return FeatureMap(one_hot_table(n_states, n_actions), bound=1.0)


class TestHyperparams:

    def test_q_max(self):
        hp = _hp(2, 2, omega=1.0, alpha=2.0, r_max=1.0)
        assert hp.q_max == pytest.approx(20.0)
        assert hp.heaven_value == pytest.approx(10.0)

    def test_theory_schedule(self):
        hp = theoretical_hyperparams(8, 0.9, 4, 1.0, 2, 0.1, 1.0)
        assert hp.omega == pytest.approx(math.log(8))
        assert hp.alpha == pytest.approx(2 * math.log(8))
        assert hp.eta > 0 and hp.beta > 0

    def test_episode_length_cap(self):
        hp = theoretical_hyperparams(100, 0.9, 2, 1.0, 2, 0.1, 1.0)
        assert hp.l_max == pytest.approx(10 * math.log(1000))
        assert hp.l_max == pytest.approx(69.08, abs=0.01)

    def test_single_action_keeps_eta_finite(self):
        hp = theoretical_hyperparams(10, 0.9, 1, 1.0, 1, 0.1, 1.0)
        assert math.isfinite(hp.eta) and hp.eta > 0

    def test_rejects_single_episode(self):
        with pytest.raises(RejectedInputError):
            theoretical_hyperparams(1, 0.9, 2, 1.0, 2, 0.1, 1.0)

    def test_rejects_non_positive_eta(self):
        with pytest.raises(ValidationError):
            _hp(2, 2, eta=0.0)


class TestBonus:

    def test_zero_feature(self):
        state = new_learner_state(_hp(2, 1), FeatureMap(np.zeros((1, 1, 2)), bound=1.0))
        assert bonus(state, state.hp, np.zeros(2)) == 0.0

    def test_feature_on_the_bound(self):
        hp = _hp(2, 1, beta=3.0)
        state = new_learner_state(hp, FeatureMap(np.zeros((1, 1, 2)), bound=1.0))
        assert bonus(state, hp, [0.6, 0.8]) == pytest.approx(3.0)

    def test_anchored_quadratic_form(self):
        hp = _hp(2, 1, beta=2.0)
        state = new_learner_state(hp, FeatureMap(np.zeros((1, 1, 2)), bound=1.0))
        state.cov = rank_one_update(state.cov, [1.0, 0.0]).with_anchor()
        assert bonus(state, hp, [1.0, 1.0]) == pytest.approx(2.0 * math.sqrt(1.5))

    def test_heaven_has_no_bonus(self):
        hp = _hp(2, 1, beta=5.0)
        state = new_learner_state(hp, FeatureMap(np.zeros((1, 1, 2)), bound=1.0))
        assert bonus(state, hp, None) == 0.0


class TestEpochBoundary:

    def _state(self):
        hp = _hp(1, 1)
        return new_learner_state(hp, FeatureMap(np.ones((1, 1, 1)), bound=1.0)), hp

    def test_first_episode_always_opens_an_epoch(self):
        state, hp = self._state()
        opened, state = epoch_boundary_check(state, hp)
        assert opened
        assert state.epoch_index == 1
        assert state.epoch_start_episode == 1

    def test_doubled_determinant_opens_an_epoch(self):
        state, hp = self._state()
        _, state = epoch_boundary_check(state, hp)
        state.cov = rank_one_update(state.cov, [1.0])
        opened, state = epoch_boundary_check(state, hp)
        assert opened
        assert state.epoch_index == 2
        np.testing.assert_allclose(state.cov.anchor_inv, [[0.5]])

    def test_small_growth_keeps_the_epoch(self):
        state, hp = self._state()
        _, state = epoch_boundary_check(state, hp)
        state.cov = rank_one_update(state.cov, [0.5])
        opened, state = epoch_boundary_check(state, hp)
        assert not opened
        assert state.epoch_index == 1

    def test_new_epoch_restarts_uniform(self):
        hp = _hp(4, 2)
        features = _one_hot_features()
        state = new_learner_state(hp, features)
        process_episode(state, hp, [(0, 1, 1)], np.full(4, 0.5))
        assert state.policy.episode_count == 1
        process_episode(state, hp, [(0, 1, 1)] * 5, np.full(4, 0.5))
        assert state.epoch_index == 2
        assert state.policy.episode_count == 1

    def test_epoch_bound_floor(self):
        assert epoch_bound(3, 1.0, 0) == 1.0
        assert epoch_bound(2, 1.0, 100) == pytest.approx(10 * math.log(51))


class TestRidgeRegression:

    def test_empty_dataset(self):
        state = new_learner_state(_hp(4, 2), _one_hot_features())
        np.testing.assert_array_equal(ridge_regress_value(state, lambda x: 1.0), np.zeros(4))

    def test_zero_value(self):
        hp = _hp(4, 2)
        state = new_learner_state(hp, _one_hot_features())
        process_episode(state, hp, [(0, 0, 1), (1, 1, 0)], np.zeros(4))
        np.testing.assert_array_equal(ridge_regress_value(state, np.zeros(2)), np.zeros(4))

    def test_single_sample_solve(self):
        hp = _hp(4, 2)
        state = new_learner_state(hp, _one_hot_features())
        phi = state.features.at(0, 0)
        state.cov = rank_one_update(state.cov, phi)
        state.transitions.append((0, 0, 1))
        state.next_state_sums[:, 1] += phi
        np.testing.assert_allclose(ridge_regress_value(state, np.array([0.0, 3.0])), [1.5, 0.0, 0.0, 0.0])

    def test_evaluates_visited_states_only(self):
        hp = _hp(4, 2)
        state = new_learner_state(hp, _one_hot_features())
        process_episode(state, hp, [(0, 0, 1)], np.zeros(4))
        seen = []
        ridge_regress_value(state, lambda x: seen.append(x) or 1.0)
        assert seen == [1]


class TestQUpdate:

    def test_zero_parameters_leave_bonus_and_ascension(self):
        hp = _hp(4, 2, beta=2.0, alpha=1.0, omega=1.0)
        state = new_learner_state(hp, _one_hot_features())
        theta = q_linear_param(state, hp, np.zeros(4), np.zeros(4))
        np.testing.assert_array_equal(theta, np.zeros(4))
        q = QIterate(theta, np.eye(4)).values(hp, state.features.of_state(0), 0)
        p = 1.0 / (1.0 + math.exp(-(2.0 - 1.0)))
        np.testing.assert_allclose(q, (1 - p) * 2.0 + p * hp.heaven_value)

    def test_huge_bonus_reaches_heaven_value(self):
        hp = _hp(4, 2, beta=1e4, alpha=10.0, omega=1.0)
        q = QIterate(np.zeros(4), np.eye(4)).values(hp, _one_hot_features().of_state(1), 1)
        np.testing.assert_allclose(q, hp.heaven_value)

    def test_exact_model_gives_bellman_backup(self, rng):
        mdp = random_tabular_mdp(3, 2, 0.8, rng)
        hp = _hp(mdp.dim, 2, gamma=0.8, beta=0.0, eta=2.0, ascension="none")
        state = new_learner_state(hp, mdp.features, exact_m_factor=mdp.m_factor)
        for k in range(4):
            process_episode(state, hp, [(0, 1, 2), (2, 0, 1)], mdp.reward_weights)
            diag = state.diagnostics
            expected = mdp.reward + mdp.gamma * mdp.kernel @ diag.v_k
            np.testing.assert_allclose(diag.q_next, expected, atol=1e-12)

    def test_indicator_rule_ascends_at_the_cap(self):
        hp = _hp(4, 2, beta=0.0, ascension="indicator")
        state = new_learner_state(hp, _one_hot_features())
        w = np.array([1.0, 0.0, 0.0, 0.0])
        process_episode(state, hp, [], w * hp.heaven_value)
        assert isinstance(state.policy, ExplicitPolicy)
        np.testing.assert_array_equal(state.diagnostics.p_plus, [[1.0, 0.0], [0.0, 0.0]])


class TestValueUpdate:

    def test_constant_q(self):
        hp = _hp(4, 2)
        features = _one_hot_features()
        policy = ExplicitPolicy.uniform(hp, 2)
        assert value_update(policy, lambda x: np.array([2.5, 2.5]), 0, features) == pytest.approx(2.5)

    def test_deterministic_policy(self):
        hp = _hp(4, 2)
        features = _one_hot_features()
        policy = ExplicitPolicy(hp, np.array([[0.0, -1e6], [0.0, 0.0]]))
        assert value_update(policy, lambda x: np.array([1.25, 9.0]), 0, features) == pytest.approx(1.25)

    def test_bounded_by_q_max(self, rng):
        hp = _hp(4, 2)
        features = _one_hot_features()
        for _ in range(100):
            policy = ExplicitPolicy(hp, rng.normal(size=(2, 2)))
            q = rng.uniform(-hp.q_max, hp.q_max, size=2)
            assert abs(value_update(policy, lambda x: q, 1, features)) <= hp.q_max


class TestPolicyUpdate:

    def test_zero_theta_keeps_probabilities(self):
        hp = _hp(4, 2, beta=0.0, ascension="none")
        features = _one_hot_features()
        policy = CompactPolicy(hp, np.array([0.3, -0.2, 1.0, 0.0]), 1, np.eye(4))
        updated = policy_update(policy, QIterate(np.zeros(4), np.eye(4)), features)
        np.testing.assert_allclose(updated.to_tabular(features).probs, policy.to_tabular(features).probs,
                                   atol=1e-15)

    def test_favored_action_gains_mass(self):
        hp = _hp(4, 2)
        features = _one_hot_features()
        policy = CompactPolicy.uniform(hp, np.eye(4))
        updated = policy_update(policy, QIterate(np.array([0.0, 1.0, 0.0, 0.0]), np.eye(4)), features)
        assert updated.probs_at(features, 0)[1] > 0.5


class TestAct:

    def test_fresh_policy_is_uniform(self):
        hp = _hp(4, 2)
        policy = CompactPolicy.uniform(hp, np.eye(4))
        np.testing.assert_allclose(policy.action_probs(_one_hot_features().of_state(0)), [0.5, 0.5])

    def test_dominant_score(self, rng):
        hp = _hp(4, 2, beta=0.0, ascension="none")
        policy = CompactPolicy(hp, np.array([0.0, 1e4, 0.0, 0.0]), 1, np.eye(4))
        draws = [act(policy, _one_hot_features().of_state(0), rng) for _ in range(100)]
        assert draws == [1] * 100

    def test_empirical_frequencies(self, rng):
        hp = _hp(3, 3, beta=0.0, ascension="none")
        features = FeatureMap(np.eye(3).reshape(1, 3, 3), bound=1.0)
        policy = CompactPolicy(hp, np.array([0.5, -0.3, 0.1]), 1, np.eye(3))
        probs = policy.probs_at(features, 0)
        n = 100_000
        counts = np.bincount([act(policy, features.of_state(0), rng) for _ in range(n)], minlength=3)
        sigma = np.sqrt(probs * (1 - probs) / n)
        assert np.all(np.abs(counts / n - probs) <= 4 * sigma)


class TestProcessEpisode:

    def test_empty_episode(self):
        hp = _hp(4, 2)
        state = new_learner_state(hp, _one_hot_features())
        w = np.array([0.1, 0.2, 0.3, 0.4])
        process_episode(state, hp, [], w)
        np.testing.assert_array_equal(state.cov.lam, np.eye(4))
        np.testing.assert_array_equal(state.theta_k, w)
        assert state.policy.episode_count == 1

    def test_first_target_is_zero(self):
        hp = _hp(4, 2)
        state = new_learner_state(hp, _one_hot_features())
        w = np.array([0.5, 0.0, 0.25, 1.0])
        process_episode(state, hp, [(0, 0, 1), (1, 1, 1), (1, 0, 0)], w)
        np.testing.assert_array_equal(state.diagnostics.v_k, np.zeros(2))
        np.testing.assert_array_equal(state.theta_k, w)
        assert state.steps_total == 3

    def test_rejects_wrong_weight_shape(self):
        hp = _hp(4, 2)
        state = new_learner_state(hp, _one_hot_features())
        with pytest.raises(RejectedInputError):
            process_episode(state, hp, [], np.zeros(3))

    def test_checkpoint_mirrors_state(self):
        hp = _hp(4, 2)
        state = new_learner_state(hp, _one_hot_features())
        for _ in range(3):
            process_episode(state, hp, [(0, 0, 1), (1, 1, 0)], np.full(4, 0.25))
        checkpoint = to_checkpoint(state)
        assert checkpoint.dataset_length == 6
        assert checkpoint.episode_index == 3
        assert checkpoint.epoch_index == state.epoch_index
        assert checkpoint.log_det == pytest.approx(state.cov.log_det)


class TestAugmentedValidity:

    @staticmethod
    def _diagnostics(mdp, error, bonus_value, p_plus):
        v = np.array([1.0, 3.0])
        m_hat_v = (mdp.kernel @ v).ravel()
        m_hat_v[0] += error
        shape = (mdp.n_states, mdp.n_actions)
        return EpisodeDiagnostics(episode=1, new_epoch=False, reward_weights=mdp.reward_weights,
                                  bonus=np.full(shape, bonus_value), p_plus=np.full(shape, p_plus), v_k=v,
                                  m_hat_v=m_hat_v, q_next=np.zeros(shape))

    def test_exact_estimate_is_valid(self, rng):
        mdp = random_tabular_mdp(2, 2, 0.9, rng)
        diag = self._diagnostics(mdp, 0.0, 0.0, 0.3)
        assert bonus_valid(mdp, diag)
        assert augmented_bonus_valid(mdp, diag)

    def test_error_above_bonus_is_invalid(self, rng):
        mdp = random_tabular_mdp(2, 2, 0.9, rng)
        diag = self._diagnostics(mdp, 0.3, 0.2, 0.5)
        assert not bonus_valid(mdp, diag)
        assert not augmented_bonus_valid(mdp, diag)

    def test_error_within_bonus_is_valid(self, rng):
        mdp = random_tabular_mdp(2, 2, 0.9, rng)
        diag = self._diagnostics(mdp, 0.15, 0.2, 0.5)
        assert bonus_valid(mdp, diag)
        assert augmented_bonus_valid(mdp, diag)

    def test_full_ascension_hides_the_error(self, rng):
        mdp = random_tabular_mdp(2, 2, 0.9, rng)
        diag = self._diagnostics(mdp, 0.3, 0.0, 1.0)
        assert not bonus_valid(mdp, diag)
        assert augmented_bonus_valid(mdp, diag)
