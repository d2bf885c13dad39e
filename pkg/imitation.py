"""
Imitation learning from expert reward features only.

An online projected-gradient reward player chases the gap between the
expert's feature expectation and the learner's, and feeds its weights as
the adversarial reward of the optimistic learner.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from config import settings
from envsim import (EXPERT_STREAM, TrainingOptions, TrainingResult, rng_stream, run_training)
from errors import RejectedInputError
from instances import Instance
from learner import Hyperparams
from mdp_core import (LinearMdp, TabularPolicy, feature_expectation, occupancy_measure,
                      return_of_policy)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ExpertDataset:
    samples: np.ndarray  # (tau_E, d_r)

    @property
    def size(self) -> int:
        return int(self.samples.shape[0])

    def save_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            for row in self.samples:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def load_csv(cls, path: str, dim: int) -> "ExpertDataset":
        with open(path, "r", encoding="utf-8") as f:
            rows = [[float(v) for v in row] for row in csv.reader(f) if row]
        return cls(np.asarray(rows, dtype=np.float64).reshape(-1, dim))


def generate_expert_dataset(mdp: LinearMdp, pi_expert: TabularPolicy, tau_E: int, rng: np.random.Generator,
                            reward_features: Optional[np.ndarray] = None) -> ExpertDataset:
    """tau_E i.i.d. pairs from the exact mu(pi_E), reduced to their reward features."""
    table = mdp.features.table if reward_features is None else reward_features
    if tau_E == 0:
        return ExpertDataset(np.zeros((0, table.shape[2])))
    mu = occupancy_measure(mdp, pi_expert).state_action.ravel()
    pairs = rng.choice(mu.size, size=tau_E, p=mu / mu.sum())
    return ExpertDataset(table.reshape(mu.size, -1)[pairs])


def estimate_expert_features(data: ExpertDataset) -> np.ndarray:
    if data.size == 0:
        raise RejectedInputError("cannot estimate feature expectations from an empty dataset")
    return data.samples.mean(axis=0)


def project_ball(v, radius: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if radius <= 0:
        raise RejectedInputError(f"radius must be positive, got {radius}")
    norm = np.linalg.norm(v)
    return v if norm <= radius else v * (radius / norm)


@dataclass(frozen=True, eq=False)
class RewardWeightState:
    w: np.ndarray
    w_max: float
    eta_r: float
    lambda_hat: np.ndarray


def ogd_reward_step(state: RewardWeightState, sample_feature) -> RewardWeightState:
    """w <- Proj_W(w + eta_r (lambda_hat - phi_r(X_k, A_k)))."""
    step = state.eta_r * (state.lambda_hat - np.asarray(sample_feature, dtype=np.float64))
    return replace(state, w=project_ball(state.w + step, state.w_max))


def sample_from_occupancy(mdp: LinearMdp, pi: TabularPolicy, rng: np.random.Generator) -> Tuple[int, int]:
    """Last pair of a trajectory stopped with probability 1 - gamma per step; distributed as mu(pi)."""
    x = int(rng.choice(mdp.n_states, p=mdp.nu0))
    while True:
        a = int(rng.choice(mdp.n_actions, p=pi.probs[x]))
        if rng.random() < 1.0 - mdp.gamma:
            return x, a
        x = int(rng.choice(mdp.n_states, p=mdp.kernel[x, a]))


class OgdRewardPlayer:
    """Adversary of the imitation loop; rewards r_k = Phi_r w_k clipped into [0, r_max]."""

    def __init__(self, mdp: LinearMdp, reward_features: np.ndarray, lambda_hat: np.ndarray,
                 w_max: float, K: int):
        self.mdp = mdp
        self.reward_features = reward_features
        bound = float(np.linalg.norm(reward_features, axis=2).max()) or 1.0
        self.state = RewardWeightState(w=np.zeros(reward_features.shape[2]), w_max=w_max,
                                       eta_r=w_max / (bound * math.sqrt(K)), lambda_hat=lambda_hat)
        self.weights: List[np.ndarray] = []
        self.clip_events = 0

    def reward_weights(self, k: int, policy: TabularPolicy, rng: np.random.Generator) -> np.ndarray:
        x, a = sample_from_occupancy(self.mdp, policy, rng)
        self.state = ogd_reward_step(self.state, self.reward_features[x, a])
        self.weights.append(self.state.w.copy())
        return self._feed(self.state.w)

    def _feed(self, w_r: np.ndarray) -> np.ndarray:
        k = self.reward_features.shape[2]
        rows = self.reward_features.reshape(-1, k)
        rewards = rows @ w_r
        clipped = np.clip(rewards, 0.0, self.mdp.r_max)
        if np.any(clipped != rewards):
            self.clip_events += 1
            w_r, *_ = np.linalg.lstsq(rows, clipped, rcond=None)
            residual = float(np.max(np.abs(rows @ w_r - clipped)))
            if residual > settings.reward_tolerance:
                logger.warning("clipped reward is not linear in the reward features (residual %.3e)", residual)
        fed = np.zeros(self.mdp.dim)
        fed[:k] = w_r
        return fed


@dataclass
class ImitationResult:
    training: TrainingResult
    output_policy: TabularPolicy
    subopt: float  # of pi_I under the true reward
    mean_subopt: float  # average over k, the expectation over I
    clip_events: int
    ogd_weights: List[np.ndarray]
    lambda_hat: np.ndarray
    expert_feature_error: float
    decomposition: Tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))


def regret_decomposition(mdp: LinearMdp, reward_features: np.ndarray, expert: TabularPolicy,
                         policies: List[TabularPolicy], weights: List[np.ndarray],
                         w_true: np.ndarray) -> Tuple[float, float, float]:
    """
    (1 - gamma) sum_k <nu0, V^E - V^k> under the true reward, split into the
    learner's regret against the played rewards and the reward player's regret.
    """
    true_mdp = mdp.with_reward_weights(_embed(mdp, w_true))
    mu_e = occupancy_measure(mdp, expert).state_action
    lam_e = np.einsum("xa,xak->k", mu_e, reward_features)
    expert_return = return_of_policy(true_mdp, expert)

    lhs, learner_term, player_term = 0.0, 0.0, 0.0
    for pi, w in zip(policies, weights):
        mu_k = occupancy_measure(mdp, pi).state_action
        lam_k = np.einsum("xa,xak->k", mu_k, reward_features)
        lhs += (1.0 - mdp.gamma) * (expert_return - return_of_policy(true_mdp, pi))
        learner_term += float(np.sum((reward_features @ w) * (mu_e - mu_k)))
        player_term += float((lam_k - lam_e) @ (w - w_true))
    return lhs, learner_term, player_term


def _embed(mdp: LinearMdp, w_r: np.ndarray) -> np.ndarray:
    full = np.zeros(mdp.dim)
    full[:w_r.size] = w_r
    return full


def fra_il_run(instance: Instance, expert_data: Optional[ExpertDataset], K: int, hp: Hyperparams,
               seed: int, run: int = 0, log_path: Optional[str] = None, run_id: str = "imitation",
               decompose: bool = False) -> ImitationResult:
    """
    Imitation loop on ``instance``. ``expert_data=None`` uses the exact expert
    feature expectation. The true reward is read only to score the output.
    """
    if instance.expert is None:
        raise RejectedInputError("imitation needs an instance with an expert policy")
    mdp = instance.mdp
    reward_features = instance.reward_features
    k_r = reward_features.shape[2]
    w_true = mdp.reward_weights[:k_r].copy()
    blind = mdp.with_reward_weights(np.zeros(mdp.dim))

    exact_lambda = feature_expectation(reward_features, occupancy_measure(mdp, instance.expert))
    lambda_hat = exact_lambda if expert_data is None else estimate_expert_features(expert_data)

    player = OgdRewardPlayer(blind, reward_features, lambda_hat, mdp.w_max, K)
    training = run_training(blind, hp, player, K, seed, run=run,
                            options=TrainingOptions(comparator=instance.expert),
                            log_path=log_path, run_id=run_id)

    true_mdp = mdp.with_reward_weights(_embed(mdp, w_true))
    expert_return = return_of_policy(true_mdp, instance.expert)
    gaps = np.array([expert_return - return_of_policy(true_mdp, pi) for pi in training.policies])
    result = ImitationResult(
        training=training, output_policy=training.output_policy,
        subopt=float(gaps[training.output_index]), mean_subopt=float(gaps.mean()),
        clip_events=player.clip_events, ogd_weights=player.weights, lambda_hat=lambda_hat,
        expert_feature_error=float(np.linalg.norm(lambda_hat - exact_lambda)),
    )
    if decompose:
        result.decomposition = regret_decomposition(mdp, reward_features, instance.expert,
                                                    training.policies, player.weights, w_true)
    logger.info("%s: K=%d tau_E=%s mean subopt=%.4f clip events=%d", run_id, K,
                "exact" if expert_data is None else expert_data.size, result.mean_subopt, result.clip_events)
    return result


def expert_rng(seed: int, run: int) -> np.random.Generator:
    return rng_stream(seed, run, 0, EXPERT_STREAM)
