"""
Interaction protocol: geometric-length episodes with resets to nu0, an
adversary choosing linear rewards at each episode start, and the outer
training loop with exact per-episode regret accounting.
"""

import csv
import contextlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Union

import numpy as np

from config import settings
from errors import AdversaryError, RejectedInputError
from learner import (Hyperparams, LearnerPolicy, LearnerState, epoch_bound,
                     new_learner_state, process_episode, validity_gaps)
from mdp_core import ComparatorCache, LinearMdp, TabularPolicy
from numerics import numeric_warnings

logger = logging.getLogger(__name__)

LOG_HEADER = ["run_id", "episode", "epoch", "steps_total", "episode_len", "regret_partial",
              "gap_k", "bonus_mean", "p_plus_mean", "logdet"]

# stream purposes for seed splitting
ENV_STREAM, ADVERSARY_STREAM, OUTPUT_STREAM, EXPERT_STREAM = 0, 1, 2, 3


def rng_stream(master_seed: int, run: int, episode: int, purpose: int) -> np.random.Generator:
    """Independent generator for one (run, episode, purpose) cell of the seed tree."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(run, episode, purpose)))


@dataclass
class TrajectoryStep:
    state: int
    action: int
    next_state: int
    reward: float
    episode: int
    step: int


def _action_sampler(mdp: LinearMdp, policy: Union[TabularPolicy, LearnerPolicy]) -> Callable[[int], np.ndarray]:
    if isinstance(policy, TabularPolicy):
        return lambda x: policy.probs[x]
    cache: Dict[int, np.ndarray] = {}

    def probs(x: int) -> np.ndarray:
        if x not in cache:
            cache[x] = policy.probs_at(mdp.features, x)
        return cache[x]
    return probs


def run_episode(mdp: LinearMdp, policy: Union[TabularPolicy, LearnerPolicy], rng: np.random.Generator,
                cap: Optional[int] = None, reward: Optional[np.ndarray] = None,
                episode: int = 0) -> List[TrajectoryStep]:
    """Start at X ~ nu0; after every step stop with probability 1 - gamma."""
    reward = mdp.reward if reward is None else reward
    probs = _action_sampler(mdp, policy)
    steps: List[TrajectoryStep] = []
    x = int(rng.choice(mdp.n_states, p=mdp.nu0))
    while True:
        a = int(rng.choice(mdp.n_actions, p=probs(x)))
        x_next = int(rng.choice(mdp.n_states, p=mdp.kernel[x, a]))
        steps.append(TrajectoryStep(x, a, x_next, float(reward[x, a]), episode, len(steps)))
        if rng.random() < 1.0 - mdp.gamma:
            break
        if cap is not None and len(steps) >= cap:
            break
        x = x_next
    return steps


class RewardAdversary(Protocol):
    def reward_weights(self, k: int, policy: TabularPolicy, rng: np.random.Generator) -> np.ndarray: ...


class ConstantAdversary:
    def __init__(self, weights):
        self.weights = np.asarray(weights, dtype=np.float64)

    def reward_weights(self, k: int, policy: TabularPolicy, rng: np.random.Generator) -> np.ndarray:
        return self.weights


class SwitchingAdversary:
    """Oblivious schedule cycling through weight vectors every ``period`` episodes."""

    def __init__(self, weights: Sequence, period: int):
        if not weights or period < 1:
            raise AdversaryError("switching adversary needs weights and a positive period")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.period = period

    def reward_weights(self, k: int, policy: TabularPolicy, rng: np.random.Generator) -> np.ndarray:
        return self.weights[((k - 1) // self.period) % len(self.weights)]

    def mean_weights(self, K: int) -> np.ndarray:
        return np.mean([self.reward_weights(k, None, None) for k in range(1, K + 1)], axis=0)


def check_adversary_weights(mdp: LinearMdp, weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (mdp.dim,) or not np.all(np.isfinite(weights)):
        raise AdversaryError(f"reward weights must be finite with shape ({mdp.dim},)")
    norm = float(np.linalg.norm(weights))
    if norm > mdp.w_max + settings.weights_tolerance:
        raise AdversaryError(f"||w_k|| = {norm:.6g} exceeds W_max = {mdp.w_max:.6g}")
    rewards = mdp.features.table @ weights
    tol = settings.reward_tolerance
    if rewards.min() < -tol or rewards.max() > mdp.r_max + tol:
        raise AdversaryError(
            f"rewards of w_k span [{rewards.min():.6g}, {rewards.max():.6g}], outside [0, {mdp.r_max}]")
    return weights


class EpisodeLogWriter:
    """Per-episode CSV rows, flushed as they are written."""

    def __init__(self, path: str):
        self.path = path
        self._file = None
        self._writer = None

    def __enter__(self) -> "EpisodeLogWriter":
        self._file = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._file)
        self._writer.writerow(LOG_HEADER)
        return self

    def write(self, row: Sequence) -> None:
        self._writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        self._file.flush()

    def __exit__(self, *exc):
        self._file.close()
        return False


@dataclass
class TrainingOptions:
    exact_model: bool = False
    cap_episodes: bool = False
    track_validity: bool = False
    comparator: Optional[TabularPolicy] = None
    episode_callback: Optional[Callable[[LearnerState, int], None]] = None


@dataclass
class TrainingResult:
    policies: List[TabularPolicy]
    rewards: List[np.ndarray]
    gaps: np.ndarray
    regret: np.ndarray
    output_index: int  # zero-based I
    epochs: int
    epoch_bound: float
    steps_total: int
    episode_lengths: List[int]
    state: LearnerState
    validity_rate: Optional[float] = None
    wall_time: float = 0.0
    numeric_warnings: Dict[str, int] = field(default_factory=dict)

    @property
    def output_policy(self) -> TabularPolicy:
        return self.policies[self.output_index]

    @property
    def final_regret(self) -> float:
        return float(self.regret[-1]) if len(self.regret) else 0.0


def run_training(mdp: LinearMdp, hp: Hyperparams, adversary: RewardAdversary, K: int, seed: int,
                 run: int = 0, options: Optional[TrainingOptions] = None,
                 log_path: Optional[str] = None, run_id: str = "run") -> TrainingResult:
    """Adversary, rollout and learner update for k = 1..K, then draw I uniformly from [K]."""
    if K < 1:
        raise RejectedInputError(f"K must be at least 1, got {K}")
    options = options or TrainingOptions()
    started = time.time()
    warnings_before = numeric_warnings.copy()

    state = new_learner_state(hp, mdp.features,
                              exact_m_factor=mdp.m_factor if options.exact_model else None)
    comparators = ComparatorCache(mdp, options.comparator)
    cap = int(math.ceil(hp.l_max)) if options.cap_episodes and hp.l_max else None

    policies: List[TabularPolicy] = []
    rewards: List[np.ndarray] = []
    gaps: List[float] = []
    lengths: List[int] = []
    violations, checked = 0, 0
    regret = 0.0

    with (EpisodeLogWriter(log_path) if log_path else contextlib.nullcontext()) as writer:
        for k in range(1, K + 1):
            pi_k = state.policy.to_tabular(mdp.features)
            w_k = check_adversary_weights(
                mdp, adversary.reward_weights(k, pi_k, rng_stream(seed, run, k, ADVERSARY_STREAM)))
            steps = run_episode(mdp, state.policy, rng_stream(seed, run, k, ENV_STREAM), cap=cap,
                                reward=mdp.reward_for(w_k), episode=k)
            process_episode(state, hp, steps, w_k)

            gap = comparators.gap(w_k, pi_k)
            regret += gap
            policies.append(pi_k)
            rewards.append(w_k)
            gaps.append(gap)
            lengths.append(len(steps))

            diag = state.diagnostics
            if options.track_validity and diag is not None:
                violations += int(np.count_nonzero(validity_gaps(mdp, diag) > 1e-9))
                checked += diag.bonus.size
            if options.episode_callback is not None:
                options.episode_callback(state, k)
            if writer:
                writer.write([run_id, k, state.epoch_index, state.steps_total, len(steps), regret, gap,
                              float(diag.bonus.mean()) if diag else float("nan"),
                              float(diag.p_plus.mean()) if diag else float("nan"),
                              state.cov.log_det])
    output_index = int(rng_stream(seed, run, 0, OUTPUT_STREAM).integers(K))
    bound = epoch_bound(hp.d, hp.bound, state.steps_total)
    result = TrainingResult(
        policies=policies, rewards=rewards, gaps=np.asarray(gaps), regret=np.cumsum(gaps),
        output_index=output_index, epochs=state.epoch_index, epoch_bound=bound,
        steps_total=state.steps_total, episode_lengths=lengths, state=state,
        validity_rate=(violations / checked) if checked else None,
        wall_time=time.time() - started,
        numeric_warnings=dict(numeric_warnings - warnings_before),
    )
    logger.info("%s: K=%d regret=%.4f epochs=%d (bound %.1f) steps=%d", run_id, K,
                result.final_regret, result.epochs, bound, result.steps_total)
    return result


@dataclass
class OutputEvaluation:
    exact_mean_gap: float
    sampled_mean_gap: float
    sampled_stderr: float


def evaluate_output(mdp: LinearMdp, policies: Sequence[TabularPolicy], n_draws: int,
                    rng: np.random.Generator, comparator: Optional[TabularPolicy] = None) -> OutputEvaluation:
    """Expected gap of pi_I with I uniform, exactly and by sampling I."""
    cache = ComparatorCache(mdp, comparator)
    gaps = np.array([cache.gap(mdp.reward_weights, pi) for pi in policies])
    if n_draws < 1:
        return OutputEvaluation(float(gaps.mean()), float("nan"), float("nan"))
    drawn = gaps[rng.integers(len(gaps), size=n_draws)]
    stderr = float(drawn.std(ddof=1) / math.sqrt(n_draws)) if n_draws > 1 else float("nan")
    return OutputEvaluation(float(gaps.mean()), float(drawn.mean()), stderr)
