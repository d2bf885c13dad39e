"""
Rmax-RAVI-UCB: optimistic regularized value iteration for discounted linear MDPs.

Per episode the learner
  - adds the episode's transitions to Lambda and the dataset,
  - opens a new epoch when det Lambda doubled against the epoch anchor
    (the policy restarts uniform and bonuses are re-anchored),
  - regresses V_k on next-state features (ridge with Lambda^{-1}),
  - forms Q_{k+1} = (1 - p+)(phi^T theta_{k+1} + CB) + p+ R_max / (1 - gamma),
    theta_{k+1} = w_k + gamma * M_hat V_k,
  - and moves the softmax policy by exp(eta Q_{k+1}).

Within an epoch CB and p+ are frozen, so the policy is the softmax of
eta * S(x, a) with S = (1 - p+)(phi^T Theta + m CB) + m p+ R_max / (1 - gamma),
Theta being the sum of theta over the epoch and m its episode count.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field
from scipy.special import softmax

from errors import RejectedInputError
from mdp_core import FeatureMap, LinearMdp, TabularPolicy, greedy_policy
from models import LearnerCheckpoint
from numerics import (CovarianceState, elliptical_norm, elliptical_norms, rank_one_update,
                      refresh_inverse, weighted_logsumexp)
from oamdp import ascension_prob

logger = logging.getLogger(__name__)

AscensionRule = Literal["sigmoid", "indicator", "none"]
Transition = Tuple[int, int, int]


class Hyperparams(BaseModel):
    model_config = ConfigDict(frozen=True)

    eta: float = Field(gt=0.0)
    beta: float = Field(ge=0.0)
    omega: float = Field(gt=0.0)
    alpha: float = Field(gt=0.0)
    gamma: float = Field(ge=0.0, lt=1.0)
    r_max: float = Field(default=1.0, gt=0.0)
    d: int = Field(ge=1)
    bound: float = Field(default=1.0, gt=0.0)
    n_actions: int = Field(ge=1)
    delta: float = Field(default=0.1, gt=0.0, lt=1.0)
    l_max: Optional[float] = None
    ascension: AscensionRule = "sigmoid"

    @computed_field
    @property
    def q_max(self) -> float:
        return (self.r_max + 2.0 * self.omega / self.alpha) / (1.0 - self.gamma)

    @property
    def heaven_value(self) -> float:
        return self.r_max / (1.0 - self.gamma)


def theoretical_hyperparams(K: int, gamma: float, d: int, B: float, n_actions: int, delta: float,
                            w_max: float, r_max: float = 1.0, c_beta: float = 1.0,
                            ascension: AscensionRule = "sigmoid") -> Hyperparams:
    """Worst-case parameter schedule for a K-episode run."""
    if K < 2:
        raise RejectedInputError(f"K must be at least 2 so that omega = log K > 0, got {K}")
    H = 1.0 / (1.0 - gamma)
    l_max = H * math.log(K / delta)
    T = l_max * K
    # a single action makes log|A| vanish; any eta > 0 yields the same policy then
    log_actions = math.log(max(n_actions, 2))
    eta = math.sqrt(5 * d * math.log(1 + B ** 2 * T / d) * log_actions / (8 * r_max ** 2 * H ** 2.5 * K))
    beta = c_beta * H * r_max * d * math.log(max(B * H * w_max * r_max * d * K / delta, math.e))
    return Hyperparams(eta=eta, beta=beta, omega=math.log(K), alpha=2 * math.log(K), gamma=gamma,
                       r_max=r_max, d=d, bound=B, n_actions=n_actions, delta=delta, l_max=l_max,
                       ascension=ascension)


def epoch_bound(d: int, B: float, steps: int) -> float:
    """5 d log(1 + B^2 T / d); the first epoch opens unconditionally, hence the floor at one."""
    return max(1.0, 5.0 * d * math.log(1.0 + B ** 2 * steps / d))


def bonus_table(hp: Hyperparams, anchor_inv: np.ndarray, phis: np.ndarray) -> np.ndarray:
    return hp.beta * elliptical_norms(anchor_inv, phis)


def ascension_table(hp: Hyperparams, cb: np.ndarray) -> np.ndarray:
    if hp.ascension == "sigmoid":
        return ascension_prob(cb, hp.alpha, hp.omega)
    return np.zeros_like(cb)


@dataclass(frozen=True, eq=False)
class QIterate:
    """Q_k with the bonus geometry and ascension it was formed with."""

    theta: np.ndarray
    anchor_inv: np.ndarray
    indicator: Optional[np.ndarray] = None  # ascension table of the indicator rule

    def values(self, hp: Hyperparams, phi_x: np.ndarray, x: int) -> np.ndarray:
        cb = bonus_table(hp, self.anchor_inv, phi_x)
        p = self.indicator[x] if self.indicator is not None else ascension_table(hp, cb)
        return (1.0 - p) * (phi_x @ self.theta + cb) + p * hp.heaven_value

    def table(self, hp: Hyperparams, features: FeatureMap) -> np.ndarray:
        return np.stack([self.values(hp, features.of_state(x), x) for x in range(features.n_states)])


@dataclass(frozen=True, eq=False)
class CompactPolicy:
    hp: Hyperparams
    theta_sum: np.ndarray
    episode_count: int
    anchor_inv: np.ndarray

    @classmethod
    def uniform(cls, hp: Hyperparams, anchor_inv: np.ndarray) -> "CompactPolicy":
        return cls(hp=hp, theta_sum=np.zeros(hp.d), episode_count=0, anchor_inv=anchor_inv)

    @property
    def eta(self) -> float:
        return self.hp.eta

    def scores(self, phi_x: np.ndarray) -> np.ndarray:
        m = self.episode_count
        if m == 0:
            return np.zeros(phi_x.shape[0])
        cb = bonus_table(self.hp, self.anchor_inv, phi_x)
        p = ascension_table(self.hp, cb)
        return (1.0 - p) * (phi_x @ self.theta_sum + m * cb) + m * p * self.hp.heaven_value

    def action_probs(self, phi_x: np.ndarray) -> np.ndarray:
        return softmax(self.hp.eta * self.scores(phi_x))

    def probs_at(self, features: FeatureMap, x: int) -> np.ndarray:
        return self.action_probs(features.of_state(x))

    def score_table(self, features: FeatureMap) -> np.ndarray:
        return np.stack([self.scores(features.of_state(x)) for x in range(features.n_states)])

    def updated(self, q_next: QIterate, features: FeatureMap) -> "CompactPolicy":
        return CompactPolicy(hp=self.hp, theta_sum=self.theta_sum + q_next.theta,
                             episode_count=self.episode_count + 1, anchor_inv=self.anchor_inv)

    def to_tabular(self, features: FeatureMap) -> TabularPolicy:
        return TabularPolicy(softmax(self.hp.eta * self.score_table(features), axis=1))


@dataclass(frozen=True, eq=False)
class ExplicitPolicy:
    """Softmax of eta times an accumulated Q table; used when p+ varies within an epoch."""

    hp: Hyperparams
    scores_table: np.ndarray
    episode_count: int = 0

    @classmethod
    def uniform(cls, hp: Hyperparams, n_states: int) -> "ExplicitPolicy":
        return cls(hp=hp, scores_table=np.zeros((n_states, hp.n_actions)))

    def probs_at(self, features: FeatureMap, x: int) -> np.ndarray:
        return softmax(self.hp.eta * self.scores_table[x])

    def score_table(self, features: FeatureMap) -> np.ndarray:
        return self.scores_table

    def updated(self, q_next: QIterate, features: FeatureMap) -> "ExplicitPolicy":
        return ExplicitPolicy(hp=self.hp, scores_table=self.scores_table + q_next.table(self.hp, features),
                              episode_count=self.episode_count + 1)

    def to_tabular(self, features: FeatureMap) -> TabularPolicy:
        return TabularPolicy(softmax(self.hp.eta * self.scores_table, axis=1))


LearnerPolicy = Union[CompactPolicy, ExplicitPolicy]


@dataclass
class EpisodeDiagnostics:
    episode: int
    new_epoch: bool
    reward_weights: np.ndarray
    bonus: np.ndarray  # CB_k, (X, A)
    p_plus: np.ndarray  # p+_k, (X, A)
    v_k: np.ndarray  # V_k on every state
    m_hat_v: np.ndarray
    q_next: np.ndarray  # Q_{k+1}, (X, A)


@dataclass
class LearnerState:
    hp: Hyperparams
    features: FeatureMap
    cov: CovarianceState
    policy: LearnerPolicy
    transitions: List[Transition] = field(default_factory=list)
    next_state_sums: Optional[np.ndarray] = None  # sum_t phi_t e_{x'_t}^T, (d, X)
    epoch_index: int = 0
    epoch_start_episode: int = 0
    epoch_start_step: int = 0
    episode_index: int = 0  # episodes processed so far
    q_current: Optional[QIterate] = None  # Q_k; None stands for Q_1 = 0
    prev_policy: Optional[LearnerPolicy] = None  # pi_{k-1}, paired with Q_k for V_k
    exact_m_factor: Optional[np.ndarray] = None
    record_diagnostics: bool = True
    diagnostics: Optional[EpisodeDiagnostics] = None

    @property
    def theta_k(self) -> Optional[np.ndarray]:
        return None if self.q_current is None else self.q_current.theta

    @property
    def steps_total(self) -> int:
        return len(self.transitions)


def new_learner_state(hp: Hyperparams, features: FeatureMap, exact_m_factor: Optional[np.ndarray] = None,
                      record_diagnostics: bool = True) -> LearnerState:
    if features.dim != hp.d or features.n_actions != hp.n_actions:
        raise RejectedInputError("hyperparameters do not match the feature map")
    cov = CovarianceState.identity(hp.d)
    if hp.ascension == "indicator":
        policy: LearnerPolicy = ExplicitPolicy.uniform(hp, features.n_states)
    else:
        policy = CompactPolicy.uniform(hp, cov.anchor_inv)
    return LearnerState(hp=hp, features=features, cov=cov, policy=policy,
                        next_state_sums=np.zeros((hp.d, features.n_states)),
                        exact_m_factor=exact_m_factor, record_diagnostics=record_diagnostics)


def bonus(state: LearnerState, hp: Hyperparams, phi: Optional[np.ndarray]) -> float:
    """CB(x, a) = beta ||phi||_{anchor^{-1}}; ``phi=None`` denotes heaven."""
    if phi is None:
        return 0.0
    return hp.beta * elliptical_norm(state.cov.anchor_inv, phi)


def _uniform_policy(state: LearnerState) -> LearnerPolicy:
    if state.hp.ascension == "indicator":
        return ExplicitPolicy.uniform(state.hp, state.features.n_states)
    return CompactPolicy.uniform(state.hp, state.cov.anchor_inv)


def epoch_boundary_check(state: LearnerState, hp: Hyperparams) -> Tuple[bool, LearnerState]:
    first = state.epoch_index == 0
    if not first and state.cov.log_det - state.cov.anchor_log_det < math.log(2.0):
        return False, state

    state.cov = refresh_inverse(state.cov).with_anchor()
    state.epoch_index += 1
    state.epoch_start_episode = state.episode_index + 1
    state.epoch_start_step = state.steps_total
    state.policy = _uniform_policy(state)
    logger.info("epoch %d opens at episode %d (step %d, log det %.4f)",
                state.epoch_index, state.epoch_start_episode, state.epoch_start_step, state.cov.log_det)
    return True, state


def ridge_regress_value(state: LearnerState, v_eval: Union[Callable[[int], float], np.ndarray]) -> np.ndarray:
    """Lambda^{-1} sum_t phi_t V(x'_t), with V evaluated once per distinct next state."""
    if not state.transitions:
        return np.zeros(state.hp.d)
    visited = np.flatnonzero(np.any(state.next_state_sums != 0.0, axis=0))
    values = np.zeros(state.features.n_states)
    if callable(v_eval):
        for x_next in visited:
            values[x_next] = v_eval(int(x_next))
    else:
        values[visited] = np.asarray(v_eval, dtype=np.float64)[visited]
    if not np.all(np.isfinite(values)):
        raise RejectedInputError("value function has non-finite entries on visited states")
    return state.cov.lam_inv @ (state.next_state_sums @ values)


def q_linear_param(state: LearnerState, hp: Hyperparams, w_k: np.ndarray, m_hat_v: np.ndarray) -> np.ndarray:
    """theta_{k+1} = w_k + gamma * M_hat V_k."""
    return np.asarray(w_k, dtype=np.float64) + hp.gamma * m_hat_v


def value_update(policy_prev: LearnerPolicy, q_value: Callable[[int], np.ndarray], x: int,
                 features: FeatureMap) -> float:
    """V(x) = (1/eta) log sum_a pi_prev(a|x) exp(eta Q(x, a))."""
    return weighted_logsumexp(policy_prev.probs_at(features, x), q_value(x), policy_prev.hp.eta)


def policy_update(policy: LearnerPolicy, q_next: QIterate, features: FeatureMap) -> LearnerPolicy:
    return policy.updated(q_next, features)


def act(policy: CompactPolicy, features_of_state, rng: np.random.Generator) -> int:
    probs = policy.action_probs(np.asarray(features_of_state, dtype=np.float64))
    return int(rng.choice(len(probs), p=probs))


def _value_k(state: LearnerState) -> Callable[[int], float]:
    hp, features = state.hp, state.features
    if state.q_current is None:
        return lambda x: 0.0
    q_k, prev = state.q_current, state.prev_policy

    def v(x: int) -> float:
        return value_update(prev, lambda s: q_k.values(hp, features.of_state(s), s), x, features)
    return v


def process_episode(state: LearnerState, hp: Hyperparams, episode_transitions: Sequence, w_k) -> LearnerState:
    """One pass of the loop body after episode k; mutates and returns ``state``."""
    features = state.features
    w_k = np.asarray(w_k, dtype=np.float64)
    if w_k.shape != (hp.d,):
        raise RejectedInputError(f"reward weights must have shape ({hp.d},), got {w_k.shape}")

    for step in episode_transitions:
        x, a, x_next = _as_transition(step)
        phi = features.at(x, a)
        state.cov = rank_one_update(state.cov, phi)
        state.transitions.append((x, a, x_next))
        state.next_state_sums[:, x_next] += phi

    new_epoch, state = epoch_boundary_check(state, hp)

    v_k = _value_k(state)
    if state.exact_m_factor is not None:
        v_all = np.array([v_k(x) for x in range(features.n_states)])
        m_hat_v = state.exact_m_factor.T @ v_all
    else:
        v_all = None
        m_hat_v = ridge_regress_value(state, v_k)
    theta_next = q_linear_param(state, hp, w_k, m_hat_v)

    indicator = None
    if hp.ascension == "indicator":
        cb = bonus_table(hp, state.cov.anchor_inv, features.table)
        indicator = (features.table @ theta_next + cb >= hp.heaven_value).astype(np.float64)
    q_next = QIterate(theta=theta_next, anchor_inv=state.cov.anchor_inv, indicator=indicator)

    if state.record_diagnostics:
        cb = bonus_table(hp, state.cov.anchor_inv, features.table)
        p = indicator if indicator is not None else ascension_table(hp, cb)
        if v_all is None:
            v_all = np.array([v_k(x) for x in range(features.n_states)])
        state.diagnostics = EpisodeDiagnostics(
            episode=state.episode_index + 1, new_epoch=new_epoch, reward_weights=w_k,
            bonus=cb, p_plus=p, v_k=v_all, m_hat_v=m_hat_v, q_next=q_next.table(hp, features))

    next_policy = policy_update(state.policy, q_next, features)
    state.prev_policy = state.policy
    state.policy = next_policy
    state.q_current = q_next
    state.episode_index += 1
    return state


def _as_transition(step) -> Transition:
    if isinstance(step, tuple):
        x, a, x_next = step
    else:
        x, a, x_next = step.state, step.action, step.next_state
    return int(x), int(a), int(x_next)


def greedy_from_scores(state: LearnerState) -> TabularPolicy:
    return greedy_policy(state.policy.score_table(state.features))


# checks against a known model

def validity_gaps(mdp: LinearMdp, diag: EpisodeDiagnostics) -> np.ndarray:
    """|(P - P_hat) V_k| - CB_k per pair; non-positive everywhere when the bonus is valid."""
    p_v = mdp.kernel @ diag.v_k
    p_hat_v = mdp.features.table @ diag.m_hat_v
    return np.abs(p_v - p_hat_v) - diag.bonus


def bonus_valid(mdp: LinearMdp, diag: EpisodeDiagnostics, tol: float = 1e-9) -> bool:
    return bool(np.all(validity_gaps(mdp, diag) <= tol))


def augmented_bonus_valid(mdp: LinearMdp, diag: EpisodeDiagnostics, tol: float = 1e-9) -> bool:
    """|(P+ - P_hat+) V_k| <= (1 - p+) CB with heaven valued at R_max / (1 - gamma)."""
    p = diag.p_plus
    heaven = mdp.r_max / (1.0 - mdp.gamma)
    p_plus_v = (1.0 - p) * (mdp.kernel @ diag.v_k) + p * heaven
    p_hat_plus_v = (1.0 - p) * (mdp.features.table @ diag.m_hat_v) + p * heaven
    return bool(np.all(np.abs(p_plus_v - p_hat_plus_v) <= (1.0 - p) * diag.bonus + tol))


def optimism_sandwich(mdp: LinearMdp, diag: EpisodeDiagnostics, tol: float = 1e-9) -> bool:
    """r+ + gamma P+ V_k <= Q_{k+1} <= r+ + 2 (1 - p+) CB + gamma P+ V_k."""
    p = diag.p_plus
    reward = mdp.reward_for(diag.reward_weights)
    heaven = mdp.r_max / (1.0 - mdp.gamma)
    r_plus = (1.0 - p) * reward + p * mdp.r_max
    p_plus_v = (1.0 - p) * (mdp.kernel @ diag.v_k) + p * heaven
    lower = r_plus + mdp.gamma * p_plus_v
    upper = lower + 2.0 * (1.0 - p) * diag.bonus
    return bool(np.all(lower <= diag.q_next + tol) and np.all(diag.q_next <= upper + tol))


def to_checkpoint(state: LearnerState) -> LearnerCheckpoint:
    policy = state.policy
    theta_sum = policy.theta_sum if isinstance(policy, CompactPolicy) else np.zeros(state.hp.d)
    return LearnerCheckpoint(
        hyperparams=state.hp.model_dump(), theta_sum=theta_sum.tolist(),
        episode_count=policy.episode_count,
        theta_k=None if state.theta_k is None else state.theta_k.tolist(),
        anchor_inv=state.cov.anchor_inv.tolist(), epoch_index=state.epoch_index,
        epoch_start_episode=state.epoch_start_episode, episode_index=state.episode_index,
        dataset_length=state.steps_total, log_det=state.cov.log_det,
    )
