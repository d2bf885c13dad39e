"""
Ground-truth linear MDP and exact finite-state oracles.

P(x'|x,a) = <phi(x,a), m(x')> and r(x,a) = <phi(x,a), w>. Every oracle here
works on any finite model exposing ``kernel`` (X, A, X), ``reward`` (X, A),
``gamma`` and ``nu0``, so the augmented MDP of ``oamdp`` reuses them as is.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import linalg

from config import settings
from errors import InvalidModelError, NumericFailure, RejectedInputError
from models import MdpDocument

logger = logging.getLogger(__name__)


class FiniteMdp(Protocol):
    gamma: float
    nu0: np.ndarray

    @property
    def kernel(self) -> np.ndarray: ...

    @property
    def reward(self) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class FeatureMap:
    table: np.ndarray  # (n_states, n_actions, d)
    bound: float

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.ndim != 3:
            raise InvalidModelError(f"feature table must be 3-dimensional, got shape {table.shape}")
        if not np.all(np.isfinite(table)):
            raise InvalidModelError("feature table has non-finite entries")
        norms = np.linalg.norm(table, axis=2)
        if np.any(norms > self.bound + 1e-12):
            raise InvalidModelError(
                f"feature norm {norms.max():.6g} exceeds declared bound {self.bound:.6g}")
        object.__setattr__(self, "table", table)

    @property
    def dim(self) -> int:
        return self.table.shape[2]

    @property
    def n_states(self) -> int:
        return self.table.shape[0]

    @property
    def n_actions(self) -> int:
        return self.table.shape[1]

    def at(self, x: int, a: int) -> np.ndarray:
        return self.table[x, a]

    def of_state(self, x: int) -> np.ndarray:
        """(n_actions, d) block of features at state x."""
        return self.table[x]

    def rows(self) -> np.ndarray:
        """Pairs flattened row-major, row index x * n_actions + a."""
        return self.table.reshape(-1, self.dim)


@dataclass(frozen=True, eq=False)
class LinearMdp:
    features: FeatureMap
    m_factor: np.ndarray  # (n_states, d), row x' is m(x')^T
    reward_weights: np.ndarray
    gamma: float
    nu0: np.ndarray
    r_max: float = 1.0
    w_max: Optional[float] = None
    _kernel: np.ndarray = field(init=False, repr=False, compare=False)
    _reward: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m_factor = np.asarray(self.m_factor, dtype=np.float64)
        w = np.asarray(self.reward_weights, dtype=np.float64)
        nu0 = np.asarray(self.nu0, dtype=np.float64)
        n_states, d = self.features.n_states, self.features.dim

        if not 0.0 <= self.gamma < 1.0:
            raise InvalidModelError(f"gamma must lie in [0, 1), got {self.gamma}")
        if m_factor.shape != (n_states, d):
            raise InvalidModelError(f"m_factor must have shape ({n_states}, {d}), got {m_factor.shape}")
        if w.shape != (d,):
            raise InvalidModelError(f"reward weights must have shape ({d},), got {w.shape}")
        if nu0.shape != (n_states,) or np.any(nu0 < 0) or abs(nu0.sum() - 1.0) > 1e-9:
            raise InvalidModelError("nu0 must be a distribution over states")

        w_max = self.w_max if self.w_max is not None else float(np.linalg.norm(w))
        if np.linalg.norm(w) > w_max + settings.weights_tolerance:
            raise InvalidModelError(f"||w|| = {np.linalg.norm(w):.6g} exceeds W_max = {w_max:.6g}")

        object.__setattr__(self, "m_factor", m_factor)
        object.__setattr__(self, "reward_weights", w)
        object.__setattr__(self, "nu0", nu0)
        object.__setattr__(self, "w_max", w_max)
        object.__setattr__(self, "_kernel", _validated_kernel(self.features.table @ m_factor.T))
        object.__setattr__(self, "_reward", _validated_reward(self.features.table @ w, self.r_max))

    @property
    def n_states(self) -> int:
        return self.features.n_states

    @property
    def n_actions(self) -> int:
        return self.features.n_actions

    @property
    def dim(self) -> int:
        return self.features.dim

    @property
    def kernel(self) -> np.ndarray:
        return self._kernel

    @property
    def reward(self) -> np.ndarray:
        return self._reward

    @property
    def horizon(self) -> float:
        return 1.0 / (1.0 - self.gamma)

    def with_reward_weights(self, weights) -> "LinearMdp":
        return replace(self, reward_weights=np.asarray(weights, dtype=np.float64))

    def reward_for(self, weights) -> np.ndarray:
        """Reward table of another weight vector on this instance's features."""
        return _validated_reward(self.features.table @ np.asarray(weights, dtype=np.float64), self.r_max)


def _validated_kernel(kernel: np.ndarray) -> np.ndarray:
    if np.any(kernel < -settings.clamp_tolerance):
        raise InvalidModelError(f"negative transition probability {kernel.min():.3e}")
    sums = kernel.sum(axis=2)
    deviation = float(np.max(np.abs(sums - 1.0)))
    if deviation > settings.transition_tolerance:
        raise InvalidModelError(f"transition rows deviate from 1 by {deviation:.3e}")
    clamped = np.clip(kernel, 0.0, None)
    if deviation > 1e-12 or np.any(kernel < 0):
        logger.debug("renormalizing transition rows (max deviation %.3e)", deviation)
        clamped = clamped / clamped.sum(axis=2, keepdims=True)
    return clamped


def _validated_reward(reward: np.ndarray, r_max: float) -> np.ndarray:
    tol = settings.reward_tolerance
    if np.any(reward < -tol) or np.any(reward > r_max + tol):
        raise InvalidModelError(
            f"rewards must lie in [0, {r_max}], got range [{reward.min():.6g}, {reward.max():.6g}]")
    return np.clip(reward, 0.0, r_max)


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray  # (n_states, n_actions)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise RejectedInputError("policy table must be 2-dimensional")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-12 * probs.shape[1]):
            raise RejectedInputError("policy rows must be probability distributions")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "TabularPolicy":
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), np.asarray(actions, dtype=int)] = 1.0
        return cls(probs)

    def __call__(self, x: int) -> np.ndarray:
        return self.probs[x]


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    state_action: np.ndarray
    state: np.ndarray

    @property
    def total_mass(self) -> float:
        return float(self.state_action.sum())


def transition_distribution(mdp: FiniteMdp, x: int, a: int) -> np.ndarray:
    return mdp.kernel[x, a].copy()


def mean_reward(mdp: FiniteMdp, x: int, a: int) -> float:
    return float(mdp.reward[x, a])


def _policy_kernel(mdp: FiniteMdp, pi: TabularPolicy) -> Tuple[np.ndarray, np.ndarray]:
    if pi.probs.shape != mdp.reward.shape:
        raise RejectedInputError(
            f"policy shape {pi.probs.shape} does not match model {mdp.reward.shape}")
    p_pi = np.einsum("xa,xay->xy", pi.probs, mdp.kernel)
    r_pi = np.einsum("xa,xa->x", pi.probs, mdp.reward)
    return p_pi, r_pi


def _solve(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return linalg.solve(matrix, rhs)
    except linalg.LinAlgError as exc:
        raise NumericFailure(f"singular linear system: {exc}") from exc


def policy_evaluation(mdp: FiniteMdp, pi: TabularPolicy) -> Tuple[np.ndarray, np.ndarray]:
    """Exact V and Q of pi from (I - gamma P_pi) V = r_pi."""
    p_pi, r_pi = _policy_kernel(mdp, pi)
    n_states = p_pi.shape[0]
    v = _solve(np.eye(n_states) - mdp.gamma * p_pi, r_pi)
    q = mdp.reward + mdp.gamma * mdp.kernel @ v
    return v, q


def bellman_residual(mdp: FiniteMdp, pi: TabularPolicy, v: np.ndarray) -> float:
    p_pi, r_pi = _policy_kernel(mdp, pi)
    return float(np.max(np.abs(r_pi + mdp.gamma * p_pi @ v - v)))


def greedy_policy(q: np.ndarray, tie_tolerance: float = 1e-12) -> TabularPolicy:
    """Deterministic greedy policy; near-ties go to the lowest action index."""
    best = q.max(axis=1, keepdims=True)
    near = q >= best - tie_tolerance * (1.0 + np.abs(best))
    return TabularPolicy.deterministic(np.argmax(near, axis=1), q.shape[1])


def optimal_policy(mdp: FiniteMdp, tol: float = 1e-10,
                   max_iterations: int = 1_000_000) -> Tuple[TabularPolicy, np.ndarray]:
    """Value iteration to a (1 - gamma) tol residual, then exact evaluation of the greedy policy."""
    n_states = mdp.reward.shape[0]
    v = np.zeros(n_states)
    for iteration in range(max_iterations):
        q = mdp.reward + mdp.gamma * mdp.kernel @ v
        v_next = q.max(axis=1)
        residual = float(np.max(np.abs(v_next - v)))
        v = v_next
        if residual <= tol * (1.0 - mdp.gamma):
            break
    else:
        logger.warning("value iteration hit %d iterations (residual %.3e)", max_iterations, residual)

    pi_star = greedy_policy(mdp.reward + mdp.gamma * mdp.kernel @ v)
    v_star, _ = policy_evaluation(mdp, pi_star)
    return pi_star, v_star


def occupancy_measure(mdp: FiniteMdp, pi: TabularPolicy) -> OccupancyMeasure:
    """Normalized discounted occupancy from the flow constraints."""
    p_pi, _ = _policy_kernel(mdp, pi)
    n_states = p_pi.shape[0]
    nu = _solve(np.eye(n_states) - mdp.gamma * p_pi.T, (1.0 - mdp.gamma) * mdp.nu0)
    nu = np.clip(nu, 0.0, None)
    return OccupancyMeasure(state_action=nu[:, None] * pi.probs, state=nu)


def flow_residual(mdp: FiniteMdp, occupancy: OccupancyMeasure) -> float:
    """|| E^T mu - gamma P^T mu - (1 - gamma) nu0 ||_inf."""
    mu = occupancy.state_action
    inflow = np.einsum("xa,xay->y", mu, mdp.kernel)
    return float(np.max(np.abs(mu.sum(axis=1) - mdp.gamma * inflow - (1.0 - mdp.gamma) * mdp.nu0)))


def return_of_policy(mdp: FiniteMdp, pi: TabularPolicy) -> float:
    v, _ = policy_evaluation(mdp, pi)
    return float(mdp.nu0 @ v)


def feature_expectation(table: np.ndarray, occupancy: OccupancyMeasure) -> np.ndarray:
    """Phi^T mu for a feature table of shape (X, A, k)."""
    return np.einsum("xa,xak->k", occupancy.state_action, table)


class ComparatorCache:
    """Optimal policies per reward vector, computed once per distinct reward."""

    def __init__(self, mdp: LinearMdp, comparator: Optional[TabularPolicy] = None):
        self.mdp = mdp
        self.comparator = comparator
        self._cache: Dict[bytes, Tuple[TabularPolicy, float]] = {}

    def best(self, weights: np.ndarray) -> Tuple[TabularPolicy, float]:
        key = np.asarray(weights, dtype=np.float64).tobytes()
        if key not in self._cache:
            model = self.mdp.with_reward_weights(weights)
            if self.comparator is not None:
                pi = self.comparator
            else:
                pi, _ = optimal_policy(model)
            self._cache[key] = (pi, return_of_policy(model, pi))
        return self._cache[key]

    def gap(self, weights: np.ndarray, pi: TabularPolicy) -> float:
        _, best_return = self.best(weights)
        return best_return - return_of_policy(self.mdp.with_reward_weights(weights), pi)


def regret_curve(mdp: LinearMdp, rewards: Sequence[np.ndarray], policies: Sequence[TabularPolicy],
                 comparator: Optional[TabularPolicy] = None) -> np.ndarray:
    """Partial sums of <nu0, V^{pi*}_{r_k} - V^{pi_k}_{r_k}> over k."""
    if len(rewards) != len(policies):
        raise RejectedInputError(
            f"got {len(rewards)} reward vectors for {len(policies)} policies")
    cache = ComparatorCache(mdp, comparator)
    gaps = [cache.gap(w, pi) for w, pi in zip(rewards, policies)]
    return np.cumsum(np.asarray(gaps, dtype=np.float64))


def enumerate_deterministic_policies(n_states: int, n_actions: int):
    for index in range(n_actions ** n_states):
        actions = []
        for _ in range(n_states):
            index, a = divmod(index, n_actions)
            actions.append(a)
        yield TabularPolicy.deterministic(actions, n_actions)


def to_document(mdp: LinearMdp) -> MdpDocument:
    return MdpDocument(
        d=mdp.dim, n_states=mdp.n_states, n_actions=mdp.n_actions, gamma=mdp.gamma,
        r_max=mdp.r_max, nu0=mdp.nu0.tolist(), features=mdp.features.rows().tolist(),
        m_factor=mdp.m_factor.tolist(), w=mdp.reward_weights.tolist(),
        bound=mdp.features.bound, w_max=mdp.w_max,
    )


def from_document(document: MdpDocument) -> LinearMdp:
    table = np.asarray(document.features, dtype=np.float64)
    expected = (document.n_states * document.n_actions, document.d)
    if table.shape != expected:
        raise InvalidModelError(f"features must have shape {expected}, got {table.shape}")
    table = table.reshape(document.n_states, document.n_actions, document.d)
    bound = document.bound if document.bound is not None else float(np.linalg.norm(table, axis=2).max())
    return LinearMdp(
        features=FeatureMap(table=table, bound=bound),
        m_factor=np.asarray(document.m_factor, dtype=np.float64),
        reward_weights=np.asarray(document.w, dtype=np.float64),
        gamma=document.gamma, nu0=np.asarray(document.nu0, dtype=np.float64),
        r_max=document.r_max, w_max=document.w_max,
    )


def save_mdp(mdp: LinearMdp, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(to_document(mdp).model_dump_json(indent=2))


def load_mdp(path: str) -> LinearMdp:
    with open(path, "r", encoding="utf-8") as f:
        return from_document(MdpDocument.model_validate(json.load(f)))
