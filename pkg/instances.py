"""
Instance generators: tabular embeddings, random mixture linear MDPs and the
two-state hard families together with their closed-form oracles.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import InvalidModelError
from mdp_core import FeatureMap, LinearMdp, TabularPolicy


@dataclass(frozen=True, eq=False)
class Instance:
    mdp: LinearMdp
    expert: Optional[TabularPolicy] = None
    reward_dim: Optional[int] = None  # leading feature block carrying the reward
    star_index: Optional[int] = None

    @property
    def reward_features(self) -> np.ndarray:
        k = self.reward_dim if self.reward_dim is not None else self.mdp.dim
        return self.mdp.features.table[..., :k]


def one_hot_table(n_states: int, n_actions: int) -> np.ndarray:
    d = n_states * n_actions
    return np.eye(d).reshape(n_states, n_actions, d)


def tabular_to_linear(transitions, rewards, gamma: float, nu0=None, r_max: float = 1.0) -> LinearMdp:
    """One-hot embedding of a tabular MDP: d = |X||A|, B = 1."""
    P = np.asarray(transitions, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    if P.ndim != 3 or P.shape[0] != P.shape[2] or r.shape != P.shape[:2]:
        raise InvalidModelError(f"inconsistent tabular shapes {P.shape} and {r.shape}")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-9):
        raise InvalidModelError("transition tensor is not row-stochastic")
    n_states, n_actions = r.shape
    d = n_states * n_actions
    if nu0 is None:
        nu0 = np.full(n_states, 1.0 / n_states)

    m_factor = P.reshape(d, n_states).T
    return LinearMdp(
        features=FeatureMap(table=one_hot_table(n_states, n_actions), bound=1.0),
        m_factor=m_factor, reward_weights=r.reshape(d), gamma=gamma,
        nu0=np.asarray(nu0, dtype=np.float64), r_max=r_max, w_max=r_max * np.sqrt(d),
    )


def random_tabular_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator) -> LinearMdp:
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return tabular_to_linear(P, r, gamma, nu0=rng.dirichlet(np.ones(n_states)))


def random_mixture_linear_mdp(d: int, n_states: int, n_actions: int, seed: int,
                              gamma: float = 0.9) -> LinearMdp:
    """Features on the simplex mix d random next-state distributions."""
    if d < 1 or n_states < 1 or n_actions < 1:
        raise InvalidModelError("d, n_states and n_actions must be positive")
    rng = np.random.default_rng(seed)
    table = rng.dirichlet(np.ones(d), size=(n_states, n_actions))
    m_factor = rng.dirichlet(np.ones(n_states), size=d).T
    w = rng.uniform(0.0, 1.0, size=d)
    return LinearMdp(
        features=FeatureMap(table=table, bound=1.0), m_factor=m_factor, reward_weights=w,
        gamma=gamma, nu0=rng.dirichlet(np.ones(n_states)), r_max=1.0, w_max=float(np.sqrt(d)),
    )


def _hard_delta(gamma: float, eps: float) -> float:
    if not 0.5 <= gamma < 1.0:
        raise InvalidModelError(f"hard instances need gamma in [1/2, 1), got {gamma}")
    delta = (1.0 - gamma) / gamma
    if not 0.0 <= eps <= delta:
        raise InvalidModelError(f"eps must lie in [0, {delta:.6g}], got {eps}")
    return delta


def hard_instance_K(n_actions: int, gamma: float, eps: float, star_index: int = 0) -> Instance:
    """Two states: x0 pays 1, x1 pays 0; a* at x0 is slightly stickier."""
    delta = _hard_delta(gamma, eps)
    if not 0 <= star_index < n_actions:
        raise InvalidModelError(f"star_index {star_index} out of range for {n_actions} actions")

    P = np.zeros((2, n_actions, 2))
    P[0, :, 0] = 1.0 - delta
    P[0, star_index, 0] = 1.0 - delta + eps
    P[0, :, 1] = 1.0 - P[0, :, 0]
    P[1, :, 0] = delta
    P[1, :, 1] = 1.0 - delta
    r = np.zeros((2, n_actions))
    r[0] = 1.0

    mdp = tabular_to_linear(P, r, gamma, nu0=np.array([1.0, 0.0]))
    expert = TabularPolicy.deterministic([star_index, star_index], n_actions)
    return Instance(mdp=mdp, expert=expert, star_index=star_index)


def hard_instance_tau(gamma: float, eps: float, w_max: float, variant: int,
                      n_actions: int = 2, star_index: int = 0) -> Instance:
    """
    Two states with uniform start; reward features one-hot(x) hide the expert's
    actions. Variant 0 rewards x0 and its expert plays a*; variant 1 rewards x1
    and its expert avoids a*.

    Learner features are [one-hot(x), one-hot(x, a)], so d = 2 + 2|A| and B = sqrt(2).
    """
    delta = _hard_delta(gamma, eps)
    if variant not in (0, 1):
        raise InvalidModelError(f"variant must be 0 or 1, got {variant}")
    if n_actions < 2 or not 0 <= star_index < n_actions:
        raise InvalidModelError("hard imitation instances need at least two actions and a valid a*")
    if w_max <= 0:
        raise InvalidModelError(f"w_max must be positive, got {w_max}")

    P = np.zeros((2, n_actions, 2))
    P[0, :, 1] = delta
    P[0, star_index, 1] = delta - eps
    P[0, :, 0] = 1.0 - P[0, :, 1]
    P[1, :, 0] = delta
    P[1, :, 1] = 1.0 - delta

    pairs = 2 * n_actions
    table = np.zeros((2, n_actions, 2 + pairs))
    table[0, :, 0] = 1.0
    table[1, :, 1] = 1.0
    table[:, :, 2:] = one_hot_table(2, n_actions)
    m_factor = np.zeros((2, 2 + pairs))
    m_factor[:, 2:] = P.reshape(pairs, 2).T
    w = np.zeros(2 + pairs)
    w[variant] = w_max

    mdp = LinearMdp(
        features=FeatureMap(table=table, bound=float(np.sqrt(2.0))), m_factor=m_factor,
        reward_weights=w, gamma=gamma, nu0=np.array([0.5, 0.5]),
        r_max=max(1.0, w_max), w_max=w_max,
    )
    expert_action = star_index if variant == 0 else min(a for a in range(n_actions) if a != star_index)
    expert = TabularPolicy.deterministic([expert_action, expert_action], n_actions)
    return Instance(mdp=mdp, expert=expert, reward_dim=2, star_index=star_index)


# closed forms of the hard families (delta0 = delta1 = (1 - gamma) / gamma)

def hard_k_expert_occupancy(gamma: float, eps: float) -> float:
    """nu(pi_E, x0) on the first family."""
    delta = _hard_delta(gamma, eps)
    return (1 - gamma + gamma * delta) / (1 - gamma + gamma * delta + gamma * delta - gamma * eps)


def hard_k_expert_value(gamma: float, eps: float) -> float:
    """Q^{pi_E}(x0, a*) on the first family."""
    d0 = d1 = _hard_delta(gamma, eps)
    numerator = 1 - gamma * (1 - d1)
    denominator = (1 - gamma * (1 - d0 + eps)) * (1 - gamma * (1 - d1)) - gamma ** 2 * d1 * (d0 - eps)
    return numerator / denominator


def hard_k_action_gap_bound(gamma: float, eps: float) -> float:
    return gamma * eps / (3 * (1 - gamma))


def hard_tau_occupancy(gamma: float, eps: float, star_prob: float) -> float:
    """nu(pi, x0) on the second family for a policy playing a* at x0 with probability star_prob."""
    delta = _hard_delta(gamma, eps)
    return (1 - gamma + 2 * gamma * delta) / (2 * (1 - gamma - gamma * star_prob * eps + 2 * gamma * delta))


def hard_tau_expert_occupancy(gamma: float, eps: float, variant: int = 0) -> float:
    if variant == 1:
        return 0.5
    return hard_tau_occupancy(gamma, eps, 1.0)


def hard_tau_gap_bound(gamma: float, eps: float, star_prob: float) -> float:
    return eps * (1 - star_prob) / (12 * (1 - gamma))
