"""
Optimistically augmented MDP: an absorbing heaven state with maximal reward
that every real pair reaches with probability p+(x, a).

The augmented model is materialized as a dense tabular MDP so the exact
oracles of ``mdp_core`` apply to it unchanged; ``coupled_rollout`` samples the
base chain together with its augmented coupling.
"""

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from errors import RejectedInputError
from mdp_core import LinearMdp, TabularPolicy, occupancy_measure
from numerics import sigmoid


def ascension_prob(bonus, alpha: float, omega: float):
    """p+ = sigmoid(alpha * bonus - omega)."""
    if np.any(np.asarray(bonus) < 0):
        raise RejectedInputError("bonus must be non-negative")
    return sigmoid(alpha * np.asarray(bonus, dtype=np.float64) - omega)


@dataclass(frozen=True, eq=False)
class AscensionFunction:
    probs: np.ndarray  # (n_states, n_actions) over real states
    rule: str = "sigmoid"
    alpha: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or np.any(probs < 0) or np.any(probs > 1):
            raise RejectedInputError("ascension probabilities must be a table in [0, 1]")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_bonus(cls, bonus: np.ndarray, alpha: float, omega: float) -> "AscensionFunction":
        return cls(ascension_prob(bonus, alpha, omega), rule="sigmoid", alpha=alpha, omega=omega)

    @classmethod
    def indicator(cls, mask: np.ndarray) -> "AscensionFunction":
        """Rmax clipping rule: ascend exactly where the optimistic target reaches R_max/(1 - gamma)."""
        return cls(np.asarray(mask, dtype=np.float64), rule="indicator")

    @classmethod
    def constant(cls, value: float, n_states: int, n_actions: int) -> "AscensionFunction":
        return cls(np.full((n_states, n_actions), float(value)), rule="constant")

    def at(self, x: int, a: int) -> float:
        if x == self.probs.shape[0]:
            return 0.0
        return float(self.probs[x, a])


@dataclass(frozen=True, eq=False)
class AugmentedMdp:
    base: LinearMdp
    ascension: AscensionFunction
    kernel: np.ndarray  # (X + 1, A, X + 1)
    reward: np.ndarray  # (X + 1, A)
    gamma: float
    nu0: np.ndarray
    r_max: float

    @property
    def heaven_index(self) -> int:
        return self.base.n_states

    @property
    def n_states(self) -> int:
        return self.base.n_states + 1

    @property
    def n_actions(self) -> int:
        return self.base.n_actions


def augment(mdp: LinearMdp, p_plus: AscensionFunction, reward: Optional[np.ndarray] = None) -> AugmentedMdp:
    """Explicit M+(r, p+); ``reward`` defaults to the base model's mean reward."""
    n_states, n_actions = mdp.n_states, mdp.n_actions
    if p_plus.probs.shape != (n_states, n_actions):
        raise RejectedInputError(
            f"ascension table shape {p_plus.probs.shape} does not match ({n_states}, {n_actions})")
    base_reward = mdp.reward if reward is None else np.asarray(reward, dtype=np.float64)
    p = p_plus.probs
    heaven = n_states

    kernel = np.zeros((n_states + 1, n_actions, n_states + 1))
    kernel[:n_states, :, :n_states] = (1.0 - p)[:, :, None] * mdp.kernel
    kernel[:n_states, :, heaven] = p
    kernel[heaven, :, heaven] = 1.0

    aug_reward = np.empty((n_states + 1, n_actions))
    aug_reward[:n_states] = (1.0 - p) * base_reward + p * mdp.r_max
    aug_reward[heaven] = mdp.r_max

    return AugmentedMdp(base=mdp, ascension=p_plus, kernel=kernel, reward=aug_reward,
                        gamma=mdp.gamma, nu0=np.append(mdp.nu0, 0.0), r_max=mdp.r_max)


def extend_policy(pi: TabularPolicy) -> TabularPolicy:
    """Append a uniform row for heaven, where actions have no effect."""
    n_actions = pi.probs.shape[1]
    return TabularPolicy(np.vstack([pi.probs, np.full((1, n_actions), 1.0 / n_actions)]))


def model_bias(mdp: LinearMdp, p_plus: AscensionFunction, pi: TabularPolicy) -> float:
    """<mu+(pi) - mu(pi), r+> with mu padded by zero at heaven."""
    aug = augment(mdp, p_plus)
    mu_plus = occupancy_measure(aug, extend_policy(pi)).state_action
    mu = occupancy_measure(mdp, pi).state_action
    return float(np.sum(mu_plus * aug.reward) - np.sum(mu * aug.reward[:-1]))


def reward_bias(mdp: LinearMdp, p_plus: AscensionFunction, pi_star: TabularPolicy, pi: TabularPolicy) -> float:
    """<mu(pi*) - mu(pi), r - r+> on the real pairs."""
    aug = augment(mdp, p_plus)
    gap = mdp.reward - aug.reward[:-1]
    mu_star = occupancy_measure(mdp, pi_star).state_action
    mu = occupancy_measure(mdp, pi).state_action
    return float(np.sum((mu_star - mu) * gap))


def ascension_mass(mdp: LinearMdp, p_plus: AscensionFunction, pi: TabularPolicy) -> float:
    """<mu(pi), p+>."""
    return float(np.sum(occupancy_measure(mdp, pi).state_action * p_plus.probs))


@dataclass
class CoupledRollout:
    base_states: List[int]
    base_actions: List[int]
    augmented_states: List[int]
    augmented_actions: List[int]  # -1 once the coupled chain sits in heaven
    split_time: float  # math.inf when the chains never separate


def coupled_rollout(mdp: LinearMdp, p_plus: AscensionFunction, pi: TabularPolicy,
                    horizon: int, rng: np.random.Generator) -> CoupledRollout:
    if horizon < 1:
        raise RejectedInputError(f"horizon must be at least 1, got {horizon}")
    heaven = mdp.n_states
    x = int(rng.choice(mdp.n_states, p=mdp.nu0))
    rollout = CoupledRollout([], [], [], [], float("inf"))
    ascended = False

    for step in range(horizon):
        a = int(rng.choice(mdp.n_actions, p=pi.probs[x]))
        rollout.base_states.append(x)
        rollout.base_actions.append(a)
        if ascended:
            rollout.augmented_states.append(heaven)
            rollout.augmented_actions.append(-1)
        else:
            rollout.augmented_states.append(x)
            rollout.augmented_actions.append(a)
            if rng.random() < p_plus.probs[x, a]:
                ascended = True
                rollout.split_time = step + 1
        x = int(rng.choice(mdp.n_states, p=mdp.kernel[x, a]))

    return rollout


def survival_probabilities(mdp: LinearMdp, p_plus: AscensionFunction, pi: TabularPolicy,
                           horizon: int) -> np.ndarray:
    """S[t] = P(split time > t) for t = 0..horizon, by the sub-stochastic forward recursion."""
    step_kernel = np.einsum("xa,xa,xay->xy", pi.probs, 1.0 - p_plus.probs, mdp.kernel)
    mass = mdp.nu0.copy()
    survival = np.empty(horizon + 1)
    survival[0] = 1.0
    for t in range(1, horizon + 1):
        mass = mass @ step_kernel
        survival[t] = mass.sum()
    return survival
