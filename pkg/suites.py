"""
Property suites run by ``simulate verify`` and the invariant-suite scenario.
Each suite returns how many of its randomized cases passed.
"""

import logging
import math
from typing import Callable, List

import numpy as np

from envsim import ConstantAdversary, TrainingOptions, run_training
from instances import (hard_instance_K, hard_instance_tau, hard_k_expert_occupancy, hard_k_expert_value,
                       hard_tau_expert_occupancy, random_mixture_linear_mdp, random_tabular_mdp)
from learner import (Hyperparams, augmented_bonus_valid, bonus_valid, epoch_bound, greedy_from_scores,
                     optimism_sandwich)
from mdp_core import (TabularPolicy, bellman_residual, flow_residual, occupancy_measure, optimal_policy,
                      policy_evaluation, return_of_policy)
from models import SuiteReport, SuiteResult
from numerics import (CovarianceState, rank_one_update, sigmoid, weighted_logsumexp)
from oamdp import (AscensionFunction, ascension_mass, augment, extend_policy, model_bias, reward_bias)

logger = logging.getLogger(__name__)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.ones(n_actions), size=n_states))


def oracle_cross_validation(rng: np.random.Generator, n_instances: int = 25) -> SuiteResult:
    passed = 0
    for i in range(n_instances):
        mdp = random_mixture_linear_mdp(int(rng.integers(1, 6)), int(rng.integers(2, 11)),
                                        int(rng.integers(1, 6)), seed=int(rng.integers(2 ** 31)),
                                        gamma=float(rng.uniform(0.5, 0.99)))
        pi = random_policy(mdp.n_states, mdp.n_actions, rng)
        occ = occupancy_measure(mdp, pi)
        v, _ = policy_evaluation(mdp, pi)
        identity = abs(return_of_policy(mdp, pi) - np.sum(occ.state_action * mdp.reward) / (1 - mdp.gamma))
        if flow_residual(mdp, occ) <= 1e-10 and bellman_residual(mdp, pi, v) <= 1e-10 and identity <= 1e-9:
            passed += 1
    return SuiteResult(name="oracle-cross-validation", passed=passed, total=n_instances)


def augmentation_identities(rng: np.random.Generator, n_cases: int = 50, tol: float = 1e-9) -> SuiteResult:
    passed = 0
    for _ in range(n_cases):
        mdp = random_tabular_mdp(int(rng.integers(2, 6)), int(rng.integers(1, 4)),
                                 float(rng.uniform(0.5, 0.95)), rng)
        pi = random_policy(mdp.n_states, mdp.n_actions, rng)
        pi_star = random_policy(mdp.n_states, mdp.n_actions, rng)
        p_plus = AscensionFunction(rng.uniform(0.0, 1.0, size=(mdp.n_states, mdp.n_actions)))
        aug = augment(mdp, p_plus)
        mu = occupancy_measure(mdp, pi).state_action
        mu_plus = occupancy_measure(aug, extend_policy(pi)).state_action
        v, q = policy_evaluation(mdp, pi)
        v_plus, q_plus = policy_evaluation(aug, extend_policy(pi))
        mass = ascension_mass(mdp, p_plus, pi)
        bias = model_bias(mdp, p_plus, pi)
        q_rand = rng.normal(size=q.shape)
        v_rand = np.sum(pi.probs * q_rand, axis=1)
        ev = np.sum(mu * v_rand[:, None])
        checks = [
            np.all(mu_plus[:-1] <= mu + tol),
            np.all(v_plus[:-1] >= v - tol) and np.all(q_plus[:-1] >= q - tol),
            -tol <= bias <= mdp.r_max / (1 - mdp.gamma) * mass + tol,
            reward_bias(mdp, p_plus, pi_star, pi) <= mdp.r_max * mass + tol,
            abs(ev - np.sum(mu * q_rand)) <= tol * max(1.0, abs(ev)),
        ]
        passed += bool(all(checks))
    return SuiteResult(name="augmentation-identities", passed=passed, total=n_cases)


def sigmoid_bounds(n_points: int = 10_000) -> SuiteResult:
    side = int(math.sqrt(n_points))
    z, omega = np.meshgrid(np.linspace(0.0, 5.0, side), np.linspace(0.0, 20.0, side))
    upper = sigmoid(z - omega) <= 2 * (z ** 2 + np.exp(-omega))
    z, omega = np.meshgrid(np.linspace(0.0, 50.0, side), np.linspace(2.0, 30.0, side))
    alphas = np.linspace(0.1, 20.0, 7)
    peak = np.all([z * sigmoid(omega - a * z) <= omega / a + 1e-12 for a in alphas], axis=0)
    passed = int(np.count_nonzero(upper)) + int(np.count_nonzero(peak))
    return SuiteResult(name="sigmoid-bounds", passed=passed, total=upper.size + peak.size)


def numerics_suite(rng: np.random.Generator, n_updates: int = 10_000, d: int = 6) -> SuiteResult:
    state = CovarianceState.identity(d)
    monotone = True
    for _ in range(n_updates):
        phi = rng.normal(size=d)
        phi /= max(1.0, np.linalg.norm(phi))
        before = state.log_det
        state = rank_one_update(state, phi, refresh_every=1000)
        monotone &= state.log_det >= before - 1e-9
    drift = float(np.max(np.abs(state.lam_inv - np.linalg.inv(state.lam))))

    lipschitz = 0
    for _ in range(n_updates):
        n = int(rng.integers(1, 6))
        w = rng.dirichlet(np.ones(n))
        x, y = rng.normal(scale=5.0, size=n), rng.normal(scale=5.0, size=n)
        gap = abs(weighted_logsumexp(w, x, 1.0) - weighted_logsumexp(w, y, 1.0))
        lipschitz += gap <= np.max(np.abs(x - y)) + 1e-12
    passed = int(drift <= 1e-8) + int(monotone) + lipschitz
    return SuiteResult(name="numerics", passed=passed, total=2 + n_updates, detail=f"drift={drift:.2e}")


def closed_forms() -> SuiteResult:
    passed, total = 0, 0
    for gamma in (0.5, 0.9, 0.99):
        delta = (1 - gamma) / gamma
        for frac in (0.0, 0.25, 0.5, 1.0):
            eps = frac * delta
            total += 3
            inst = hard_instance_K(3, gamma, eps)
            nu = occupancy_measure(inst.mdp, inst.expert).state
            passed += abs(nu[0] - hard_k_expert_occupancy(gamma, eps)) <= 1e-10
            _, q = policy_evaluation(inst.mdp, inst.expert)
            passed += abs(q[0, 0] - hard_k_expert_value(gamma, eps)) <= 1e-10 * max(1.0, abs(q[0, 0]))
            tau = hard_instance_tau(gamma, eps, 1.0, 0)
            nu = occupancy_measure(tau.mdp, tau.expert).state
            passed += abs(nu[0] - hard_tau_expert_occupancy(gamma, eps)) <= 1e-10

    inst = hard_instance_K(3, 0.9, 0.05)
    bad = TabularPolicy.deterministic([1, 1], 3)
    passed += abs(occupancy_measure(inst.mdp, bad).state[0] - 2.0 / 3.0) <= 1e-10
    tau = hard_instance_tau(0.9, 0.05, 1.0, 1)
    passed += abs(occupancy_measure(tau.mdp, tau.expert).state[0] - 0.5) <= 1e-10
    return SuiteResult(name="hard-instance-closed-forms", passed=passed, total=total + 2)


def compact_policy_equivalence(seed: int, episodes: int = 200) -> SuiteResult:
    """Compact softmax against the explicit multiplicative product, per state and episode."""
    inst = hard_instance_K(3, 0.8, 0.1)
    mdp = inst.mdp
    hp = Hyperparams(eta=0.5, beta=0.5, omega=2.0, alpha=4.0, gamma=mdp.gamma, d=mdp.dim, n_actions=3)
    explicit = {"probs": np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions), "ok": 0}

    def compare(state, k):
        diag = state.diagnostics
        base = state.prev_policy.to_tabular(mdp.features).probs
        if diag.new_epoch:
            explicit["probs"] = base
        prod = explicit["probs"] * np.exp(hp.eta * (diag.q_next - diag.q_next.max(axis=1, keepdims=True)))
        explicit["probs"] = prod / prod.sum(axis=1, keepdims=True)
        compact = state.policy.to_tabular(mdp.features).probs
        explicit["ok"] += bool(np.max(np.abs(compact - explicit["probs"])) <= 1e-9)

    result = run_training(mdp, hp, ConstantAdversary(mdp.reward_weights), episodes, seed,
                          options=TrainingOptions(episode_callback=compare))
    return SuiteResult(name="compact-policy-equivalence", passed=explicit["ok"], total=episodes,
                       detail=f"epochs={result.epochs}")


def q_bound_and_sandwich(seed: int, episodes: int = 2000) -> SuiteResult:
    """Boundedness and sandwich are asserted while the bonus has been valid at every episode so far."""
    inst = hard_instance_K(4, 0.9, 0.1)
    mdp = inst.mdp
    hp = Hyperparams(eta=0.2, beta=60.0, omega=2.5, alpha=5.0, gamma=mdp.gamma, d=mdp.dim, n_actions=4)
    tracker = {"valid": True, "ok": 0, "checked": 0}

    def check(state, k):
        diag = state.diagnostics
        tracker["valid"] &= bonus_valid(mdp, diag)
        if not tracker["valid"]:
            return
        tracker["checked"] += 1
        bounded = np.max(np.abs(diag.q_next)) <= hp.q_max + 1e-9 and np.max(np.abs(diag.v_k)) <= hp.q_max + 1e-9
        tracker["ok"] += bool(bounded and augmented_bonus_valid(mdp, diag) and optimism_sandwich(mdp, diag))

    result = run_training(mdp, hp, ConstantAdversary(mdp.reward_weights), episodes, seed,
                          options=TrainingOptions(episode_callback=check))
    epochs_ok = result.epochs <= epoch_bound(hp.d, hp.bound, result.steps_total)
    return SuiteResult(name="q-bound-and-sandwich", passed=tracker["ok"] + int(epochs_ok),
                       total=tracker["checked"] + 1, detail=f"valid episodes={tracker['checked']}")


def known_model_sanity(seed: int, n_instances: int = 10, episodes: int = 500, eta: float = 20.0) -> SuiteResult:
    """Exact transitions, no bonus, no ascension: the greedy policy of the accumulated Q is optimal.

    The entropic smoothing of V shifts action values by at most log|A| / (eta (1 - gamma)), so
    states whose optimal action gap is below twice that accept either action.
    """
    rng = np.random.default_rng(seed)
    passed, decided_states = 0, 0
    for i in range(n_instances):
        mdp = random_tabular_mdp(3, 2, 0.8, rng)
        pi_star, _ = optimal_policy(mdp)
        _, q_star = policy_evaluation(mdp, pi_star)
        ordered = np.sort(q_star, axis=1)
        resolution = 2.0 * math.log(mdp.n_actions) / (eta * (1.0 - mdp.gamma))
        decided = ordered[:, -1] - ordered[:, -2] > resolution
        decided_states += int(decided.sum())
        hp = Hyperparams(eta=eta, beta=0.0, omega=1.0, alpha=1.0, gamma=mdp.gamma, d=mdp.dim,
                         n_actions=mdp.n_actions, ascension="none")
        result = run_training(mdp, hp, ConstantAdversary(mdp.reward_weights), episodes, seed + i + 1,
                              options=TrainingOptions(exact_model=True))
        greedy = greedy_from_scores(result.state)
        passed += bool(np.array_equal(greedy.probs[decided], pi_star.probs[decided]))
    return SuiteResult(name="known-model-sanity", passed=passed, total=n_instances,
                       detail=f"decided states={decided_states}")


def run_suites(seed: int = 0) -> SuiteReport:
    rng = np.random.default_rng(seed)
    suites: List[Callable[[], SuiteResult]] = [
        lambda: oracle_cross_validation(rng),
        lambda: augmentation_identities(rng),
        sigmoid_bounds,
        lambda: numerics_suite(rng),
        closed_forms,
        lambda: compact_policy_equivalence(seed),
        lambda: q_bound_and_sandwich(seed),
        lambda: known_model_sanity(seed),
    ]
    results = []
    for suite in suites:
        result = suite()
        logger.info("%s: %d/%d", result.name, result.passed, result.total)
        results.append(result)
    return SuiteReport(results=results)
