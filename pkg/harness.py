"""
Experiment harness: config loading with overrides, scenario dispatch across
seeds, per-run artifacts, log-log slope fits and the invariant suites.
"""

import csv
import hashlib
import itertools
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError
from scipy import stats

from config import settings
from envsim import (ConstantAdversary, SwitchingAdversary, TrainingOptions, evaluate_output,
                    rng_stream, run_training, ADVERSARY_STREAM, OUTPUT_STREAM)
from errors import ConfigError, InvalidModelError, InvariantViolation, RejectedInputError
from imitation import expert_rng, fra_il_run, generate_expert_dataset
from instances import (Instance, hard_instance_K, hard_instance_tau, random_mixture_linear_mdp,
                       tabular_to_linear)
from learner import Hyperparams, theoretical_hyperparams, to_checkpoint
from mdp_core import TabularPolicy, load_mdp, optimal_policy, to_document
from suites import run_suites
from models import ExperimentConfig, ImitationSummary, InstanceConfig, LearnerConfig, RunSummary

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["config_hash", "run_id", "scenario", "seed", "K", "beta", "eta", "tau_E",
                  "final_regret", "mean_gap", "subopt", "epochs", "steps_total"]


# configuration

def _line_of_key(text: str, key: str) -> Optional[int]:
    needle = f'"{key}"'
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    return None


def _parse_override_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``dotted.key=value`` edits; values are parsed as JSON when possible."""
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"override '{override}' is not of the form key=value")
        path, raw = override.split("=", 1)
        keys = path.strip().split(".")
        node = document
        for key in keys[:-1]:
            if isinstance(node, list) and key.isdigit():
                node = node[int(key)]
                continue
            node = node.setdefault(key, {})
            if not isinstance(node, (dict, list)):
                raise ConfigError(f"override '{path}' descends into a scalar")
        last = keys[-1]
        if isinstance(node, list) and last.isdigit():
            node[int(last)] = _parse_override_value(raw)
        else:
            node[last] = _parse_override_value(raw)
    return document


def parse_config(text: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(document, dict):
        raise ConfigError("config must be a JSON object", line=1)
    document = apply_overrides(document, overrides)
    try:
        config = ExperimentConfig.model_validate(document)
    except ValidationError as exc:
        first = exc.errors()[0]
        keys = [str(part) for part in first["loc"] if isinstance(part, str)]
        location = ".".join(str(part) for part in first["loc"]) or "<root>"
        line = _line_of_key(text, keys[-1]) if keys else None
        raise ConfigError(f"{location}: {first['msg']}", line=line) from exc
    if config.instance is not None:
        _check_instance(config.instance, text)
    return config


def _check_instance(spec: InstanceConfig, text: str) -> None:
    """Generator range errors are config errors, reported at the offending key."""
    try:
        build_instance(spec)
    except (InvalidModelError, RejectedInputError, ValidationError, OSError) as exc:
        message = str(exc)
        named = [key for key in sorted(spec.model_fields_set) if re.search(rf"\b{key}\b", message)]
        line = _line_of_key(text, named[0]) if named else None
        raise ConfigError(f"instance: {message}", line=line or _line_of_key(text, "instance")) from exc


def load_config(path: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json", by_alias=True), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def build_instance(spec: InstanceConfig) -> Instance:
    if spec.kind == "hard-k":
        return hard_instance_K(spec.n_actions, spec.gamma, spec.eps, spec.star_index)
    if spec.kind == "hard-tau":
        return hard_instance_tau(spec.gamma, spec.eps, spec.w_max, spec.variant,
                                 n_actions=spec.n_actions, star_index=spec.star_index)
    if spec.kind == "mixture":
        return Instance(random_mixture_linear_mdp(spec.d, spec.n_states, spec.n_actions, spec.seed, spec.gamma))
    if spec.kind == "tabular":
        return Instance(tabular_to_linear(spec.transitions, spec.rewards, spec.gamma, spec.nu0))
    return Instance(load_mdp(spec.path))


def build_hyperparams(learner: LearnerConfig, instance: Instance, K: int, beta: Optional[float] = None,
                      eta: Optional[float] = None) -> Hyperparams:
    """Theory schedule for K episodes, with practical-mode overrides from the config.

    The worst-case eta is tiny at desk scale; tuned runs set ``eta`` or ``eta_grid``.
    """
    mdp = instance.mdp
    theory = theoretical_hyperparams(max(K, 2), mdp.gamma, mdp.dim, mdp.features.bound, mdp.n_actions,
                                     learner.delta, mdp.w_max or 1.0, mdp.r_max, learner.c_beta,
                                     ascension=learner.ascension)
    if learner.beta_mode == "theory":
        chosen_beta = theory.beta
    else:
        chosen_beta = learner.beta if beta is None else beta
    return theory.model_copy(update={
        "beta": chosen_beta,
        "eta": next(v for v in (eta, learner.eta, theory.eta) if v is not None),
        "omega": learner.omega if learner.omega is not None else theory.omega,
        "alpha": learner.alpha if learner.alpha is not None else theory.alpha,
    })


# runs

@dataclass
class RunSpec:
    config: Dict[str, Any]  # resolved single-run config, also the snapshot
    config_hash: str
    run_id: str
    seed: int
    K: int
    beta: float
    eta: Optional[float]
    tau_E: Optional[int]
    out_dir: str


def _resolved_seed(config: ExperimentConfig) -> int:
    return settings.seed if settings.seed is not None else config.seeds.master


def plan_runs(config: ExperimentConfig, out_root: str) -> List[RunSpec]:
    base = config.model_dump(mode="json", by_alias=True)
    digest = config_hash(config)
    master = _resolved_seed(config)
    betas: List[Optional[float]] = list(config.learner.beta_grid or [config.learner.beta])
    etas: List[Optional[float]] = list(config.learner.eta_grid or [config.learner.eta])
    taus: List[Optional[int]] = list(config.imitation.tau_e) if config.scenario == "imitation" else [None]

    specs: List[RunSpec] = []
    for K, beta, eta, tau in itertools.product(config.episode_grid(), betas, etas, taus):
        for offset in range(config.seeds.count):
            seed = master + offset
            resolved = json.loads(json.dumps(base))
            resolved["episodes"] = K
            resolved["learner"].update(beta=beta, beta_grid=None, eta=eta, eta_grid=None)
            resolved["seeds"] = {"master": seed, "count": 1}
            resolved["imitation"]["tau_E"] = [tau]
            eta_label = f"-e{eta:g}" if config.learner.eta_grid else ""
            tau_label = "" if config.scenario != "imitation" else f"-tau{tau if tau is not None else 'exact'}"
            run_id = f"{config.scenario}-K{K}-b{beta:g}{eta_label}{tau_label}-s{seed}"
            specs.append(RunSpec(resolved, digest, run_id, seed, K, beta, eta, tau,
                                 os.path.join(out_root, run_id)))
    return specs


def _write_json(path: str, payload: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(payload)


def execute_run(spec: RunSpec) -> Dict[str, Any]:
    """One (config, seed) run; writes its own directory and returns a results row."""
    config = ExperimentConfig.model_validate(spec.config)
    os.makedirs(spec.out_dir, exist_ok=True)
    _write_json(os.path.join(spec.out_dir, "config.json"), json.dumps(spec.config, indent=2, sort_keys=True))

    instance = build_instance(config.instance)
    hp = build_hyperparams(config.learner, instance, spec.K, spec.beta, spec.eta)
    log_path = os.path.join(spec.out_dir, "log.csv")
    row = {"config_hash": spec.config_hash, "run_id": spec.run_id, "scenario": config.scenario,
           "seed": spec.seed, "K": spec.K, "beta": hp.beta, "eta": hp.eta,
           "tau_E": spec.tau_E if spec.tau_E is not None else "",
           "final_regret": "", "mean_gap": "", "subopt": "", "epochs": "", "steps_total": ""}

    if config.scenario == "imitation":
        expert_data = None
        if spec.tau_E is not None:
            expert_data = generate_expert_dataset(instance.mdp, instance.expert, spec.tau_E,
                                                  expert_rng(spec.seed, 0), instance.reward_features)
            expert_data.save_csv(os.path.join(spec.out_dir, "expert.csv"))
        result = fra_il_run(instance, expert_data, spec.K, hp, spec.seed, log_path=log_path, run_id=spec.run_id)
        training = result.training
        row.update(subopt=result.mean_subopt, final_regret=training.final_regret)
        summary = ImitationSummary(
            run_id=spec.run_id, tau_E=spec.tau_E, K=spec.K, seeds=[spec.seed], subopt=[result.mean_subopt],
            subopt_mean=result.mean_subopt, output_subopt=[result.subopt], clip_events=[result.clip_events],
            expert_feature_error=[result.expert_feature_error], wall_time=training.wall_time)
        _write_json(os.path.join(spec.out_dir, "summary.json"), summary.model_dump_json(indent=2))
    else:
        options = TrainingOptions(exact_model=config.learner.exact_model,
                                  cap_episodes=config.learner.cap_episodes, track_validity=True)
        if config.scenario == "rl-adversarial":
            adversary = _switching_adversary(config, instance, spec.seed)
            comparator = config.adversary.comparator
            if comparator is not None:
                options.comparator = TabularPolicy(np.asarray(comparator))
            else:
                # best fixed policy in hindsight maximizes the return of the mean reward
                options.comparator, _ = optimal_policy(
                    instance.mdp.with_reward_weights(adversary.mean_weights(spec.K)))
        else:
            adversary = ConstantAdversary(instance.mdp.reward_weights)
        training = run_training(instance.mdp, hp, adversary, spec.K, spec.seed, options=options,
                                log_path=log_path, run_id=spec.run_id)
        summary = RunSummary(
            run_id=spec.run_id, scenario=config.scenario, seed=spec.seed, episodes=spec.K, beta=hp.beta,
            final_regret=training.final_regret, mean_gap=float(training.gaps.mean()),
            output_index=training.output_index + 1, epochs=training.epochs,
            epoch_bound=training.epoch_bound, steps_total=training.steps_total,
            validity_rate=training.validity_rate, numeric_warnings=training.numeric_warnings,
            wall_time=training.wall_time)
        _write_json(os.path.join(spec.out_dir, "summary.json"), summary.model_dump_json(indent=2))
        if config.output.output_draws and config.scenario == "rl-fixed":
            evaluation = evaluate_output(instance.mdp, training.policies, config.output.output_draws,
                                         rng_stream(spec.seed, 0, 1, OUTPUT_STREAM))
            logger.info("%s: output gap exact=%.5f sampled=%.5f +- %.5f", spec.run_id,
                        evaluation.exact_mean_gap, evaluation.sampled_mean_gap, evaluation.sampled_stderr)
        row.update(final_regret=training.final_regret, mean_gap=float(training.gaps.mean()))

    if training.epochs > training.epoch_bound:
        raise InvariantViolation("epoch-count bound",
                                 f"{training.epochs} epochs > {training.epoch_bound:.3f} in {spec.run_id}")
    if config.output.checkpoint:
        _write_json(os.path.join(spec.out_dir, "checkpoint.json"),
                    to_checkpoint(training.state).model_dump_json(indent=2))
    row.update(epochs=training.epochs, steps_total=training.steps_total)
    return row


def _switching_adversary(config: ExperimentConfig, instance: Instance, seed: int) -> SwitchingAdversary:
    weights = config.adversary.weights
    if weights is None:
        mdp = instance.mdp
        rng = rng_stream(seed, 0, 0, ADVERSARY_STREAM)
        # sized for non-negative features: rewards stay below r_max and norms below W_max
        l1 = float(np.abs(mdp.features.table).sum(axis=2).max()) or 1.0
        scale = min(mdp.r_max / l1, mdp.w_max / math.sqrt(mdp.dim))
        weights = [rng.uniform(0.0, 1.0, size=mdp.dim) * scale
                   for _ in range(config.adversary.n_random)]
    if config.adversary.kind == "constant":
        weights = weights[:1]
    return SwitchingAdversary(weights, config.adversary.period)


def _aggregate_imitation(config: ExperimentConfig, rows: List[Dict[str, Any]], out_root: str) -> None:
    groups: Dict[tuple, List[Dict[str, Any]]] = {}
    for row in rows:
        groups.setdefault((row["K"], row["eta"], row["tau_E"]), []).append(row)
    for (K, eta, tau), members in sorted(groups.items(), key=lambda item: (*item[0][:2], str(item[0][2]))):
        eta_label = f"-e{eta:g}" if config.learner.eta_grid else ""
        subopt = [float(m["subopt"]) for m in members]
        summaries = []
        for m in members:
            with open(os.path.join(out_root, m["run_id"], "summary.json"), "r", encoding="utf-8") as f:
                summaries.append(ImitationSummary.model_validate_json(f.read()))
        merged = ImitationSummary(
            run_id=f"imitation-K{K}{eta_label}-tau{tau if tau != '' else 'exact'}",
            tau_E=tau if tau != "" else None, K=K,
            seeds=[s.seeds[0] for s in summaries], subopt=subopt, subopt_mean=float(np.mean(subopt)),
            output_subopt=[s.output_subopt[0] for s in summaries],
            clip_events=[s.clip_events[0] for s in summaries],
            expert_feature_error=[s.expert_feature_error[0] for s in summaries],
            wall_time=sum(s.wall_time for s in summaries))
        _write_json(os.path.join(out_root, f"{merged.run_id}.json"), merged.model_dump_json(indent=2))


def run_experiment(config_path: str, jobs: int = 1, overrides: Sequence[str] = ()) -> int:
    """Execute every run of a config; returns the process exit status."""
    config = load_config(config_path, overrides)
    out_root = config.output.dir or os.path.join(settings.output_dir, config.name)
    os.makedirs(out_root, exist_ok=True)

    if config.scenario == "invariant-suite":
        report = run_suites(_resolved_seed(config))
        _write_json(os.path.join(out_root, "suite_report.json"), report.model_dump_json(indent=2))
        for result in report.results:
            logger.info("suite %-28s %d/%d %s", result.name, result.passed, result.total, result.detail)
        if not report.ok:
            failed = [r.name for r in report.results if not r.ok]
            raise InvariantViolation(", ".join(failed), "see suite_report.json")
        return 0

    specs = plan_runs(config, out_root)
    logger.info("%s: %d runs (config %s) into %s", config.name, len(specs), specs[0].config_hash, out_root)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(execute_run, specs))
    else:
        rows = [execute_run(spec) for spec in specs]

    rows.sort(key=lambda row: (row["config_hash"], row["seed"], row["K"], float(row["beta"]), float(row["eta"]),
                             str(row["tau_E"])))
    with open(os.path.join(out_root, "results.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    if config.scenario == "imitation":
        _aggregate_imitation(config, rows, out_root)
    with open(os.path.join(out_root, "instance.json"), "w", encoding="utf-8") as f:
        f.write(to_document(build_instance(config.instance).mdp).model_dump_json(indent=2))
    return 0


# slope fits

@dataclass
class SlopeFit:
    slope: float
    intercept: float
    residual: float
    n_points: int


def fit_loglog(x: Sequence[float], y: Sequence[float], min_points: int = 10) -> SlopeFit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < min_points:
        raise RejectedInputError(f"need at least {min_points} data points, got {x.size}")
    if np.any(x <= 0) or np.any(y <= 0):
        raise RejectedInputError("log-log fit needs strictly positive values")
    lx, ly = np.log(x), np.log(y)
    if np.ptp(lx) == 0:
        raise RejectedInputError("log-log fit needs at least two distinct x values")
    fit = stats.linregress(lx, ly)
    residual = float(np.sqrt(np.mean((ly - (fit.intercept + fit.slope * lx)) ** 2)))
    return SlopeFit(float(fit.slope), float(fit.intercept), residual, int(x.size))


def slope_fit(csv_path: str, column: str, x_column: Optional[str] = None) -> SlopeFit:
    """OLS slope of log(column) against log(x_column); x defaults to K, else episode."""
    with open(csv_path, "r", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        rows = list(reader)
    if x_column is None:
        x_column = "K" if "K" in header else "episode"
    for name in (column, x_column):
        if name not in header:
            raise RejectedInputError(f"column '{name}' not in {csv_path}")
    x = [float(row[x_column]) for row in rows]
    y = [float(row[column]) for row in rows]
    return fit_loglog(x, y)

