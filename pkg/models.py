from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Optional, List, Dict, Any, Literal, Union

# MDP document (instances serialize through this schema)
class MdpDocument(BaseModel):
    d: int = Field(ge=1)
    n_states: int = Field(ge=1)
    n_actions: int = Field(ge=1)
    gamma: float = Field(ge=0.0, lt=1.0)
    r_max: float = 1.0
    nu0: List[float]
    features: List[List[float]]
    m_factor: List[List[float]]
    w: List[float]
    bound: Optional[float] = None
    w_max: Optional[float] = None

# Experiment configuration sections
class InstanceConfig(BaseModel):
    kind: Literal["hard-k", "hard-tau", "mixture", "tabular", "file"]
    gamma: float = Field(default=0.9, ge=0.0, lt=1.0)
    # hard families
    n_actions: int = Field(default=2, ge=1)
    eps: float = 0.1
    star_index: int = 0
    w_max: float = 1.0
    variant: Literal[0, 1] = 0
    # mixture generator
    d: int = Field(default=3, ge=1)
    n_states: int = Field(default=5, ge=1)
    seed: int = 0
    # explicit tabular model
    transitions: Optional[List[List[List[float]]]] = None
    rewards: Optional[List[List[float]]] = None
    nu0: Optional[List[float]] = None
    # serialized LinearMdp
    path: Optional[str] = None

    @model_validator(mode="after")
    def check_kind_fields(self):
        if self.kind == "tabular" and (self.transitions is None or self.rewards is None):
            raise ValueError("tabular instances need 'transitions' and 'rewards'")
        if self.kind == "file" and not self.path:
            raise ValueError("file instances need 'path'")
        return self

class LearnerConfig(BaseModel):
    beta_mode: Literal["practical", "theory"] = "practical"
    beta: float = Field(default=1.0, ge=0.0)
    beta_grid: Optional[List[float]] = None
    c_beta: float = Field(default=1.0, gt=0.0)
    eta: Optional[float] = Field(default=None, gt=0.0)  # None: worst-case schedule
    eta_grid: Optional[List[float]] = None
    omega: Optional[float] = Field(default=None, gt=0.0)
    alpha: Optional[float] = Field(default=None, gt=0.0)
    delta: float = Field(default=0.1, gt=0.0, lt=1.0)
    ascension: Literal["sigmoid", "indicator", "none"] = "sigmoid"
    cap_episodes: bool = False
    exact_model: bool = False

    @field_validator("eta_grid")
    @classmethod
    def check_eta_grid(cls, value):
        if value is not None and (not value or min(value) <= 0.0):
            raise ValueError("eta_grid needs at least one positive learning rate")
        return value

class AdversaryConfig(BaseModel):
    kind: Literal["constant", "switching"] = "constant"
    weights: Optional[List[List[float]]] = None
    period: int = Field(default=100, ge=1)
    n_random: int = Field(default=2, ge=1)
    comparator: Optional[List[List[float]]] = None

class SeedsConfig(BaseModel):
    master: int = 0
    count: int = Field(default=1, ge=1)

class OutputConfig(BaseModel):
    dir: Optional[str] = None
    checkpoint: bool = True
    output_draws: int = Field(default=0, ge=0)

class ImitationConfig(BaseModel):
    tau_e: List[Optional[int]] = Field(default_factory=lambda: [None], alias="tau_E")

    model_config = {"populate_by_name": True}

    @field_validator("tau_e")
    @classmethod
    def check_sizes(cls, value):
        for tau in value:
            if tau is not None and tau < 1:
                raise ValueError("tau_E entries must be positive or null (exact expert features)")
        return value

class ExperimentConfig(BaseModel):
    scenario: Literal["rl-fixed", "rl-adversarial", "imitation", "invariant-suite"]
    name: str = "experiment"
    episodes: Union[int, List[int]] = 100
    instance: Optional[InstanceConfig] = None
    learner: LearnerConfig = Field(default_factory=LearnerConfig)
    adversary: AdversaryConfig = Field(default_factory=AdversaryConfig)
    seeds: SeedsConfig = Field(default_factory=SeedsConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    imitation: ImitationConfig = Field(default_factory=ImitationConfig)

    @model_validator(mode="after")
    def check_scenario(self):
        if self.scenario != "invariant-suite" and self.instance is None:
            raise ValueError(f"scenario '{self.scenario}' needs an 'instance' section")
        if min(self.episode_grid()) < 1:
            raise ValueError("episodes must be positive")
        return self

    def episode_grid(self) -> List[int]:
        return [self.episodes] if isinstance(self.episodes, int) else list(self.episodes)

# Run artifacts
class RunSummary(BaseModel):
    run_id: str
    scenario: str
    seed: int
    episodes: int
    beta: float
    final_regret: float
    mean_gap: float
    output_index: int
    epochs: int
    epoch_bound: float
    steps_total: int
    validity_rate: Optional[float] = None
    numeric_warnings: Dict[str, int] = Field(default_factory=dict)
    wall_time: float

class ImitationSummary(BaseModel):
    run_id: str
    tau_E: Optional[int]
    K: int
    seeds: List[int]
    subopt: List[float]
    subopt_mean: float
    output_subopt: List[float]
    clip_events: List[int]
    expert_feature_error: List[float]
    wall_time: float

class LearnerCheckpoint(BaseModel):
    hyperparams: Dict[str, Any]
    theta_sum: List[float]
    episode_count: int
    theta_k: Optional[List[float]]
    anchor_inv: List[List[float]]
    epoch_index: int
    epoch_start_episode: int
    episode_index: int
    dataset_length: int
    log_det: float

class SuiteResult(BaseModel):
    name: str
    passed: int
    total: int
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.passed == self.total

class SuiteReport(BaseModel):
    results: List[SuiteResult]

    @property
    def ok(self) -> bool:
        return all(result.ok for result in self.results)
