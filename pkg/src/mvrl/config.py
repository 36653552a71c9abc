"""
Centralised, validated experiment configuration.

All YAML keys are parsed once at startup into a typed Pydantic model.
Modules import ``ExperimentConfig`` (or one of its sections) instead of
passing raw dictionaries around. Unknown keys are rejected at every level.
"""

import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .constants import (
    BELIEF_DIM,
    CARTPOLE_DT,
    DATASET_CAPACITY,
    DEFAULT_BASELINE_UNITS,
    DEFAULT_EXTRA_DIMS,
    DEFAULT_NOISE_SIGMA,
    DEFAULT_POLICY_HIDDEN,
    EVAL_EPISODES,
    GRIDPONG_PADDLE_LENGTH,
    GRIDPONG_POINTS_TO_WIN,
    GRIDPONG_SIZE,
    KEY_ELEMENT_PERCENTILE,
    LATENT_DIM_GRID,
    LATENT_DIM_VECTOR,
    MLP_BASELINE_HIDDEN,
    MODEL_BATCH_SIZE,
    MODEL_HIDDEN_DIM,
    MODEL_LEARNING_RATE,
    MODEL_PREDICTION_STEPS,
    MODEL_RECONSTRUCTION_STEPS,
    MODEL_SEQ_LEN,
    PLAN_CANDIDATES,
    PLAN_HORIZON,
    PPO_ACTORS,
    PPO_CLIP,
    PPO_ENTROPY_COEFF,
    PPO_EPOCHS,
    PPO_GAMMA,
    PPO_HORIZON,
    PPO_LAMBDA,
    PPO_MINIBATCH,
    PPO_STEPSIZE,
    PPO_TARGET_KL,
    PPO_VALUE_COEFF,
    RANDOM_ROLLOUTS_CARTPOLE,
    REINFORCE_BASELINE_LR,
    REINFORCE_EPISODES,
    REINFORCE_ETA,
    ROLLOUT_MAX_STEPS,
    SALIENCY_RATIO,
    SUCCESS_THRESHOLD,
)

ENV_OBSERVATION_KIND = {"cartpole": "vector", "gridpong": "grid"}
VECTOR_VIEW_KINDS = frozenset({"identity", "dummy_noise"})
GRID_VIEW_KINDS = frozenset({"identity", "transpose", "hswap", "invert", "mirror"})


class StrictModel(BaseModel):
    """Base for every config section: unknown keys are configuration errors."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


# ── environment and views ─────────────────────────────────────────────

class EnvConfig(StrictModel):
    name: Literal["cartpole", "gridpong"] = "cartpole"
    max_steps: Optional[int] = Field(default=None, ge=1)
    dt: float = Field(default=CARTPOLE_DT, gt=0)
    grid_size: int = Field(default=GRIDPONG_SIZE, ge=6)
    paddle_length: int = Field(default=GRIDPONG_PADDLE_LENGTH, ge=1)
    points_to_win: int = Field(default=GRIDPONG_POINTS_TO_WIN, ge=1)
    planning_reward: Literal["alive", "upright"] = "alive"

    @property
    def observation_kind(self) -> str:
        return ENV_OBSERVATION_KIND[self.name]


class ViewSpec(StrictModel):
    """Declarative description of one observation model."""

    view_id: int = Field(ge=1)
    kind: Literal["identity", "dummy_noise", "transpose", "hswap", "invert", "mirror"] = "identity"
    extra_dims: int = Field(default=DEFAULT_EXTRA_DIMS, ge=0)
    noise_sigma: float = Field(default=DEFAULT_NOISE_SIGMA, ge=0)
    rotate: bool = True
    flip: bool = True


class ScheduleConfig(StrictModel):
    mode: Literal["per_episode", "per_step"] = "per_episode"


# ── learners ──────────────────────────────────────────────────────────

class PolicyConfig(StrictModel):
    hidden_sizes: Tuple[int, ...] = DEFAULT_POLICY_HIDDEN
    baseline_units: int = Field(default=DEFAULT_BASELINE_UNITS, ge=1)


class PPOConfig(StrictModel):
    horizon: int = Field(default=PPO_HORIZON, ge=1)
    stepsize: float = Field(default=PPO_STEPSIZE, gt=0)
    epochs: int = Field(default=PPO_EPOCHS, ge=1)
    minibatch: int = Field(default=PPO_MINIBATCH, ge=1)
    gamma: float = Field(default=PPO_GAMMA, ge=0, le=1)
    lambda_: float = Field(default=PPO_LAMBDA, ge=0, le=1, alias="lambda")
    actors: int = Field(default=PPO_ACTORS, ge=1)
    clip: float = Field(default=PPO_CLIP, gt=0)
    value_coeff: float = PPO_VALUE_COEFF
    entropy_coeff: float = PPO_ENTROPY_COEFF
    max_grad_norm: Optional[float] = Field(default=None, gt=0)
    target_kl: Optional[float] = Field(default=PPO_TARGET_KL, gt=0)
    adam_eps: float = Field(default=1e-5, gt=0)


class ReinforceConfig(StrictModel):
    eta: float = Field(default=REINFORCE_ETA, gt=0)
    episodes: int = Field(default=REINFORCE_EPISODES, ge=1)
    gamma: float = Field(default=PPO_GAMMA, ge=0, le=1)
    baseline_stepsize: float = Field(default=REINFORCE_BASELINE_LR, gt=0)
    baseline_steps: int = Field(default=5, ge=0)


class MFConfig(StrictModel):
    algorithm: Literal["ppo", "reinforce"] = "ppo"


# ── multi-view model ──────────────────────────────────────────────────

class ModelConfig(StrictModel):
    latent_dim: Optional[int] = Field(default=None, ge=1)
    belief_dim: int = Field(default=BELIEF_DIM, ge=1)
    hidden_dim: int = Field(default=MODEL_HIDDEN_DIM, ge=1)
    batch_size: int = Field(default=MODEL_BATCH_SIZE, ge=1)
    seq_len: int = Field(default=MODEL_SEQ_LEN, ge=2)
    iterations: int = Field(default=200, ge=0)
    prediction_steps: int = Field(default=MODEL_PREDICTION_STEPS, ge=0)
    reconstruction_steps: int = Field(default=MODEL_RECONSTRUCTION_STEPS, ge=0)
    stepsize: float = Field(default=MODEL_LEARNING_RATE, gt=0)
    reconstruction_weight: float = Field(default=1.0, ge=0)
    prediction_weight: float = Field(default=1.0, ge=0)
    alignment_weight: float = Field(default=1.0, ge=0)
    alignment_in_both_phases: bool = True
    squared_norm: bool = False
    corresponding: bool = True
    max_grad_norm: Optional[float] = Field(default=None, gt=0)
    validation_every: int = Field(default=10, ge=1)
    random_rollouts: int = Field(default=RANDOM_ROLLOUTS_CARTPOLE, ge=0)
    rollout_max_steps: Optional[int] = Field(default=None, ge=1)

    def resolved_latent_dim(self, observation_kind: str) -> int:
        if self.latent_dim is not None:
            return self.latent_dim
        return LATENT_DIM_GRID if observation_kind == "grid" else LATENT_DIM_VECTOR


# ── model-based control ───────────────────────────────────────────────

class PlanConfig(StrictModel):
    horizon: int = Field(default=PLAN_HORIZON, ge=1)
    candidates: int = Field(default=PLAN_CANDIDATES, ge=1)
    discount: float = Field(default=1.0, ge=0, le=1)
    enumerate_if_possible: bool = True
    canonical_view: int = Field(default=1, ge=1)


class MBConfig(StrictModel):
    model: Literal["multiview", "mlp", "oracle"] = "multiview"
    random_rollouts: int = Field(default=RANDOM_ROLLOUTS_CARTPOLE, ge=0)
    rollout_max_steps: int = Field(default=ROLLOUT_MAX_STEPS, ge=1)
    max_iter: int = Field(default=50, ge=0)
    rollouts_per_iter: int = Field(default=1, ge=0)
    train_iterations: int = Field(default=20, ge=0)
    initial_train_iterations: int = Field(default=100, ge=0)
    dataset_capacity: int = Field(default=DATASET_CAPACITY, ge=1)
    success_threshold: float = SUCCESS_THRESHOLD
    mlp_hidden: int = Field(default=MLP_BASELINE_HIDDEN, ge=1)
    mlp_stepsize: float = Field(default=1e-3, gt=0)
    mlp_batch_size: int = Field(default=64, ge=1)


class MVPTConfig(StrictModel):
    source_views: List[int] = Field(default_factory=lambda: [1])
    target_views: List[int] = Field(default_factory=lambda: [2])
    random_rollouts: int = Field(default=RANDOM_ROLLOUTS_CARTPOLE, ge=0)
    rollout_max_steps: int = Field(default=ROLLOUT_MAX_STEPS, ge=1)
    model_iterations: int = Field(default=300, ge=0)
    policy_samples: int = Field(default=100_000, ge=0)


# ── evaluation, analysis, root ────────────────────────────────────────

class EvalConfig(StrictModel):
    episodes: int = Field(default=EVAL_EPISODES, ge=1)
    every_samples: int = Field(default=PPO_HORIZON, ge=1)
    success_threshold: float = SUCCESS_THRESHOLD


class AnalysisConfig(StrictModel):
    percentile: float = Field(default=KEY_ELEMENT_PERCENTILE, gt=0, lt=100)
    saliency_ratio: float = Field(default=SALIENCY_RATIO, gt=0, le=1)
    episodes: int = Field(default=20, ge=1)
    checkpoint: Optional[Path] = None


class ConfigError(Exception):
    """Raised when the configuration file cannot be found or parsed."""


ExperimentKind = Literal["train-mf", "train-mf-independent", "train-model", "mb-mpc", "mvpt", "analyze"]


class ExperimentConfig(StrictModel):
    """Top-level experiment configuration – mirrors the YAML config file."""

    kind: ExperimentKind = "train-mf"
    name: Optional[str] = None
    debug: bool = False
    seed: int = Field(default=0, ge=0)
    sample_budget: int = Field(default=200_000, ge=0)
    output_dir: Optional[Path] = None
    env: EnvConfig = Field(default_factory=EnvConfig)
    views: List[ViewSpec] = Field(default_factory=lambda: [ViewSpec(view_id=1)])
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    mf: MFConfig = Field(default_factory=MFConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    ppo: PPOConfig = Field(default_factory=PPOConfig)
    reinforce: ReinforceConfig = Field(default_factory=ReinforceConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    plan: PlanConfig = Field(default_factory=PlanConfig)
    mb: MBConfig = Field(default_factory=MBConfig)
    mvpt: MVPTConfig = Field(default_factory=MVPTConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)

    @field_validator("views")
    @classmethod
    def _views_sorted_and_unique(cls, views: List[ViewSpec]) -> List[ViewSpec]:
        if not views:
            raise ValueError("at least one view is required")
        ids = [v.view_id for v in views]
        if len(set(ids)) != len(ids):
            raise ValueError(f"view ids must be unique, got {ids}")
        return sorted(views, key=lambda v: v.view_id)

    @model_validator(mode="after")
    def _cross_section_constraints(self) -> "ExperimentConfig":
        allowed = VECTOR_VIEW_KINDS if self.env.observation_kind == "vector" else GRID_VIEW_KINDS
        for spec in self.views:
            if spec.kind not in allowed:
                raise ValueError(
                    f"view {spec.view_id}: transform '{spec.kind}' does not apply to "
                    f"{self.env.observation_kind} observations of '{self.env.name}'"
                )
        ids = set(self.view_ids)
        for field_name in ("source_views", "target_views"):
            unknown = set(getattr(self.mvpt, field_name)) - ids
            if unknown and self.kind == "mvpt":
                raise ValueError(f"mvpt.{field_name} references undeclared views {sorted(unknown)}")
        if self.plan.canonical_view not in ids:
            raise ValueError(f"plan.canonical_view {self.plan.canonical_view} is not a declared view")
        return self

    @property
    def view_ids(self) -> List[int]:
        return [v.view_id for v in self.views]

    @property
    def run_name(self) -> str:
        return self.name or self.kind

    @classmethod
    def from_yaml(cls, config_path: Path) -> "ExperimentConfig":
        """Load, parse and **validate** the YAML configuration file.

        Raises:
            ConfigError: If the file is missing or contains invalid YAML.
        """
        if not config_path.is_file():
            error_msg = (
                f"FATAL: Configuration file '{config_path}' not found.\n"
                "Pass an existing file with --config, e.g. one of the examples:\n"
                "  mvrl train-mf --config configs/cartpole_mvmf.yaml"
            )
            logging.error("=" * 80)
            logging.error(error_msg)
            logging.error("=" * 80)
            raise ConfigError(error_msg)

        try:
            with open(config_path, "r") as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            logging.error(f"Could not parse YAML configuration: {e}")
            raise ConfigError(f"YAML parsing error in {config_path}: {e}") from e

        if not isinstance(raw, dict):
            raise ConfigError(f"Top level of {config_path} must be a mapping, got {type(raw).__name__}")

        return cls.model_validate(raw)

    def to_yaml(self) -> str:
        """Serialise the effective configuration (used for ``config.resolved``)."""
        data = self.model_dump(mode="json", by_alias=True)
        return yaml.safe_dump(data, sort_keys=False)
