"""
Model-based control on top of the multi-view model.

``run_mb_loop`` alternates model training on random plus on-policy data
with MPC-driven collection. ``mvpt_train``/``mvpt_act`` learn a policy on
latent states inferred from some views and act through the encoder of
another.
"""

import itertools
import logging
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .autodiff import AdamOptimizer, as_tensor
from .config import ExperimentConfig, PlanConfig
from .envs import cartpole_dynamics
from .mvmodel import LossRecord, ModelTrainer, MultiViewModel, SequenceBatch, UnknownViewError
from .policy_mf import (
    CurvePoint,
    RolloutCollector,
    act,
    evaluate_views,
    make_learner,
)
from .utils import SeedBank
from .views import MultiViewEnv

logger = logging.getLogger(__name__)

RewardEvaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]


class ControlError(Exception):
    """Base class for planning and control failures."""


class MissingRewardEvaluatorError(ControlError):
    pass


# ── experience ────────────────────────────────────────────────────────

@dataclass
class EpisodeRecord:
    """One episode: T actions between T+1 canonical observations."""

    view_ids: np.ndarray
    canonical: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def length(self) -> int:
        return len(self.actions)


class ExperienceDataset:
    """
    Random-policy and on-policy episode pools with a shared step capacity.

    Episodes keep their canonical observations, so a sequence can be
    rendered through any view: corresponding batches replay the same
    hidden trajectory through every view. Past the capacity the oldest
    episode is dropped, whichever pool holds it.

    ``collected_steps`` and ``view_steps`` count every interaction ever
    added, evicted episodes included.
    """

    POOLS = ("rand", "rl")

    def __init__(self, env: MultiViewEnv, capacity: int, view_ids: Optional[Sequence[int]] = None):
        self.env = env
        self.capacity = capacity
        self.view_ids = sorted(view_ids or env.view_ids)
        self.pools: Dict[str, Deque[EpisodeRecord]] = {name: deque() for name in self.POOLS}
        self._stamps: Dict[str, Deque[int]] = {name: deque() for name in self.POOLS}
        self._clock = itertools.count()
        self.collected_steps = 0
        self.view_steps: Counter = Counter()

    @property
    def total_steps(self) -> int:
        return sum(ep.length for pool in self.pools.values() for ep in pool)

    def __len__(self) -> int:
        return sum(len(pool) for pool in self.pools.values())

    def episodes(self) -> List[EpisodeRecord]:
        return [ep for name in self.POOLS for ep in self.pools[name]]

    def steps_in_views(self, view_ids: Iterable[int]) -> int:
        return sum(self.view_steps[vid] for vid in set(view_ids))

    def add(self, record: EpisodeRecord, pool: str = "rand") -> None:
        if pool not in self.pools:
            raise ValueError(f"Unknown pool '{pool}', expected one of {self.POOLS}")
        self.pools[pool].append(record)
        self._stamps[pool].append(next(self._clock))
        self.collected_steps += record.length
        # view of the observation each action was taken on
        self.view_steps.update(int(vid) for vid in record.view_ids[:record.length])
        while self.total_steps > self.capacity and len(self) > 1:
            oldest = min((name for name in self.POOLS if self.pools[name]), key=lambda name: self._stamps[name][0])
            self.pools[oldest].popleft()
            self._stamps[oldest].popleft()

    def _sample_rows(self, eligible: Sequence[EpisodeRecord], batch_size: int, length: int,
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        canonical, actions = [], []
        for _ in range(batch_size):
            ep = eligible[int(rng.integers(len(eligible)))]
            start = int(rng.integers(ep.length + 1 - length + 1))
            canonical.append(ep.canonical[start:start + length])
            actions.append(ep.actions[start:start + length - 1])
        return np.stack(canonical), np.stack(actions)

    def _render(self, view_id: int, canonical: np.ndarray, rng: np.random.Generator) -> torch.Tensor:
        batch, length = canonical.shape[:2]
        flat = self.env.render_batch(view_id, canonical.reshape((batch * length,) + canonical.shape[2:]), rng)
        return as_tensor(flat.reshape(batch, length, -1))

    def sample_sequences(self, batch_size: int, seq_len: int, rng: np.random.Generator,
                         corresponding: bool = True) -> SequenceBatch:
        """
        Samples B sub-sequences per view.

        The sequence length is ``seq_len`` capped by the median stored
        episode length (in observations), so short random episodes stay usable.
        """
        episodes = [ep for ep in self.episodes() if ep.length >= 1]
        if not episodes:
            raise ControlError("Cannot sample sequences from an empty dataset")
        median = int(np.median([ep.length + 1 for ep in episodes]))
        length = max(2, min(seq_len, median))
        eligible = [ep for ep in episodes if ep.length + 1 >= length]

        observations, actions = {}, {}
        if corresponding:
            canonical, acts = self._sample_rows(eligible, batch_size, length, rng)
            shared = torch.as_tensor(acts, dtype=torch.long)
            for vid in self.view_ids:
                observations[vid] = self._render(vid, canonical, rng)
                actions[vid] = shared
        else:
            for vid in self.view_ids:
                canonical, acts = self._sample_rows(eligible, batch_size, length, rng)
                observations[vid] = self._render(vid, canonical, rng)
                actions[vid] = torch.as_tensor(acts, dtype=torch.long)
        return SequenceBatch(observations, actions, corresponding)

    def transitions(self, view_id: int, rng: Optional[np.random.Generator] = None
                    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(o_t, a_t, o_{t+1}) over every stored step, rendered through ``view_id``."""
        obs, acts, nxt = [], [], []
        for ep in self.episodes():
            rendered = self.env.render_batch(view_id, ep.canonical, rng)
            obs.append(rendered[:-1])
            nxt.append(rendered[1:])
            acts.append(ep.actions)
        return (as_tensor(np.concatenate(obs)), torch.as_tensor(np.concatenate(acts), dtype=torch.long),
                as_tensor(np.concatenate(nxt)))


def record_episode(env: MultiViewEnv, choose: Callable[[np.ndarray, int], int], rng: np.random.Generator,
                   max_steps: int, view_id: Optional[int] = None) -> Tuple[EpisodeRecord, float]:
    obs, view = env.reset(rng, view_id)
    views, canonical, actions, rewards = [view], [env.base.observation()], [], []
    for _ in range(max_steps):
        action = int(choose(obs, view))
        result = env.step(action)
        actions.append(action)
        rewards.append(result.reward)
        canonical.append(env.base.observation())
        views.append(result.view_id)
        obs, view = result.observation, result.view_id
        if result.done:
            break
    record = EpisodeRecord(np.asarray(views), np.stack(canonical), np.asarray(actions, dtype=np.int64),
                           np.asarray(rewards, dtype=np.float64))
    return record, float(sum(rewards))


def collect_random(env: MultiViewEnv, episodes: int, rng: np.random.Generator, max_steps: int,
                   dataset: Optional[ExperienceDataset] = None, capacity: int = 10_000,
                   max_samples: Optional[int] = None) -> ExperienceDataset:
    """
    Uniform-random-action episodes into the random pool.

    With ``max_samples`` set, collection stops once that many interactions
    were taken by this call; the last episode is cut short to fit.
    """
    dataset = dataset if dataset is not None else ExperienceDataset(env, capacity)
    start = dataset.collected_steps
    collected = 0
    for _ in range(episodes):
        steps = max_steps
        if max_samples is not None:
            steps = min(steps, max_samples - (dataset.collected_steps - start))
            if steps <= 0:
                break
        record, _ = record_episode(env, lambda _obs, _view: int(rng.integers(env.action_count)), rng, steps)
        dataset.add(record, "rand")
        collected += 1
    logger.info(f"Collected {collected} random episodes, {dataset.collected_steps - start} interactions "
                f"({dataset.total_steps} steps in the dataset).")
    return dataset


# ── planning models ───────────────────────────────────────────────────

class PlanningModel(Protocol):
    """What the MPC planner needs from a dynamics model."""

    action_count: int

    def initial_belief(self, batch_size: int) -> torch.Tensor: ...

    def infer(self, view_id: int, h: torch.Tensor, o: torch.Tensor) -> torch.Tensor: ...

    def step_belief(self, s: torch.Tensor, h: torch.Tensor, a: torch.Tensor) -> torch.Tensor: ...

    def predict_latent(self, h: torch.Tensor) -> torch.Tensor: ...

    def decode(self, view_id: int, s: torch.Tensor) -> torch.Tensor: ...


class OracleCartPoleModel:
    """The true cart-pole dynamics behind the planner interface (canonical view only)."""

    def __init__(self, view_id: int = 1, dt: float = 0.02):
        self.view_id = view_id
        self.dt = dt
        self.action_count = 2

    def _check(self, view_id: int) -> None:
        if view_id != self.view_id:
            raise UnknownViewError(f"Oracle model only reads the canonical view {self.view_id}, got {view_id}")

    def initial_belief(self, batch_size: int) -> torch.Tensor:
        return torch.zeros(batch_size, 4)

    def infer(self, view_id: int, h: torch.Tensor, o: torch.Tensor) -> torch.Tensor:
        self._check(view_id)
        return o

    def step_belief(self, s: torch.Tensor, h: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return cartpole_dynamics(s, a.to(s.dtype), self.dt)

    def predict_latent(self, h: torch.Tensor) -> torch.Tensor:
        return h

    def decode(self, view_id: int, s: torch.Tensor) -> torch.Tensor:
        self._check(view_id)
        return s


class MLPDynamicsModel(nn.Module):
    """Single-view deterministic baseline: o_{t+1} = o_t + f(o_t, a_t) with one ReLU hidden layer."""

    def __init__(self, obs_dim: int, action_count: int, hidden: int = 128, view_id: int = 1):
        super().__init__()
        self.obs_dim = obs_dim
        self.action_count = action_count
        self.view_id = view_id
        self.net = nn.Sequential(nn.Linear(obs_dim + action_count, hidden), nn.ReLU(), nn.Linear(hidden, obs_dim))

    def _check(self, view_id: int) -> None:
        if view_id != self.view_id:
            raise UnknownViewError(f"MLP dynamics model was trained on view {self.view_id}, got {view_id}")

    def forward(self, o: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        one_hot = nn.functional.one_hot(a, self.action_count).to(o.dtype)
        return o + self.net(torch.cat([o, one_hot], dim=-1))

    def initial_belief(self, batch_size: int) -> torch.Tensor:
        return torch.zeros(batch_size, self.obs_dim)

    def infer(self, view_id: int, h: torch.Tensor, o: torch.Tensor) -> torch.Tensor:
        self._check(view_id)
        return o

    def step_belief(self, s: torch.Tensor, h: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return self(s, a)

    def predict_latent(self, h: torch.Tensor) -> torch.Tensor:
        return h

    def decode(self, view_id: int, s: torch.Tensor) -> torch.Tensor:
        self._check(view_id)
        return s


class MLPDynamicsTrainer:
    """Minibatch MSE regression of the MLP baseline on every stored transition."""

    def __init__(self, model: MLPDynamicsModel, stepsize: float, batch_size: int, steps_per_iteration: int):
        self.model = model
        self.batch_size = batch_size
        self.steps_per_iteration = steps_per_iteration
        self.optimizer = AdamOptimizer(model.parameters(), lr=stepsize, name="mlp-dynamics")
        self.iteration = 0
        self.curves: List[LossRecord] = []

    def train(self, source: ExperienceDataset, iterations: int, rng: np.random.Generator,
              generator: torch.Generator, validation: Optional[SequenceBatch] = None) -> List[LossRecord]:
        obs, actions, nxt = source.transitions(self.model.view_id, rng)
        for _ in range(iterations):
            self.iteration += 1
            total = 0.0
            for _ in range(self.steps_per_iteration):
                idx = torch.as_tensor(rng.integers(obs.shape[0], size=min(self.batch_size, obs.shape[0])))
                loss = torch.mean(torch.sum((self.model(obs[idx], actions[idx]) - nxt[idx]) ** 2, dim=-1))
                total += self.optimizer.minimize(loss)
            self.curves.append(LossRecord(self.iteration, "L_mlp", self.model.view_id,
                                          total / max(1, self.steps_per_iteration)))
        return self.curves


# ── MPC ───────────────────────────────────────────────────────────────

def candidate_sequences(action_count: int, plan_config: PlanConfig, rng: np.random.Generator) -> np.ndarray:
    """All |A|^H sequences in lexicographic order when that fits in C, else C uniform draws."""
    horizon, count = plan_config.horizon, plan_config.candidates
    if plan_config.enumerate_if_possible and action_count ** horizon <= count:
        return np.array(list(itertools.product(range(action_count), repeat=horizon)), dtype=np.int64)
    return rng.integers(action_count, size=(count, horizon))


def score_sequences(model: PlanningModel, s: torch.Tensor, h: torch.Tensor, candidates: np.ndarray,
                    plan_config: PlanConfig, reward_fn: RewardEvaluator) -> np.ndarray:
    """
    Rolls every candidate through memory, prior and decoder and sums the
    (discounted) reward of each predicted canonical observation.
    """
    count, horizon = candidates.shape
    s = s.expand(count, -1)
    h = h.expand(count, -1)
    scores = np.zeros(count, dtype=np.float64)
    with torch.no_grad():
        for k in range(horizon):
            actions = torch.as_tensor(candidates[:, k], dtype=torch.long)
            h = model.step_belief(s, h, actions)
            s = model.predict_latent(h)
            predicted = model.decode(plan_config.canonical_view, s).numpy()
            scores += plan_config.discount ** k * np.asarray(reward_fn(predicted, candidates[:, k]), dtype=np.float64)
    return scores


def _reward_for(plan_config: PlanConfig, reward_evaluators: Mapping[int, RewardEvaluator]) -> RewardEvaluator:
    if plan_config.canonical_view not in reward_evaluators:
        raise MissingRewardEvaluatorError(
            f"No reward evaluator for planning view {plan_config.canonical_view} "
            f"(have {sorted(reward_evaluators)})"
        )
    return reward_evaluators[plan_config.canonical_view]


def plan_from_latent(model: PlanningModel, s: torch.Tensor, h: torch.Tensor, plan_config: PlanConfig,
                     rng: np.random.Generator, reward_evaluators: Mapping[int, RewardEvaluator]) -> int:
    reward_fn = _reward_for(plan_config, reward_evaluators)
    candidates = candidate_sequences(model.action_count, plan_config, rng)
    scores = score_sequences(model, s, h, candidates, plan_config, reward_fn)
    # np.argmax picks the lowest index among equal scores.
    return int(candidates[int(np.argmax(scores)), 0])


def mpc_act(model: PlanningModel, h_t: torch.Tensor, o_t: np.ndarray, view_id: int, plan_config: PlanConfig,
            rng: np.random.Generator, reward_evaluators: Mapping[int, RewardEvaluator]) -> int:
    """First action of the best-scoring candidate sequence from the current belief."""
    with torch.no_grad():
        s = model.infer(view_id, h_t.reshape(1, -1), as_tensor(o_t).reshape(1, -1))
    return plan_from_latent(model, s, h_t.reshape(1, -1), plan_config, rng, reward_evaluators)


class MPCAgent:
    """Keeps the model's belief across steps and re-plans every step."""

    def __init__(self, model: PlanningModel, plan_config: PlanConfig, reward_evaluators: Mapping[int, RewardEvaluator],
                 rng: np.random.Generator):
        self.model = model
        self.plan_config = plan_config
        self.reward_evaluators = reward_evaluators
        self.rng = rng
        self.h = model.initial_belief(1)

    def reset(self) -> None:
        self.h = self.model.initial_belief(1)

    def act(self, obs: np.ndarray, view_id: int) -> int:
        with torch.no_grad():
            s = self.model.infer(view_id, self.h, as_tensor(obs).reshape(1, -1))
            action = plan_from_latent(self.model, s, self.h, self.plan_config, self.rng, self.reward_evaluators)
            self.h = self.model.step_belief(s, self.h, torch.tensor([action]))
        return action


# ── model-based loop ──────────────────────────────────────────────────

@dataclass
class MBResult:
    model: object
    curve: List[CurvePoint] = field(default_factory=list)
    losses: List[LossRecord] = field(default_factory=list)
    interactions: int = 0
    interactions_to_success: Optional[int] = None


def build_multiview_model(config: ExperimentConfig, env: MultiViewEnv) -> MultiViewModel:
    return MultiViewModel({vid: env.observation_dim(vid) for vid in env.view_ids}, env.action_count,
                          config.model.resolved_latent_dim(config.env.observation_kind),
                          config.model.belief_dim, config.model.hidden_dim)


def build_planning_model(config: ExperimentConfig, env: MultiViewEnv):
    """Returns (model, trainer or None) for ``config.mb.model``."""
    kind = config.mb.model
    canonical = config.plan.canonical_view
    if kind == "oracle":
        if config.env.name != "cartpole" or env.views[canonical].kind != "identity":
            raise ControlError("The oracle model needs cart-pole with an identity canonical view")
        return OracleCartPoleModel(canonical, config.env.dt), None
    if kind == "mlp":
        model = MLPDynamicsModel(env.observation_dim(canonical), env.action_count, config.mb.mlp_hidden, canonical)
        steps = max(1, config.model.prediction_steps + config.model.reconstruction_steps)
        return model, MLPDynamicsTrainer(model, config.mb.mlp_stepsize, config.mb.mlp_batch_size, steps)
    model = build_multiview_model(config, env)
    return model, ModelTrainer(model, config.model)


def reward_evaluators_for(env: MultiViewEnv, plan_config: PlanConfig) -> Dict[int, RewardEvaluator]:
    view = env.views[plan_config.canonical_view]
    if view.kind != "identity":
        return {}
    return {plan_config.canonical_view: env.base.reward_from_observation}


def run_mb_loop(env: MultiViewEnv, eval_env: MultiViewEnv, config: ExperimentConfig, seeds: SeedBank,
                on_point: Optional[Callable[[List[CurvePoint]], None]] = None) -> MBResult:
    """
    Random data, then rounds of (train model, collect MPC episodes,
    evaluate) until the success threshold, the iteration limit or the
    sample budget is reached.
    """
    mb = config.mb
    data_rng, plan_rng, eval_rng = seeds.numpy("data"), seeds.numpy("planner"), seeds.numpy("eval")
    generator = seeds.torch("model")
    seeds.seed_torch_init("model-init")
    model, trainer = build_planning_model(config, env)
    evaluators = reward_evaluators_for(env, config.plan)
    acting_view = None if mb.model == "multiview" else config.plan.canonical_view
    eval_views = env.view_ids if acting_view is None else [acting_view]

    logger.info("=" * 80)
    logger.info(f"Model-based loop with the '{mb.model}' model: collecting {mb.random_rollouts} random rollouts.")
    logger.info("=" * 80)
    dataset = ExperienceDataset(env, mb.dataset_capacity)
    collect_random(env, mb.random_rollouts, data_rng, mb.rollout_max_steps, dataset,
                   max_samples=config.sample_budget)
    result = MBResult(model=model, interactions=dataset.collected_steps)
    if mb.max_iter == 0:
        logger.info("max_iter is 0: random data only, no model training.")
        return result

    def evaluate() -> None:
        eval_env.sync_normalizers(env)
        agent = MPCAgent(model, config.plan, evaluators, plan_rng)
        points = evaluate_views(eval_env, agent, eval_views, config.eval.episodes, eval_rng, result.interactions)
        result.curve.extend(points)
        if on_point is not None:
            on_point(points)
        overall = points[-1].mean
        if result.interactions_to_success is None and overall >= mb.success_threshold:
            result.interactions_to_success = result.interactions
            logger.info(f"Success threshold {mb.success_threshold} reached after {result.interactions} interactions.")

    if trainer is not None:
        trainer.train(dataset, mb.initial_train_iterations, data_rng, generator)
    evaluate()

    agent = MPCAgent(model, config.plan, evaluators, plan_rng)
    for iteration in range(1, mb.max_iter + 1):
        if result.interactions_to_success is not None or result.interactions >= config.sample_budget:
            break
        for _ in range(mb.rollouts_per_iter):
            agent.reset()
            record, episode_return = record_episode(env, agent.act, data_rng, mb.rollout_max_steps, acting_view)
            dataset.add(record, "rl")
            result.interactions += record.length
            logger.debug(f"MPC rollout of {record.length} steps, return {episode_return:.1f}")
        if trainer is not None:
            trainer.train(dataset, mb.train_iterations, data_rng, generator)
        logger.info(f"Model-based iteration {iteration}/{mb.max_iter}: {result.interactions} interactions.")
        evaluate()

    if trainer is not None:
        result.losses = list(trainer.curves)
    return result


# ── cross-view policy transfer ────────────────────────────────────────

class LatentObservationEncoder:
    """
    Filters observations of any trained view into the model's latent space.

    Training draws a posterior sample, evaluation uses the posterior mean.
    """

    def __init__(self, model: MultiViewModel, generator: Optional[torch.Generator] = None):
        self.model = model
        self.generator = generator
        self.input_dim = model.latent_dim
        self.reset()

    def reset(self) -> None:
        self.h = self.model.initial_belief(1)
        self.s: Optional[torch.Tensor] = None

    def encode(self, env: Optional[MultiViewEnv], obs: np.ndarray, view_id: int, training: bool) -> np.ndarray:
        with torch.no_grad():
            self.s = self.model.infer(view_id, self.h, as_tensor(obs).reshape(1, -1), sample=training,
                                      generator=self.generator)
        return self.s.numpy()[0]

    def observe_action(self, action: int) -> None:
        with torch.no_grad():
            self.h = self.model.step_belief(self.s, self.h, torch.tensor([action]))


def mvpt_act(model: MultiViewModel, policy: nn.Module, h_t: torch.Tensor, o_t: np.ndarray,
             view_id: int) -> Tuple[int, torch.Tensor]:
    """Greedy action on the posterior mean of view ``view_id``; also returns that latent."""
    with torch.no_grad():
        s = model.infer(view_id, h_t.reshape(1, -1), as_tensor(o_t).reshape(1, -1))
    action, _ = act(policy, s[0], greedy=True)
    return action, s


class MVPTAgent:
    def __init__(self, model: MultiViewModel, policy: nn.Module):
        self.model = model
        self.policy = policy
        self.reset()

    def reset(self) -> None:
        self.h = self.model.initial_belief(1)

    def act(self, obs: np.ndarray, view_id: int) -> int:
        action, s = mvpt_act(self.model, self.policy, self.h, obs, view_id)
        with torch.no_grad():
            self.h = self.model.step_belief(s, self.h, torch.tensor([action]))
        return action


@dataclass
class MVPTResult:
    """
    ``model_samples`` are the random-data interactions of model learning,
    ``samples`` the policy-learning ones. ``target_samples`` counts the
    interactions of either phase emitted in a target view.
    """

    model: MultiViewModel
    learner: object
    curve: List[CurvePoint] = field(default_factory=list)
    losses: List[LossRecord] = field(default_factory=list)
    samples: int = 0
    model_samples: int = 0
    target_samples: int = 0

    @property
    def interactions(self) -> int:
        return self.model_samples + self.samples


def mvpt_train(env: MultiViewEnv, policy_env: MultiViewEnv, eval_env: MultiViewEnv, config: ExperimentConfig,
               seeds: SeedBank, on_point: Optional[Callable[[List[CurvePoint]], None]] = None) -> MVPTResult:
    """
    Trains the multi-view model on random data from every view, then a
    model-free learner on latents inferred from ``policy_env`` (the source
    views). Evaluation acts in every declared view through its encoder.

    Both phases draw on ``config.sample_budget``; curve points are placed
    at the total interaction count, model learning included.
    """
    mvpt = config.mvpt
    data_rng, eval_rng = seeds.numpy("data"), seeds.numpy("eval")
    seeds.seed_torch_init("model-init")
    model = build_multiview_model(config, env)

    logger.info("=" * 80)
    logger.info(f"Policy transfer: model learning on views {env.view_ids}, "
                f"policy learning on views {mvpt.source_views}, target views {mvpt.target_views}")
    logger.info("=" * 80)
    dataset = collect_random(env, mvpt.random_rollouts, data_rng, mvpt.rollout_max_steps,
                             capacity=config.mb.dataset_capacity, max_samples=config.sample_budget)
    trainer = ModelTrainer(model, config.model)
    trainer.train(dataset, mvpt.model_iterations, data_rng, seeds.torch("model"))
    for param in model.parameters():
        param.requires_grad_(False)

    policy_env.sync_normalizers(env)
    seeds.seed_torch_init("policy-init")
    generator = seeds.torch("policy")
    learner = make_learner(config.mf.algorithm, model.latent_dim, env.action_count, config.policy,
                           config.ppo, config.reinforce, generator)
    collector = RolloutCollector(policy_env, LatentObservationEncoder(model, generator), seeds.numpy("policy-env"),
                                 generator)
    result = MVPTResult(model=model, learner=learner, losses=list(trainer.curves),
                        model_samples=dataset.collected_steps,
                        target_samples=dataset.steps_in_views(mvpt.target_views))

    def evaluate() -> None:
        eval_env.sync_normalizers(env)
        points = evaluate_views(eval_env, MVPTAgent(model, learner.policy), eval_env.view_ids,
                                config.eval.episodes, eval_rng, result.interactions)
        result.curve.extend(points)
        if on_point is not None:
            on_point(points)

    evaluate()
    next_eval = config.eval.every_samples
    budget = min(mvpt.policy_samples, config.sample_budget - result.model_samples)
    while result.samples < budget:
        batch = collector.collect(learner.policy, **learner.collect_kwargs)
        result.samples += batch.samples
        result.target_samples += batch.view_samples(mvpt.target_views)
        stats = learner.update(batch)
        if batch.completed_returns:
            logger.info(f"Latent policy at {result.samples} samples: training return "
                        f"{np.mean(batch.completed_returns):.1f}, stats {stats}")
        if result.samples >= next_eval:
            evaluate()
            next_eval += config.eval.every_samples
    return result
