"""
Model-free learning on multi-view observations.

Policies read a fused vector (all views concatenated by ascending view id),
a single view, or a latent state produced by the multi-view model. The
learning rules are REINFORCE with a recurrent observation-history baseline
and clipped-surrogate PPO with generalised advantage estimation.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.func import functional_call, grad, vmap
from torch.nn.utils.rnn import pad_sequence

from .autodiff import AdamOptimizer, NonFiniteGradientError, as_tensor, check_last_dim
from .config import PolicyConfig, PPOConfig, ReinforceConfig
from .views import MultiViewEnv

logger = logging.getLogger(__name__)


class FusionError(Exception):
    """A view required by the fusion policy is missing from the bundle."""


def fuse_observations(bundle: Mapping[int, np.ndarray], view_ids: Sequence[int]) -> np.ndarray:
    """Concatenates one flattened observation per view, in ascending view id order."""
    missing = [vid for vid in view_ids if vid not in bundle]
    if missing:
        raise FusionError(f"Observation bundle lacks views {missing} (has {sorted(bundle)})")
    return np.concatenate([np.asarray(bundle[vid], dtype=np.float64).reshape(-1) for vid in sorted(view_ids)])


# ── networks ──────────────────────────────────────────────────────────

def build_mlp(input_dim: int, hidden_sizes: Sequence[int], output_dim: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    last = input_dim
    for width in hidden_sizes:
        layers += [nn.Linear(last, width), nn.Tanh()]
        last = width
    layers.append(nn.Linear(last, output_dim))
    return nn.Sequential(*layers)


class PolicyNetwork(nn.Module):
    """Categorical policy: input vector to action logits."""

    def __init__(self, input_dim: int, action_count: int, hidden_sizes: Sequence[int] = (64, 64)):
        super().__init__()
        self.input_dim = input_dim
        self.action_count = action_count
        self.net = build_mlp(input_dim, hidden_sizes, action_count)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ValueNetwork(nn.Module):
    def __init__(self, input_dim: int, hidden_sizes: Sequence[int] = (64, 64)):
        super().__init__()
        self.input_dim = input_dim
        self.net = build_mlp(input_dim, hidden_sizes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)


class HistoryBaseline(nn.Module):
    """B(H_t): a GRU over the observation history with a linear read-out per step."""

    def __init__(self, input_dim: int, units: int = 32):
        super().__init__()
        self.input_dim = input_dim
        self.gru = nn.GRU(input_dim, units, batch_first=True)
        self.head = nn.Linear(units, 1)

    def forward(self, sequences: torch.Tensor) -> torch.Tensor:
        """(B, T, D) histories to (B, T) predicted returns."""
        hidden, _ = self.gru(sequences)
        return self.head(hidden).squeeze(-1)


def act(policy: nn.Module, x: np.ndarray, generator: Optional[torch.Generator] = None,
        greedy: bool = False) -> Tuple[int, float]:
    """Samples (or, when greedy, takes the argmax of) the policy's action distribution."""
    inputs = as_tensor(x)
    if hasattr(policy, "input_dim"):
        check_last_dim("policy.input", inputs, policy.input_dim)
    with torch.no_grad():
        log_probs = torch.log_softmax(policy(inputs), dim=-1)
        if greedy:
            # torch.argmax returns the first maximal index.
            action = int(torch.argmax(log_probs))
        else:
            action = int(torch.multinomial(log_probs.exp(), 1, generator=generator))
    return action, float(log_probs[action])


def action_log_probs(policy: nn.Module, inputs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    log_probs = torch.log_softmax(policy(inputs), dim=-1)
    return log_probs.gather(-1, actions.unsqueeze(-1)).squeeze(-1)


# ── rollouts ──────────────────────────────────────────────────────────

@dataclass
class EpisodeRollout:
    """One (possibly cut) episode segment as seen by the learner."""

    inputs: List[np.ndarray] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    view_ids: List[int] = field(default_factory=list)
    terminal: bool = False
    bootstrap_input: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class RolloutBatch:
    episodes: List[EpisodeRollout] = field(default_factory=list)
    completed_returns: List[float] = field(default_factory=list)

    @property
    def samples(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def view_samples(self, view_ids: Sequence[int]) -> int:
        """Steps whose observation was emitted in one of ``view_ids``."""
        wanted = set(view_ids)
        return sum(1 for ep in self.episodes for vid in ep.view_ids[:len(ep)] if vid in wanted)

    def inputs(self) -> torch.Tensor:
        return as_tensor(np.stack([x for ep in self.episodes for x in ep.inputs]))

    def actions(self) -> torch.Tensor:
        return torch.tensor([a for ep in self.episodes for a in ep.actions], dtype=torch.long)

    def log_probs(self) -> torch.Tensor:
        return as_tensor([lp for ep in self.episodes for lp in ep.log_probs])

    def extend(self, other: "RolloutBatch") -> "RolloutBatch":
        self.episodes.extend(other.episodes)
        self.completed_returns.extend(other.completed_returns)
        return self


class ObservationEncoder(Protocol):
    """Turns what the environment emits into the learner's input vector."""

    input_dim: int

    def reset(self) -> None: ...

    def encode(self, env: MultiViewEnv, obs: np.ndarray, view_id: int, training: bool) -> np.ndarray: ...

    def observe_action(self, action: int) -> None: ...


class FusedObservationEncoder:
    """All-views bundle of the current hidden state, fused (the observed view is kept as received)."""

    def __init__(self, env: MultiViewEnv, view_ids: Optional[Sequence[int]] = None):
        self.view_ids = sorted(view_ids or env.view_ids)
        self.input_dim = sum(env.observation_dim(v) for v in self.view_ids)

    def reset(self) -> None:
        pass

    def encode(self, env: MultiViewEnv, obs: np.ndarray, view_id: int, training: bool) -> np.ndarray:
        bundle = {vid: env.render(vid) for vid in self.view_ids if vid != view_id}
        bundle[view_id] = obs
        return fuse_observations(bundle, self.view_ids)

    def observe_action(self, action: int) -> None:
        pass


class SingleViewEncoder:
    def __init__(self, env: MultiViewEnv, view_id: int):
        self.view_id = view_id
        self.input_dim = env.observation_dim(view_id)

    def reset(self) -> None:
        pass

    def encode(self, env: MultiViewEnv, obs: np.ndarray, view_id: int, training: bool) -> np.ndarray:
        if view_id != self.view_id:
            raise FusionError(f"Single-view policy for view {self.view_id} received view {view_id}")
        return np.asarray(obs, dtype=np.float64)

    def observe_action(self, action: int) -> None:
        pass


class RolloutCollector:
    """
    Steps one MultiViewEnv under a policy snapshot.

    Episodes continue across ``collect`` calls: a segment cut by the step
    budget is returned non-terminal with its bootstrap input, and the next
    call resumes from that input.
    """

    def __init__(self, env: MultiViewEnv, encoder: ObservationEncoder, rng: np.random.Generator,
                 generator: torch.Generator, view_id: Optional[int] = None):
        self.env = env
        self.encoder = encoder
        self.rng = rng
        self.generator = generator
        self.view_id = view_id
        self._next_input: Optional[np.ndarray] = None
        self._view: Optional[int] = None
        self._episode_return = 0.0
        self.total_steps = 0

    def _start_episode(self) -> None:
        obs, view = self.env.reset(self.rng, self.view_id)
        self.encoder.reset()
        self._view = view
        self._next_input = self.encoder.encode(self.env, obs, view, True)
        self._episode_return = 0.0

    def collect(self, policy: nn.Module, steps: Optional[int] = None, episodes: Optional[int] = None) -> RolloutBatch:
        if (steps is None) == (episodes is None):
            raise ValueError("collect() takes exactly one of steps= or episodes=")
        batch = RolloutBatch()
        taken = 0
        while True:
            if steps is not None and taken >= steps:
                break
            if episodes is not None and len(batch.completed_returns) >= episodes:
                break
            if self._next_input is None:
                self._start_episode()
            segment = EpisodeRollout()
            batch.episodes.append(segment)
            while True:
                x = self._next_input
                action, log_prob = act(policy, x, self.generator)
                result = self.env.step(action)
                self.encoder.observe_action(action)
                segment.inputs.append(x)
                segment.actions.append(action)
                segment.rewards.append(result.reward)
                segment.log_probs.append(log_prob)
                segment.view_ids.append(self._view)
                self._episode_return += result.reward
                taken += 1
                self.total_steps += 1
                self._view = result.view_id
                if result.done:
                    segment.terminal = not result.truncated
                    if result.truncated:
                        segment.bootstrap_input = self.encoder.encode(self.env, result.observation, result.view_id, True)
                    batch.completed_returns.append(self._episode_return)
                    self._next_input = None
                    break
                self._next_input = self.encoder.encode(self.env, result.observation, result.view_id, True)
                if steps is not None and taken >= steps:
                    segment.bootstrap_input = self._next_input
                    break
        return batch


class Controller(Protocol):
    """Anything that can drive a MultiViewEnv episode step by step."""

    def reset(self) -> None: ...

    def act(self, obs: np.ndarray, view_id: int) -> int: ...


class PolicyController:
    """Greedy policy behind an observation encoder."""

    def __init__(self, env: MultiViewEnv, policy: nn.Module, encoder: ObservationEncoder):
        self.env = env
        self.policy = policy
        self.encoder = encoder

    def reset(self) -> None:
        self.encoder.reset()

    def act(self, obs: np.ndarray, view_id: int) -> int:
        action, _ = act(self.policy, self.encoder.encode(self.env, obs, view_id, False), greedy=True)
        self.encoder.observe_action(action)
        return action


def evaluate_controller(env: MultiViewEnv, controller: Controller, episodes: int, rng: np.random.Generator,
                        view_id: Optional[int] = None, max_steps: Optional[int] = None) -> np.ndarray:
    """Undiscounted episode returns (``view_id`` pins the view)."""
    returns = np.zeros(episodes, dtype=np.float64)
    for i in range(episodes):
        obs, view = env.reset(rng, view_id)
        controller.reset()
        for _ in range(max_steps or env.base.max_steps):
            result = env.step(controller.act(obs, view))
            returns[i] += result.reward
            obs, view = result.observation, result.view_id
            if result.done:
                break
    return returns


def evaluate_policy(env: MultiViewEnv, policy: nn.Module, encoder: ObservationEncoder, episodes: int,
                    rng: np.random.Generator, view_id: Optional[int] = None) -> np.ndarray:
    """Returns of greedy episodes."""
    return evaluate_controller(env, PolicyController(env, policy, encoder), episodes, rng, view_id)


@dataclass(frozen=True)
class CurvePoint:
    samples: int
    view_id: Union[int, str]
    mean: float
    std: float


def evaluate_views(env: MultiViewEnv, controller: Controller, view_ids: Sequence[int], episodes: int,
                   rng: np.random.Generator, samples: int) -> List[CurvePoint]:
    """One point per view plus an "all" point pooling every view's episodes."""
    points, pooled = [], []
    for vid in view_ids:
        returns = evaluate_controller(env, controller, episodes, rng, view_id=vid)
        pooled.append(returns)
        points.append(CurvePoint(samples, vid, float(returns.mean()), float(returns.std())))
    everything = np.concatenate(pooled)
    points.append(CurvePoint(samples, "all", float(everything.mean()), float(everything.std())))
    logger.info(f"Evaluation at {samples} samples: "
                + ", ".join(f"view {p.view_id}: {p.mean:.1f} ± {p.std:.1f}" for p in points))
    return points


# ── REINFORCE ─────────────────────────────────────────────────────────

def reward_to_go(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards), dtype=np.float64)
    running = 0.0
    for t in reversed(range(len(rewards))):
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def _padded_histories(batch: RolloutBatch) -> Tuple[torch.Tensor, torch.Tensor]:
    sequences = [as_tensor(np.stack(ep.inputs)) for ep in batch.episodes]
    mask = pad_sequence([torch.ones(len(s)) for s in sequences], batch_first=True).bool()
    return pad_sequence(sequences, batch_first=True), mask


def reinforce_advantages(batch: RolloutBatch, gamma: float,
                         baseline: Optional[HistoryBaseline] = None) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Per-episode (return-to-go, return-to-go minus B(H_t))."""
    returns = [reward_to_go(ep.rewards, gamma) for ep in batch.episodes]
    if baseline is None:
        return returns, [r.copy() for r in returns]
    with torch.no_grad():
        padded, _ = _padded_histories(batch)
        values = baseline(padded).numpy()
    return returns, [r - values[i, :len(r)] for i, r in enumerate(returns)]


def reinforce_gradient(policy: nn.Module, batch: RolloutBatch, advantages: Sequence[np.ndarray]) -> List[torch.Tensor]:
    """(1/M) sum_j sum_t grad log pi(a_t | H_t) * A_t, one tensor per policy parameter."""
    params = [p for p in policy.parameters() if p.requires_grad]
    log_probs = action_log_probs(policy, batch.inputs(), batch.actions())
    weights = as_tensor(np.concatenate(advantages))
    objective = torch.sum(log_probs * weights) / len(batch.episodes)
    grads = torch.autograd.grad(objective, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def score_function(policy: nn.Module, inputs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Per-sample grad log pi(a | x), flattened to shape (N, num_params)."""
    params = {k: v.detach() for k, v in policy.named_parameters()}

    def log_prob(p, x, a):
        logits = functional_call(policy, p, (x.unsqueeze(0),)).squeeze(0)
        return torch.log_softmax(logits, dim=-1).gather(-1, a.unsqueeze(-1)).squeeze(-1)

    per_sample = vmap(grad(log_prob), in_dims=(None, 0, 0))(params, inputs, actions)
    return torch.cat([g.reshape(inputs.shape[0], -1) for g in per_sample.values()], dim=1)


def fit_baseline(baseline: HistoryBaseline, optimizer: AdamOptimizer, batch: RolloutBatch,
                 returns: Sequence[np.ndarray], steps: int) -> float:
    """Regresses B(H_t) onto the returns-to-go by squared error."""
    padded, mask = _padded_histories(batch)
    targets = pad_sequence([as_tensor(r) for r in returns], batch_first=True)
    loss_value = float("nan")
    for _ in range(steps):
        errors = (baseline(padded) - targets)[mask]
        loss_value = optimizer.minimize(torch.mean(errors ** 2))
    return loss_value


def reinforce_update(policy: nn.Module, batch: RolloutBatch, eta: float, gamma: float,
                     baseline: Optional[HistoryBaseline] = None, baseline_optimizer: Optional[AdamOptimizer] = None,
                     baseline_steps: int = 0) -> Dict[str, float]:
    """omega <- omega + eta * policy gradient; then the baseline is refit."""
    returns, advantages = reinforce_advantages(batch, gamma, baseline)
    grads = reinforce_gradient(policy, batch, advantages)
    for index, g in enumerate(grads):
        if not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"REINFORCE: non-finite gradient for policy parameter {index}")
    with torch.no_grad():
        for param, g in zip((p for p in policy.parameters() if p.requires_grad), grads):
            param.add_(eta * g)
    stats = {"mean_advantage": float(np.mean(np.concatenate(advantages))) if batch.samples else 0.0}
    if baseline is not None and baseline_optimizer is not None and baseline_steps:
        stats["baseline_loss"] = fit_baseline(baseline, baseline_optimizer, batch, returns, baseline_steps)
    return stats


# ── PPO ───────────────────────────────────────────────────────────────

def compute_gae(rewards: Sequence[float], values: Sequence[float], bootstrap_value: float,
                gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and the matching value targets for one segment."""
    T = len(rewards)
    advantages = np.zeros(T, dtype=np.float64)
    running = 0.0
    for t in reversed(range(T)):
        next_value = values[t + 1] if t + 1 < T else bootstrap_value
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        advantages[t] = running
    return advantages, advantages + np.asarray(values, dtype=np.float64)


def gae_advantages(batch: RolloutBatch, gamma: float, lam: float,
                   value_fn: nn.Module) -> Tuple[torch.Tensor, torch.Tensor]:
    """Advantages and returns for every step of ``batch``, episodes concatenated in order."""
    all_adv, all_ret = [], []
    with torch.no_grad():
        for ep in batch.episodes:
            values = value_fn(as_tensor(np.stack(ep.inputs))).numpy()
            bootstrap = 0.0
            if not ep.terminal and ep.bootstrap_input is not None:
                bootstrap = float(value_fn(as_tensor(ep.bootstrap_input)))
            adv, ret = compute_gae(ep.rewards, values, bootstrap, gamma, lam)
            all_adv.append(adv)
            all_ret.append(ret)
    return as_tensor(np.concatenate(all_adv)), as_tensor(np.concatenate(all_ret))


def ppo_loss(policy: nn.Module, value_fn: nn.Module, inputs: torch.Tensor, actions: torch.Tensor,
             old_log_probs: torch.Tensor, advantages: torch.Tensor, returns: torch.Tensor,
             clip: float, value_coeff: float, entropy_coeff: float) -> Tuple[torch.Tensor, Dict[str, float]]:
    logits = policy(inputs)
    log_probs_all = torch.log_softmax(logits, dim=-1)
    log_probs = log_probs_all.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    ratio = torch.exp(log_probs - old_log_probs)
    surrogate = torch.minimum(ratio * advantages, torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * advantages)
    policy_loss = -torch.mean(surrogate)
    value_loss = torch.mean((value_fn(inputs) - returns) ** 2)
    entropy = -torch.mean(torch.sum(log_probs_all.exp() * log_probs_all, dim=-1))
    loss = policy_loss + value_coeff * value_loss - entropy_coeff * entropy
    stats = {
        "policy_loss": float(policy_loss.detach()),
        "value_loss": float(value_loss.detach()),
        "entropy": float(entropy.detach()),
        "clip_fraction": float(torch.mean((torch.abs(ratio - 1.0) > clip).double())),
    }
    return loss, stats


def ppo_update(policy: nn.Module, value_fn: nn.Module, optimizer: AdamOptimizer, inputs: torch.Tensor,
               actions: torch.Tensor, old_log_probs: torch.Tensor, advantages: torch.Tensor, returns: torch.Tensor,
               config: PPOConfig, generator: Optional[torch.Generator] = None) -> Dict[str, float]:
    """Clipped-surrogate epochs over shuffled minibatches, stopping early on a KL blow-up."""
    n = inputs.shape[0]
    if n > 1:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    stats: Dict[str, float] = {"epochs": 0, "approx_kl": 0.0}
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=generator)
        for start in range(0, n, config.minibatch):
            idx = order[start:start + config.minibatch]
            loss, step_stats = ppo_loss(policy, value_fn, inputs[idx], actions[idx], old_log_probs[idx],
                                        advantages[idx], returns[idx], config.clip,
                                        config.value_coeff, config.entropy_coeff)
            optimizer.minimize(loss)
            stats.update(step_stats)
        with torch.no_grad():
            approx_kl = float(torch.mean(old_log_probs - action_log_probs(policy, inputs, actions)))
        stats["epochs"] = epoch + 1
        stats["approx_kl"] = approx_kl
        if config.target_kl is not None and approx_kl > config.target_kl:
            logger.warning(f"PPO: approximate KL {approx_kl:.4f} exceeds {config.target_kl} "
                           f"after epoch {epoch + 1}/{config.epochs}; stopping early.")
            break
    return stats


# ── learners ──────────────────────────────────────────────────────────

class PPOLearner:
    def __init__(self, input_dim: int, action_count: int, policy_config: PolicyConfig, ppo_config: PPOConfig,
                 generator: torch.Generator):
        self.config = ppo_config
        self.generator = generator
        self.policy = PolicyNetwork(input_dim, action_count, policy_config.hidden_sizes)
        self.value_fn = ValueNetwork(input_dim, policy_config.hidden_sizes)
        self.optimizer = AdamOptimizer(list(self.policy.parameters()) + list(self.value_fn.parameters()),
                                       lr=ppo_config.stepsize, eps=ppo_config.adam_eps,
                                       max_grad_norm=ppo_config.max_grad_norm, name="ppo")

    @property
    def collect_kwargs(self) -> Dict[str, int]:
        return {"steps": self.config.horizon}

    def modules(self) -> Dict[str, nn.Module]:
        return {"policy": self.policy, "value": self.value_fn}

    def update(self, batch: RolloutBatch) -> Dict[str, float]:
        advantages, returns = gae_advantages(batch, self.config.gamma, self.config.lambda_, self.value_fn)
        return ppo_update(self.policy, self.value_fn, self.optimizer, batch.inputs(), batch.actions(),
                          batch.log_probs(), advantages, returns, self.config, self.generator)


class ReinforceLearner:
    def __init__(self, input_dim: int, action_count: int, policy_config: PolicyConfig,
                 reinforce_config: ReinforceConfig):
        self.config = reinforce_config
        self.policy = PolicyNetwork(input_dim, action_count, policy_config.hidden_sizes)
        self.baseline = HistoryBaseline(input_dim, policy_config.baseline_units)
        self.baseline_optimizer = AdamOptimizer(self.baseline.parameters(), lr=reinforce_config.baseline_stepsize,
                                                name="baseline")

    @property
    def collect_kwargs(self) -> Dict[str, int]:
        return {"episodes": self.config.episodes}

    def modules(self) -> Dict[str, nn.Module]:
        return {"policy": self.policy, "baseline": self.baseline}

    def update(self, batch: RolloutBatch) -> Dict[str, float]:
        return reinforce_update(self.policy, batch, self.config.eta, self.config.gamma, self.baseline,
                                self.baseline_optimizer, self.config.baseline_steps)


def make_learner(algorithm: str, input_dim: int, action_count: int, policy_config: PolicyConfig,
                 ppo_config: PPOConfig, reinforce_config: ReinforceConfig, generator: torch.Generator):
    if algorithm == "reinforce":
        return ReinforceLearner(input_dim, action_count, policy_config, reinforce_config)
    return PPOLearner(input_dim, action_count, policy_config, ppo_config, generator)
