"""
Multi-view layer over a hidden-state environment.

Each view is an observation model of the same hidden process: a fixed
transform of the canonical observation. ``MultiViewEnv`` shares one base
environment between all views, so dynamics and rewards are identical no
matter which view the agent happens to receive.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .config import ViewSpec
from .envs import Environment

logger = logging.getLogger(__name__)

GRID_TRANSFORMS = frozenset({"transpose", "hswap", "invert", "mirror"})
VECTOR_TRANSFORMS = frozenset({"dummy_noise"})


class ViewError(Exception):
    """A view transform was misapplied or cannot be inverted."""


class TrajectoryDensityError(ViewError):
    """A trajectory density component evaluated to a non-finite value."""

    def __init__(self, term: str, timestep: int, value: float):
        self.term = term
        self.timestep = timestep
        self.value = value
        super().__init__(f"Non-finite '{term}' term at t={timestep}: {value}")


class ObservationNormalizer:
    """Streaming per-coordinate mean/variance (parallel Welford merge)."""

    def __init__(self, dim: int, epsilon: float = 1e-8):
        self.dim = dim
        self.epsilon = epsilon
        self.count = 0
        self.mean = np.zeros(dim, dtype=np.float64)
        self._m2 = np.zeros(dim, dtype=np.float64)
        self.frozen = False

    @property
    def var(self) -> np.ndarray:
        if self.count < 2:
            return np.ones(self.dim, dtype=np.float64)
        return self._m2 / self.count

    def update(self, obs: np.ndarray) -> None:
        if self.frozen:
            return
        batch = np.asarray(obs, dtype=np.float64).reshape(-1, self.dim)
        n = batch.shape[0]
        batch_mean = batch.mean(axis=0)
        batch_m2 = ((batch - batch_mean) ** 2).sum(axis=0)
        total = self.count + n
        delta = batch_mean - self.mean
        self.mean = self.mean + delta * n / total
        self._m2 = self._m2 + batch_m2 + delta ** 2 * self.count * n / total
        self.count = total

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.mean) / np.sqrt(self.var + self.epsilon)

    def freeze(self) -> None:
        self.frozen = True

    def unfreeze(self) -> None:
        self.frozen = False

    def to_dict(self) -> Dict[str, object]:
        return {"count": self.count, "mean": self.mean.tolist(), "m2": self._m2.tolist()}

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "ObservationNormalizer":
        mean = np.asarray(data["mean"], dtype=np.float64)
        normalizer = cls(mean.shape[0])
        normalizer.count = int(data["count"])
        normalizer.mean = mean
        normalizer._m2 = np.asarray(data["m2"], dtype=np.float64)
        return normalizer


# ── transforms ────────────────────────────────────────────────────────

def _check_kind(spec: ViewSpec, observation_kind: str) -> None:
    if spec.kind in GRID_TRANSFORMS and observation_kind != "grid":
        raise ViewError(f"view {spec.view_id}: '{spec.kind}' needs a grid observation, got {observation_kind}")
    if spec.kind in VECTOR_TRANSFORMS and observation_kind != "vector":
        raise ViewError(f"view {spec.view_id}: '{spec.kind}' needs a vector observation, got {observation_kind}")


def _hswap(grid: np.ndarray) -> np.ndarray:
    width = grid.shape[-1]
    half = width // 2
    if width % 2 == 0:
        return np.concatenate([grid[..., half:], grid[..., :half]], axis=-1)
    return np.concatenate([grid[..., half + 1:], grid[..., half:half + 1], grid[..., :half]], axis=-1)


def _transpose(grid: np.ndarray, spec: ViewSpec) -> np.ndarray:
    if spec.rotate:
        grid = np.rot90(grid, k=-1, axes=(-2, -1))
    if spec.flip:
        grid = np.flip(grid, axis=-1)
    return grid


def _untranspose(grid: np.ndarray, spec: ViewSpec) -> np.ndarray:
    if spec.flip:
        grid = np.flip(grid, axis=-1)
    if spec.rotate:
        grid = np.rot90(grid, k=1, axes=(-2, -1))
    return grid


def infer_observation_kind(obs: np.ndarray) -> str:
    return "vector" if np.ndim(obs) == 1 else "grid"


def apply_view(spec: ViewSpec, canonical_obs: np.ndarray, normalizer: Optional[ObservationNormalizer] = None,
               rng: Optional[np.random.Generator] = None, observation_kind: Optional[str] = None) -> np.ndarray:
    """
    Renders a canonical observation through one view.

    Grid transforms act on the last two axes and vector transforms on the
    last axis, so batches of observations can be rendered at once.
    ``observation_kind`` defaults to "vector" for 1-D and "grid" otherwise.
    """
    obs = np.asarray(canonical_obs, dtype=np.float64)
    kind = observation_kind or infer_observation_kind(obs)
    _check_kind(spec, kind)
    if kind == "grid" and (obs.ndim < 2 or obs.shape[-1] != obs.shape[-2]):
        raise ViewError(f"view {spec.view_id}: grid observation must be square, got shape {obs.shape}")

    if spec.kind == "identity":
        return obs.copy()
    if spec.kind == "dummy_noise":
        if rng is None:
            raise ViewError(f"view {spec.view_id}: dummy_noise needs a random generator")
        if normalizer is not None:
            obs = normalizer.normalize(obs)
        dummies = rng.standard_normal(obs.shape[:-1] + (spec.extra_dims,))
        widened = np.concatenate([obs, dummies], axis=-1)
        return widened + spec.noise_sigma * rng.standard_normal(widened.shape)
    if spec.kind == "transpose":
        return np.ascontiguousarray(_transpose(obs, spec))
    if spec.kind == "hswap":
        return _hswap(obs)
    if spec.kind == "invert":
        return 1.0 - obs
    if spec.kind == "mirror":
        return np.ascontiguousarray(np.flip(obs, axis=-1))
    raise ViewError(f"Unknown view kind '{spec.kind}'")


def invert_view(spec: ViewSpec, view_obs: np.ndarray) -> np.ndarray:
    """Exact inverse of ``apply_view`` for the bijective transforms."""
    obs = np.asarray(view_obs, dtype=np.float64)
    if spec.kind == "identity":
        return obs.copy()
    if spec.kind == "transpose":
        return np.ascontiguousarray(_untranspose(obs, spec))
    if spec.kind in ("hswap", "invert", "mirror"):
        # Involutions.
        return apply_view(spec, obs, observation_kind="grid")
    raise ViewError(f"view {spec.view_id}: '{spec.kind}' is not invertible")


def view_observation_shape(spec: ViewSpec, canonical_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    if spec.kind == "dummy_noise":
        return canonical_shape[:-1] + (canonical_shape[-1] + spec.extra_dims,)
    return tuple(canonical_shape)


# ── scheduling ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ViewSchedule:
    view_ids: Tuple[int, ...]
    mode: str = "per_episode"


def schedule_view(schedule: ViewSchedule, episode_index: int, step_index: int,
                  rng: Optional[np.random.Generator] = None) -> int:
    """per_episode: cycle views across episodes; per_step: uniform draw every step."""
    n = len(schedule.view_ids)
    if n == 1:
        return schedule.view_ids[0]
    if schedule.mode == "per_step":
        if rng is None:
            raise ViewError("per_step scheduling needs a random generator")
        return schedule.view_ids[int(rng.integers(n))]
    return schedule.view_ids[episode_index % n]


# ── histories and trajectories ────────────────────────────────────────

@dataclass
class History:
    """View-tagged observations and the actions taken after them, oldest first."""

    view_ids: List[int] = field(default_factory=list)
    observations: List[np.ndarray] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)

    def observe(self, view_id: int, obs: np.ndarray) -> None:
        if len(self.actions) != len(self.observations):
            raise ViewError("History.observe(): the previous observation has no action yet")
        self.view_ids.append(view_id)
        self.observations.append(np.asarray(obs, dtype=np.float64))

    def act(self, action: int) -> None:
        if len(self.actions) != len(self.observations) - 1:
            raise ViewError("History.act(): no pending observation to act on")
        self.actions.append(int(action))

    def __len__(self) -> int:
        return len(self.observations)

    def truncated(self, t: int) -> "History":
        """Observations 1..t and the t-1 actions between them."""
        return History(self.view_ids[:t], self.observations[:t], self.actions[:t - 1])


@dataclass
class TrajectoryStep:
    state: np.ndarray
    view_id: int
    observation: np.ndarray
    action: Optional[int]
    reward: float


@dataclass
class MultiViewTrajectory:
    steps: List[TrajectoryStep] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def rewards(self) -> List[float]:
        return [s.reward for s in self.steps]

    @property
    def view_ids(self) -> List[int]:
        return [s.view_id for s in self.steps]

    def history(self, t: int) -> History:
        """H_t for 1-based ``t``."""
        history = History()
        for k, step in enumerate(self.steps[:t], start=1):
            history.observe(step.view_id, step.observation)
            if k < t:
                history.act(step.action)
        return history


class TransitionModel(Protocol):
    def log_initial(self, state: np.ndarray) -> float: ...

    def log_prob(self, next_state: np.ndarray, state: np.ndarray, action: int) -> float: ...


class ObservationModel(Protocol):
    def log_prob(self, obs: np.ndarray, state: np.ndarray) -> float: ...


class HistoryPolicy(Protocol):
    def log_prob(self, action: int, history: History) -> float: ...


def trajectory_log_density(traj: MultiViewTrajectory, transition_model: TransitionModel,
                           observation_models: Mapping[int, ObservationModel], policy: HistoryPolicy) -> float:
    """
    Log-density of a multi-view trajectory under its generative factorisation:

        log P0(s_1) + sum_t [ log Pobs^{i_t}(o_t | s_t)
                              + log P(s_t | s_{t-1}, a_{t-1})       (t >= 2)
                              + log pi(a_{t-1} | H_{t-1}) ]          (t >= 2)
    """
    if not traj.steps:
        return 0.0

    def checked(term: str, t: int, value: float) -> float:
        value = float(value)
        if not math.isfinite(value):
            raise TrajectoryDensityError(term, t, value)
        return value

    terms = [checked("initial_state", 1, transition_model.log_initial(traj.steps[0].state))]
    for t, step in enumerate(traj.steps, start=1):
        if step.view_id not in observation_models:
            raise ViewError(f"No observation model for view {step.view_id} (t={t})")
        terms.append(checked("observation", t, observation_models[step.view_id].log_prob(step.observation, step.state)))
        if t >= 2:
            prev = traj.steps[t - 2]
            terms.append(checked("transition", t, transition_model.log_prob(step.state, prev.state, prev.action)))
            terms.append(checked("policy", t - 1, policy.log_prob(prev.action, traj.history(t - 1))))
    return math.fsum(terms)


def discounted_return(traj: Union[MultiViewTrajectory, Sequence[float]], gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    rewards = traj.rewards if isinstance(traj, MultiViewTrajectory) else list(traj)
    return float(sum(r * gamma ** t for t, r in enumerate(rewards)))


# ── the multi-view environment ────────────────────────────────────────

@dataclass(frozen=True)
class MultiViewStep:
    observation: np.ndarray
    view_id: int
    reward: float
    done: bool
    truncated: bool = False


class MultiViewEnv:
    """
    One hidden environment seen through N views.

    Observations are returned flattened. Each view owns its running
    normalizer, updated while unfrozen with the canonical observations it
    sees.
    """

    def __init__(self, base: Environment, views: Sequence[ViewSpec], schedule_mode: str = "per_episode"):
        if not views:
            raise ViewError("MultiViewEnv needs at least one view")
        ids = [v.view_id for v in views]
        if len(set(ids)) != len(ids):
            raise ViewError(f"Duplicate view ids {ids}")
        self.base = base
        self.views: Dict[int, ViewSpec] = {v.view_id: v for v in sorted(views, key=lambda v: v.view_id)}
        for spec in self.views.values():
            _check_kind(spec, base.observation_kind)
        self.schedule = ViewSchedule(tuple(self.views), schedule_mode)
        canonical_dim = int(np.prod(base.observation_shape))
        self.normalizers = {vid: ObservationNormalizer(canonical_dim) for vid, spec in self.views.items()
                            if spec.kind == "dummy_noise"}
        self.episode_index = -1
        self.current_view: Optional[int] = None
        self._forced_view: Optional[int] = None
        self._rng: Optional[np.random.Generator] = None

    @property
    def view_ids(self) -> List[int]:
        return list(self.views)

    @property
    def action_count(self) -> int:
        return self.base.action_count

    def observation_shape(self, view_id: int) -> Tuple[int, ...]:
        return view_observation_shape(self.views[view_id], self.base.observation_shape)

    def observation_dim(self, view_id: int) -> int:
        return int(np.prod(self.observation_shape(view_id)))

    def freeze(self) -> None:
        for normalizer in self.normalizers.values():
            normalizer.freeze()

    def unfreeze(self) -> None:
        for normalizer in self.normalizers.values():
            normalizer.unfreeze()

    def sync_normalizers(self, source: "MultiViewEnv") -> None:
        """Copies ``source``'s statistics into this env and freezes them (evaluation envs)."""
        for vid in self.normalizers:
            copy = ObservationNormalizer.from_dict(source.normalizers[vid].to_dict())
            copy.freeze()
            self.normalizers[vid] = copy

    def render(self, view_id: int, canonical: Optional[np.ndarray] = None,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Flattened view ``view_id`` of ``canonical`` (default: the current hidden state)."""
        if view_id not in self.views:
            raise ViewError(f"Unknown view {view_id}; declared views are {self.view_ids}")
        canonical = self.base.observation() if canonical is None else canonical
        obs = apply_view(self.views[view_id], canonical, self.normalizers.get(view_id),
                         rng if rng is not None else self._rng, self.base.observation_kind)
        return obs.reshape(-1)

    def render_batch(self, view_id: int, canonical: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Renders (N, *observation_shape) canonical observations to (N, view_dim) without touching the normalizers."""
        if view_id not in self.views:
            raise ViewError(f"Unknown view {view_id}; declared views are {self.view_ids}")
        canonical = np.asarray(canonical, dtype=np.float64).reshape((-1,) + tuple(self.base.observation_shape))
        obs = apply_view(self.views[view_id], canonical, self.normalizers.get(view_id),
                         rng if rng is not None else self._rng, self.base.observation_kind)
        return obs.reshape(canonical.shape[0], -1)

    def render_all(self, canonical: Optional[np.ndarray] = None) -> Dict[int, np.ndarray]:
        """The all-views bundle: the same hidden state through every view."""
        return {vid: self.render(vid, canonical) for vid in self.views}

    def _observe_canonical(self, canonical: np.ndarray) -> None:
        for normalizer in self.normalizers.values():
            normalizer.update(canonical.reshape(-1))

    def reset(self, rng: np.random.Generator, view_id: Optional[int] = None) -> Tuple[np.ndarray, int]:
        """Starts an episode; ``view_id`` pins the view for the whole episode."""
        if view_id is not None and view_id not in self.views:
            raise ViewError(f"Unknown view {view_id}; declared views are {self.view_ids}")
        self._rng = rng
        self._forced_view = view_id
        self.episode_index += 1
        result = self.base.reset(rng)
        self._observe_canonical(result.observation)
        self.current_view = view_id or schedule_view(self.schedule, self.episode_index, 0, rng)
        return self.render(self.current_view), self.current_view

    def step(self, action: int) -> MultiViewStep:
        result = self.base.step(action)
        self._observe_canonical(result.observation)
        if self._forced_view is not None:
            self.current_view = self._forced_view
        else:
            self.current_view = schedule_view(self.schedule, self.episode_index, self.base.steps, self._rng)
        return MultiViewStep(self.render(self.current_view), self.current_view, result.reward,
                             result.done, result.truncated)


def rollout_trajectory(env: MultiViewEnv, act: Callable[[np.ndarray, int], int], rng: np.random.Generator,
                       view_id: Optional[int] = None, max_steps: Optional[int] = None) -> MultiViewTrajectory:
    """Runs one episode recording the hidden state next to every observation."""
    traj = MultiViewTrajectory()
    obs, vid = env.reset(rng, view_id)
    limit = max_steps or env.base.max_steps
    for _ in range(limit):
        state = env.base.state_array()
        action = int(act(obs, vid))
        result = env.step(action)
        traj.steps.append(TrajectoryStep(state, vid, obs, action, result.reward))
        obs, vid = result.observation, result.view_id
        if result.done:
            break
    return traj
