"""
Hidden-state environments: cart-pole and a small grid version of Pong.

Both keep their true state private to the harness and expose a canonical
observation (a 4-vector for cart-pole, a binary G x G grid for grid-pong).
Views are applied on top of the canonical observation by ``views``.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Any, Optional, Tuple, Union

import numpy as np
import torch

from .config import EnvConfig
from .constants import (
    CARTPOLE_CART_MASS,
    CARTPOLE_DT,
    CARTPOLE_FORCE,
    CARTPOLE_GRAVITY,
    CARTPOLE_HALF_LENGTH,
    CARTPOLE_MAX_STEPS,
    CARTPOLE_POLE_MASS,
    CARTPOLE_RESET_RANGE,
    CARTPOLE_THETA_LIMIT_DEG,
    CARTPOLE_X_LIMIT,
    GRIDPONG_MAX_STEPS,
    GRIDPONG_PADDLE_LENGTH,
    GRIDPONG_POINTS_TO_WIN,
    GRIDPONG_SIZE,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor]

THETA_LIMIT = CARTPOLE_THETA_LIMIT_DEG * 2 * math.pi / 360


class EnvError(Exception):
    """Base class for environment misuse."""


class EpisodeDoneError(EnvError):
    """``step`` was called on a finished (or never started) episode."""


class InvalidActionError(EnvError):
    pass


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    truncated: bool = False


class Environment(ABC):
    """Common surface of the hidden-state environments."""

    name: str
    observation_kind: str
    action_count: int

    def __init__(self, max_steps: int):
        self.max_steps = max_steps
        self.steps = 0
        self.done = True

    @property
    @abstractmethod
    def observation_shape(self) -> Tuple[int, ...]:
        ...

    @property
    @abstractmethod
    def state(self) -> Any:
        ...

    @abstractmethod
    def state_array(self) -> np.ndarray:
        """The hidden state flattened to floats, for trajectory records."""

    @abstractmethod
    def observation(self) -> np.ndarray:
        """Canonical observation of the current hidden state."""

    @abstractmethod
    def reset(self, rng: np.random.Generator) -> StepResult:
        ...

    @abstractmethod
    def _advance(self, action: int) -> Tuple[float, bool]:
        """Moves the hidden state one step; returns (reward, terminal)."""

    @abstractmethod
    def reward_from_observation(self, obs: np.ndarray, action: Optional[np.ndarray] = None) -> np.ndarray:
        """Planning reward on (batched) canonical observations."""

    def step(self, action: int) -> StepResult:
        if self.done:
            raise EpisodeDoneError(f"{self.name}: step() after the episode ended; call reset() first")
        action = int(action)
        if not 0 <= action < self.action_count:
            raise InvalidActionError(f"{self.name}: action {action} not in [0, {self.action_count})")
        reward, terminal = self._advance(action)
        self.steps += 1
        truncated = not terminal and self.steps >= self.max_steps
        self.done = terminal or truncated
        return StepResult(self.observation(), float(reward), self.done, truncated)


# ── cart-pole ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class CartPoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot], dtype=np.float64)


def cartpole_dynamics(state: ArrayLike, action: ArrayLike, dt: float = CARTPOLE_DT) -> ArrayLike:
    """
    One semi-implicit Euler step of the cart-pole equations of motion.

    ``state`` has shape (..., 4) ordered (x, x_dot, theta, theta_dot) and
    ``action`` broadcasts against its leading axes (0 pushes left, 1 right).
    Works on numpy arrays and torch tensors alike.
    """
    lib = torch if isinstance(state, torch.Tensor) else np
    x, x_dot, theta, theta_dot = (state[..., i] for i in range(4))
    total_mass = CARTPOLE_CART_MASS + CARTPOLE_POLE_MASS
    polemass_length = CARTPOLE_POLE_MASS * CARTPOLE_HALF_LENGTH

    force = CARTPOLE_FORCE * (2.0 * action - 1.0)
    cos_theta, sin_theta = lib.cos(theta), lib.sin(theta)
    temp = (force + polemass_length * theta_dot ** 2 * sin_theta) / total_mass
    theta_acc = (CARTPOLE_GRAVITY * sin_theta - cos_theta * temp) / (
        CARTPOLE_HALF_LENGTH * (4.0 / 3.0 - CARTPOLE_POLE_MASS * cos_theta ** 2 / total_mass)
    )
    x_acc = temp - polemass_length * theta_acc * cos_theta / total_mass

    x_dot = x_dot + dt * x_acc
    x = x + dt * x_dot
    theta_dot = theta_dot + dt * theta_acc
    theta = theta + dt * theta_dot
    return lib.stack([x, x_dot, theta, theta_dot], -1)


def cartpole_failed(obs: ArrayLike) -> ArrayLike:
    return (abs(obs[..., 2]) > THETA_LIMIT) | (abs(obs[..., 0]) > CARTPOLE_X_LIMIT)


class CartPoleEnv(Environment):
    name = "cartpole"
    observation_kind = "vector"
    action_count = 2

    def __init__(self, dt: float = CARTPOLE_DT, max_steps: int = CARTPOLE_MAX_STEPS,
                 planning_reward: str = "alive"):
        super().__init__(max_steps)
        self.dt = dt
        self.planning_reward = planning_reward
        self._state = np.zeros(4, dtype=np.float64)

    @property
    def observation_shape(self) -> Tuple[int, ...]:
        return (4,)

    @property
    def state(self) -> CartPoleState:
        return CartPoleState(*(float(v) for v in self._state))

    def set_state(self, state: CartPoleState) -> None:
        self._state = state.as_array()
        self.steps = 0
        self.done = False

    def state_array(self) -> np.ndarray:
        return self._state.copy()

    def observation(self) -> np.ndarray:
        return self._state.copy()

    def reset(self, rng: np.random.Generator) -> StepResult:
        self._state = rng.uniform(-CARTPOLE_RESET_RANGE, CARTPOLE_RESET_RANGE, size=4)
        self.steps = 0
        self.done = False
        return StepResult(self.observation(), 0.0, False)

    def _advance(self, action: int) -> Tuple[float, bool]:
        self._state = cartpole_dynamics(self._state, float(action), self.dt)
        failed = bool(cartpole_failed(self._state))
        return (0.0 if failed else 1.0), failed

    def reward_from_observation(self, obs: np.ndarray, action: Optional[np.ndarray] = None) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        alive = (~cartpole_failed(obs)).astype(np.float64)
        if self.planning_reward == "upright":
            closeness = 1.0 - 0.5 * np.abs(obs[..., 2]) / THETA_LIMIT - 0.5 * np.abs(obs[..., 0]) / CARTPOLE_X_LIMIT
            return alive * closeness
        return alive


# ── grid-pong ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class GridPongState:
    ball_row: int
    ball_col: int
    ball_drow: int
    ball_dcol: int
    agent_row: int
    opponent_row: int
    agent_score: int = 0
    opponent_score: int = 0


class GridPongEnv(Environment):
    """
    Pong on a G x G binary grid.

    The agent's paddle occupies column 0, the scripted opponent column G-1.
    Paddle rows are the paddle centres. Actions: 0 up, 1 stay, 2 down.
    The opponent moves one row toward the ball on every other step.
    """

    name = "gridpong"
    observation_kind = "grid"
    action_count = 3

    def __init__(self, grid_size: int = GRIDPONG_SIZE, paddle_length: int = GRIDPONG_PADDLE_LENGTH,
                 points_to_win: int = GRIDPONG_POINTS_TO_WIN, max_steps: int = GRIDPONG_MAX_STEPS):
        super().__init__(max_steps)
        self.grid_size = grid_size
        self.paddle_length = paddle_length
        self.points_to_win = points_to_win
        self._half = paddle_length // 2
        centre = grid_size // 2
        self._state = GridPongState(centre, centre, 1, 1, centre, centre)

    @property
    def observation_shape(self) -> Tuple[int, ...]:
        return (self.grid_size, self.grid_size)

    @property
    def state(self) -> GridPongState:
        return self._state

    def set_state(self, state: GridPongState) -> None:
        self._state = state
        self.steps = 0
        self.done = False

    def state_array(self) -> np.ndarray:
        s = self._state
        return np.array([s.ball_row, s.ball_col, s.ball_drow, s.ball_dcol, s.agent_row,
                         s.opponent_row, s.agent_score, s.opponent_score], dtype=np.float64)

    def _clamp_paddle(self, row: int) -> int:
        return int(np.clip(row, self._half, self.grid_size - 1 - self._half))

    def _covers(self, paddle_row: int, row: int) -> bool:
        return abs(row - paddle_row) <= self._half

    def observation(self) -> np.ndarray:
        s = self._state
        grid = np.zeros(self.observation_shape, dtype=np.float64)
        grid[s.agent_row - self._half: s.agent_row + self._half + 1, 0] = 1.0
        grid[s.opponent_row - self._half: s.opponent_row + self._half + 1, self.grid_size - 1] = 1.0
        grid[s.ball_row, s.ball_col] = 1.0
        return grid

    def reset(self, rng: np.random.Generator) -> StepResult:
        centre = self.grid_size // 2
        drow, dcol = (int(v) for v in rng.choice([-1, 1], size=2))
        self._state = GridPongState(centre, centre, drow, dcol, centre, centre)
        self.steps = 0
        self.done = False
        return StepResult(self.observation(), 0.0, False)

    def _serve(self, state: GridPongState, towards: int) -> GridPongState:
        centre = self.grid_size // 2
        return replace(state, ball_row=centre, ball_col=centre, ball_dcol=towards)

    def _advance(self, action: int) -> Tuple[float, bool]:
        s = self._state
        edge = self.grid_size - 1
        agent_row = self._clamp_paddle(s.agent_row + (action - 1))
        opponent_row = s.opponent_row
        if self.steps % 2 == 0:
            opponent_row = self._clamp_paddle(opponent_row + int(np.sign(s.ball_row - opponent_row)))

        drow, dcol = s.ball_drow, s.ball_dcol
        row = s.ball_row + drow
        if row < 0 or row > edge:
            drow = -drow
            row = s.ball_row + drow

        col = s.ball_col + dcol
        reward = 0.0
        s = replace(s, agent_row=agent_row, opponent_row=opponent_row, ball_drow=drow)
        if col == 0:
            if self._covers(agent_row, row):
                dcol = 1
                col = s.ball_col + dcol
            else:
                reward = -1.0
        elif col == edge:
            if self._covers(opponent_row, row):
                dcol = -1
                col = s.ball_col + dcol
            else:
                reward = 1.0

        if reward > 0:
            s = self._serve(replace(s, agent_score=s.agent_score + 1), towards=1)
        elif reward < 0:
            s = self._serve(replace(s, opponent_score=s.opponent_score + 1), towards=-1)
        else:
            s = replace(s, ball_row=row, ball_col=col, ball_dcol=dcol)
        self._state = s
        if reward:
            logger.debug(f"Point scored (reward {reward:+.0f}), score {s.agent_score}:{s.opponent_score}")
        terminal = max(s.agent_score, s.opponent_score) >= self.points_to_win
        return reward, terminal

    def reward_from_observation(self, obs: np.ndarray, action: Optional[np.ndarray] = None) -> np.ndarray:
        """Negative row distance between the agent paddle and the ball (planning only)."""
        g = self.grid_size
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-2:] != (g, g):
            obs = obs.reshape(obs.shape[:-1] + (g, g))
        rows = np.arange(g, dtype=np.float64)
        paddle = np.clip(obs[..., :, 0], 0.0, None)
        ball = np.clip(obs[..., :, 1:-1], 0.0, None).sum(axis=-1)
        paddle_row = (paddle * rows).sum(-1) / np.maximum(paddle.sum(-1), 1e-8)
        ball_row = (ball * rows).sum(-1) / np.maximum(ball.sum(-1), 1e-8)
        return -np.abs(paddle_row - ball_row)


def make_env(config: EnvConfig) -> Environment:
    if config.name == "cartpole":
        return CartPoleEnv(dt=config.dt, max_steps=config.max_steps or CARTPOLE_MAX_STEPS,
                           planning_reward=config.planning_reward)
    return GridPongEnv(grid_size=config.grid_size, paddle_length=config.paddle_length,
                       points_to_win=config.points_to_win, max_steps=config.max_steps or GRIDPONG_MAX_STEPS)
