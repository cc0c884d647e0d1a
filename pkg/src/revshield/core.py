"""Black-box deterministic environment interface.

An environment is split into two objects that are handed out separately:

* ``Dynamics`` -- the queryable simulator (step function, bounds, timing).
  This is all a reversibility shield ever sees.
* ``ConstraintOracle`` -- the hidden ground-truth safety function. Only the
  metrics layer and the full-knowledge baseline shield receive it. Every
  call is counted so tests can attribute oracle use.

Unsafe states are absorbing: once a state is unsafe, every action maps it
to itself bit-for-bit. Environments implement this inside their step
function, which is what makes the unsafe set invariant.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class ContractError(ValueError):
    """Raised when a state or action violates an environment contract."""


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    action_low: tuple
    action_high: tuple
    dt: float
    max_episode_steps: int
    # divides states before they reach the policy network
    obs_scale: tuple = field(default=())

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ContractError("state_dim and action_dim must be positive")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ContractError("action bounds must match action_dim")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ContractError("action bounds are degenerate")
        if not self.dt > 0:
            raise ContractError("dt must be positive")
        if self.max_episode_steps < 1:
            raise ContractError("max_episode_steps must be >= 1")
        if self.obs_scale and len(self.obs_scale) != self.state_dim:
            raise ContractError("obs_scale must match state_dim")

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=float)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=float)


class Transition(NamedTuple):
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float


class Dynamics:
    """Queryable view of an environment's transition function.

    Holds a reference to the environment but exposes only the step
    functions and the spec, so code that receives a ``Dynamics`` cannot
    reach the constraint oracle.
    """

    __slots__ = ("_step_batch", "spec")

    def __init__(self, step_batch, spec: EnvSpec):
        self._step_batch = step_batch
        self.spec = spec

    def step(self, state, action) -> np.ndarray:
        state = _check_vector(state, self.spec.state_dim, "state")
        action = _check_vector(action, self.spec.action_dim, "action")
        if np.any(action < self.spec.low) or np.any(action > self.spec.high):
            raise ContractError(f"action {action} outside bounds")
        return self._step_batch(state[None, :], action[None, :])[0]

    def step_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Advance a batch of states. Actions must already be within bounds."""
        return self._step_batch(states, actions)

    __call__ = step


class ConstraintOracle:
    """Ground-truth safety function with a call counter."""

    def __init__(self, unsafe_batch, state_dim: int):
        self._unsafe_batch = unsafe_batch
        self._state_dim = state_dim
        self.calls = 0

    def is_unsafe(self, state) -> bool:
        self.calls += 1
        state = _check_vector(state, self._state_dim, "state")
        return bool(self._unsafe_batch(state[None, :])[0])

    __call__ = is_unsafe


class Environment(ABC):
    """Deterministic CMDP with a black-box step function and hidden constraints."""

    name: str = "env"

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.dynamics = Dynamics(self._step_batch, spec)
        self.oracle = ConstraintOracle(self._unsafe_batch, spec.state_dim)

    @abstractmethod
    def _step_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def _unsafe_batch(self, states: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def reward(self, state) -> float:
        ...

    @abstractmethod
    def sample_initial(self, rng_seed) -> np.ndarray:
        ...

    def dyn_step(self, state, action) -> np.ndarray:
        return self.dynamics.step(state, action)

    def is_unsafe(self, state) -> bool:
        return self.oracle.is_unsafe(state)

    def reached_goal(self, state) -> bool:
        return False

    def outcome_reward(self, reached_goal: bool, terminated: bool) -> float:
        """Extra reward for episode-ending events, added to the step reward."""
        return 0.0

    # learning-time shaping potential over (n, state_dim) states; None disables it
    potential = None


def _check_vector(x, dim: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (dim,):
        raise ContractError(f"{what} must have shape ({dim},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{what} has non-finite entries: {x}")
    return x
