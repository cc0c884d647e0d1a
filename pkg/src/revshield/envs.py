"""Continuous cartpole and 2-D navigation around an attracting sinkhole."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import EnvSpec, Environment

THETA_LIMIT = 12 * 2 * math.pi / 360  # 0.2094 rad


@dataclass
class CartpoleParams:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    force_mag: float = 10.0
    dt: float = 0.02
    reward_scale: float = 2.0  # lambda in 1 + lambda*|theta|
    signed_reward: bool = False
    theta_limit: float = THETA_LIMIT
    max_episode_steps: int = 200

    def __post_init__(self):
        for name in ("gravity", "cart_mass", "pole_mass", "pole_half_length", "force_mag", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"cartpole.{name} must be positive")


def cartpole_step(states: np.ndarray, actions: np.ndarray, p: CartpoleParams) -> np.ndarray:
    """Explicit Euler step of the cart-pole equations of motion.

    Works on (..., 4) states and (..., 1) actions. Unsafe inputs are
    returned unchanged.
    """
    x, x_dot, theta, theta_dot = (states[..., i] for i in range(4))
    force = p.force_mag * actions[..., 0]
    total_mass = p.cart_mass + p.pole_mass
    polemass_length = p.pole_mass * p.pole_half_length
    cos, sin = np.cos(theta), np.sin(theta)

    temp = (force + polemass_length * theta_dot**2 * sin) / total_mass
    theta_acc = (p.gravity * sin - cos * temp) / (
        p.pole_half_length * (4.0 / 3.0 - p.pole_mass * cos**2 / total_mass)
    )
    x_acc = temp - polemass_length * theta_acc * cos / total_mass

    nxt = np.stack(
        [
            x + p.dt * x_dot,
            x_dot + p.dt * x_acc,
            theta + p.dt * theta_dot,
            theta_dot + p.dt * theta_acc,
        ],
        axis=-1,
    )
    frozen = cartpole_unsafe(states, p)
    return np.where(frozen[..., None], states, nxt)


def cartpole_unsafe(states: np.ndarray, p: CartpoleParams) -> np.ndarray:
    return np.abs(states[..., 2]) > p.theta_limit


def cartpole_reward(state, p: CartpoleParams) -> float:
    theta = float(state[2])
    return 1.0 + p.reward_scale * (theta if p.signed_reward else abs(theta))


class Cartpole(Environment):
    name = "cartpole"

    def __init__(self, params: CartpoleParams | None = None):
        self.params = params or CartpoleParams()
        super().__init__(
            EnvSpec(
                state_dim=4,
                action_dim=1,
                action_low=(-1.0,),
                action_high=(1.0,),
                dt=self.params.dt,
                max_episode_steps=self.params.max_episode_steps,
                obs_scale=(1.0, 1.0, 1.0, 1.0),
            )
        )

    def _step_batch(self, states, actions):
        return cartpole_step(states, actions, self.params)

    def _unsafe_batch(self, states):
        return cartpole_unsafe(states, self.params)

    def reward(self, state) -> float:
        return cartpole_reward(state, self.params)

    def sample_initial(self, rng_seed) -> np.ndarray:
        rng = np.random.default_rng(rng_seed)
        return rng.uniform(-0.05, 0.05, size=4)


@dataclass
class NavParams:
    region: tuple = (-5.0, 5.0, -5.0, 5.0)  # xmin, xmax, ymin, ymax
    sink_center: tuple = (0.0, 0.0)
    r_term: float = 0.5
    r_attract: float = 1.5
    pull_gain: float = 1.2
    # speed scale of the pull field; must exceed sqrt(2)*v_max/pull_gain for
    # the field to overpower every admissible action near r_term
    pull_speed: float = 5.0
    goal_radius: float = 0.3
    v_max: float = 1.0
    dt: float = 0.1
    max_episode_steps: int = 200
    # weight of the distance-to-goal potential used to shape learning; 0 disables
    progress_weight: float = 10.0

    def __post_init__(self):
        self.region = tuple(float(v) for v in self.region)
        self.sink_center = tuple(float(v) for v in self.sink_center)
        if not self.r_attract > self.r_term > 0:
            raise ValueError("need r_attract > r_term > 0")
        xmin, xmax, ymin, ymax = self.region
        if not (xmin < self.sink_center[0] < xmax and ymin < self.sink_center[1] < ymax):
            raise ValueError("sink_center must lie inside the region")
        if not (self.v_max > 0 and self.dt > 0 and self.pull_gain > 0 and self.pull_speed > 0):
            raise ValueError("nav speeds, gains and dt must be positive")
        if self.progress_weight < 0:
            raise ValueError("nav progress_weight must be >= 0")


def _sink_offset(pos, p: NavParams):
    offset = np.asarray(p.sink_center) - pos
    return offset, np.sqrt(np.sum(offset**2, axis=-1))


def _pull(offset, d, p: NavParams):
    mag = np.where(
        d < p.r_attract, p.pull_gain * (p.r_attract - d) / p.r_attract * p.pull_speed, 0.0
    )
    # the direction is irrelevant at d == 0 (inside r_term, absorbing)
    safe_d = np.where(d > 0, d, 1.0)
    return offset * (mag / safe_d)[..., None]


def _unsafe(pos, d, p: NavParams):
    xmin, xmax, ymin, ymax = p.region
    px, py = pos[..., 0], pos[..., 1]
    outside = (px < xmin) | (px > xmax) | (py < ymin) | (py > ymax)
    return outside | (d <= p.r_term)


def nav_pull(pos: np.ndarray, p: NavParams) -> np.ndarray:
    """Attraction velocity toward the sink; zero outside r_attract."""
    return _pull(*_sink_offset(pos, p), p)


def nav_unsafe(states: np.ndarray, p: NavParams) -> np.ndarray:
    pos = states[..., :2]
    return _unsafe(pos, _sink_offset(pos, p)[1], p)


def nav_step(states: np.ndarray, actions: np.ndarray, p: NavParams) -> np.ndarray:
    # column-wise form of pos + (u + nav_pull(pos)) * dt, frozen where unsafe;
    # this sits in the planner's inner loop
    px, py = states[..., 0], states[..., 1]
    ox, oy = p.sink_center[0] - px, p.sink_center[1] - py
    d = np.sqrt(ox * ox + oy * oy)
    k = np.where(
        d < p.r_attract, p.pull_gain * (p.r_attract - d) / p.r_attract * p.pull_speed, 0.0
    ) / np.where(d > 0, d, 1.0)
    xmin, xmax, ymin, ymax = p.region
    frozen = (px < xmin) | (px > xmax) | (py < ymin) | (py > ymax) | (d <= p.r_term)
    out = states.copy()
    out[..., 0] = np.where(frozen, px, px + (actions[..., 0] + ox * k) * p.dt)
    out[..., 1] = np.where(frozen, py, py + (actions[..., 1] + oy * k) * p.dt)
    return out


def nav_reward(reached_goal: bool, terminated: bool) -> float:
    return -1.0 + 1000.0 * bool(reached_goal) - 100.0 * bool(terminated)


class Navigation(Environment):
    name = "nav2d"

    def __init__(self, params: NavParams | None = None):
        self.params = params or NavParams()
        v = self.params.v_max
        xmin, xmax, ymin, ymax = self.params.region
        half = max(xmax - xmin, ymax - ymin) / 2
        super().__init__(
            EnvSpec(
                state_dim=4,
                action_dim=2,
                action_low=(-v, -v),
                action_high=(v, v),
                dt=self.params.dt,
                max_episode_steps=self.params.max_episode_steps,
                obs_scale=(half,) * 4,
            )
        )

    def _step_batch(self, states, actions):
        return nav_step(states, actions, self.params)

    def _unsafe_batch(self, states):
        return nav_unsafe(states, self.params)

    def reached_goal(self, state) -> bool:
        return bool(np.hypot(state[0] - state[2], state[1] - state[3]) <= self.params.goal_radius)

    def reward(self, state) -> float:
        state = np.asarray(state, dtype=float)
        return nav_reward(self.reached_goal(state), bool(nav_unsafe(state, self.params)))

    def outcome_reward(self, reached_goal: bool, terminated: bool) -> float:
        return nav_reward(reached_goal, terminated) - nav_reward(False, False)

    @property
    def potential(self):
        if self.params.progress_weight == 0:
            return None
        return self._goal_potential

    def _goal_potential(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        gap = np.hypot(states[..., 0] - states[..., 2], states[..., 1] - states[..., 3])
        return -self.params.progress_weight * gap

    def sample_initial(self, rng_seed) -> np.ndarray:
        """Start and goal uniform over the region outside the sink's pull,
        on opposite sides of a line through the sink centre."""
        rng = np.random.default_rng(rng_seed)
        p = self.params
        c = np.asarray(p.sink_center)
        start = self._uniform_point(rng, lambda q: np.linalg.norm(q - c) > p.r_attract)
        goal = self._uniform_point(
            rng, lambda q: np.linalg.norm(q - c) > p.r_attract + p.goal_radius and np.dot(q - c, start - c) < 0
        )
        return np.concatenate([start, goal])

    def _uniform_point(self, rng, accept) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.params.region
        while True:
            q = rng.uniform((xmin, ymin), (xmax, ymax))
            if accept(q):
                return q


def make_env(name: str, cartpole: CartpoleParams | None = None, nav: NavParams | None = None) -> Environment:
    if name == "cartpole":
        return Cartpole(cartpole)
    if name == "nav2d":
        return Navigation(nav)
    raise ValueError(f"unknown environment {name!r} (expected cartpole or nav2d)")
