"""Shielded PPO training loop.

Per episode: draw an initial state, then at every step ask the configured
shield for an action. An ABORT verdict ends the episode without executing
anything; otherwise the action is applied, the transition is stored and
the learner is updated on its cadence.

The constraint oracle is consulted here only for bookkeeping (violation
flags) and, for the ``oracle`` shield, by the shield itself. Oracle calls
made while the reversibility shield is deciding are counted separately so
tests can check that there are none.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .envs import make_env
from .mppi import verify_plan
from .policy import PPO, PolicyParams, RolloutBuffer, init_params
from .shield import NoShield, ReversibilityShield, ResamplingShield

log = logging.getLogger(__name__)


@dataclass
class EpisodeRecord:
    episode: int
    reward: float = 0.0
    steps: int = 0
    violated: bool = False
    aborted: bool = False
    reached_goal: bool = False
    wall_time: float = 0.0


@dataclass
class RunMetrics:
    episodes: list = field(default_factory=list)
    cum_violations: int = 0
    cum_aborts: int = 0
    env_steps: int = 0
    # instrumentation
    plans_returned: int = 0
    plan_failures: int = 0
    planner_calls: int = 0
    shield_oracle_calls: int = 0
    updates: int = 0

    def add(self, record: EpisodeRecord):
        self.episodes.append(record)
        self.cum_violations += record.violated
        self.cum_aborts += record.aborted
        self.env_steps += record.steps

    def rows(self):
        """Per-episode rows with running totals."""
        cv = ca = 0
        for r in self.episodes:
            cv += r.violated
            ca += r.aborted
            yield r, cv, ca


def abort_trajectory(x, record: EpisodeRecord, penalty: float = 0.0):
    """End the current episode without executing the proposed action."""
    record.aborted = True
    record.reward += penalty
    log.debug("episode %d aborted at step %d, state %s", record.episode, record.steps, x)


def build_shield(cfg: TrainConfig, env):
    if cfg.shield == "none":
        return NoShield()
    if cfg.shield == "savmpc":
        # dynamics only: this shield never receives the constraint oracle
        return ReversibilityShield(env.dynamics, cfg.shield_cfg)
    if cfg.shield == "oracle":
        return ResamplingShield(env.dynamics, env.oracle, cfg.shield_cfg.n_samples)
    raise ValueError(f"unknown shield {cfg.shield!r}")


class Trainer:
    def __init__(self, cfg: TrainConfig, keep_transitions: bool = False):
        self.cfg = cfg.validate()
        self.env = make_env(cfg.env, cfg.cartpole, cfg.nav)
        spec = self.env.spec
        init_ss, act_ss, env_ss, upd_ss = np.random.SeedSequence(cfg.seed).spawn(4)
        params = init_params(
            spec.state_dim, spec.action_dim, spec.low, spec.high, np.random.default_rng(init_ss),
            hidden=cfg.ppo.hidden, obs_scale=spec.obs_scale, init_log_std=cfg.ppo.init_log_std,
        )
        self.learner = PPO(params, cfg.ppo, potential=self.env.potential)
        self.sampler = self.learner.sampler()
        self.shield = build_shield(cfg, self.env)
        self.buffer = RolloutBuffer()
        self.metrics = RunMetrics()
        self.timesteps = cfg.timesteps or spec.max_episode_steps
        self._act_rng = np.random.default_rng(act_ss)
        self._env_rng = np.random.default_rng(env_ss)
        self._upd_rng = np.random.default_rng(upd_ss)
        self.keep_transitions = keep_transitions
        self.transitions = []  # every executed transition, when keep_transitions
        self.safety_chain_failures = 0

    @property
    def params(self) -> PolicyParams:
        return self.learner.params

    def _update(self):
        if len(self.buffer):
            self.learner.update(self.buffer, self._upd_rng)
            self.metrics.updates += 1
            self.buffer.clear()

    def run_episode(self, index: int) -> EpisodeRecord:
        cfg, env, dyn, oracle = self.cfg, self.env, self.env.dynamics, self.env.oracle
        record = EpisodeRecord(index)
        t0 = time.perf_counter()
        x = env.sample_initial(int(self._env_rng.integers(2**63)))
        self.shield.reset()
        stored = 0  # this episode's rows still in the buffer
        terminal = False
        for _ in range(self.timesteps):
            if cfg.check_safety_chain and oracle.is_unsafe(x):
                self.safety_chain_failures += 1
            before = oracle.calls
            decision = self.shield.decide(x, self.sampler, self._act_rng)
            if cfg.shield == "savmpc":
                self.metrics.shield_oracle_calls += oracle.calls - before
                self.metrics.planner_calls += decision.samples_used
            if decision.plan is not None and cfg.audit_plans:
                self.metrics.plans_returned += 1
                if not verify_plan(dyn.step(x, decision.action), decision.plan, dyn):
                    self.metrics.plan_failures += 1
            if not decision.executed:
                penalty = env.outcome_reward(False, True)
                abort_trajectory(x, record, penalty)
                if stored:
                    self.buffer.mark_last(penalty, done=True, end=True)
                terminal = True
                break

            u = decision.action
            x_next = env.dyn_step(x, u)
            violated = oracle.is_unsafe(x_next)
            goal = env.reached_goal(x_next)
            r = env.reward(x) + env.outcome_reward(goal, violated)
            done = violated or goal
            self.buffer.add(x, decision.sample.raw, u, x_next, r, decision.sample.log_prob, done, done)
            if self.keep_transitions:
                self.transitions.append((x, u, x_next, r))
            stored += 1
            record.steps += 1
            record.reward += r
            record.violated |= violated
            record.reached_goal |= goal
            x = x_next
            if cfg.update_mode == "steps" and len(self.buffer) >= cfg.update_every:
                self._update()
                stored = 0
            if done:
                terminal = True
                break
        if not terminal and stored:
            self.buffer.mark_last(end=True)
        if cfg.update_mode == "episode":
            self._update()
        record.wall_time = time.perf_counter() - t0
        return record

    def run(self, progress=None):
        for i in range(self.cfg.episodes):
            record = self.run_episode(i)
            self.metrics.add(record)
            if progress is not None:
                progress(record, self.metrics)
        return self.params, self.metrics


def train(cfg: TrainConfig, progress=None):
    """Run a full training session; returns (policy params, run metrics)."""
    return Trainer(cfg).run(progress)
