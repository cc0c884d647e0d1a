"""Execute-or-abort decisions for proposed policy actions.

``ReversibilityShield`` only needs the black-box dynamics: an action is
executed if a reverse plan from its successor back to the current state
can be found. ``ResamplingShield`` is the full-knowledge baseline that
checks the true constraint one step ahead.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np

from .core import ConstraintOracle, Dynamics
from .mppi import MppiParams, MppiPlanner, SafetyPlan


class Verdict(Enum):
    EXECUTE = "execute"
    ABORT = "abort"


class PolicySample(NamedTuple):
    action: np.ndarray  # bounded action sent to the dynamics
    raw: np.ndarray  # pre-squash sample, what the learner trains on
    log_prob: float


# (state, rng) -> PolicySample
Sampler = Callable[[np.ndarray, np.random.Generator], PolicySample]


@dataclass
class ShieldDecision:
    sample: PolicySample
    verdict: Verdict
    plan: SafetyPlan | None = None
    samples_used: int = 0

    @property
    def action(self) -> np.ndarray:
        return self.sample.action

    @property
    def executed(self) -> bool:
        return self.verdict is Verdict.EXECUTE


@dataclass
class ShieldConfig:
    n_samples: int = 8
    mppi: MppiParams = field(default_factory=MppiParams)

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("shield.n_samples must be >= 1")


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(2**63))


def mpc_safety(x, policy: Sampler, dynamics: Dynamics, cfg: ShieldConfig, rng, planner: MppiPlanner | None = None) -> ShieldDecision:
    """Sample actions until one has a verified way back to ``x``.

    At most ``cfg.n_samples`` planner calls; after that the last sample is
    returned with an ABORT verdict and no plan.
    """
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=float)
    if planner is None:
        planner = MppiPlanner(dynamics, cfg.mppi)
    sample = None
    for n in range(1, cfg.n_samples + 1):
        sample = policy(x, rng)
        x_next = dynamics.step(x, sample.action)
        plan = planner.plan(x_next, x, _seed(rng))
        if plan is not None:
            return ShieldDecision(sample, Verdict.EXECUTE, plan, n)
    return ShieldDecision(sample, Verdict.ABORT, None, cfg.n_samples)


def resampling_shield(x, policy: Sampler, dynamics: Dynamics, oracle: ConstraintOracle, n_samples: int, rng) -> ShieldDecision:
    """Accept the first sample whose immediate successor is safe."""
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=float)
    sample = None
    for n in range(1, n_samples + 1):
        sample = policy(x, rng)
        if not oracle.is_unsafe(dynamics.step(x, sample.action)):
            return ShieldDecision(sample, Verdict.EXECUTE, None, n)
    return ShieldDecision(sample, Verdict.ABORT, None, n_samples)


class ReversibilityShield:
    """Stateful wrapper keeping one planner (and its warm start) per trajectory."""

    def __init__(self, dynamics: Dynamics, cfg: ShieldConfig):
        self.dynamics = dynamics
        self.cfg = cfg
        self.planner = MppiPlanner(dynamics, cfg.mppi)

    def reset(self):
        self.planner.reset()

    def decide(self, x, policy: Sampler, rng) -> ShieldDecision:
        return mpc_safety(x, policy, self.dynamics, self.cfg, rng, self.planner)


class ResamplingShield:
    def __init__(self, dynamics: Dynamics, oracle: ConstraintOracle, n_samples: int):
        self.dynamics = dynamics
        self.oracle = oracle
        self.n_samples = n_samples

    def reset(self):
        pass

    def decide(self, x, policy: Sampler, rng) -> ShieldDecision:
        return resampling_shield(x, policy, self.dynamics, self.oracle, self.n_samples, rng)


class NoShield:
    def reset(self):
        pass

    def decide(self, x, policy: Sampler, rng) -> ShieldDecision:
        return ShieldDecision(policy(np.asarray(x, dtype=float), rng), Verdict.EXECUTE, None, 1)
