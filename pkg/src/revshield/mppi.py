"""Sampling-based search for a reverse plan through black-box dynamics.

Given an induced state ``start`` and the state ``target`` it came from,
look for an action sequence of at most ``horizon`` steps whose rollout
passes within ``delta`` of ``target`` at some step (step 0 included).
Model Predictive Path Integral updates steer the nominal sequence between
iterations. A plan is only returned after it has been replayed through
the dynamics, so every returned plan is sound; ``None`` only means the
sampling budget ran out.

Absorbing states (every action maps the state to itself) are detected
with two probe queries at the action bounds. Rollouts that freeze before
reaching the target get infinite cost, and no plan may pass through one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Dynamics


@dataclass
class MppiParams:
    horizon: int = 20
    delta: float = 0.05
    num_rollouts: int = 256
    iterations: int = 8
    # per-dimension noise std; None means noise_scale * (high - low)
    sigma: tuple | None = None
    noise_scale: float = 0.3
    # AR(1) correlation of the noise along the horizon; 0 gives white noise
    noise_corr: float = 0.8
    # temperature; None means beta_scale * (best cost of the first iteration)
    beta: float | None = None
    beta_scale: float = 0.1
    # per-dimension state weights for the distance; None is plain Euclidean
    weights: tuple | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("mppi horizon must be >= 1")
        if not self.delta > 0:
            raise ValueError("mppi delta must be positive")
        if self.num_rollouts < 1 or self.iterations < 1:
            raise ValueError("mppi rollouts and iterations must be >= 1")
        if self.sigma is not None and not all(s > 0 for s in np.atleast_1d(self.sigma)):
            raise ValueError("mppi sigma must be positive")
        if self.beta is not None and not self.beta > 0:
            raise ValueError("mppi beta must be positive")
        if not 0 <= self.noise_corr < 1:
            raise ValueError("mppi noise_corr must lie in [0, 1)")
        if not (self.noise_scale > 0 and self.beta_scale > 0):
            raise ValueError("mppi noise_scale and beta_scale must be positive")

    def noise_std(self, dynamics: Dynamics) -> np.ndarray:
        spec = dynamics.spec
        if self.sigma is not None:
            return np.broadcast_to(np.asarray(self.sigma, dtype=float), (spec.action_dim,)).copy()
        return self.noise_scale * (spec.high - spec.low)


@dataclass
class SafetyPlan:
    start: np.ndarray
    target: np.ndarray
    actions: np.ndarray  # (k, action_dim), k may be 0
    achieved_distance: float
    delta: float
    weights: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.actions)


def distance(states: np.ndarray, target: np.ndarray, weights=None) -> np.ndarray:
    diff = states - target
    if weights is not None:
        diff = diff * np.asarray(weights)
    return np.sqrt(np.sum(diff * diff, axis=-1))


def rollout_cost(trajectory, target, weights=None) -> float:
    """Closest approach of a state trajectory to ``target``."""
    trajectory = np.atleast_2d(np.asarray(trajectory, dtype=float))
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    return float(np.min(distance(trajectory, np.asarray(target, dtype=float), weights)))


def mppi_weights(costs: np.ndarray, beta: float) -> np.ndarray:
    costs = np.asarray(costs, dtype=float)
    finite = np.isfinite(costs)
    w = np.zeros_like(costs)
    if not finite.any():
        return w
    c = costs[finite]
    e = np.exp(-(c - c.min()) / beta)
    w[finite] = e / e.sum()
    return w


def mppi_update(nominal, costs, noises, beta, low=None, high=None) -> np.ndarray:
    """Path-integral update: nominal plus the cost-weighted mean perturbation.

    ``noises`` has shape (K, T, m) and ``costs`` shape (K,). Infinite costs
    get zero weight; if every cost is infinite the nominal is returned.
    """
    w = mppi_weights(costs, beta)
    out = np.asarray(nominal, dtype=float) + np.tensordot(w, noises, axes=1)
    if low is not None:
        out = np.clip(out, low, high)
    return out


def noise_columns(rng, rows, dim, rho):
    """Yield unit-variance Gaussian noise one time step at a time, with AR(1)
    correlation ``rho`` between consecutive steps (0 gives white noise).

    Smooth perturbations reach saturated, bang-bang-like sequences far more
    often than white noise does.
    """
    scale = np.sqrt(1.0 - rho * rho)
    col = rng.normal(size=(rows, dim))
    while True:
        yield col
        col = rho * col + scale * rng.normal(size=(rows, dim))


def correlated_noise(rng, shape, rho) -> np.ndarray:
    """(rows, steps, dim) array drawn from ``noise_columns``."""
    rows, steps, dim = shape
    cols = noise_columns(rng, rows, dim, rho)
    return np.stack([next(cols) for _ in range(steps)], axis=1)


def absorbing(dynamics: Dynamics, states: np.ndarray) -> np.ndarray:
    """True where a state is frozen under both extreme actions."""
    states = np.atleast_2d(states)
    n, spec = len(states), dynamics.spec
    probes = np.concatenate([np.broadcast_to(spec.low, (n, spec.action_dim)), np.broadcast_to(spec.high, (n, spec.action_dim))])
    doubled = np.concatenate([states, states])
    same = np.all(dynamics.step_batch(doubled, probes) == doubled, axis=-1)
    return same[:n] & same[n:]


def replay(dynamics: Dynamics, start, actions) -> np.ndarray:
    """States visited when ``actions`` are applied from ``start`` (start included)."""
    x = np.asarray(start, dtype=float)
    states = [x]
    for u in np.asarray(actions, dtype=float).reshape(-1, dynamics.spec.action_dim):
        x = dynamics.step_batch(x[None, :], u[None, :])[0]
        states.append(x)
    return np.array(states)


def _replay_check(start, plan: SafetyPlan, dynamics: Dynamics, delta: float):
    states = replay(dynamics, start, plan.actions)
    d = distance(states, plan.target, plan.weights)
    hits = np.flatnonzero(d <= delta)
    if len(hits) == 0:
        return False, d
    prefix = states[: hits[0] + 1]
    return not absorbing(dynamics, prefix).any(), d


def verify_plan(start, plan: SafetyPlan, dynamics: Dynamics, delta: float | None = None) -> bool:
    """Replay ``plan`` from ``start``: it must come within delta of its target
    before (or without) ever touching an absorbing state."""
    return _replay_check(start, plan, dynamics, plan.delta if delta is None else delta)[0]


class MppiPlanner:
    """Reverse planner with a warm-started nominal sequence.

    One instance serves one trajectory; the nominal sequence carried
    between calls is trajectory-local state.
    """

    def __init__(self, dynamics: Dynamics, params: MppiParams):
        self.dynamics = dynamics
        self.params = params
        spec = dynamics.spec
        self._low, self._high = spec.low, spec.high
        self._sigma = params.noise_std(dynamics)
        self._weights = None if params.weights is None else np.asarray(params.weights, dtype=float)
        self.nominal = np.zeros((params.horizon, spec.action_dim))
        self.calls = 0
        self.rollout_steps = 0

    def reset(self):
        self.nominal = np.zeros_like(self.nominal)

    def _warm_start(self, best: np.ndarray):
        self.nominal = np.concatenate([best[1:], np.zeros_like(best[:1])])

    def plan(self, start, target, rng_seed) -> SafetyPlan | None:
        self.calls += 1
        p, dyn = self.params, self.dynamics
        start = np.asarray(start, dtype=float)
        target = np.asarray(target, dtype=float)
        T, K = p.horizon, p.num_rollouts
        m = dyn.spec.action_dim

        if absorbing(dyn, start)[0]:
            return None
        d0 = float(distance(start, target, self._weights))
        if d0 <= p.delta:
            return SafetyPlan(start, target, np.zeros((0, m)), d0, p.delta, self._weights)

        rng = np.random.default_rng(rng_seed)
        nominal = self.nominal.copy()
        beta = p.beta
        best_cost, best_seq = np.inf, nominal
        for _ in range(p.iterations):
            costs, seqs, plan = self._rollouts(start, target, nominal, rng)
            if plan is not None:
                self._warm_start(np.concatenate([plan.actions, nominal[len(plan.actions):]]))
                return plan
            i = int(np.argmin(costs))
            if costs[i] < best_cost:
                best_cost, best_seq = costs[i], seqs[i]
            if not np.isfinite(costs).any():
                continue
            if beta is None:
                beta = p.beta_scale * float(np.min(costs))
            nominal = mppi_update(nominal, costs, seqs - nominal, beta, self._low, self._high)
        self._warm_start(best_seq)
        return None

    def _rollouts(self, start, target, nominal, rng):
        """Sample perturbations of ``nominal`` and roll them out in lockstep.

        Noise is drawn step by step, so an early hit skips the rest. Row 0
        is the unperturbed nominal. Returns (closest-approach costs,
        sequences, plan or None); the sequences are complete only when no
        plan is returned.
        """
        dyn, p = self.dynamics, self.params
        K, T = p.num_rollouts, p.horizon
        seqs = np.empty((K, T, len(self._low)))
        cols = noise_columns(rng, K, len(self._low), p.noise_corr)
        x = np.broadcast_to(start, (K, len(start))).copy()
        best = np.full(K, np.inf)
        dead = np.zeros(K, dtype=bool)
        for t in range(T):
            u = nominal[t] + next(cols) * self._sigma
            u[0] = nominal[t]
            seqs[:, t] = np.clip(u, self._low, self._high)
            nxt = dyn.step_batch(x, seqs[:, t])
            self.rollout_steps += 1
            same = np.all(nxt == x, axis=-1) & ~dead
            if same.any():
                idx = np.flatnonzero(same)
                dead[idx[absorbing(dyn, x[idx])]] = True
            x = nxt
            d = distance(x, target, self._weights)
            d[dead] = np.inf
            best = np.minimum(best, d)
            hits = np.flatnonzero(d <= p.delta)
            for k in hits[np.argsort(d[hits], kind="stable")]:
                plan = SafetyPlan(start, target, seqs[k, : t + 1].copy(), float(d[k]), p.delta, self._weights)
                ok, replayed = _replay_check(start, plan, dyn, p.delta)
                if ok:
                    plan.achieved_distance = float(replayed.min())
                    return best, seqs, plan
        # frozen before any hit: no plan can be extracted from these rollouts
        best[dead] = np.inf
        return best, seqs, None


def plan_reverse(start, target, dynamics: Dynamics, params: MppiParams, rng_seed, nominal=None) -> SafetyPlan | None:
    """One-shot reverse planning from ``start`` back to ``target``."""
    planner = MppiPlanner(dynamics, params)
    if nominal is not None:
        planner.nominal = np.array(nominal, dtype=float).reshape(planner.nominal.shape)
    return planner.plan(start, target, rng_seed)
