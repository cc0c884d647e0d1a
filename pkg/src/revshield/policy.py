"""Small actor-critic trained with PPO, in plain numpy.

Actor: state -> h -> h -> (mean, log-std) per action dimension, tanh
hidden layers. Critic: state -> h -> h -> value. Actions are sampled
from a diagonal Gaussian and squashed into the action box with tanh; the
reported log-density is that of the squashed action (change of variables
included), so it integrates to one over the box.
"""
from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .core import Transition
from .shield import PolicySample

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = math.log(2 * math.pi)
CHECKPOINT_MAGIC = "revshield-params"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when an update produces a non-finite loss or gradient."""


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    epochs: int = 10
    minibatch: int = 64
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden: int = 64
    init_log_std: float = 0.0
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("ppo.gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("ppo.gae_lambda must be in [0, 1]")
        if not self.clip_eps > 0 or not self.lr > 0:
            raise ValueError("ppo.clip_eps and ppo.lr must be positive")
        if self.epochs < 1 or self.minibatch < 1 or self.hidden < 1:
            raise ValueError("ppo.epochs, ppo.minibatch and ppo.hidden must be >= 1")


@dataclass
class PolicyParams:
    weights: dict  # name -> array; "pi.*" actor, "vf.*" critic
    low: np.ndarray
    high: np.ndarray
    obs_scale: np.ndarray

    @property
    def action_dim(self) -> int:
        return len(self.low)

    @property
    def state_dim(self) -> int:
        return len(self.obs_scale)

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.weights.items()}, self.low.copy(), self.high.copy(), self.obs_scale.copy())


def _orthogonal(rng, n_in, n_out, gain):
    a = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_params(state_dim, action_dim, low, high, rng, hidden=64, obs_scale=None, init_log_std=0.0) -> PolicyParams:
    rng = np.random.default_rng(rng)
    w = {}
    sizes = [state_dim, hidden, hidden]
    for prefix, n_out, head_gain in (("pi", 2 * action_dim, 0.01), ("vf", 1, 1.0)):
        for i in range(2):
            w[f"{prefix}.W{i}"] = _orthogonal(rng, sizes[i], sizes[i + 1], math.sqrt(2))
            w[f"{prefix}.b{i}"] = np.zeros(sizes[i + 1])
        w[f"{prefix}.W2"] = _orthogonal(rng, hidden, n_out, head_gain)
        w[f"{prefix}.b2"] = np.zeros(n_out)
    w["pi.W2"][:, action_dim:] = 0.0
    w["pi.b2"][action_dim:] = init_log_std
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    scale = np.ones(state_dim) if obs_scale is None or len(obs_scale) == 0 else np.asarray(obs_scale, dtype=float)
    return PolicyParams(w, low, high, scale)


def _mlp(w, prefix, x):
    h0 = np.tanh(x @ w[f"{prefix}.W0"] + w[f"{prefix}.b0"])
    h1 = np.tanh(h0 @ w[f"{prefix}.W1"] + w[f"{prefix}.b1"])
    out = h1 @ w[f"{prefix}.W2"] + w[f"{prefix}.b2"]
    return out, (x, h0, h1)


def _mlp_backward(w, prefix, cache, dout, grads):
    x, h0, h1 = cache
    grads[f"{prefix}.W2"] = h1.T @ dout
    grads[f"{prefix}.b2"] = dout.sum(axis=0)
    dh1 = (dout @ w[f"{prefix}.W2"].T) * (1 - h1**2)
    grads[f"{prefix}.W1"] = h0.T @ dh1
    grads[f"{prefix}.b1"] = dh1.sum(axis=0)
    dh0 = (dh1 @ w[f"{prefix}.W1"].T) * (1 - h0**2)
    grads[f"{prefix}.W0"] = x.T @ dh0
    grads[f"{prefix}.b0"] = dh0.sum(axis=0)


def actor(params: PolicyParams, states):
    """Mean and clamped log-std of the pre-squash Gaussian."""
    x = np.atleast_2d(states) / params.obs_scale
    out, cache = _mlp(params.weights, "pi", x)
    m = params.action_dim
    raw_log_std = out[:, m:]
    return out[:, :m], np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX), (cache, raw_log_std)


def value(params: PolicyParams, states) -> np.ndarray:
    x = np.atleast_2d(states) / params.obs_scale
    return _mlp(params.weights, "vf", x)[0][:, 0]


def squash(params: PolicyParams, z):
    mid = (params.high + params.low) / 2
    half = (params.high - params.low) / 2
    return mid + half * np.tanh(z)


def _squash_log_det(params: PolicyParams, z):
    # log |d squash / dz| = log(half) + log(1 - tanh(z)^2), computed stably
    half = (params.high - params.low) / 2
    return np.sum(np.log(half) + 2 * (math.log(2) - z - np.logaddexp(0, -2 * z)), axis=-1)


def gaussian_log_prob(mu, log_std, z):
    return np.sum(-0.5 * ((z - mu) / np.exp(log_std)) ** 2 - log_std - 0.5 * _LOG_2PI, axis=-1)


def log_prob_raw(params: PolicyParams, states, z):
    """Log-density of bounded actions given their pre-squash samples ``z``."""
    mu, log_std, _ = actor(params, states)
    z = np.atleast_2d(z)
    return gaussian_log_prob(mu, log_std, z) - _squash_log_det(params, z)


def log_prob_action(params: PolicyParams, states, actions):
    """Log-density of bounded actions (must lie strictly inside the box)."""
    mid = (params.high + params.low) / 2
    half = (params.high - params.low) / 2
    z = np.arctanh((np.atleast_2d(actions) - mid) / half)
    return log_prob_raw(params, states, z)


def act(params: PolicyParams, x, rng) -> PolicySample:
    rng = np.random.default_rng(rng)
    mu, log_std, _ = actor(params, x)
    z = mu[0] + np.exp(log_std[0]) * rng.normal(size=params.action_dim)
    a = np.clip(squash(params, z), params.low, params.high)
    lp = gaussian_log_prob(mu[0], log_std[0], z) - _squash_log_det(params, z)
    return PolicySample(a, z, float(lp))


def make_sampler(params: PolicyParams):
    return lambda x, rng: act(params, x, rng)


class RolloutBuffer:
    """Executed transitions in trajectory order, plus learner bookkeeping.

    ``done`` marks terminal steps (violation, goal, abort): no value
    bootstrap past them. ``end`` marks any trajectory boundary, including
    time-limit truncation, where the successor's value is bootstrapped.
    Value estimates are attached in one batch before an update, with the
    same critic that was live while the data was collected.
    """

    FIELDS = ("state", "raw", "action", "next_state", "reward", "log_prob", "done", "end")

    def __init__(self):
        self.clear()

    def clear(self):
        self._rows = {k: [] for k in self.FIELDS}
        self.values = None
        self.next_values = None

    def __len__(self):
        return len(self._rows["reward"])

    def add(self, state, raw, action, next_state, reward, log_prob, done=False, end=False):
        for k, v in zip(self.FIELDS, (state, raw, action, next_state, reward, log_prob, done, end)):
            self._rows[k].append(v)
        self.values = self.next_values = None

    def mark_last(self, reward_delta=0.0, done=None, end=None):
        if not len(self):
            return
        self._rows["reward"][-1] += reward_delta
        if done is not None:
            self._rows["done"][-1] = done
        if end is not None:
            self._rows["end"][-1] = end

    def transitions(self):
        r = self._rows
        return [Transition(s, a, s2, rew) for s, a, s2, rew in zip(r["state"], r["action"], r["next_state"], r["reward"])]

    def attach_values(self, params: "PolicyParams"):
        a = self.arrays()
        self.values = value(params, a["state"])
        self.next_values = value(params, a["next_state"])

    def arrays(self) -> dict:
        out = {k: np.asarray(v, dtype=float) for k, v in self._rows.items()}
        out["done"] = out["done"].astype(bool)
        out["end"] = out["end"].astype(bool)
        if len(self):
            out["end"][-1] = True  # the buffer may stop mid-trajectory
        return out


def gae(rewards, values, next_values, dones, ends, gamma, lam) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=float)
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        if ends[t]:
            running = 0.0
        delta = rewards[t] + gamma * next_values[t] * (1.0 - dones[t]) - values[t]
        running = delta + gamma * lam * (1.0 - dones[t]) * running
        adv[t] = running
    return adv


def shaped_rewards(arrays: dict, gamma, potential=None) -> np.ndarray:
    """Rewards plus the potential-based term gamma*phi(x') - phi(x).

    phi is taken as zero past terminal steps, which leaves the set of
    optimal policies unchanged.
    """
    r = arrays["reward"]
    if potential is None:
        return r
    phi = potential(arrays["state"])
    phi_next = np.where(arrays["done"], 0.0, potential(arrays["next_state"]))
    return r + gamma * phi_next - phi


def buffer_advantages(buffer: RolloutBuffer, gamma, lam, potential=None) -> np.ndarray:
    if buffer.values is None:
        raise ValueError("attach value estimates before computing advantages")
    a = buffer.arrays()
    rewards = shaped_rewards(a, gamma, potential)
    return gae(rewards, buffer.values, buffer.next_values, a["done"], a["end"], gamma, lam)


def normalize_advantages(adv) -> np.ndarray:
    """Zero mean, unit variance per batch (a positive affine map)."""
    adv = np.asarray(adv, dtype=float)
    if len(adv) < 2:
        return adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_loss(params: PolicyParams, batch: dict, cfg: PpoConfig):
    """Clipped-surrogate PPO loss and its gradient w.r.t. every weight.

    ``batch`` needs state, raw, log_prob, adv and ret arrays.
    """
    w = params.weights
    adv = normalize_advantages(batch["adv"]) if cfg.normalize_advantages else batch["adv"]
    n = len(adv)

    mu, log_std, (pi_cache, raw_log_std) = actor(params, batch["state"])
    z = batch["raw"]
    logp = gaussian_log_prob(mu, log_std, z) - _squash_log_det(params, z)
    ratio = np.exp(logp - batch["log_prob"])
    clipped = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps)
    unclipped_active = ratio * adv <= clipped * adv
    surrogate = np.where(unclipped_active, ratio * adv, clipped * adv)
    entropy = np.sum(log_std + 0.5 * (_LOG_2PI + 1), axis=-1)

    v, vf_cache = _mlp(w, "vf", np.atleast_2d(batch["state"]) / params.obs_scale)
    v = v[:, 0]
    v_err = v - batch["ret"]

    loss = -surrogate.mean() - cfg.ent_coef * entropy.mean() + cfg.vf_coef * np.mean(v_err**2)

    # d loss / d logp, through the ratio
    dlogp = np.where(unclipped_active, -adv, 0.0) * ratio / n
    std = np.exp(log_std)
    dmu = dlogp[:, None] * (z - mu) / std**2
    dlog_std = dlogp[:, None] * (((z - mu) / std) ** 2 - 1) - cfg.ent_coef / n
    inside = (raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX)
    dlog_std = dlog_std * inside

    grads = {}
    _mlp_backward(w, "pi", pi_cache, np.concatenate([dmu, dlog_std], axis=1), grads)
    _mlp_backward(w, "vf", vf_cache, (2 * cfg.vf_coef / n * v_err)[:, None], grads)

    stats = {
        "loss": float(loss),
        "policy_loss": float(-surrogate.mean()),
        "value_loss": float(np.mean(v_err**2)),
        "entropy": float(entropy.mean()),
        "clip_frac": float(np.mean(np.abs(ratio - 1) > cfg.clip_eps)),
        "approx_kl": float(np.mean((ratio - 1) - np.log(ratio))),
    }
    return float(loss), grads, stats


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-5):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, weights: dict, grads: dict):
        self.t += 1
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.b1**self.t)
            v_hat = v / (1 - self.b2**self.t)
            weights[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class PPO:
    params: PolicyParams
    cfg: PpoConfig
    optimizer: Adam = field(init=False)
    last_stats: dict = field(init=False, default_factory=dict)
    # optional state potential for reward shaping during updates
    potential: Callable | None = None

    def __post_init__(self):
        self.optimizer = Adam(self.cfg.lr)

    def sampler(self):
        return make_sampler(self.params)

    def update(self, buffer: RolloutBuffer, rng) -> PolicyParams:
        return ppo_update(self.params, buffer, self.cfg, rng, self.optimizer, self.last_stats, self.potential)


def ppo_update(params: PolicyParams, buffer: RolloutBuffer, cfg: PpoConfig, rng=0, optimizer: Adam | None = None, stats_out: dict | None = None, potential=None) -> PolicyParams:
    """Several epochs of minibatch Adam on the PPO loss; updates ``params`` in place."""
    if not len(buffer):
        raise ValueError("empty rollout buffer")
    rng = np.random.default_rng(rng)
    optimizer = optimizer or Adam(cfg.lr)
    if buffer.values is None:
        buffer.attach_values(params)
    a = buffer.arrays()
    adv = buffer_advantages(buffer, cfg.gamma, cfg.gae_lambda, potential)
    data = {"state": a["state"], "raw": a["raw"].reshape(len(adv), -1), "log_prob": a["log_prob"], "adv": adv, "ret": adv + buffer.values}
    n = len(adv)
    stats = {}
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start : start + cfg.minibatch]
            loss, grads, stats = ppo_loss(params, {k: v[idx] for k, v in data.items()}, cfg)
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if not (math.isfinite(loss) and math.isfinite(norm)):
                raise TrainingError(f"non-finite PPO loss ({loss}) or gradient norm ({norm})")
            if cfg.max_grad_norm and norm > cfg.max_grad_norm:
                grads = {k: g * (cfg.max_grad_norm / norm) for k, g in grads.items()}
            optimizer.step(params.weights, grads)
    if stats_out is not None:
        stats_out.clear()
        stats_out.update(stats)
    return params


def save_params(params: PolicyParams, path):
    """Write a plain-text checkpoint.

    Layout: a ``revshield-params 1`` header line, then for each array
    (including ``low``, ``high`` and ``obs_scale``) a line
    ``name ndim dim0 [dim1]`` followed by its rows (one row for vectors)
    as space-separated float reprs. Arrays are written in sorted-name order.
    """
    arrays = dict(params.weights)
    arrays.update({"low": params.low, "high": params.high, "obs_scale": params.obs_scale})
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=float)
        mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
        lines.append(f"{name} {arr.ndim} {' '.join(str(s) for s in arr.shape)}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in mat)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_params(path) -> PolicyParams:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    magic, version = lines[0].split()
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    arrays, i = {}, 1
    while i < len(lines):
        name, ndim, *shape = lines[i].split()
        shape = tuple(int(s) for s in shape)
        rows = shape[0] if int(ndim) == 2 else 1
        vals = [float(v) for line in lines[i + 1 : i + 1 + rows] for v in line.split()]
        arrays[name] = np.array(vals).reshape(shape)
        i += 1 + rows
    low, high, scale = arrays.pop("low"), arrays.pop("high"), arrays.pop("obs_scale")
    return PolicyParams(arrays, low, high, scale)
