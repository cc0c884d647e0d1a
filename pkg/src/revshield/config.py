"""Training configuration and the line-oriented config file format.

A config file is UTF-8 text with one ``section.key = value`` per line.
Blank lines and lines starting with ``#`` are ignored. Values are Python
literals (numbers, tuples/lists, quoted strings) or the bare words
``true``/``false``/``none``; anything else is read as a plain string.

Sections: ``train``, ``cartpole``, ``nav``, ``mppi``, ``shield``, ``ppo``.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields, replace

from .envs import CartpoleParams, NavParams
from .mppi import MppiParams
from .policy import PpoConfig
from .shield import ShieldConfig

ENVS = ("cartpole", "nav2d")
SHIELDS = ("none", "savmpc", "oracle")

# short names accepted in config files
ALIASES = {
    "mppi": {"T": "horizon", "K": "num_rollouts"},
    "cartpole": {"lambda": "reward_scale"},
    "train": {"E": "episodes", "N_timesteps": "timesteps"},
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    env: str = "cartpole"
    shield: str = "savmpc"
    episodes: int = 500
    # per-episode step cap; None uses the environment's own limit
    timesteps: int | None = None
    # "steps": update every `update_every` collected steps; "episode": after each episode
    update_mode: str = "steps"
    update_every: int = 2048
    seed: int = 0
    # replay every returned plan and count failures
    audit_plans: bool = True
    # assert the loop-head state is safe at every step (uses the oracle)
    check_safety_chain: bool = False
    cartpole: CartpoleParams = field(default_factory=CartpoleParams)
    nav: NavParams = field(default_factory=NavParams)
    shield_cfg: ShieldConfig = field(default_factory=ShieldConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)

    @property
    def mppi(self) -> MppiParams:
        return self.shield_cfg.mppi

    def validate(self):
        if self.env not in ENVS:
            raise ConfigError(f"unknown env {self.env!r}; expected one of {ENVS}")
        if self.shield not in SHIELDS:
            raise ConfigError(f"unknown shield {self.shield!r}; expected one of {SHIELDS}")
        if self.episodes < 1:
            raise ConfigError("train.episodes must be >= 1")
        if self.timesteps is not None and self.timesteps < 1:
            raise ConfigError("train.timesteps must be >= 1")
        if self.update_mode not in ("steps", "episode"):
            raise ConfigError("train.update_mode must be 'steps' or 'episode'")
        if self.update_every < 1:
            raise ConfigError("train.update_every must be >= 1")
        return self


def default_config(env: str = "cartpole", shield: str = "savmpc", seed: int = 0) -> TrainConfig:
    """Desk-scale defaults for one environment."""
    if env == "cartpole":
        return TrainConfig(
            env=env, shield=shield, seed=seed, episodes=500,
            shield_cfg=ShieldConfig(mppi=MppiParams(horizon=25, delta=0.1)),
            ppo=PpoConfig(ent_coef=0.0),
        )
    if env == "nav2d":
        return TrainConfig(
            env=env, shield=shield, seed=seed, episodes=750,
            # episodes are short early on; a smaller batch gives enough updates
            update_every=512,
            shield_cfg=ShieldConfig(mppi=MppiParams(horizon=10, delta=0.05)),
            ppo=PpoConfig(ent_coef=0.01),
        )
    raise ConfigError(f"unknown env {env!r}; expected one of {ENVS}")


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str) -> dict:
    """Return {(section, key): value} from config-file text."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        lhs, rhs = line.split("=", 1)
        lhs = lhs.strip()
        if "." not in lhs:
            raise ConfigError(f"line {lineno}: key {lhs!r} has no section")
        section, key = lhs.split(".", 1)
        out[(section, key)] = parse_value(rhs)
    return out


def _set(obj, section, key, value):
    key = ALIASES.get(section, {}).get(key, key)
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown config key {section}.{key}")
    current = getattr(obj, key)
    if isinstance(current, tuple) and isinstance(value, list):
        value = tuple(value)
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return replace(obj, **{key: value})


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply {(section, key): value} overrides, re-validating nested params."""
    try:
        for (section, key), value in overrides.items():
            if section == "train":
                cfg = _set(cfg, section, key, value)
            elif section in ("cartpole", "nav", "ppo"):
                cfg = replace(cfg, **{section: _set(getattr(cfg, section), section, key, value)})
            elif section == "mppi":
                cfg = replace(cfg, shield_cfg=replace(cfg.shield_cfg, mppi=_set(cfg.mppi, section, key, value)))
            elif section == "shield":
                cfg = replace(cfg, shield_cfg=_set(cfg.shield_cfg, section, key, value))
            else:
                raise ConfigError(f"unknown config section {section!r}")
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e
    return cfg.validate()


def load_config(path, env: str, shield: str, seed: int) -> TrainConfig:
    cfg = default_config(env, shield, seed)
    if path is None:
        return cfg.validate()
    with open(path, encoding="utf-8") as f:
        overrides = parse_config_text(f.read())
    # the command line decides env/shield/seed
    overrides = {k: v for k, v in overrides.items() if k not in {("train", "env"), ("train", "shield"), ("train", "seed")}}
    return apply_overrides(cfg, overrides)
