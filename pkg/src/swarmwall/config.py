"""Simulation and training configuration, plus the key=value config file reader."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    arena_width: float = 1000.0
    arena_height: float = 1000.0
    tick_duration: float = 0.1
    robot_radius: float = 5.0
    speed: float = 2.0
    d_max: float = 150.0
    r_enc: float = 120.0
    safe_dist: float = 150.0
    crw_sigma: float = 0.3
    noise_sigma_d: float = 2.0
    noise_sigma_theta: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lengths = ("arena_width", "arena_height", "robot_radius", "speed", "d_max", "r_enc", "safe_dist")
        for name in lengths:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not self.tick_duration > 0:
            raise ConfigError("tick_duration must be > 0")
        if self.r_enc > self.d_max:
            raise ConfigError("r_enc must not exceed d_max")
        if self.safe_dist < self.r_enc:
            raise ConfigError("safe_dist must be >= r_enc")
        if self.crw_sigma < 0 or self.noise_sigma_d < 0 or self.noise_sigma_theta < 0:
            raise ConfigError("noise parameters must be non-negative")

    def seconds_to_ticks(self, seconds: float) -> int:
        if seconds < 0:
            raise ConfigError("durations must be non-negative")
        return int(round(seconds / self.tick_duration))


@dataclass(frozen=True)
class TrainingConfig:
    buffer_capacity: int = 100_000
    target_sync_interval: int = 1000
    learning_rate: float = 1e-3
    batch_size: int = 64
    gamma: float = 0.99
    epsilon_start: float = 1.0
    epsilon_end: float = 0.01
    epsilon_decay_steps: int = 50_000
    total_steps: int = 500_000
    episode_length: int = 1000
    warmup_transitions: int = 1000
    checkpoint_interval: int = 10_000
    w_cov: float = 10.0
    w_mix: float = 10.0
    w_dead: float = 0.5
    w_prox: float = 0.1
    deadlock_window: int = 50
    deadlock_move_radii: float = 1.0
    proximity_radii: float = 4.0
    huber_delta: float = 1.0
    dropout_rate: float = 0.2
    clip: str = "off"

    def __post_init__(self):
        positive = ("buffer_capacity", "target_sync_interval", "learning_rate", "batch_size",
                    "epsilon_decay_steps", "total_steps", "episode_length", "checkpoint_interval",
                    "deadlock_window", "huber_delta")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must be in [0, 1]")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise ConfigError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.batch_size > self.buffer_capacity:
            raise ConfigError("batch_size must not exceed buffer_capacity")
        if self.warmup_transitions < 0:
            raise ConfigError("warmup_transitions must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.clip != "off":
            raise ConfigError("gradient clipping is not supported (clip = off)")


def _coerce(text: str):
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text.strip()


def read_config_file(path) -> dict:
    """Read a ``key = value`` file (``#`` comments allowed) or a JSON object."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return data
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(value)
    return out


def split_overrides(values: dict, *classes) -> list[dict]:
    """Route config keys to the dataclass that owns them; unknown keys are an error."""
    buckets = [dict() for _ in classes]
    for key, value in values.items():
        for bucket, cls in zip(buckets, classes):
            if key in {f.name for f in dataclasses.fields(cls)}:
                bucket[key] = value
                break
        else:
            raise ConfigError(f"unknown config key: {key}")
    return buckets


def with_overrides(obj, overrides: dict):
    names = {f.name: f for f in dataclasses.fields(obj)}
    clean = {}
    for key, value in overrides.items():
        if key not in names:
            raise ConfigError(f"unknown config key for {type(obj).__name__}: {key}")
        default = getattr(obj, key)
        if isinstance(default, bool):
            clean[key] = bool(value)
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, int):
                clean[key] = value
            elif float(value) == int(float(value)):
                clean[key] = int(float(value))
            else:
                raise ConfigError(f"{key} must be an integer")
        elif isinstance(default, float):
            clean[key] = float(value)
        else:
            clean[key] = value
    return dataclasses.replace(obj, **clean)


def as_dict(obj) -> dict:
    return dataclasses.asdict(obj)
