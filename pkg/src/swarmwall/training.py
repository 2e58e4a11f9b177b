"""DQN training with one policy shared by every robot of both swarms.

Training is centralised: the reward uses the global coverage and mixing
metrics. Execution is decentralised: each robot only feeds its own
seven-neighbour observation to the network. "Step" always means one
environment tick; every tick adds one transition per robot to the replay
buffer and, after warm-up, performs one gradient update.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import kernel as K
from .config import SimConfig, TrainingConfig, as_dict
from .qnet import (Action, CheckpointError, QNetwork, RlController, decode_array, encode_array,
                   encode_observation, read_checkpoint, save_checkpoint)
from .scenarios import ScenarioSpec
from .sim import N_NEIGHBORS, World, init_world, sense_batch, tick

log = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "epsilon", "loss", "episode_return_mean", "coverage_a", "coverage_b", "mixing"]


def epsilon_at(step, config: TrainingConfig = TrainingConfig()) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    frac = min(step / config.epsilon_decay_steps, 1.0)
    return config.epsilon_start + (config.epsilon_end - config.epsilon_start) * frac


# ---- replay -------------------------------------------------------------------------------------

@dataclass
class Transition:
    tokens: np.ndarray
    mask: np.ndarray
    action: int
    reward: float
    next_tokens: np.ndarray
    next_mask: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored column-wise."""

    FIELDS = ("tokens", "mask", "action", "reward", "next_tokens", "next_mask", "done")

    def __init__(self, capacity: int, n_tokens: int = N_NEIGHBORS, n_features: int = 3):
        self.capacity = int(capacity)
        self.tokens = np.zeros((capacity, n_tokens, n_features), np.float32)
        self.mask = np.zeros((capacity, n_tokens), bool)
        self.action = np.zeros(capacity, np.int64)
        self.reward = np.zeros(capacity, np.float32)
        self.next_tokens = np.zeros((capacity, n_tokens, n_features), np.float32)
        self.next_mask = np.zeros((capacity, n_tokens), bool)
        self.done = np.zeros(capacity, bool)
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition):
        if not np.isfinite(t.reward):
            raise ValueError("transition reward must be finite")
        self.push_many(np.asarray(t.tokens)[None], np.asarray(t.mask)[None], [t.action], [t.reward],
                       np.asarray(t.next_tokens)[None], np.asarray(t.next_mask)[None], [t.done])

    def push_many(self, tokens, mask, action, reward, next_tokens, next_mask, done):
        n = len(action)
        idx = (self.cursor + np.arange(n)) % self.capacity
        if n > self.capacity:
            idx, sl = idx[-self.capacity:], slice(n - self.capacity, n)
        else:
            sl = slice(0, n)
        self.tokens[idx] = np.asarray(tokens)[sl]
        self.mask[idx] = np.asarray(mask)[sl]
        self.action[idx] = np.asarray(action)[sl]
        self.reward[idx] = np.asarray(reward)[sl]
        self.next_tokens[idx] = np.asarray(next_tokens)[sl]
        self.next_mask[idx] = np.asarray(next_mask)[sl]
        self.done[idx] = np.broadcast_to(np.asarray(done, bool), (n,))[sl]
        self.cursor = int((self.cursor + n) % self.capacity)
        self.size = min(self.capacity, self.size + n)

    def order(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.cursor + np.arange(self.capacity)) % self.capacity

    def sample_indices(self, batch_size, rng) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(self.size, size=batch_size)

    def sample(self, batch_size, rng) -> dict:
        i = self.sample_indices(batch_size, rng)
        return {f: getattr(self, f)[i] for f in self.FIELDS}

    def arrays(self) -> dict:
        return {f"replay.{f}": getattr(self, f)[: self.size] for f in self.FIELDS}

    def restore(self, arrays: dict, size: int, cursor: int):
        for f in self.FIELDS:
            getattr(self, f)[:size] = arrays[f"replay.{f}"]
        self.size, self.cursor = int(size), int(cursor)


def replay_push(buffer: ReplayBuffer, t: Transition) -> ReplayBuffer:
    buffer.push(t)
    return buffer


# ---- reward -------------------------------------------------------------------------------------

def compute_rewards(before, after, swarm, deadlocked, crowded, config: TrainingConfig) -> np.ndarray:
    """Per-robot reward from consecutive :class:`TickMetrics` and per-robot flags.

    Coverage and mixing are percentages, so their tick-to-tick deltas are
    divided by 100 before weighting.
    """
    swarm = np.asarray(swarm)
    d_cov = np.where(swarm == 0, after.coverage_a - before.coverage_a, after.coverage_b - before.coverage_b)
    d_mix = after.mixing - before.mixing
    return (config.w_cov * d_cov / 100.0
            - config.w_mix * d_mix / 100.0
            - config.w_dead * np.asarray(deadlocked, float)
            - config.w_prox * np.asarray(crowded, float))


def compute_reward(world_t: World, world_t1: World, robot_id: int, config: TrainingConfig,
                   deadlocked: bool = False) -> float:
    """Reward of one robot between two world snapshots.

    Deadlock needs the trailing position history, which snapshots do not
    carry, so the caller passes it in.
    """
    crowded = crowding(world_t1, config)[robot_id]
    r = compute_rewards(world_t.metrics(), world_t1.metrics(), world_t1.swarm[[robot_id]],
                        [deadlocked], [crowded], config)
    return float(r[0])


def crowding(world: World, config: TrainingConfig) -> np.ndarray:
    if world.n < 2:
        return np.zeros(world.n, bool)
    d, _ = cKDTree(world.positions).query(world.positions, k=2)
    return d[:, 1] < config.proximity_radii * world.config.robot_radius


def deadlock_flags(history: deque, actions, config: TrainingConfig, sim_config: SimConfig) -> np.ndarray:
    """Robots commanded to move whose displacement over the trailing window stayed tiny."""
    moving = np.asarray(actions) != Action.STANDSTILL
    if len(history) <= config.deadlock_window:
        return np.zeros(len(moving), bool)
    disp = np.hypot(*(history[-1] - history[0]).T)
    return moving & (disp < config.deadlock_move_radii * sim_config.robot_radius)


# ---- learning -----------------------------------------------------------------------------------

def td_targets(target: QNetwork, batch: dict, gamma: float) -> np.ndarray:
    q_next = target.q_values(batch["next_tokens"], batch["next_mask"]).max(axis=1)
    y = batch["reward"] + gamma * q_next * (1.0 - batch["done"].astype(np.float32))
    return y.astype(np.float32)


def td_loss(online: QNetwork, batch: dict, y, training=True, rng=None, delta=1.0) -> K.Tensor:
    q = online.forward(batch["tokens"], batch["mask"], training=training, rng=rng)
    return K.huber_loss(K.take_along_last(q, batch["action"]), y, delta)


def td_update(online: QNetwork, target: QNetwork, batch: dict, adam: K.AdamState, gamma: float,
              rng=None, delta: float = 1.0) -> float:
    """One Huber-loss TD step on ``online``; ``target`` is only read."""
    y = td_targets(target, batch, gamma)
    loss = td_loss(online, batch, y, training=True, rng=rng, delta=delta)
    if not np.isfinite(loss.data):
        raise K.NumericError("non-finite TD loss")
    grads = K.gradients(loss, online.params)
    K.adam_step(online.params, grads, adam)
    return float(loss.data)


def sync_target(online: QNetwork, target: QNetwork | None = None) -> QNetwork:
    if target is None:
        return online.copy()
    target.load_from(online)
    return target


# ---- trainer ------------------------------------------------------------------------------------

def _rng_state(rng):
    return rng.bit_generator.state


def _set_rng_state(rng, state):
    rng.bit_generator.state = state


class Trainer:
    """Stepwise DQN trainer; :meth:`step` advances one environment tick."""

    def __init__(self, scenario: ScenarioSpec, sim_config: SimConfig, config: TrainingConfig, seed: int,
                 hold_ticks: int = 0):
        self.scenario = scenario
        self.sim_config = sim_config
        self.config = config
        self.seed = int(seed)
        self.hold_ticks = int(hold_ticks)
        ss = np.random.SeedSequence(self.seed)
        init_ss, policy_ss, learn_ss = ss.spawn(3)
        self.online = QNetwork.init(np.random.default_rng(init_ss), dropout_rate=config.dropout_rate)
        self.target = self.online.copy()
        self.adam = K.AdamState(learning_rate=config.learning_rate)
        self.buffer = ReplayBuffer(config.buffer_capacity)
        self.policy = RlController(self.online, self.hold_ticks, epsilon=config.epsilon_start,
                                   rng=np.random.default_rng(policy_ss))
        self.learn_rng = np.random.default_rng(learn_ss)
        self.step_count = 0
        self.world = None
        self.history = deque(maxlen=config.deadlock_window + 1)
        self.returns = None
        self.pending = None
        self.last_loss = float("nan")
        self.sync_count = 0

    def episode_seed(self, episode: int) -> int:
        return int(np.random.SeedSequence([self.seed, 1, episode]).generate_state(1, np.uint64)[0])

    def _new_episode(self):
        ep = self.step_count // self.config.episode_length
        self.world = init_world(self.scenario, self.sim_config, seed=self.episode_seed(ep))
        self.history.clear()
        self.history.append(self.world.positions.copy())
        self.returns = np.zeros(self.world.n)
        self.pending = None

    def step(self) -> dict:
        cfg = self.config
        if self.world is None or self.step_count % cfg.episode_length == 0:
            self._new_episode()
        world = self.world
        eps = epsilon_at(self.step_count, cfg)
        self.policy.epsilon = eps
        before = world.metrics()
        _, after = tick(world, self.policy)
        tokens, mask = self.policy.last_tokens, self.policy.last_mask
        actions = self.policy.last_actions

        if self.pending is not None:
            p = self.pending
            self.buffer.push_many(p["tokens"], p["mask"], p["action"], p["reward"], tokens, mask, False)

        self.history.append(world.positions.copy())
        dead = deadlock_flags(self.history, actions, cfg, self.sim_config)
        reward = compute_rewards(before, after, world.swarm, dead, crowding(world, cfg), cfg)
        self.returns += reward
        done = (self.step_count + 1) % cfg.episode_length == 0
        if done:
            # Bootstrapping is masked for terminal transitions; the final
            # observation is stored for completeness only.
            next_tokens, next_mask = encode_observation(sense_batch(world), world.config)
            self.buffer.push_many(tokens, mask, actions, reward, next_tokens, next_mask, True)
            self.pending = None
        else:
            self.pending = {"tokens": tokens, "mask": mask, "action": actions, "reward": reward}

        if len(self.buffer) >= max(cfg.warmup_transitions, 1):
            batch = self.buffer.sample(cfg.batch_size, self.learn_rng)
            self.last_loss = td_update(self.online, self.target, batch, self.adam, cfg.gamma,
                                       rng=self.learn_rng, delta=cfg.huber_delta)
        row = {"step": self.step_count, "epsilon": eps, "loss": self.last_loss,
               "episode_return_mean": float(self.returns.mean()), "coverage_a": after.coverage_a,
               "coverage_b": after.coverage_b, "mixing": after.mixing}
        self.step_count += 1
        if self.step_count % cfg.target_sync_interval == 0:
            sync_target(self.online, self.target)
            self.sync_count += 1
        return row

    # -- persistence --

    def save(self, path):
        w = self.world
        extra = {f"target.{k}": v for k, v in self.target.arrays().items()}
        for k in self.adam.m:
            extra[f"adam.m.{k}"] = self.adam.m[k]
            extra[f"adam.v.{k}"] = self.adam.v[k]
        extra.update(self.buffer.arrays())
        meta = {
            "step": self.step_count,
            "seed": self.seed,
            "hold_ticks": self.hold_ticks,
            "sync_count": self.sync_count,
            "last_loss": None if np.isnan(self.last_loss) else self.last_loss,
            "adam_t": self.adam.t,
            "replay_size": self.buffer.size,
            "replay_cursor": self.buffer.cursor,
            "policy_rng": _rng_state(self.policy.rng),
            "learn_rng": _rng_state(self.learn_rng),
            "scenario": as_dict(self.scenario),
            "sim_config": as_dict(self.sim_config),
            "training_config": as_dict(self.config),
            "has_world": w is not None,
            "has_pending": self.pending is not None,
        }
        if w is not None:
            meta["world_rng"] = _rng_state(w.rng)
            meta["world_step"] = w.step
            extra.update({"world.positions": w.positions, "world.headings": w.headings,
                          "world.swarm": w.swarm, "world.speeds": w.speeds, "world.mode": w.mode,
                          "world.timer": w.timer, "world.returns": self.returns,
                          "world.history": np.stack(list(self.history))})
        if self.pending is not None:
            extra.update({f"pending.{k}": v for k, v in self.pending.items()})
        save_checkpoint(self.online, meta, path, extra)

    @classmethod
    def load(cls, path) -> "Trainer":
        ck = read_checkpoint(path)
        meta, t = ck["meta"], ck["tensors"]
        try:
            scenario = ScenarioSpec(**meta["scenario"])
            sim_config = SimConfig(**meta["sim_config"])
            config = TrainingConfig(**meta["training_config"])
            tr = cls(scenario, sim_config, config, meta["seed"], meta["hold_ticks"])
        except KeyError as exc:
            raise CheckpointError(f"{path}: not a training checkpoint (missing {exc})") from exc
        tr.online.load_from(ck["net"])
        tr.target.load_from(QNetwork.from_arrays({k[len("target."):]: v for k, v in t.items()
                                                  if k.startswith("target.")}))
        tr.adam.t = int(meta["adam_t"])
        for k in tr.online.params:
            if f"adam.m.{k}" in t:
                tr.adam.m[k] = t[f"adam.m.{k}"].copy()
                tr.adam.v[k] = t[f"adam.v.{k}"].copy()
        tr.buffer.restore(t, meta["replay_size"], meta["replay_cursor"])
        _set_rng_state(tr.policy.rng, meta["policy_rng"])
        _set_rng_state(tr.learn_rng, meta["learn_rng"])
        tr.step_count = int(meta["step"])
        tr.sync_count = int(meta.get("sync_count", 0))
        tr.last_loss = float("nan") if meta.get("last_loss") is None else float(meta["last_loss"])
        if meta.get("has_world"):
            rng = np.random.default_rng()
            _set_rng_state(rng, meta["world_rng"])
            tr.world = World(sim_config, scenario, t["world.positions"], t["world.headings"], t["world.swarm"],
                             rng, t["world.speeds"], t["world.mode"], t["world.timer"], int(meta["world_step"]))
            tr.returns = t["world.returns"]
            tr.history.clear()
            for h in t["world.history"]:
                tr.history.append(h.copy())
        if meta.get("has_pending"):
            tr.pending = {k: t[f"pending.{k}"] for k in ("tokens", "mask", "action", "reward")}
        return tr


def _fmt(x):
    return "" if isinstance(x, float) and np.isnan(x) else repr(x)


def train(scenario: ScenarioSpec, sim_config: SimConfig, config: TrainingConfig, seed: int,
          checkpoint_dir, resume=None, hold_ticks: int = 0, callback=None, log_name="train_log.csv"):
    """Run (or resume) training to ``config.total_steps``.

    Writes ``ckpt_<step>.json`` every ``checkpoint_interval`` steps plus
    ``final.json``, and a CSV log with one row per step. Returns the final
    checkpoint path and the log rows produced by this call.
    """
    out = Path(checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer.load(resume) if resume is not None else Trainer(scenario, sim_config, config, seed, hold_ticks)
    if resume is not None:
        # Only the schedule length may change on resume.
        trainer.config = TrainingConfig(**{**as_dict(trainer.config), "total_steps": config.total_steps})
    log_path = out / log_name
    rows = []
    mode = "a" if resume is not None and log_path.exists() else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOG_COLUMNS)
        while trainer.step_count < trainer.config.total_steps:
            row = trainer.step()
            rows.append(row)
            writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            if callback is not None:
                callback(trainer, row)
            if trainer.step_count % trainer.config.checkpoint_interval == 0:
                trainer.save(out / f"ckpt_{trainer.step_count:07d}.json")
                fh.flush()
                log.info("step %d eps %.3f loss %.4f mix %.2f", row["step"], row["epsilon"],
                         row["loss"], row["mixing"])
    final = out / "final.json"
    trainer.save(final)
    (out / "training_meta.json").write_text(json.dumps({"seed": seed, "steps": trainer.step_count}))
    return final, rows


# ---- evaluation ---------------------------------------------------------------------------------

def evaluate(net: QNetwork, scenario: ScenarioSpec, sim_config: SimConfig, seeds, steps: int = 1000,
             hold_ticks: int = 0) -> np.ndarray:
    """Greedy (epsilon = 0, eval-mode) rollouts; returns the mixing ratio at the last step per seed."""
    out = []
    for s in seeds:
        world = init_world(scenario, sim_config, seed=int(s))
        ctrl = RlController(net, hold_ticks, epsilon=0.0, rng=np.random.default_rng(int(s)))
        m = None
        for _ in range(steps):
            _, m = tick(world, ctrl)
        out.append(m.mixing)
    return np.array(out)


__all__ = ["epsilon_at", "Transition", "ReplayBuffer", "replay_push", "compute_rewards", "compute_reward",
           "td_update", "sync_target", "Trainer", "train", "evaluate", "LOG_COLUMNS", "decode_array",
           "encode_array"]
