"""Attention Q-network over the seven-neighbour observation, and the policy built on it.

Each neighbour becomes a 3-feature token (normalised distance, bearing / pi,
nestmate bit). Tokens share one embedding (linear -> batch norm -> ReLU ->
dropout), pass through 4-head self-attention, are mean-pooled over the valid
tokens, and a linear head scores the four actions. Nothing depends on token
order, so the Q-values are invariant to how neighbours are listed.
"""
from __future__ import annotations

import base64
import enum
import json
from pathlib import Path

import numpy as np

from . import kernel as K
from .sim import N_NEIGHBORS, wrap_angle

HIDDEN = 128
HEADS = 4
HEAD_DIM = 32
TOKEN_FEATURES = 3
N_ACTIONS = 4
FORMAT_VERSION = "1"


class Action(enum.IntEnum):
    AVOID_NESTMATE = 0
    AVOID_NON_NESTMATE = 1
    STANDSTILL = 2
    RANDOM_WALK = 3


PARAM_SHAPES = {
    "embed.w": (TOKEN_FEATURES, HIDDEN),
    "embed.b": (HIDDEN,),
    "bn.gamma": (HIDDEN,),
    "bn.beta": (HIDDEN,),
    "attn.wq": (HEADS, HIDDEN, HEAD_DIM),
    "attn.wk": (HEADS, HIDDEN, HEAD_DIM),
    "attn.wv": (HEADS, HIDDEN, HEAD_DIM),
    "attn.wo": (HIDDEN, HIDDEN),
    "head.w": (HIDDEN, N_ACTIONS),
    "head.b": (N_ACTIONS,),
}
BUFFER_SHAPES = {"bn.running_mean": (HIDDEN,), "bn.running_var": (HIDDEN,)}
N_PARAMETERS = sum(int(np.prod(s)) for s in PARAM_SHAPES.values())


# ---- observation encoding -----------------------------------------------------------------------

def encode_observation(frame, config):
    """Tokens ``(..., 7, 3)`` float32 and a validity mask ``(..., 7)``.

    A frame with no valid neighbour gets one sentinel token ``(1, 0, 0)`` (an
    empty neighbourhood looks like a far non-nestmate straight ahead) so
    attention always has a key.
    """
    valid = np.asarray(frame.valid, bool)
    d = np.clip(np.asarray(frame.distance, float) / config.d_max, 0.0, 1.0)
    th = np.asarray(frame.aoa, float) / np.pi
    st = np.asarray(frame.swarm_type, float)
    tokens = np.stack([np.where(valid, d, 1.0), np.where(valid, th, 0.0), np.where(valid, st, 0.0)], axis=-1)
    tokens = tokens.astype(np.float32)
    mask = valid.copy()
    empty = ~mask.any(axis=-1)
    if np.any(empty):
        mask[..., 0] = mask[..., 0] | empty
        tokens[..., 0, :] = np.where(empty[..., None], np.float32([1.0, 0.0, 0.0]), tokens[..., 0, :])
    return tokens, mask


def decode_tokens(tokens, config):
    """Inverse of the distance/bearing normalisation (used by tests and plots)."""
    t = np.asarray(tokens, float)
    return t[..., 0] * config.d_max, t[..., 1] * np.pi


# ---- network ------------------------------------------------------------------------------------

class QNetwork:
    def __init__(self, params: dict, stats: K.RunningStats, dropout_rate: float = 0.2):
        missing = set(PARAM_SHAPES) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for name, shape in PARAM_SHAPES.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params = params
        self.stats = stats
        self.dropout_rate = dropout_rate

    @classmethod
    def init(cls, rng, dtype=np.float32, dropout_rate=0.2):
        def glorot(shape, fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=shape)

        raw = {
            "embed.w": rng.normal(0.0, np.sqrt(2.0 / TOKEN_FEATURES), size=PARAM_SHAPES["embed.w"]),
            "embed.b": np.zeros(HIDDEN),
            "bn.gamma": np.ones(HIDDEN),
            "bn.beta": np.zeros(HIDDEN),
            "attn.wq": glorot(PARAM_SHAPES["attn.wq"], HIDDEN, HEAD_DIM),
            "attn.wk": glorot(PARAM_SHAPES["attn.wk"], HIDDEN, HEAD_DIM),
            "attn.wv": glorot(PARAM_SHAPES["attn.wv"], HIDDEN, HEAD_DIM),
            "attn.wo": glorot(PARAM_SHAPES["attn.wo"], HIDDEN, HIDDEN),
            "head.w": glorot(PARAM_SHAPES["head.w"], HIDDEN, N_ACTIONS),
            "head.b": np.zeros(N_ACTIONS),
        }
        params = {k: K.Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in raw.items()}
        return cls(params, K.RunningStats.fresh(HIDDEN, dtype), dropout_rate)

    @classmethod
    def zeros(cls, dtype=np.float32):
        params = {k: K.Tensor(np.zeros(s, dtype), requires_grad=True, name=k) for k, s in PARAM_SHAPES.items()}
        return cls(params, K.RunningStats.fresh(HIDDEN, dtype))

    def arrays(self) -> dict:
        out = {k: p.data for k, p in self.params.items()}
        out["bn.running_mean"] = self.stats.mean
        out["bn.running_var"] = self.stats.var
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, dropout_rate=0.2):
        params = {k: K.Tensor(np.array(arrays[k]), requires_grad=True, name=k) for k in PARAM_SHAPES}
        stats = K.RunningStats(np.array(arrays["bn.running_mean"]), np.array(arrays["bn.running_var"]))
        return cls(params, stats, dropout_rate)

    def copy(self):
        return QNetwork.from_arrays({k: v.copy() for k, v in self.arrays().items()}, self.dropout_rate)

    def astype(self, dtype):
        return QNetwork.from_arrays({k: v.astype(dtype) for k, v in self.arrays().items()}, self.dropout_rate)

    def load_from(self, other: "QNetwork"):
        """Copy ``other``'s values into this network's arrays (bitwise)."""
        for k, p in self.params.items():
            p.data[...] = other.params[k].data
        self.stats.mean[...] = other.stats.mean
        self.stats.var[...] = other.stats.var

    def forward(self, tokens, mask, training=False, rng=None) -> K.Tensor:
        return q_forward(self, tokens, mask, training, rng)

    def q_values(self, tokens, mask) -> np.ndarray:
        """Eval-mode Q-values, computed in float64.

        The weights upcast exactly, so this is the same function; the wider
        accumulators keep the token-order dependence of the attention and
        pooling sums near 1e-15 instead of a few float32 ulps.
        """
        net = self if self.params["embed.w"].dtype == np.float64 else self.astype(np.float64)
        with K.no_grad():
            return q_forward(net, tokens, mask, training=False).data


def q_forward(net: QNetwork, tokens, mask, training=False, rng=None) -> K.Tensor:
    """Q-values ``(batch, 4)``; ``training`` switches batch norm and dropout to train mode."""
    p = net.params
    tokens = np.asarray(tokens, dtype=p["embed.w"].dtype)
    mask = np.asarray(mask, bool)
    if tokens.ndim == 2:
        tokens, mask = tokens[None], mask[None]
    B, T, F = tokens.shape
    if F != TOKEN_FEATURES or mask.shape != (B, T):
        raise K.DimensionError(f"expected tokens (B, T, 3) and mask (B, T); got {tokens.shape}, {mask.shape}")
    h = K.linear_forward(tokens.reshape(B * T, F), p["embed.w"], p["embed.b"])
    h = K.batchnorm_forward(h, p["bn.gamma"], p["bn.beta"], net.stats, training, rows=mask.reshape(-1))
    h = K.relu(h)
    h = K.dropout_forward(h, net.dropout_rate, training, rng)
    h = K.reshape(h, (B, T, HIDDEN))
    a = K.multihead_attention(h, mask, p["attn.wq"], p["attn.wk"], p["attn.wv"], p["attn.wo"])
    pooled = K.masked_mean(a, mask)
    return K.linear_forward(pooled, p["head.w"], p["head.b"])


# ---- acting -------------------------------------------------------------------------------------

def select_action(q, epsilon, rng) -> Action:
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    q = np.asarray(q)
    if rng.random() < epsilon:
        return Action(int(rng.integers(N_ACTIONS)))
    return Action(int(np.argmax(q)))


def select_actions(q, epsilon, rng) -> np.ndarray:
    """Batched epsilon-greedy; always draws two numbers per row so RNG use is fixed."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    q = np.asarray(q)
    explore = rng.random(len(q)) < epsilon
    random_a = rng.integers(N_ACTIONS, size=len(q))
    return np.where(explore, random_a, np.argmax(q, axis=1)).astype(np.int64)


def motion_batch(actions, frames, z_crw, config):
    """Speeds and heading changes for per-robot actions."""
    n = len(actions)
    rows = np.arange(n)
    crw = config.crw_sigma * z_crw
    delta = crw.copy()
    speed = np.full(n, config.speed)
    for action, want_same in ((Action.AVOID_NESTMATE, 1), (Action.AVOID_NON_NESTMATE, 0)):
        d = np.where(frames.valid & (frames.swarm_type == want_same), frames.distance, np.inf)
        j = np.argmin(d, axis=1)
        flee = (actions == action) & np.isfinite(d[rows, j])
        delta = np.where(flee, frames.aoa[rows, j] + np.pi, delta)
    still = actions == Action.STANDSTILL
    speed[still] = 0.0
    delta = np.where(still, 0.0, delta)
    return speed, wrap_angle(delta)


def act_to_motion(action, frame, hold, rng, config):
    """Motion command for one robot: ``(speed, heading_delta, latch_ticks)``.

    ``latch_ticks`` is how long the policy stays un-queried afterwards; only
    Standstill latches.
    """
    one = type(frame)(*(np.asarray(a)[None] for a in (frame.distance, frame.aoa, frame.swarm_type,
                                                      frame.valid, frame.ids, frame.true_distance)))
    speed, delta = motion_batch(np.array([int(action)]), one, np.array([rng.standard_normal()]), config)
    latch = int(hold) if Action(action) == Action.STANDSTILL else 0
    return float(speed[0]), float(delta[0]), latch


class RlController:
    """Decentralised execution of a shared Q-network on every robot.

    ``world.mode`` holds each robot's current action and ``world.timer`` the
    remaining Standstill latch.
    """

    name = "rl"

    def __init__(self, net: QNetwork, hold_ticks: int = 0, epsilon: float = 0.0, rng=None):
        self.net = net
        self.hold = int(hold_ticks)
        self.epsilon = epsilon
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.last_tokens = None
        self.last_mask = None
        self.last_actions = None
        self.queried = None

    def observe(self, world, frames):
        return encode_observation(frames, world.config)

    def decide(self, world, frames, z_crw):
        tokens, mask = self.observe(world, frames)
        need = world.timer <= 0
        actions = world.mode.astype(np.int64).copy()
        if need.any():
            q = self.net.q_values(tokens[need], mask[need])
            actions[need] = select_actions(q, self.epsilon, self.rng)
        timer = np.where(need, 0, world.timer - 1)
        timer = np.where(need & (actions == Action.STANDSTILL), self.hold, timer)
        speed, delta = motion_batch(actions, frames, z_crw, world.config)
        world.mode = actions
        world.timer = timer
        self.last_tokens, self.last_mask, self.last_actions, self.queried = tokens, mask, actions, need
        return speed, delta


# ---- checkpoints --------------------------------------------------------------------------------

class CheckpointError(Exception):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder not in ("|",) else a.dtype
    return {"shape": list(a.shape), "dtype": dt.str,
            "data": base64.b64encode(a.astype(dt, copy=False).tobytes()).decode("ascii")}


def decode_array(name: str, entry: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry["shape"])
        dt = np.dtype(entry.get("dtype", "<f4"))
        raw = base64.b64decode(entry["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"tensor {name}: bad encoding ({exc})") from exc
    count = int(np.prod(shape)) if shape else 1
    if len(raw) != count * dt.itemsize:
        raise ShapeMismatchError(f"tensor {name}: shape {shape} needs {count * dt.itemsize} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def save_checkpoint(net: QNetwork, training_meta: dict, path, extra_tensors: dict | None = None):
    """Write a JSON checkpoint with base64 little-endian float32 tensors."""
    tensors = {k: encode_array(np.asarray(v, dtype="<f4")) for k, v in net.arrays().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = encode_array(np.asarray(v))
    doc = {
        "format_version": FORMAT_VERSION,
        "hyperparameters": {"hidden": HIDDEN, "heads": HEADS, "head_dim": HEAD_DIM,
                            "token_features": TOKEN_FEATURES, "n_actions": N_ACTIONS,
                            "neighbors": N_NEIGHBORS, "dropout_rate": net.dropout_rate,
                            "n_parameters": N_PARAMETERS},
        "training_meta": training_meta,
        "tensors": tensors,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    """Parse and validate a checkpoint; returns ``{"net", "meta", "tensors"}``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or "tensors" not in doc:
        raise CorruptCheckpointError(f"{path}: missing tensors")
    if str(doc.get("format_version")) != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {doc.get('format_version')!r}, expected {FORMAT_VERSION!r}")
    tensors = {name: decode_array(name, entry) for name, entry in doc["tensors"].items()}
    for name, shape in {**PARAM_SHAPES, **BUFFER_SHAPES}.items():
        if name not in tensors:
            raise CorruptCheckpointError(f"{path}: missing tensor {name}")
        if tensors[name].shape != shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
    n = sum(tensors[k].size for k in PARAM_SHAPES)
    if n != N_PARAMETERS:
        raise ShapeMismatchError(f"{path}: {n} parameters, expected {N_PARAMETERS}")
    rate = float(doc.get("hyperparameters", {}).get("dropout_rate", 0.2))
    net = QNetwork.from_arrays({k: tensors[k].astype(np.float32) for k in {**PARAM_SHAPES, **BUFFER_SHAPES}}, rate)
    return {"net": net, "meta": doc.get("training_meta", {}), "tensors": tensors}


def load_checkpoint(path) -> QNetwork:
    return read_checkpoint(path)["net"]
