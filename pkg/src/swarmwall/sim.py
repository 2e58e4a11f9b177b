"""Deterministic discrete-time world for two interacting swarms.

Robots use unicycle kinematics (heading plus forward speed). Each tick every
robot senses its seven nearest neighbours from the tick-start snapshot, its
controller issues a motion command, motion is applied, and a safety layer that
the controllers cannot see pushes overlapping robots apart.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .config import SimConfig
from .fsm import FsmState, Symbol
from .metrics import TickMetrics, tick_metrics
from .scenarios import ScenarioSpec, place

N_NEIGHBORS = 7
SWARM_A, SWARM_B = 0, 1
SAFETY_ITERATIONS = 8


def wrap_angle(a):
    """Map angles to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class RobotState:
    id: int
    swarm: int
    position: tuple
    heading: float
    commanded_speed: float = 0.0
    controller_state: object = None


@dataclass
class ObservationFrame:
    """Seven neighbour slots sorted by true distance; padding comes last.

    ``swarm_type`` is 1 for a nestmate and 0 for a non-nestmate. ``ids`` and
    ``true_distance`` are bookkeeping for tests and the simulator; controllers
    only read the noisy fields.
    """

    distance: np.ndarray
    aoa: np.ndarray
    swarm_type: np.ndarray
    valid: np.ndarray
    ids: np.ndarray
    true_distance: np.ndarray

    def __getitem__(self, i):
        return ObservationFrame(self.distance[i], self.aoa[i], self.swarm_type[i], self.valid[i],
                                self.ids[i], self.true_distance[i])

    def __len__(self):
        return len(self.distance)


@dataclass
class World:
    config: SimConfig
    scenario: ScenarioSpec
    positions: np.ndarray
    headings: np.ndarray
    swarm: np.ndarray
    rng: np.random.Generator
    speeds: np.ndarray = None
    mode: np.ndarray = None
    timer: np.ndarray = None
    step: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.positions)
        if self.speeds is None:
            self.speeds = np.zeros(n)
        if self.mode is None:
            self.mode = np.full(n, int(FsmState.MOVING), dtype=np.int64)
        if self.timer is None:
            self.timer = np.zeros(n, dtype=np.int64)
        self.idx_a = np.flatnonzero(self.swarm == SWARM_A)
        self.idx_b = np.flatnonzero(self.swarm == SWARM_B)

    @property
    def n(self):
        return len(self.positions)

    def robot(self, i) -> RobotState:
        if not 0 <= i < self.n:
            raise KeyError(f"unknown robot id {i}")
        return RobotState(id=int(i), swarm=int(self.swarm[i]), position=tuple(self.positions[i]),
                          heading=float(self.headings[i]), commanded_speed=float(self.speeds[i]),
                          controller_state=(int(self.mode[i]), int(self.timer[i])))

    def metrics(self) -> TickMetrics:
        c = self.config
        return tick_metrics(self.step, self.positions[self.idx_a], self.positions[self.idx_b],
                            c.arena_width, c.arena_height)

    def copy(self):
        w = World(self.config, self.scenario, self.positions.copy(), self.headings.copy(),
                  self.swarm.copy(), np.random.Generator(type(self.rng.bit_generator)()),
                  self.speeds.copy(), self.mode.copy(), self.timer.copy(), self.step,
                  {k: (v.copy() if hasattr(v, "copy") else v) for k, v in self.extra.items()})
        w.rng.bit_generator.state = self.rng.bit_generator.state
        return w


def init_world(scenario: ScenarioSpec, config: SimConfig, seed=None) -> World:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    pos_a, pos_b = place(scenario, config, rng)
    positions = np.vstack([pos_a, pos_b]).astype(float)
    swarm = np.concatenate([np.full(len(pos_a), SWARM_A), np.full(len(pos_b), SWARM_B)]).astype(np.int8)
    headings = rng.uniform(-np.pi, np.pi, size=len(positions))
    return World(config, scenario, positions, headings, swarm, rng)


# ---- sensing ------------------------------------------------------------------------------------

def sense_batch(world: World, z_d=None, z_theta=None) -> ObservationFrame:
    """Observation frames for every robot at once, shape ``(n, 7)`` per field.

    Uses a k-d tree for the neighbour query. Noise is drawn from the world RNG
    unless pre-drawn standard normals are supplied.
    """
    c = world.config
    pos = world.positions
    n = len(pos)
    if z_d is None:
        z_d = world.rng.standard_normal((n, N_NEIGHBORS))
    if z_theta is None:
        z_theta = world.rng.standard_normal((n, N_NEIGHBORS))

    k = min(N_NEIGHBORS + 1, n)
    tree = cKDTree(pos)
    d, idx = tree.query(pos, k=k, distance_upper_bound=np.nextafter(c.d_max, np.inf))
    d = np.asarray(d, dtype=float).reshape(n, k)
    idx = np.asarray(idx).reshape(n, k)
    me = np.arange(n)[:, None]
    drop = (idx == me) | (idx >= n)
    # Re-measure candidates so ordering uses exactly the distances we report.
    rel = pos[np.where(drop, 0, idx)] - pos[:, None, :]
    d = np.hypot(rel[..., 0], rel[..., 1])
    drop |= d > c.d_max
    d = np.where(drop, np.inf, d)
    idx = np.where(drop, n, idx)
    # Sort by (distance, id) so ties go to the lower id.
    o = np.argsort(idx, axis=1, kind="stable")
    d = np.take_along_axis(d, o, 1)
    idx = np.take_along_axis(idx, o, 1)
    o = np.argsort(d, axis=1, kind="stable")
    d = np.take_along_axis(d, o, 1)[:, :N_NEIGHBORS]
    idx = np.take_along_axis(idx, o, 1)[:, :N_NEIGHBORS]
    if idx.shape[1] < N_NEIGHBORS:
        pad = N_NEIGHBORS - idx.shape[1]
        d = np.hstack([d, np.full((n, pad), np.inf)])
        idx = np.hstack([idx, np.full((n, pad), n)])
    ids = np.where(np.isfinite(d), idx, -1)
    return _noisy_frame(world, np.arange(n), ids, z_d, z_theta)


def _noisy_frame(world, me, ids, z_d, z_theta):
    c = world.config
    valid = ids >= 0
    j = np.where(valid, ids, 0)
    delta = world.positions[j] - world.positions[me][..., None, :]
    true_d = np.hypot(delta[..., 0], delta[..., 1])
    bearing = np.arctan2(delta[..., 1], delta[..., 0]) - world.headings[me][..., None]
    dist = np.maximum(true_d + c.noise_sigma_d * z_d, 0.0)
    aoa = wrap_angle(bearing + c.noise_sigma_theta * z_theta)
    same = (world.swarm[j] == world.swarm[me][..., None]).astype(np.int8)
    return ObservationFrame(
        distance=np.where(valid, dist, c.d_max),
        aoa=np.where(valid, aoa, 0.0),
        swarm_type=np.where(valid, same, 0).astype(np.int8),
        valid=valid,
        ids=ids,
        true_distance=np.where(valid, true_d, np.inf),
    )


def sense(world: World, robot_id: int, rng=None) -> ObservationFrame:
    """Frame for one robot by exhaustive search (reference for :func:`sense_batch`)."""
    if not 0 <= robot_id < world.n:
        raise KeyError(f"unknown robot id {robot_id}")
    rng = world.rng if rng is None else rng
    c = world.config
    d = np.hypot(*(world.positions - world.positions[robot_id]).T)
    others = [(float(d[j]), j) for j in range(world.n) if j != robot_id and d[j] <= c.d_max]
    others.sort()
    ids = np.full(N_NEIGHBORS, -1)
    for slot, (_, j) in enumerate(others[:N_NEIGHBORS]):
        ids[slot] = j
    z_d = rng.standard_normal(N_NEIGHBORS)
    z_theta = rng.standard_normal(N_NEIGHBORS)
    return _noisy_frame(world, np.int64(robot_id), ids, z_d, z_theta)


# ---- events -------------------------------------------------------------------------------------

def detect_events_batch(world: World, frames: ObservationFrame) -> np.ndarray:
    """Input-symbol bit masks (see :class:`Symbol`) for every robot."""
    c = world.config
    valid = frames.valid
    nest = valid & (frames.swarm_type == 1)
    other = valid & (frames.swarm_type == 0)
    nearest_nest = np.where(nest, frames.distance, np.inf).min(axis=1)
    nearest_other = np.where(other, frames.distance, np.inf).min(axis=1)
    neighbor_mode = world.mode[np.where(valid, frames.ids, 0)]
    moving_nest = (nest & (neighbor_mode == FsmState.MOVING) & (frames.distance < c.r_enc)).any(axis=1)

    sym = np.zeros(world.n, dtype=np.int64)
    sym |= np.where(nearest_nest < c.r_enc, int(Symbol.NESTMATE_ENCOUNTER), 0)
    sym |= np.where(nearest_other < c.r_enc, int(Symbol.NON_NESTMATE_ENCOUNTER), 0)
    sym |= np.where(moving_nest, int(Symbol.MOVING_NESTMATE_ENCOUNTER), 0)
    sym |= np.where(nearest_other < c.safe_dist, int(Symbol.BELOW_SAFE_DIST), int(Symbol.ABOVE_SAFE_DIST))
    expired = (world.mode == FsmState.WALLING) & (world.timer <= 0)
    sym |= np.where(expired, int(Symbol.WALLING_TIMER_EXPIRED), 0)
    return sym


def detect_events(world: World, robot_id: int, frame: ObservationFrame) -> Symbol:
    """Symbols for one robot given its own frame."""
    c = world.config
    valid = frame.valid
    nest = valid & (frame.swarm_type == 1)
    other = valid & (frame.swarm_type == 0)
    nearest_nest = np.where(nest, frame.distance, np.inf).min()
    nearest_other = np.where(other, frame.distance, np.inf).min()
    modes = world.mode[np.where(valid, frame.ids, 0)]
    sym = Symbol.NONE
    if nearest_nest < c.r_enc:
        sym |= Symbol.NESTMATE_ENCOUNTER
    if nearest_other < c.r_enc:
        sym |= Symbol.NON_NESTMATE_ENCOUNTER
    if (nest & (modes == FsmState.MOVING) & (frame.distance < c.r_enc)).any():
        sym |= Symbol.MOVING_NESTMATE_ENCOUNTER
    sym |= Symbol.BELOW_SAFE_DIST if nearest_other < c.safe_dist else Symbol.ABOVE_SAFE_DIST
    if world.mode[robot_id] == FsmState.WALLING and world.timer[robot_id] <= 0:
        sym |= Symbol.WALLING_TIMER_EXPIRED
    return sym


# ---- motion -------------------------------------------------------------------------------------

def _advance(positions, headings, speeds, z_bound, config):
    """Move along heading; robots that would leave the arena are clamped and turned inward."""
    r = config.robot_radius
    lo = np.array([r, r])
    hi = np.array([config.arena_width - r, config.arena_height - r])
    step = speeds[:, None] * np.column_stack([np.cos(headings), np.sin(headings)])
    new = positions + step
    out = np.any((new < lo) | (new > hi), axis=1)
    new = np.clip(new, lo, hi)
    if out.any():
        centre = np.array([config.arena_width / 2, config.arena_height / 2])
        to_c = centre - new[out]
        headings = headings.copy()
        headings[out] = wrap_angle(np.arctan2(to_c[:, 1], to_c[:, 0]) + config.crw_sigma * z_bound[out])
    return new, headings


def crw_step(robot: RobotState, rng, config: SimConfig) -> RobotState:
    """One correlated-random-walk step for a single robot at full speed."""
    heading = float(wrap_angle(robot.heading + config.crw_sigma * rng.standard_normal()))
    z_bound = np.array([rng.standard_normal()])
    pos, hd = _advance(np.array([robot.position], dtype=float), np.array([heading]),
                       np.array([config.speed]), z_bound, config)
    return RobotState(robot.id, robot.swarm, tuple(pos[0]), float(hd[0]), config.speed,
                      robot.controller_state)


def apply_motion(world: World, speeds, deltas, z_bound):
    headings = wrap_angle(world.headings + deltas)
    world.positions, world.headings = _advance(world.positions, headings, np.asarray(speeds, float),
                                               z_bound, world.config)
    world.speeds = np.asarray(speeds, float)


def safety_resolve(world: World, iterations: int = SAFETY_ITERATIONS) -> World:
    """Push overlapping pairs apart along their line of centres, then re-clamp."""
    c = world.config
    r = c.robot_radius
    gap = 2 * r
    lo = np.array([r, r])
    hi = np.array([c.arena_width - r, c.arena_height - r])
    pos = world.positions
    for _ in range(iterations):
        pairs = cKDTree(pos).query_pairs(gap, output_type="ndarray")
        if len(pairs) == 0:
            break
        i, j = pairs[:, 0], pairs[:, 1]
        diff = pos[j] - pos[i]
        d = np.hypot(diff[:, 0], diff[:, 1])
        keep = d < gap
        if not keep.any():
            break
        i, j, diff, d = i[keep], j[keep], diff[keep], d[keep]
        coincident = d == 0
        u = np.where(coincident[:, None], np.array([1.0, 0.0]), diff / np.where(coincident, 1.0, d)[:, None])
        push = 0.5 * (gap - d + 1e-9)[:, None] * u
        shift = np.zeros_like(pos)
        np.add.at(shift, i, -push)
        np.add.at(shift, j, push)
        pos = np.clip(pos + shift, lo, hi)
    world.positions = pos
    return world


def tick(world: World, controller):
    """Advance one tick in place. Returns ``(world, TickMetrics)``."""
    n = world.n
    z_d = world.rng.standard_normal((n, N_NEIGHBORS))
    z_theta = world.rng.standard_normal((n, N_NEIGHBORS))
    z_crw = world.rng.standard_normal(n)
    z_bound = world.rng.standard_normal(n)
    frames = sense_batch(world, z_d, z_theta)
    speeds, deltas = controller.decide(world, frames, z_crw)
    apply_motion(world, speeds, deltas, z_bound)
    safety_resolve(world)
    world.step += 1
    return world, world.metrics()


def run(world: World, controller, steps: int, on_tick=None) -> list[TickMetrics]:
    out = []
    for _ in range(steps):
        _, m = tick(world, controller)
        out.append(m)
        if on_tick is not None:
            on_tick(world, m)
    return out
