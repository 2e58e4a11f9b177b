"""Hand-designed walling controller.

States are Moving, Walling and AvoidNonNestmate; robots start in Moving. The
input alphabet is encoded as bit flags so one robot's symbols fit in a byte and
a whole swarm can be transitioned with array operations.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np


class FsmState(enum.IntEnum):
    MOVING = 0
    WALLING = 1
    AVOID_NON_NESTMATE = 2


class Symbol(enum.IntFlag):
    NONE = 0
    NESTMATE_ENCOUNTER = 1
    NON_NESTMATE_ENCOUNTER = 2
    WALLING_TIMER_EXPIRED = 4
    ABOVE_SAFE_DIST = 8
    BELOW_SAFE_DIST = 16
    MOVING_NESTMATE_ENCOUNTER = 32


ALL_SYMBOLS = [s for s in Symbol if s is not Symbol.NONE]


@dataclass(frozen=True)
class ControllerFsmState:
    state: FsmState = FsmState.MOVING
    walling_timer_remaining: int = 0
    walling_timer_duration: int = 0
    # Set for one tick when a Moving robot has to sidestep a nestmate.
    avoid_nestmate: bool = False

    def __post_init__(self):
        if self.walling_timer_duration < 0 or self.walling_timer_remaining < 0:
            raise ValueError("walling timer values must be non-negative")
        if self.walling_timer_remaining > self.walling_timer_duration:
            raise ValueError("walling_timer_remaining exceeds walling_timer_duration")


def fsm_transition(cs: ControllerFsmState, symbols) -> ControllerFsmState:
    s = Symbol(int(symbols))
    if cs.state == FsmState.MOVING:
        if s & Symbol.NON_NESTMATE_ENCOUNTER:
            return replace(cs, state=FsmState.WALLING,
                           walling_timer_remaining=cs.walling_timer_duration, avoid_nestmate=False)
        return replace(cs, avoid_nestmate=bool(s & Symbol.NESTMATE_ENCOUNTER))
    if cs.state == FsmState.WALLING:
        if s & Symbol.MOVING_NESTMATE_ENCOUNTER:
            return replace(cs, walling_timer_remaining=cs.walling_timer_duration, avoid_nestmate=False)
        if s & Symbol.WALLING_TIMER_EXPIRED:
            return replace(cs, state=FsmState.AVOID_NON_NESTMATE, walling_timer_remaining=0,
                           avoid_nestmate=False)
        return replace(cs, avoid_nestmate=False)
    # AvoidNonNestmate: staying close wins if both distance symbols are present.
    if s & Symbol.ABOVE_SAFE_DIST and not s & Symbol.BELOW_SAFE_DIST:
        return replace(cs, state=FsmState.MOVING, avoid_nestmate=False)
    return replace(cs, avoid_nestmate=False)


def fsm_tick_timer(cs: ControllerFsmState) -> tuple[ControllerFsmState, Symbol]:
    """Count the walling timer down one tick; reports expiry once it reaches 0."""
    if cs.state != FsmState.WALLING:
        return cs, Symbol.NONE
    remaining = max(0, cs.walling_timer_remaining - 1)
    raised = Symbol.WALLING_TIMER_EXPIRED if remaining == 0 else Symbol.NONE
    return replace(cs, walling_timer_remaining=remaining), raised


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _nearest_bearing(distance, aoa, valid, same, want_same):
    sel = valid & (same == want_same)
    if not np.any(sel):
        return None
    i = np.flatnonzero(sel)[np.argmin(distance[sel])]
    return float(aoa[i])


def fsm_act(cs: ControllerFsmState, frame, rng, config) -> tuple[float, float]:
    """Motion command ``(speed, heading_delta)`` for one robot."""
    if cs.state == FsmState.WALLING:
        return 0.0, 0.0
    if cs.state == FsmState.AVOID_NON_NESTMATE:
        b = _nearest_bearing(frame.distance, frame.aoa, frame.valid, frame.swarm_type, 0)
        if b is not None:
            return config.speed, float(_wrap(b + np.pi))
        return config.speed, float(_wrap(config.crw_sigma * rng.standard_normal()))
    z = rng.standard_normal()
    if cs.avoid_nestmate:
        b = _nearest_bearing(frame.distance, frame.aoa, frame.valid, frame.swarm_type, 1)
        if b is not None:
            return config.speed, float(_wrap(b + np.pi + config.crw_sigma * z))
    return config.speed, float(_wrap(config.crw_sigma * z))


# ---- whole-swarm versions used by the simulator -------------------------------------------------

def transition_batch(state, timer, symbols, duration):
    """Array form of :func:`fsm_transition`; returns ``(state, timer, avoid_nestmate)``."""
    state = np.asarray(state)
    symbols = np.asarray(symbols)
    new_state = state.copy()
    new_timer = np.asarray(timer).copy()

    has = lambda flag: (symbols & int(flag)) != 0  # noqa: E731
    moving = state == FsmState.MOVING
    walling = state == FsmState.WALLING
    avoiding = state == FsmState.AVOID_NON_NESTMATE

    to_wall = moving & has(Symbol.NON_NESTMATE_ENCOUNTER)
    avoid_flag = moving & ~to_wall & has(Symbol.NESTMATE_ENCOUNTER)
    reset = walling & has(Symbol.MOVING_NESTMATE_ENCOUNTER)
    expire = walling & ~reset & has(Symbol.WALLING_TIMER_EXPIRED)
    calm = avoiding & has(Symbol.ABOVE_SAFE_DIST) & ~has(Symbol.BELOW_SAFE_DIST)

    new_state[to_wall] = FsmState.WALLING
    new_timer[to_wall | reset] = duration
    new_state[expire] = FsmState.AVOID_NON_NESTMATE
    new_timer[expire] = 0
    new_state[calm] = FsmState.MOVING
    return new_state, new_timer, avoid_flag


def tick_timer_batch(state, timer):
    walling = state == FsmState.WALLING
    return np.where(walling, np.maximum(timer - 1, 0), timer)


def act_batch(state, avoid_flag, frames, z_crw, config):
    """Array form of :func:`fsm_act` using pre-drawn heading noise ``z_crw``."""
    n = len(state)
    speed = np.full(n, config.speed)
    delta = config.crw_sigma * z_crw
    rows = np.arange(n)

    nest_d = np.where(frames.valid & (frames.swarm_type == 1), frames.distance, np.inf)
    j = np.argmin(nest_d, axis=1)
    has_nest = np.isfinite(nest_d[rows, j])
    sidestep = (state == FsmState.MOVING) & avoid_flag & has_nest
    delta = np.where(sidestep, frames.aoa[rows, j] + np.pi + config.crw_sigma * z_crw, delta)

    other_d = np.where(frames.valid & (frames.swarm_type == 0), frames.distance, np.inf)
    k = np.argmin(other_d, axis=1)
    has_other = np.isfinite(other_d[rows, k])
    flee = (state == FsmState.AVOID_NON_NESTMATE) & has_other
    delta = np.where(flee, frames.aoa[rows, k] + np.pi, delta)

    walling = state == FsmState.WALLING
    speed[walling] = 0.0
    delta = np.where(walling, 0.0, delta)
    return speed, _wrap(delta)


class FsmController:
    """Walling controller for every robot in a world.

    The per-robot controller state lives in the world (``mode``, ``timer``) so a
    snapshot of the world is a snapshot of the controllers too.
    """

    name = "fsm"

    def __init__(self, walling_timer_ticks: int = 0):
        if walling_timer_ticks < 0:
            raise ValueError("walling timer must be non-negative")
        self.duration = int(walling_timer_ticks)

    def decide(self, world, frames, z_crw):
        from .sim import detect_events_batch

        symbols = detect_events_batch(world, frames)
        state, timer, flag = transition_batch(world.mode, world.timer, symbols, self.duration)
        speed, delta = act_batch(state, flag, frames, z_crw, world.config)
        world.mode = state
        world.timer = tick_timer_batch(state, timer)
        return speed, delta
