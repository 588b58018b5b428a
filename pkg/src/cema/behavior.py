"""Maneuver and macro-action library.

Synthesises kinematically bounded trajectories at 20 fps and labels existing
trajectories with per-timestep (maneuver, macro) action pairs.  The vehicle
model is a point moving on lane centerlines with bounded longitudinal and
lateral acceleration; maneuvers are templates, macro actions chain them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .world import (
    DT,
    MACROS,
    MANEUVERS,
    JointTrace,
    LaneGraph,
    Lane,
    LocalState,
    label_runs,
    wrap_angle,
)


class InfeasibleMacroError(ValueError):
    """The requested macro cannot be executed from the given state."""


@dataclass(frozen=True)
class Kinematics:
    """Motion limits shared by synthesis, execution and labelling."""

    accel_max: float = 5.0          # |longitudinal| bound, m/s^2
    lat_accel_max: float = 4.0      # |lateral| bound, m/s^2
    comfort_accel: float = 2.5
    comfort_brake: float = 2.5
    approach_brake: float = 1.2     # gentle early deceleration toward turns
    lane_change_lat_peak: float = 0.6   # target peak lateral accel in changes
    turn_lat_comfort: float = 1.0       # centripetal budget in junction turns
    headway_s: float = 1.0              # car-following time headway
    min_gap: float = 2.0                # standstill gap, m
    follow_lookahead: float = 30.0
    stop_eps: float = 0.1               # "stopped" speed threshold, m/s
    stop_min_s: float = 0.5
    give_way_gap_s: float = 2.0         # clear-time required before proceeding

    def lane_change_duration(self, offset: float) -> float:
        # cosine lateral profile: peak accel = offset/2 * (pi/T)^2
        return math.pi * math.sqrt(abs(offset) / (2.0 * self.lane_change_lat_peak))

    def turn_speed(self, radius: float, limit: float) -> float:
        return min(limit, math.sqrt(self.turn_lat_comfort * max(radius, 0.5)))


@dataclass(frozen=True)
class Maneuver:
    """A parametrised trajectory template."""

    kind: str
    params: tuple[tuple[str, object], ...] = ()

    def __post_init__(self):
        if self.kind not in MANEUVERS:
            raise ValueError(f"unknown maneuver kind {self.kind!r}")


@dataclass(frozen=True)
class MacroAction:
    """A chained maneuver sequence the planner reasons over."""

    kind: str
    params: tuple[tuple[str, object], ...] = ()

    def __post_init__(self):
        if self.kind not in MACROS:
            raise ValueError(f"unknown macro kind {self.kind!r}")

    def get(self, key: str, default=None):
        for k, v in self.params:
            if k == key:
                return v
        return default

    @staticmethod
    def make(kind: str, **params) -> "MacroAction":
        return MacroAction(kind, tuple(sorted(params.items())))

    def maneuver_kinds(self) -> tuple[str, ...]:
        if self.kind == "Continue":
            return ("lane-follow",)
        if self.kind == "ChangeLeft":
            return ("lane-change-left",)
        if self.kind == "ChangeRight":
            return ("lane-change-right",)
        if self.kind == "Stop":
            return ("stop",)
        if self.kind == "Exit":
            turn = "turn-left" if self.get("direction") == "left" else "turn-right"
            if self.get("give_way", False):
                return ("lane-follow", "give-way", turn)
            return ("lane-follow", turn)
        raise AssertionError(self.kind)

    def __repr__(self):  # compact, used in plan reports
        ps = ",".join(f"{k}={v}" for k, v in self.params)
        return f"{self.kind}({ps})" if ps else self.kind


@dataclass(frozen=True)
class ActionLabels:
    """Per-timestep (maneuver, macro) pairs for one agent."""

    agent: int
    start: int
    pairs: tuple[tuple[str, str], ...]

    def runs(self) -> list[tuple[str, str, int, int]]:
        return label_runs(self.pairs, self.start)

    def __len__(self):
        return len(self.pairs)


# ---------------------------------------------------------------------------
# Applicability
# ---------------------------------------------------------------------------


def _chain_from(graph: LaneGraph, lane_id: str, max_dist: float = 1000.0) -> list[str]:
    """Forward lane chain (successor / junction-straight) from a lane."""
    chain = [lane_id]
    dist = graph.lane(lane_id).length
    while dist < max_dist:
        fwd = graph.forward_of(chain[-1])
        if not fwd:
            break
        nxt = sorted(fwd, key=lambda c: c.dst)[0].dst
        if nxt in chain:
            break
        chain.append(nxt)
        dist += graph.lane(nxt).length
    return chain

def _remaining_chain_distance(graph: LaneGraph, state: LocalState) -> float:
    lane = graph.lane(state.lane)
    s, _ = lane.project(state.position)
    total = lane.length - s
    for lid in _chain_from(graph, state.lane)[1:]:
        total += graph.lane(lid).length
    return total


def _turns_ahead(graph: LaneGraph, state: LocalState,
                 lookahead: float = 250.0) -> list[tuple[str, str, float]]:
    """(turn kind, target lane, distance to the turn) along the lane chain."""
    lane = graph.lane(state.lane)
    s, _ = lane.project(state.position)
    out = []
    dist = -s
    for lid in _chain_from(graph, state.lane):
        cur = graph.lane(lid)
        for c in graph.turns_of(lid):
            d = dist + cur.length
            if -1.0 <= d <= lookahead:
                out.append((c.kind, c.dst, max(d, 0.0)))
        dist += cur.length
    return out


def applicable_macros(state: LocalState, graph: LaneGraph,
                      kin: Kinematics = Kinematics()) -> set[MacroAction]:
    """Macros whose expansion is geometrically feasible from ``state``."""
    lane = graph.lane(state.lane)
    out: set[MacroAction] = {MacroAction.make("Stop")}
    if _remaining_chain_distance(graph, state) > 1.0:
        out.add(MacroAction.make("Continue"))
    speed = max(state.speed, 3.0)
    need = speed * kin.lane_change_duration(lane.width) + 1.0
    s, _ = lane.project(state.position)
    for direction, kind in (("left", "ChangeLeft"), ("right", "ChangeRight")):
        adj = graph.left_of(lane.id) if direction == "left" else graph.right_of(lane.id)
        if adj is None:
            continue
        room = lane.length - s
        for lid in _chain_from(graph, lane.id)[1:]:
            room += graph.lane(lid).length
        if room >= need:
            out.add(MacroAction.make(kind))
    for turn_kind, dst, dist in _turns_ahead(graph, state):
        direction = "left" if turn_kind.endswith("left") else "right"
        out.add(MacroAction.make("Exit", direction=direction, lane=dst))
    return out


# ---------------------------------------------------------------------------
# Maneuver execution
# ---------------------------------------------------------------------------


def _turn_arc_length(lane: Lane) -> float:
    """Arc length of the curved head of a lane (heading still changing)."""
    pts = lane.centerline
    if len(pts) < 3:
        return min(lane.length, 2.0)
    total = 0.0
    for i in range(len(pts) - 2):
        a, b, c = pts[i], pts[i + 1], pts[i + 2]
        h1 = math.atan2(b[1] - a[1], b[0] - a[0])
        h2 = math.atan2(c[1] - b[1], c[0] - b[0])
        total += float(np.hypot(*(b - a)))
        if abs(wrap_angle(h2 - h1)) < math.radians(1.0):
            return max(total, 1.0)
    return lane.length


def _turn_radius(lane: Lane) -> float:
    arc = _turn_arc_length(lane)
    h0 = lane.heading_at(0.0)
    h1 = lane.heading_at(arc)
    sweep = abs(wrap_angle(h1 - h0))
    if sweep < 1e-3:
        return 1e3
    return arc / sweep


class _ManeuverExec:
    """Stateful single-maneuver executor; one `step` call per timestep."""

    kind: str = ""
    done: bool = False

    def step(self, v_ceiling: float) -> tuple[float, float, float, float, str]:
        """Advance one step; returns (x, y, heading, v2d, lane_id)."""
        raise NotImplementedError

    def lookahead(self) -> list[tuple[str, float]]:
        """(lane id, arc offset of our position on it) chain for leader search."""
        return []


class _LaneFollow(_ManeuverExec):
    kind = "lane-follow"

    def __init__(self, graph: LaneGraph, state: LocalState, kin: Kinematics,
                 target_speed: float | None = None,
                 end_after_s: float | None = None,
                 end_distance: float | None = None,
                 end_speed: float | None = None,
                 stop_at_chain_end: bool = True,
                 brake: float | None = None):
        self.graph, self.kin = graph, kin
        self.brake = brake if brake is not None else kin.comfort_brake
        self.chain = _chain_from(graph, state.lane)
        self.lane_idx = 0
        lane = graph.lane(state.lane)
        self.s, off0 = lane.project(state.position)
        self.v = state.speed
        self.target = target_speed
        self.end_speed = end_speed
        self.steps_left = None if end_after_s is None else max(1, round(end_after_s / DT))
        self.dist_left = end_distance
        self.stop_at_chain_end = stop_at_chain_end
        # decay any initial lateral offset smoothly instead of snapping
        self.off0 = off0 if abs(off0) > 0.05 else 0.0
        self.align_steps = max(1, round(max(0.5, abs(self.off0) / 0.8) / DT))
        self.i = 0

    @property
    def lane(self) -> Lane:
        return self.graph.lane(self.chain[self.lane_idx])

    def _remaining(self) -> float:
        rem = self.lane.length - self.s
        for lid in self.chain[self.lane_idx + 1:]:
            rem += self.graph.lane(lid).length
        return rem

    def step(self, v_ceiling: float) -> tuple[float, float, float, float, str]:
        kin = self.kin
        lane = self.lane
        desired = min(lane.speed_limit,
                      self.target if self.target is not None else lane.speed_limit,
                      v_ceiling)
        # ramp down toward a terminal speed at the maneuver end point
        if self.end_speed is not None:
            rem = self.dist_left if self.dist_left is not None else self._remaining()
            allowed = math.sqrt(max(self.end_speed, 0.0) ** 2
                                + 2.0 * self.brake * max(rem, 0.0))
            desired = min(desired, allowed)
        if self.stop_at_chain_end and self.end_speed is None:
            allowed = math.sqrt(2.0 * kin.comfort_brake * max(self._remaining(), 0.0))
            desired = min(desired, max(allowed, 0.0))
        v_new = float(np.clip(desired, self.v - kin.accel_max * DT,
                              self.v + kin.comfort_accel * DT))
        v_new = max(v_new, 0.0)
        adv = 0.5 * (self.v + v_new) * DT
        self.v = v_new
        self.s += adv
        if self.dist_left is not None:
            self.dist_left -= adv
        while self.s > self.lane.length and self.lane_idx < len(self.chain) - 1:
            self.s -= self.lane.length
            self.lane_idx += 1
        self.s = min(self.s, self.lane.length)
        if self.steps_left is not None:
            self.steps_left -= 1
            if self.steps_left <= 0:
                self.done = True
        if self.dist_left is not None and self.dist_left <= 0:
            self.done = True
        if self.s >= self.lane.length - 1e-6 and self.lane_idx == len(self.chain) - 1:
            self.done = True
        lane = self.lane
        p = lane.point_at(self.s)
        h = lane.heading_at(self.s)
        self.i += 1
        if self.off0 and self.i <= self.align_steps:
            tau = self.i / self.align_steps
            off = self.off0 * 0.5 * (1.0 + math.cos(math.pi * tau))
            d_off = (-self.off0 * 0.5 * math.pi / (self.align_steps * DT)
                     * math.sin(math.pi * tau))
            nx, ny = -math.sin(h), math.cos(h)
            heading = h if self.v < 0.1 else wrap_angle(h + math.atan2(d_off, max(self.v, 0.1)))
            return (float(p[0] + nx * off), float(p[1] + ny * off), heading,
                    math.hypot(self.v, d_off), lane.id)
        return float(p[0]), float(p[1]), h, self.v, lane.id

    def lookahead(self) -> list[tuple[str, float]]:
        out = [(self.chain[self.lane_idx], self.s)]
        off = self.lane.length - self.s
        for lid in self.chain[self.lane_idx + 1:]:
            out.append((lid, -off))
            off += self.graph.lane(lid).length
        return out


class _LaneChange(_ManeuverExec):
    def __init__(self, graph: LaneGraph, state: LocalState, kin: Kinematics,
                 direction: str):
        self.kind = f"lane-change-{direction}"
        self.graph, self.kin = graph, kin
        src = graph.lane(state.lane)
        dst_id = graph.left_of(src.id) if direction == "left" else graph.right_of(src.id)
        if dst_id is None:
            raise InfeasibleMacroError(f"no {direction}-adjacent lane from {src.id!r}")
        self.src_id = src.id
        self.dst = graph.lane(dst_id)
        self.s, self.off0 = self.dst.project(state.position)
        self.duration = kin.lane_change_duration(self.off0)
        self.n_steps = max(2, round(self.duration / DT))
        self.i = 0
        self.v = state.speed
        # hold the entry speed through the change; nobody accelerates mid-change
        self.target = min(max(state.speed, 1.0), self.dst.speed_limit)
        self.gap = abs(self.off0)

    def step(self, v_ceiling: float) -> tuple[float, float, float, float, str]:
        kin = self.kin
        desired = min(self.target, v_ceiling)
        v_new = float(np.clip(desired, self.v - kin.accel_max * DT,
                              self.v + kin.comfort_accel * DT))
        v_new = max(v_new, 0.0)
        self.s += 0.5 * (self.v + v_new) * DT
        self.v = v_new
        self.i += 1
        tau = min(self.i / self.n_steps, 1.0)
        off = self.off0 * 0.5 * (1.0 + math.cos(math.pi * tau))
        d_off = -self.off0 * 0.5 * math.pi / self.duration * math.sin(math.pi * tau)
        self.s = min(self.s, self.dst.length)
        p = self.dst.point_at(self.s)
        h = self.dst.heading_at(self.s)
        nx, ny = -math.sin(h), math.cos(h)  # left normal
        x, y = float(p[0] + nx * off), float(p[1] + ny * off)
        heading = h if self.v < 0.1 else wrap_angle(h + math.atan2(d_off, max(self.v, 0.1)))
        v2d = math.hypot(self.v, d_off)
        lane_id = self.src_id if abs(off) > 0.5 * self.gap else self.dst.id
        if self.i >= self.n_steps:
            self.done = True
        return x, y, heading, v2d, lane_id

    def lookahead(self) -> list[tuple[str, float]]:
        # yield to the departed lane only while still committed to it
        if self.i > 0.4 * self.n_steps:
            return [(self.dst.id, self.s)]
        return [(self.dst.id, self.s), (self.src_id, self.s)]


class _Turn(_ManeuverExec):
    def __init__(self, graph: LaneGraph, state: LocalState, kin: Kinematics,
                 target_lane: str, direction: str):
        self.kind = f"turn-{direction}"
        self.graph, self.kin = graph, kin
        self.lane = graph.lane(target_lane)
        self.arc = _turn_arc_length(self.lane)
        radius = _turn_radius(self.lane)
        self.v_turn = kin.turn_speed(radius, self.lane.speed_limit)
        self.s = 0.0
        self.v = state.speed

    def step(self, v_ceiling: float) -> tuple[float, float, float, float, str]:
        kin = self.kin
        desired = min(self.v_turn, v_ceiling)
        v_new = float(np.clip(desired, self.v - kin.accel_max * DT,
                              self.v + kin.comfort_accel * DT))
        v_new = max(v_new, 0.0)
        self.s += 0.5 * (self.v + v_new) * DT
        self.v = v_new
        if self.s >= self.arc:
            self.done = True
        self.s = min(self.s, self.lane.length)
        p = self.lane.point_at(self.s)
        return float(p[0]), float(p[1]), self.lane.heading_at(self.s), self.v, self.lane.id

    def lookahead(self) -> list[tuple[str, float]]:
        return [(self.lane.id, self.s)]


class _Stop(_ManeuverExec):
    kind = "stop"

    def __init__(self, graph: LaneGraph, state: LocalState, kin: Kinematics,
                 hold_s: float = 3.0):
        self.graph, self.kin = graph, kin
        self.lane = graph.lane(state.lane)
        self.s, _ = self.lane.project(state.position)
        self.v = state.speed
        self.hold_steps = max(1, round(hold_s / DT))

    def step(self, v_ceiling: float) -> tuple[float, float, float, float, str]:
        kin = self.kin
        v_new = max(self.v - kin.comfort_brake * DT, 0.0)
        self.s += 0.5 * (self.v + v_new) * DT
        self.s = min(self.s, self.lane.length)
        self.v = v_new
        if self.v <= kin.stop_eps:
            self.v = 0.0
            self.hold_steps -= 1
            if self.hold_steps <= 0:
                self.done = True
        p = self.lane.point_at(self.s)
        return float(p[0]), float(p[1]), self.lane.heading_at(self.s), self.v, self.lane.id

    def lookahead(self) -> list[tuple[str, float]]:
        return [(self.lane.id, self.s)]


class _GiveWay(_ManeuverExec):
    """Decelerate to the lane end, hold until the yield paths clear."""

    kind = "give-way"

    def __init__(self, graph: LaneGraph, state: LocalState, kin: Kinematics,
                 clear_check=None):
        self.graph, self.kin = graph, kin
        self.lane = graph.lane(state.lane)
        self.s, _ = self.lane.project(state.position)
        self.v = state.speed
        self.clear_check = clear_check  # () -> bool, supplied by the simulator
        self.hold_steps = 0

    def step(self, v_ceiling: float) -> tuple[float, float, float, float, str]:
        kin = self.kin
        stop_line = max(self.lane.length - 1.0, 0.0)
        rem = max(stop_line - self.s, 0.0)
        allowed = math.sqrt(2.0 * kin.comfort_brake * rem)
        desired = min(allowed, v_ceiling, self.lane.speed_limit)
        v_new = float(np.clip(desired, self.v - kin.accel_max * DT,
                              self.v + kin.comfort_accel * DT))
        v_new = max(v_new, 0.0)
        self.s += 0.5 * (self.v + v_new) * DT
        self.s = min(self.s, self.lane.length)
        self.v = v_new
        at_line = self.s >= stop_line - 0.5
        if at_line and self.v <= kin.stop_eps:
            clear = True if self.clear_check is None else self.clear_check()
            if self.clear_check is None:
                # no traffic context: pause for the configured gap, then go
                self.hold_steps += 1
                clear = self.hold_steps >= round(kin.give_way_gap_s / DT)
            if clear:
                self.done = True
        p = self.lane.point_at(self.s)
        return float(p[0]), float(p[1]), self.lane.heading_at(self.s), self.v, self.lane.id

    def lookahead(self) -> list[tuple[str, float]]:
        return [(self.lane.id, self.s)]


# ---------------------------------------------------------------------------
# Macro execution
# ---------------------------------------------------------------------------


class MacroExecutor:
    """Executes a macro-action queue for one agent, one step at a time.

    Drives maneuvers in sequence; when the queue runs dry it keeps
    lane-following so rollouts always reach their horizon.
    """

    def __init__(self, graph: LaneGraph, state: LocalState,
                 kin: Kinematics = Kinematics(), plan: Sequence[MacroAction] = ()):
        self.graph, self.kin = graph, kin
        self.state = state
        self.queue: list[MacroAction] = list(plan)
        self.current: MacroAction | None = None
        self.maneuvers: list[_ManeuverExec] = []
        self.clear_check = None

    def set_plan(self, plan: Sequence[MacroAction]) -> None:
        """Replace the macro queue.

        Lane-follow is interruptible; any other in-progress maneuver finishes
        first so labels stay contiguous across replans.
        """
        self.queue = list(plan)
        if (self.maneuvers and not self.maneuvers[0].done
                and not isinstance(self.maneuvers[0], _LaneFollow)):
            self.maneuvers = [self.maneuvers[0]]
        else:
            self.current = None
            self.maneuvers = []

    def _expand(self, macro: MacroAction) -> list[_ManeuverExec]:
        g, st, kin = self.graph, self.state, self.kin
        k = macro.kind
        if k == "Continue":
            dur = macro.get("duration_s")
            dist = macro.get("distance")
            return [_LaneFollow(g, st, kin, target_speed=macro.get("target_speed"),
                                end_after_s=dur, end_distance=dist)]
        if k in ("ChangeLeft", "ChangeRight"):
            return [_LaneChange(g, st, kin, "left" if k == "ChangeLeft" else "right")]
        if k == "Stop":
            return [_Stop(g, st, kin, hold_s=macro.get("hold_s", 3.0))]
        if k == "Exit":
            direction = macro.get("direction", "right")
            lane_id = macro.get("lane")
            turns = _turns_ahead(g, st)
            match = [t for t in turns
                     if (lane_id is None or t[1] == lane_id)
                     and t[0].endswith(direction)]
            if not match:
                raise InfeasibleMacroError(
                    f"no junction-turn-{direction} ahead of lane {st.lane!r}")
            turn_kind, dst, dist = min(match, key=lambda t: t[2])
            target = g.lane(dst)
            v_turn = kin.turn_speed(_turn_radius(target), target.speed_limit)
            approach = macro.get("approach_speed", v_turn)
            mans: list[_ManeuverExec] = []
            if dist > 0.5:
                mans.append(_LaneFollow(g, st, kin, end_distance=dist,
                                        end_speed=approach,
                                        target_speed=macro.get("target_speed"),
                                        brake=kin.approach_brake))
            if macro.get("give_way", False):
                mans.append(_GiveWay(g, st, kin, clear_check=self.clear_check))
            mans.append(_Turn(g, st, kin, dst, direction))
            return mans
        raise AssertionError(k)

    def _ensure_maneuver(self) -> None:
        while not self.maneuvers or self.maneuvers[0].done:
            if self.maneuvers and self.maneuvers[0].done:
                self.maneuvers.pop(0)
                if self.maneuvers:
                    # re-anchor the next maneuver on the current state
                    self.maneuvers[0] = self._reanchor(self.maneuvers[0])
                continue
            if not self.maneuvers:
                if self.queue:
                    self.current = self.queue.pop(0)
                    self.maneuvers = self._expand(self.current)
                else:
                    self.current = MacroAction.make("Continue")
                    self.maneuvers = [_LaneFollow(self.graph, self.state, self.kin)]
                self.maneuvers[0] = self._reanchor(self.maneuvers[0])

    def _reanchor(self, man: _ManeuverExec) -> _ManeuverExec:
        # maneuvers capture the state at expansion; rebuild position-dependent
        # ones so chained execution stays continuous
        if isinstance(man, _LaneFollow):
            keep = dict(target_speed=man.target, end_speed=man.end_speed,
                        brake=man.brake)
            end_after = None if man.steps_left is None else man.steps_left * DT
            return _LaneFollow(self.graph, self.state, self.kin,
                               end_after_s=end_after, end_distance=man.dist_left,
                               **keep)
        if isinstance(man, _LaneChange):
            return _LaneChange(self.graph, self.state, self.kin,
                               "left" if man.kind.endswith("left") else "right")
        if isinstance(man, _Stop):
            return _Stop(self.graph, self.state, self.kin,
                         hold_s=man.hold_steps * DT)
        if isinstance(man, _GiveWay):
            man2 = _GiveWay(self.graph, self.state, self.kin, clear_check=self.clear_check)
            return man2
        if isinstance(man, _Turn):
            # anchored on the target lane; only the entry speed carries over
            man.v = self.state.speed
            return man
        return man

    def step(self, v_ceiling: float = math.inf) -> tuple[LocalState, str, str]:
        """Advance one timestep; returns (state, maneuver kind, macro kind)."""
        self._ensure_maneuver()
        man = self.maneuvers[0]
        prev = self.state
        x, y, heading, v2d, lane_id = man.step(v_ceiling)
        accel = (v2d - prev.speed) / DT
        accel = float(np.clip(accel, -self.kin.accel_max, self.kin.accel_max))
        self.state = LocalState(position=(x, y), heading=heading, speed=max(v2d, 0.0),
                                acceleration=accel, lane=lane_id,
                                timestep=prev.timestep + 1)
        macro_kind = self.current.kind if self.current is not None else "Continue"
        return self.state, man.kind, macro_kind

    def lookahead(self) -> list[tuple[str, float]]:
        self._ensure_maneuver()
        return self.maneuvers[0].lookahead()

    @property
    def plan_exhausted(self) -> bool:
        return not self.queue and all(m.done for m in self.maneuvers)


@dataclass(frozen=True)
class Segment:
    """Synthesised open-loop state sequence with aligned labels."""

    states: tuple[LocalState, ...]
    maneuvers: tuple[str, ...]
    macros: tuple[str, ...]

    def __len__(self):
        return len(self.states)


def synthesize(macro: MacroAction | Sequence[MacroAction], start: LocalState,
               graph: LaneGraph, kin: Kinematics = Kinematics(),
               max_steps: int = 2400) -> Segment:
    """Open-loop synthesis of a macro (or macro sequence) from a state.

    The emitted sequence starts at ``start.timestep + 1`` and honours the
    kinematic limits; raises InfeasibleMacroError when the macro cannot run.
    """
    plan = [macro] if isinstance(macro, MacroAction) else list(macro)
    for m in plan:
        if m.kind in ("ChangeLeft", "ChangeRight"):
            side = "left" if m.kind == "ChangeLeft" else "right"
            adj = (graph.left_of(start.lane) if side == "left"
                   else graph.right_of(start.lane))
            # adjacency may only become available mid-plan; check first macro only
            if plan[0] is m and adj is None:
                raise InfeasibleMacroError(f"no {side}-adjacent lane from {start.lane!r}")
    ex = MacroExecutor(graph, start, kin, plan)
    states, mans, macs = [], [], []
    for _ in range(max_steps):
        st, man, mac = ex.step()
        states.append(st)
        mans.append(man)
        macs.append(mac)
        if ex.plan_exhausted:
            break
    return Segment(tuple(states), tuple(mans), tuple(macs))


# ---------------------------------------------------------------------------
# Labelling
# ---------------------------------------------------------------------------


def _lane_sequence(trace: JointTrace, agent: int, graph: LaneGraph) -> list[str]:
    """Lane membership per step, preferring connectivity and heading agreement."""
    lanes: list[str] = []
    prev: str | None = None
    for i in range(trace.length):
        xy = (float(trace.xs[agent][i]), float(trace.ys[agent][i]))
        heading = float(trace.headings[agent][i])
        connected: set[str] = set()
        if prev is not None:
            connected = {prev}
            connected |= {c.dst for c in graph.forward_of(prev)}
            connected |= {c.dst for c in graph.turns_of(prev)}
            for adj in (graph.left_of(prev), graph.right_of(prev)):
                if adj:
                    connected.add(adj)
        best_id, best_score = None, math.inf
        for lane in graph.lanes.values():
            s, _ = lane.project(xy)
            p = lane.point_at(s)
            d = math.hypot(p[0] - xy[0], p[1] - xy[1])
            if d > 1.5 * lane.width:
                continue
            score = d + 3.0 * abs(wrap_angle(heading - lane.heading_at(s)))
            if prev is not None and lane.id not in connected:
                score += 0.5
            if lane.id == prev:
                score -= 0.1  # hysteresis
            if score < best_score:
                best_score, best_id = score, lane.id
        prev = best_id if best_id is not None else prev
        lanes.append(prev if prev is not None else "")
    return lanes


def label_actions(trace: JointTrace, agent: int, graph: LaneGraph,
                  kin: Kinematics = Kinematics()) -> ActionLabels:
    """Reconstruct per-timestep (maneuver, macro) labels from geometry.

    Total labelling: every step gets a pair; lane membership changes become
    lane-change or turn labels, sustained near-zero speed becomes stop, and
    everything else is (lane-follow, Continue).  Boundary steps take the label
    of the run that eventually completes.
    """
    if agent not in trace.agent_ids:
        raise ValueError(f"agent {agent} not in trace")
    n = trace.length
    lanes = _lane_sequence(trace, agent, graph)
    man = ["lane-follow"] * n
    mac = ["Continue"] * n
    speeds = trace.speeds[agent]
    accels = trace.accels[agent]

    # stop runs: speed under the threshold for at least stop_min_s, plus the
    # braking phase leading into them
    min_run = max(1, round(kin.stop_min_s / DT))
    i = 0
    while i < n:
        if speeds[i] <= kin.stop_eps:
            j = i
            while j < n and speeds[j] <= kin.stop_eps:
                j += 1
            if j - i >= min_run:
                k = i - 1
                while k >= 0 and accels[k] < -0.05 and speeds[k] > kin.stop_eps:
                    k -= 1
                for k in range(k + 1, j):
                    man[k], mac[k] = "stop", "Stop"
            i = j
        else:
            i += 1

    # transitions between lanes
    for c in range(1, n):
        a, b = lanes[c - 1], lanes[c]
        if a == b:
            continue
        turn = next((t for t in graph.turns_of(a) if t.dst == b), None)
        if turn is None:
            # a forward lane near the junction mouth can briefly shadow the
            # turn target; look back up to one second for the real source
            for back in range(2, 22):
                if c - back < 0 or lanes[c - back] == b:
                    break
                t2 = next((t for t in graph.turns_of(lanes[c - back]) if t.dst == b), None)
                if t2 is not None:
                    turn = t2
                    a = lanes[c - back]
                    break
        if turn is not None:
            direction = "left" if turn.kind.endswith("left") else "right"
            dst = graph.lane(b)
            arc = _turn_arc_length(dst)
            j = c
            while j < n and lanes[j] == b:
                s, _ = dst.project((trace.xs[agent][j], trace.ys[agent][j]))
                if s > arc:
                    break
                j += 1
            for k in range(c, j):
                man[k], mac[k] = f"turn-{direction}", "Exit"
            # the committed approach (braking, or within braking distance of
            # the junction) belongs to the same Exit
            src = graph.lane(a)
            k = c - 1
            while k >= 0 and mac[k] == "Continue":
                if lanes[k] not in (a, b) and not any(
                        t.dst == lanes[k] for t in graph.forward_of(a)):
                    break
                s_k, _ = src.project((trace.xs[agent][k], trace.ys[agent][k]))
                rem = max(src.length - s_k, 0.0)
                commit = (speeds[k] ** 2 / (2.0 * kin.comfort_brake)
                          + speeds[k] * 1.0 + 2.0)
                if accels[k] < -0.05 or rem <= commit:
                    mac[k] = "Exit"
                    k -= 1
                else:
                    break
            continue
        if graph.left_of(a) == b or graph.right_of(a) == b:
            direction = "left" if graph.left_of(a) == b else "right"
            dst = graph.lane(b)
            # the change window = the contiguous lateral-motion run around the
            # boundary crossing (the run that completes wins the boundary steps)
            offs = np.array([dst.project((trace.xs[agent][k], trace.ys[agent][k]))[1]
                             for k in range(n)])
            lat_speed = np.abs(np.gradient(offs)) / DT
            moving = lat_speed > 0.08
            lo = c - 1
            while lo > 0 and moving[lo - 1] and lanes[lo - 1] == a:
                lo -= 1
            hi = c
            while hi < n - 1 and moving[hi + 1] and lanes[hi + 1] == b:
                hi += 1
            for k in range(lo, hi + 1):
                if man[k] == "lane-follow":
                    man[k] = f"lane-change-{direction}"
                    mac[k] = "ChangeLeft" if direction == "left" else "ChangeRight"

    return ActionLabels(agent=agent, start=trace.start, pairs=tuple(zip(man, mac)))


def dominant_macro(labels: Iterable[str]) -> str:
    counts: dict[str, int] = {}
    for m in labels:
        counts[m] = counts.get(m, 0) + 1
    return max(sorted(counts), key=lambda k: counts[k])


@dataclass
class Rollout:
    """Fixed-length open-loop rollout arrays for one agent."""

    xs: np.ndarray
    ys: np.ndarray
    headings: np.ndarray
    speeds: np.ndarray
    accels: np.ndarray
    lanes: tuple[str, ...]
    maneuvers: tuple[str, ...]
    macros: tuple[str, ...]

    def __len__(self):
        return len(self.xs)


def rollout_open_loop(graph: LaneGraph, state: LocalState,
                      plan: Sequence[MacroAction], steps: int,
                      kin: Kinematics = Kinematics()) -> Rollout:
    """Run a macro plan open-loop for exactly ``steps`` timesteps.

    When the plan runs out the agent keeps lane-following (braking to a halt
    at dead ends), so the arrays always have the requested length.
    """
    ex = MacroExecutor(graph, state, kin, plan)
    xs = np.empty(steps)
    ys = np.empty(steps)
    hs = np.empty(steps)
    vs = np.empty(steps)
    ac = np.empty(steps)
    lanes, mans, macs = [], [], []
    for i in range(steps):
        st, man, mac = ex.step()
        xs[i], ys[i] = st.position
        hs[i], vs[i], ac[i] = st.heading, st.speed, st.acceleration
        lanes.append(st.lane)
        mans.append(man)
        macs.append(mac)
    return Rollout(xs, ys, hs, vs, ac, tuple(lanes), tuple(mans), tuple(macs))


def follow_ceiling(kin: Kinematics, graph: LaneGraph,
                   chain: Sequence[tuple[str, float]],
                   others: Iterable[tuple[float, float, float]]) -> float:
    """Speed ceiling imposed by the nearest leader along a lane chain.

    ``chain`` holds (lane id, own arc position on that lane) pairs; others are
    (x, y, heading) triples.  Agents laterally outside the lane, behind us, or
    oncoming are ignored.
    """
    ceiling = math.inf
    for lane_id, s_self in chain:
        lane = graph.lane(lane_id)
        for ox, oy, oh in others:
            s_o, _ = lane.project((ox, oy))
            q = lane.point_at(s_o)
            # distance to the projected point; beyond-the-end positions clamp
            # to the endpoint and must not read as parked on this lane
            if math.hypot(ox - q[0], oy - q[1]) > 0.5 * lane.width + 0.3:
                continue
            if abs(wrap_angle(oh - lane.heading_at(s_o))) > math.pi / 2:
                continue
            gap = s_o - s_self - 2.0 * 1.25
            if gap <= 0 or gap > kin.follow_lookahead:
                continue
            ceiling = min(ceiling, max(0.0, (gap - kin.min_gap) / kin.headway_s))
    return ceiling
