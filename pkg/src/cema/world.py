"""Road network, agent states, joint traces and scenario loading.

All types in this module are immutable after construction and can be shared
across threads without synchronisation.  Distances are metres, speeds m/s,
angles radians; time is counted in discrete steps of ``DT`` seconds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

FPS = 20
DT = 1.0 / FPS

SCENARIO_FORMAT = "cema-scenario/1"

MANEUVERS = (
    "lane-follow",
    "lane-change-left",
    "lane-change-right",
    "turn-left",
    "turn-right",
    "give-way",
    "stop",
)
MACROS = ("Continue", "ChangeLeft", "ChangeRight", "Exit", "Stop")
ACTION_NAMES = MANEUVERS + MACROS

ADJACENT_KINDS = ("left-adjacent", "right-adjacent")
TURN_KINDS = ("junction-turn-left", "junction-turn-right")
FORWARD_KINDS = ("successor", "junction-straight")
CONNECTION_KINDS = FORWARD_KINDS + ADJACENT_KINDS + TURN_KINDS

CONTROLLER_KINDS = ("ego-planner", "scripted", "predicted-follower")

# Junction-turn (and forward) connections must join lane endpoints this closely.
ENDPOINT_TOLERANCE = 0.5


class ScenarioError(ValueError):
    """A scenario document violated the schema or a geometric invariant."""


class TraceError(ValueError):
    """A joint-trace operation was called with incompatible traces."""


def wrap_angle(theta: float) -> float:
    """Normalise an angle into (-pi, pi]."""
    t = math.fmod(theta + math.pi, 2.0 * math.pi)
    if t <= 0.0:
        t += 2.0 * math.pi
    return t - math.pi


# ---------------------------------------------------------------------------
# Lanes and the lane graph
# ---------------------------------------------------------------------------


class Lane:
    """A lane with a polyline centerline, arc-length parametrised."""

    __slots__ = ("id", "centerline", "width", "speed_limit", "_cum", "length")

    def __init__(self, lane_id: str, centerline: Sequence[Sequence[float]],
                 width: float, speed_limit: float):
        pts = np.asarray(centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ScenarioError(f"lane {lane_id!r}: centerline must be >=2 [x,y] points")
        if width <= 0 or speed_limit <= 0:
            raise ScenarioError(f"lane {lane_id!r}: width and speed_limit must be positive")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= 1e-9):
            raise ScenarioError(f"lane {lane_id!r}: degenerate centerline segment")
        self.id = lane_id
        self.centerline = pts
        self.width = float(width)
        self.speed_limit = float(speed_limit)
        self._cum = np.concatenate(([0.0], np.cumsum(seg)))
        self.length = float(self._cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self._cum, s, side="right")) - 1
        i = min(max(i, 0), len(self._cum) - 2)
        seg_len = self._cum[i + 1] - self._cum[i]
        t = (s - self._cum[i]) / seg_len
        return (1 - t) * self.centerline[i] + t * self.centerline[i + 1]

    def heading_at(self, s: float) -> float:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self._cum, s, side="right")) - 1
        i = min(max(i, 0), len(self._cum) - 2)
        d = self.centerline[i + 1] - self.centerline[i]
        return math.atan2(d[1], d[0])

    def project(self, xy: Sequence[float]) -> tuple[float, float]:
        """Project a point onto the centerline.

        Returns (arc length, signed lateral offset); positive offset is to the
        left of the travel direction.
        """
        p = np.asarray(xy, dtype=float)
        best_s, best_off, best_d2 = 0.0, 0.0, math.inf
        for i in range(len(self.centerline) - 1):
            a = self.centerline[i]
            b = self.centerline[i + 1]
            ab = b - a
            seg_len2 = float(ab @ ab)
            t = float(np.clip((p - a) @ ab / seg_len2, 0.0, 1.0))
            q = a + t * ab
            d2 = float((p - q) @ (p - q))
            if d2 < best_d2:
                seg_len = math.sqrt(seg_len2)
                # cross product sign gives left/right of direction of travel
                cross = ab[0] * (p[1] - a[1]) - ab[1] * (p[0] - a[0])
                best_d2 = d2
                best_s = float(self._cum[i] + t * seg_len)
                best_off = cross / seg_len
        return best_s, best_off

    @property
    def start(self) -> np.ndarray:
        return self.centerline[0]

    @property
    def end(self) -> np.ndarray:
        return self.centerline[-1]


@dataclass(frozen=True)
class Connection:
    src: str
    dst: str
    kind: str


class LaneGraph:
    """Lanes plus their successor/adjacency/turn connectivity."""

    def __init__(self, lanes: Iterable[Lane], connections: Iterable[Connection]):
        self.lanes: dict[str, Lane] = {}
        for lane in lanes:
            if lane.id in self.lanes:
                raise ScenarioError(f"duplicate lane id {lane.id!r}")
            self.lanes[lane.id] = lane
        self.connections = tuple(connections)
        self._forward: dict[str, list[Connection]] = {}
        self._turns: dict[str, list[Connection]] = {}
        self._left: dict[str, str] = {}
        self._right: dict[str, str] = {}
        for c in self.connections:
            if c.kind not in CONNECTION_KINDS:
                raise ScenarioError(f"unknown connection kind {c.kind!r}")
            if c.src not in self.lanes or c.dst not in self.lanes:
                raise ScenarioError(f"connection {c.src!r}->{c.dst!r} references unknown lane")
            if c.kind in FORWARD_KINDS:
                self._forward.setdefault(c.src, []).append(c)
            elif c.kind in TURN_KINDS:
                self._turns.setdefault(c.src, []).append(c)
            elif c.kind == "left-adjacent":
                self._left[c.src] = c.dst
            elif c.kind == "right-adjacent":
                self._right[c.src] = c.dst
        self._validate()

    def _validate(self) -> None:
        for src, dst in self._left.items():
            if self._right.get(dst) != src:
                raise ScenarioError(
                    f"adjacency not symmetric: left of {src!r} is {dst!r} "
                    f"but right of {dst!r} is {self._right.get(dst)!r}")
        for dst, src in list(self._right.items()):
            if self._left.get(src) != dst:
                raise ScenarioError(
                    f"adjacency not symmetric: right of {dst!r} is {src!r} "
                    f"but left of {src!r} is {self._left.get(src)!r}")
        for conns in (self._forward, self._turns):
            for src, lst in conns.items():
                for c in lst:
                    gap = float(np.linalg.norm(self.lanes[c.src].end - self.lanes[c.dst].start))
                    if gap > ENDPOINT_TOLERANCE:
                        raise ScenarioError(
                            f"connection {c.src!r}->{c.dst!r} ({c.kind}) endpoints "
                            f"{gap:.2f} m apart (max {ENDPOINT_TOLERANCE})")

    def left_of(self, lane_id: str) -> str | None:
        return self._left.get(lane_id)

    def right_of(self, lane_id: str) -> str | None:
        return self._right.get(lane_id)

    def forward_of(self, lane_id: str) -> list[Connection]:
        return self._forward.get(lane_id, [])

    def turns_of(self, lane_id: str) -> list[Connection]:
        return self._turns.get(lane_id, [])

    def lane(self, lane_id: str) -> Lane:
        try:
            return self.lanes[lane_id]
        except KeyError:
            raise ScenarioError(f"unknown lane {lane_id!r}") from None

    def nearest_lane(self, xy: Sequence[float], prefer: str | None = None) -> str:
        """Lane whose centerline is laterally closest to the point.

        Ties within 10 cm keep ``prefer`` for hysteresis during lane changes.
        """
        best_id, best = None, math.inf
        pref_off = math.inf
        for lane in self.lanes.values():
            s, off = lane.project(xy)
            # points beyond the lane ends project onto the end point; penalise
            p = lane.point_at(s)
            d = float(np.hypot(*(np.asarray(xy, float) - p)))
            if d < best - 1e-9:
                best, best_id = d, lane.id
            if lane.id == prefer:
                pref_off = d
        if prefer is not None and pref_off <= best + 0.1:
            return prefer
        return best_id

    def reachable_lanes(self, lane_id: str) -> set[str]:
        """All lanes reachable via forward, turn and adjacency moves."""
        seen: set[str] = set()
        stack = [lane_id]
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            nxt = [c.dst for c in self.forward_of(cur)]
            nxt += [c.dst for c in self.turns_of(cur)]
            for adj in (self.left_of(cur), self.right_of(cur)):
                if adj is not None:
                    nxt.append(adj)
            stack.extend(n for n in nxt if n not in seen)
        return seen

    def terminal_lanes(self, lane_id: str) -> list[str]:
        """Reachable lanes with no outgoing forward or turn connection."""
        out = [lid for lid in self.reachable_lanes(lane_id)
               if not self.forward_of(lid) and not self.turns_of(lid)]
        return sorted(out)


# ---------------------------------------------------------------------------
# Agent-level types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalState:
    """Pose, velocity and acceleration of one agent at one timestep."""

    position: tuple[float, float]
    heading: float
    speed: float
    acceleration: float
    lane: str
    timestep: int

    def __post_init__(self):
        if self.timestep < 0:
            raise ValueError("timestep must be >= 0")
        if self.speed < 0:
            raise ValueError("speed must be >= 0")
        object.__setattr__(self, "heading", wrap_angle(self.heading))


@dataclass(frozen=True)
class Goal:
    """Axis-aligned target region for one agent."""

    agent: int
    box: tuple[float, float, float, float]  # x0, y0, x1, y1

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if x1 <= x0 or y1 <= y0:
            raise ScenarioError(f"goal for agent {self.agent}: empty region {self.box}")

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.box
        return x0 <= x <= x1 and y0 <= y <= y1

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.box
        return (0.5 * (x0 + x1), 0.5 * (y0 + y1))


@dataclass(frozen=True)
class AgentMeta:
    id: int
    ego: bool


# ---------------------------------------------------------------------------
# Joint traces
# ---------------------------------------------------------------------------


class JointTrace:
    """Time-indexed joint states of all agents over [start, horizon].

    Array-backed and immutable by convention; per-agent arrays all share one
    length and align with timesteps ``start .. start+len-1``.  Label arrays
    (maneuver/macro per timestep) are carried alongside the states so action
    level comparisons never need geometric reconstruction of their own traces.
    """

    def __init__(self, agents: Sequence[AgentMeta], start: int,
                 xs: Mapping[int, np.ndarray], ys: Mapping[int, np.ndarray],
                 headings: Mapping[int, np.ndarray], speeds: Mapping[int, np.ndarray],
                 accels: Mapping[int, np.ndarray], lanes: Mapping[int, Sequence[str]],
                 maneuvers: Mapping[int, Sequence[str]], macros: Mapping[int, Sequence[str]]):
        self.agents = tuple(agents)
        egos = [a.id for a in self.agents if a.ego]
        if len(egos) != 1:
            raise TraceError(f"trace must have exactly one ego, got {egos}")
        self.ego_id = egos[0]
        self.start = int(start)
        if self.start < 0:
            raise TraceError("start must be >= 0")
        self.xs = {a: np.asarray(xs[a], float) for a in self.agent_ids}
        self.ys = {a: np.asarray(ys[a], float) for a in self.agent_ids}
        self.headings = {a: np.asarray(headings[a], float) for a in self.agent_ids}
        self.speeds = {a: np.asarray(speeds[a], float) for a in self.agent_ids}
        self.accels = {a: np.asarray(accels[a], float) for a in self.agent_ids}
        self.lanes = {a: tuple(lanes[a]) for a in self.agent_ids}
        self.maneuvers = {a: tuple(maneuvers[a]) for a in self.agent_ids}
        self.macros = {a: tuple(macros[a]) for a in self.agent_ids}
        lengths = {len(self.xs[a]) for a in self.agent_ids}
        for coll in (self.ys, self.headings, self.speeds, self.accels,
                     self.lanes, self.maneuvers, self.macros):
            lengths |= {len(coll[a]) for a in self.agent_ids}
        if len(lengths) != 1:
            raise TraceError("all per-agent arrays must share one length")
        self.length = lengths.pop()
        if self.length < 1:
            raise TraceError("trace must cover at least one timestep")

    @property
    def agent_ids(self) -> list[int]:
        return [a.id for a in self.agents]

    @property
    def horizon(self) -> int:
        return self.start + self.length - 1

    def index(self, t: int) -> int:
        if not (self.start <= t <= self.horizon):
            raise TraceError(f"timestep {t} outside [{self.start}, {self.horizon}]")
        return t - self.start

    def state(self, agent: int, t: int) -> LocalState:
        i = self.index(t)
        return LocalState(
            position=(float(self.xs[agent][i]), float(self.ys[agent][i])),
            heading=float(self.headings[agent][i]),
            speed=float(self.speeds[agent][i]),
            acceleration=float(self.accels[agent][i]),
            lane=self.lanes[agent][i],
            timestep=t,
        )

    def labels(self, agent: int) -> tuple[tuple[str, str], ...]:
        return tuple(zip(self.maneuvers[agent], self.macros[agent]))

    def subtrace(self, a: int, b: int) -> "JointTrace":
        """Restriction to timesteps [a, b] (both clamped into the trace)."""
        a = max(a, self.start)
        b = min(b, self.horizon)
        if b < a:
            raise TraceError(f"empty subtrace [{a}, {b}]")
        i, j = a - self.start, b - self.start + 1
        return JointTrace(
            self.agents, a,
            {k: v[i:j] for k, v in self.xs.items()},
            {k: v[i:j] for k, v in self.ys.items()},
            {k: v[i:j] for k, v in self.headings.items()},
            {k: v[i:j] for k, v in self.speeds.items()},
            {k: v[i:j] for k, v in self.accels.items()},
            {k: v[i:j] for k, v in self.lanes.items()},
            {k: v[i:j] for k, v in self.maneuvers.items()},
            {k: v[i:j] for k, v in self.macros.items()},
        )

    def concat(self, other: "JointTrace") -> "JointTrace":
        """Concatenate a trace that starts right after this one ends."""
        if sorted(other.agent_ids) != sorted(self.agent_ids):
            raise TraceError("agent rosters differ")
        if other.start != self.horizon + 1:
            raise TraceError(
                f"cannot concat: other starts at {other.start}, expected {self.horizon + 1}")
        cat = lambda m1, m2: {k: np.concatenate([np.asarray(m1[k]), np.asarray(m2[k])])
                              for k in self.agent_ids}
        cat_t = lambda m1, m2: {k: tuple(m1[k]) + tuple(m2[k]) for k in self.agent_ids}
        return JointTrace(
            self.agents, self.start,
            cat(self.xs, other.xs), cat(self.ys, other.ys),
            cat(self.headings, other.headings), cat(self.speeds, other.speeds),
            cat(self.accels, other.accels), cat_t(self.lanes, other.lanes),
            cat_t(self.maneuvers, other.maneuvers), cat_t(self.macros, other.macros),
        )

    def lateral_accels(self, agent: int) -> np.ndarray:
        """|v * dheading/dt| per step, from finite differences."""
        h = self.headings[agent]
        if len(h) < 2:
            return np.zeros(len(h))
        dh = np.diff(h)
        dh = (dh + np.pi) % (2 * np.pi) - np.pi
        rate = np.concatenate([dh, dh[-1:]]) / DT
        return np.abs(self.speeds[agent] * rate)

    def jsonl_records(self) -> list[dict]:
        out = []
        for i in range(self.length):
            t = self.start + i
            rec = {"t": t, "agents": {}}
            for a in self.agent_ids:
                rec["agents"][str(a)] = {
                    "x": round(float(self.xs[a][i]), 4),
                    "y": round(float(self.ys[a][i]), 4),
                    "heading": round(float(self.headings[a][i]), 4),
                    "speed": round(float(self.speeds[a][i]), 4),
                    "accel": round(float(self.accels[a][i]), 4),
                    "lane": self.lanes[a][i],
                    "maneuver": self.maneuvers[a][i],
                    "macro": self.macros[a][i],
                }
            out.append(rec)
        return out


def label_runs(pairs: Sequence[tuple[str, str]], start: int) -> list[tuple[str, str, int, int]]:
    """Group per-timestep (maneuver, macro) pairs into maximal constant runs.

    Returns (maneuver, macro, first_t, last_t) tuples; every timestep belongs
    to exactly one run.
    """
    runs: list[tuple[str, str, int, int]] = []
    for i, pair in enumerate(pairs):
        t = start + i
        if runs and (runs[-1][0], runs[-1][1]) == pair:
            runs[-1] = (pair[0], pair[1], runs[-1][2], t)
        else:
            runs.append((pair[0], pair[1], t, t))
    return runs


def _pair_matches(needle: tuple[str | None, str | None], hay: tuple[str, str]) -> bool:
    man, mac = needle
    return (man is None or man == hay[0]) and (mac is None or mac == hay[1])


def subsequence_match(needle: JointTrace, haystack: JointTrace) -> bool:
    """Action-level containment of ``needle``'s ego behaviour in ``haystack``.

    True iff the needle's ego (maneuver, macro) run kinds appear, in order and
    contiguously, among the haystack's ego runs over the needle's time span.
    The haystack must cover the needle's span and share its agent roster.
    """
    if sorted(needle.agent_ids) != sorted(haystack.agent_ids):
        raise TraceError("agent rosters differ")
    if needle.length == 0:
        return True
    if needle.start < haystack.start or needle.horizon > haystack.horizon:
        raise TraceError("haystack does not cover the needle's time span")
    ego = needle.ego_id
    n_runs = [(m, M) for m, M, _, _ in label_runs(needle.labels(ego), needle.start)]
    window = haystack.subtrace(needle.start, needle.horizon)
    h_runs = [(m, M) for m, M, _, _ in label_runs(window.labels(ego), window.start)]
    return runs_contain(h_runs, n_runs)


def runs_contain(haystack_runs: Sequence[tuple[str | None, str | None]],
                 needle_runs: Sequence[tuple[str | None, str | None]]) -> bool:
    """Contiguous-sublist check on run kinds with None as a wildcard."""
    n, m = len(haystack_runs), len(needle_runs)
    if m == 0:
        return True
    for i in range(n - m + 1):
        if all(_pair_matches(needle_runs[j], haystack_runs[i + j]) for j in range(m)):
            return True
    return False


# ---------------------------------------------------------------------------
# Scenario schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentSpec:
    id: int
    ego: bool
    controller: str
    spawn: LocalState
    goal: Goal
    script: tuple[dict, ...] = ()


@dataclass(frozen=True)
class Scenario:
    name: str
    graph: LaneGraph
    agents: tuple[AgentSpec, ...]
    planner_config: Mapping[str, object] = field(default_factory=dict)
    description: str = ""
    document: Mapping[str, object] = field(default_factory=dict)

    @property
    def ego(self) -> AgentSpec:
        return next(a for a in self.agents if a.ego)

    @property
    def non_egos(self) -> list[AgentSpec]:
        return [a for a in self.agents if not a.ego]

    def agent(self, agent_id: int) -> AgentSpec:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise ScenarioError(f"unknown agent {agent_id}")


def _require(doc: Mapping, key: str, kind, where: str):
    if key not in doc:
        raise ScenarioError(f"{where}: missing required field {key!r}")
    val = doc[key]
    if kind is float:
        if not isinstance(val, (int, float)) or isinstance(val, bool):
            raise ScenarioError(f"{where}: field {key!r} must be a number")
        return float(val)
    if not isinstance(val, kind):
        raise ScenarioError(f"{where}: field {key!r} must be {kind.__name__}")
    return val


def _resolve_goal(agent_id: int, spec: Mapping, graph: LaneGraph) -> Goal:
    where = f"agent {agent_id} goal"
    if "box" in spec:
        box = spec["box"]
        if (not isinstance(box, (list, tuple)) or len(box) != 4
                or not all(isinstance(v, (int, float)) for v in box)):
            raise ScenarioError(f"{where}: box must be [x0, y0, x1, y1]")
        return Goal(agent=agent_id, box=tuple(float(v) for v in box))
    if "lane_end" in spec:
        lane = graph.lane(str(spec["lane_end"]))
        ex, ey = lane.end
        h = lane.heading_at(lane.length)
        depth, half = 10.0, 0.6 * lane.width
        # box stretching `depth` back along the lane's final heading
        xs = [ex, ex - depth * math.cos(h)]
        ys = [ey, ey - depth * math.sin(h)]
        return Goal(agent=agent_id,
                    box=(min(xs) - half, min(ys) - half, max(xs) + half, max(ys) + half))
    raise ScenarioError(f"{where}: needs either 'box' or 'lane_end'")


def _goal_on_road(goal: Goal, graph: LaneGraph) -> bool:
    cx, cy = goal.center
    for lane in graph.lanes.values():
        s, off = lane.project((cx, cy))
        p = lane.point_at(s)
        if float(np.hypot(p[0] - cx, p[1] - cy)) <= lane.width:
            return True
    return False


def load_scenario(document: str | Mapping) -> Scenario:
    """Parse and validate a scenario JSON document."""
    if isinstance(document, str):
        try:
            doc = json.loads(document)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"invalid JSON: {e}") from None
    else:
        doc = dict(document)
    if doc.get("format") != SCENARIO_FORMAT:
        raise ScenarioError(f"unsupported format {doc.get('format')!r}, "
                            f"expected {SCENARIO_FORMAT!r}")
    name = _require(doc, "name", str, "scenario")

    lanes = []
    for ld in _require(doc, "lanes", list, "scenario"):
        lane_id = _require(ld, "id", str, "lane")
        lanes.append(Lane(lane_id, _require(ld, "centerline", list, f"lane {lane_id!r}"),
                          _require(ld, "width", float, f"lane {lane_id!r}"),
                          _require(ld, "speed_limit", float, f"lane {lane_id!r}")))

    conns: list[Connection] = []
    for cd in doc.get("connections", []):
        conns.append(Connection(_require(cd, "from", str, "connection"),
                                _require(cd, "to", str, "connection"),
                                _require(cd, "kind", str, "connection")))
    # auto-complete missing adjacency mirrors before graph validation
    mirror = {"left-adjacent": "right-adjacent", "right-adjacent": "left-adjacent"}
    have = {(c.src, c.dst, c.kind) for c in conns}
    for c in list(conns):
        if c.kind in mirror and (c.dst, c.src, mirror[c.kind]) not in have:
            conns.append(Connection(c.dst, c.src, mirror[c.kind]))
    graph = LaneGraph(lanes, conns)

    agents: list[AgentSpec] = []
    seen_ids: set[int] = set()
    for ad in _require(doc, "agents", list, "scenario"):
        aid = int(_require(ad, "id", int, "agent"))
        if aid in seen_ids:
            raise ScenarioError(f"duplicate agent id {aid}")
        seen_ids.add(aid)
        controller = _require(ad, "controller", str, f"agent {aid}")
        if controller not in CONTROLLER_KINDS:
            raise ScenarioError(f"agent {aid}: unknown controller {controller!r}")
        sp = _require(ad, "spawn", dict, f"agent {aid}")
        pos = (_require(sp, "x", float, f"agent {aid} spawn"),
               _require(sp, "y", float, f"agent {aid} spawn"))
        lane_id = graph.nearest_lane(pos)
        lane = graph.lane(lane_id)
        _, off = lane.project(pos)
        if abs(off) > lane.width:
            raise ScenarioError(f"agent {aid}: spawn {pos} is off-road")
        spawn = LocalState(position=pos,
                           heading=_require(sp, "heading", float, f"agent {aid} spawn"),
                           speed=_require(sp, "speed", float, f"agent {aid} spawn"),
                           acceleration=0.0, lane=lane_id, timestep=0)
        goal = _resolve_goal(aid, _require(ad, "goal", dict, f"agent {aid}"), graph)
        if not _goal_on_road(goal, graph):
            raise ScenarioError(f"agent {aid}: unreachable goal (region off-road)")
        reach = graph.reachable_lanes(lane_id)
        if not any(_goal_touches_lane(goal, graph.lane(lid)) for lid in reach):
            raise ScenarioError(f"agent {aid}: unreachable goal (no lane route)")
        script = tuple(dict(s) for s in ad.get("script", []))
        agents.append(AgentSpec(id=aid, ego=bool(ad.get("ego", False)),
                                controller=controller, spawn=spawn, goal=goal,
                                script=script))

    egos = [a for a in agents if a.ego]
    if len(egos) != 1:
        raise ScenarioError(f"scenario must declare exactly one ego, got {len(egos)}")
    for i, a in enumerate(agents):
        for b in agents[i + 1:]:
            d = math.dist(a.spawn.position, b.spawn.position)
            if d < 2.5:
                raise ScenarioError(f"agents {a.id} and {b.id} spawn {d:.2f} m apart "
                                    "(overlapping)")

    return Scenario(name=name, graph=graph, agents=tuple(agents),
                    planner_config=dict(doc.get("planner", {})),
                    description=str(doc.get("description", "")),
                    document=doc)


def _goal_touches_lane(goal: Goal, lane: Lane) -> bool:
    x0, y0, x1, y1 = goal.box
    for i in range(len(lane.centerline)):
        x, y = lane.centerline[i]
        if x0 - lane.width <= x <= x1 + lane.width and y0 - lane.width <= y <= y1 + lane.width:
            return True
    # also sample interior points for long segments
    n = max(2, int(lane.length / 2.0))
    for s in np.linspace(0, lane.length, n):
        x, y = lane.point_at(float(s))
        if x0 <= x <= x1 and y0 <= y <= y1:
            return True
    return False


def serialize(scenario: Scenario) -> str:
    """Canonical JSON text; load_scenario(serialize(s)) reproduces s."""
    return json.dumps(scenario.document, sort_keys=True, indent=2)
