"""Ego reward model and MCTS macro-action planner.

The reward vector has five fixed components (time to goal, longitudinal and
lateral acceleration costs, collision, goal completion).  The planner runs
UCT over macro-action sequences; every rollout draws non-ego behaviour from
the goal/trajectory posterior, so the returned visit-proportional plan
distribution is conditional on the prediction model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .behavior import Kinematics, MacroAction, applicable_macros, synthesize
from .world import DT, Goal, JointTrace, LaneGraph, LocalState

if TYPE_CHECKING:  # runtime import would be circular; only annotations need it
    from .prediction import GoalPosterior

REWARD_COMPONENTS = ("time_to_goal", "long_accel_cost", "lat_accel_cost",
                     "collision", "goal_reached")

COLLISION_RADIUS = 1.25


class PlanningError(ValueError):
    """No applicable macro action at the search root."""


@dataclass(frozen=True)
class RewardVector:
    time_to_goal: float
    long_accel_cost: float
    lat_accel_cost: float
    collision: int
    goal_reached: int

    def __post_init__(self):
        if self.collision not in (0, 1) or self.goal_reached not in (0, 1):
            raise ValueError("indicator components must be 0 or 1")
        if self.long_accel_cost < 0 or self.lat_accel_cost < 0:
            raise ValueError("acceleration costs must be >= 0")

    def as_dict(self) -> dict[str, float]:
        return {c: float(getattr(self, c)) for c in REWARD_COMPONENTS}

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, c) for c in REWARD_COMPONENTS], dtype=float)


@dataclass(frozen=True)
class RewardWeights:
    """Scalarisation weights; costs carry negative weights.

    Defaults are tuned so the ego tolerates a lane change only when the
    expected time saving clearly pays for the lateral acceleration.
    """

    time_to_goal: float = -0.5
    long_accel_cost: float = -0.1
    lat_accel_cost: float = -1.0
    collision: float = -1000.0
    goal_reached: float = 10.0

    @staticmethod
    def from_mapping(m: Mapping[str, float] | None) -> "RewardWeights":
        if not m:
            return RewardWeights()
        base = RewardWeights()
        kw = {k: float(m.get(k, getattr(base, k))) for k in REWARD_COMPONENTS}
        return RewardWeights(**kw)


def scalarize(r: RewardVector, w: RewardWeights = RewardWeights()) -> float:
    return (w.time_to_goal * r.time_to_goal
            + w.long_accel_cost * r.long_accel_cost
            + w.lat_accel_cost * r.lat_accel_cost
            + w.collision * r.collision
            + w.goal_reached * r.goal_reached)


@dataclass(frozen=True)
class PlannerConfig:
    budget: int = 200
    depth: int = 4
    exploration: float = 1.4
    weights: RewardWeights = field(default_factory=RewardWeights)
    replan_period_s: float = 2.0
    macro_segment_s: float = 2.0
    stop_hold_s: float = 3.0
    reference_speed: float = 10.0  # for the unreached-goal time penalty
    plan_beta: float = 2.0         # Boltzmann sharpness of conditional plans

    @staticmethod
    def from_mapping(m: Mapping[str, object] | None) -> "PlannerConfig":
        if not m:
            return PlannerConfig()
        return PlannerConfig(
            budget=int(m.get("budget", 200)),
            depth=int(m.get("depth", 4)),
            exploration=float(m.get("exploration", 1.4)),
            weights=RewardWeights.from_mapping(m.get("weights")),
            replan_period_s=float(m.get("replan_period_s", 2.0)),
            macro_segment_s=float(m.get("macro_segment_s", 2.0)),
            stop_hold_s=float(m.get("stop_hold_s", 3.0)),
            reference_speed=float(m.get("reference_speed", 10.0)),
            plan_beta=float(m.get("plan_beta", 2.0)),
        )

    @property
    def replan_steps(self) -> int:
        return max(1, round(self.replan_period_s / DT))


# ---------------------------------------------------------------------------
# Reward evaluation
# ---------------------------------------------------------------------------


def _lateral_accels(headings: np.ndarray, speeds: np.ndarray) -> np.ndarray:
    if len(headings) < 2:
        return np.zeros(len(headings))
    dh = np.diff(headings)
    dh = (dh + np.pi) % (2 * np.pi) - np.pi
    rate = np.concatenate([dh, dh[-1:]]) / DT
    return np.abs(speeds * rate)


def reward_from_arrays(ego_x: np.ndarray, ego_y: np.ndarray,
                       ego_heading: np.ndarray, ego_speed: np.ndarray,
                       ego_accel: np.ndarray, goal: Goal,
                       others_xy: Sequence[tuple[np.ndarray, np.ndarray]] = (),
                       cross_pairs: Sequence[tuple[tuple[np.ndarray, np.ndarray],
                                                   tuple[np.ndarray, np.ndarray]]] = (),
                       reference_speed: float = 10.0) -> RewardVector:
    """Reward components from raw per-step arrays (ego plus optional others)."""
    n = len(ego_x)
    x0, y0, x1, y1 = goal.box
    inside = (ego_x >= x0) & (ego_x <= x1) & (ego_y >= y0) & (ego_y <= y1)
    hit = np.flatnonzero(inside)
    if hit.size:
        time_to_goal = float(hit[0]) * DT
        goal_reached = 1
    else:
        gx, gy = goal.center
        remaining = math.hypot(float(ego_x[-1]) - gx, float(ego_y[-1]) - gy)
        time_to_goal = n * DT + remaining / max(reference_speed, 0.1)
        goal_reached = 0
    long_cost = float(np.mean(np.abs(ego_accel))) if n else 0.0
    lat_cost = float(np.mean(_lateral_accels(ego_heading, ego_speed))) if n else 0.0
    collision = 0
    limit = (2.0 * COLLISION_RADIUS) ** 2
    for ox, oy in others_xy:
        m = min(n, len(ox))
        d2 = (ego_x[:m] - ox[:m]) ** 2 + (ego_y[:m] - oy[:m]) ** 2
        if d2.size and float(d2.min()) < limit:
            collision = 1
            break
    if not collision:
        for (ax, ay), (bx, by) in cross_pairs:
            m = min(len(ax), len(bx))
            d2 = (ax[:m] - bx[:m]) ** 2 + (ay[:m] - by[:m]) ** 2
            if d2.size and float(d2.min()) < limit:
                collision = 1
                break
    return RewardVector(time_to_goal=time_to_goal, long_accel_cost=long_cost,
                        lat_accel_cost=lat_cost, collision=collision,
                        goal_reached=goal_reached)


def reward(trace: JointTrace, ego_goal: Goal,
           reference_speed: float = 10.0) -> RewardVector:
    """Reward vector of a joint trace for the ego's goal.

    Collision fires when any two agents' 1.25 m discs overlap at any step.
    Unreached goals incur the horizon time plus a straight-line completion
    estimate at the reference speed.
    """
    ego = trace.ego_id
    others = [(trace.xs[a], trace.ys[a]) for a in trace.agent_ids if a != ego]
    non_ego_ids = [a for a in trace.agent_ids if a != ego]
    pairs = []
    for i, a in enumerate(non_ego_ids):
        for b in non_ego_ids[i + 1:]:
            pairs.append(((trace.xs[a], trace.ys[a]), (trace.xs[b], trace.ys[b])))
    return reward_from_arrays(trace.xs[ego], trace.ys[ego], trace.headings[ego],
                              trace.speeds[ego], trace.accels[ego], ego_goal,
                              others_xy=others, cross_pairs=pairs,
                              reference_speed=reference_speed)


# ---------------------------------------------------------------------------
# Plan distribution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanDistribution:
    """Candidate ego macro plans with visit-proportional probabilities."""

    plans: tuple[tuple[MacroAction, ...], ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if abs(sum(self.probs) - 1.0) > 1e-9:
            raise ValueError("plan probabilities must sum to 1")

    @property
    def mode(self) -> tuple[MacroAction, ...]:
        return self.plans[int(np.argmax(self.probs))]

    def sample(self, rng: np.random.Generator) -> tuple[MacroAction, ...]:
        i = int(rng.choice(len(self.plans), p=np.asarray(self.probs)))
        return self.plans[i]

    def as_dict(self) -> dict:
        return {"plans": [[repr(m) for m in plan] for plan in self.plans],
                "probs": list(self.probs)}


# ---------------------------------------------------------------------------
# MCTS
# ---------------------------------------------------------------------------


def _goal_reachable_from(graph: LaneGraph, lane_id: str, goal: Goal) -> bool:
    x0, y0, x1, y1 = goal.box
    for lid in graph.reachable_lanes(lane_id):
        lane = graph.lane(lid)
        n = max(2, int(lane.length / 2.0))
        for i in range(n):
            x, y = lane.point_at(lane.length * i / (n - 1))
            if x0 <= x <= x1 and y0 <= y <= y1:
                return True
    return False


def _planner_macros(state: LocalState, graph: LaneGraph, kin: Kinematics,
                    cfg: PlannerConfig, goal: Goal | None = None,
                    prev: MacroAction | None = None,
                    propose_stop: bool = True) -> list[MacroAction]:
    """Applicable macros with planning-scale parameters, in stable order.

    The proposal set prunes branches that provably abandon the goal (turning
    onto a lane from which the goal region is unreachable), immediately
    reverse the previous lane change, chain stops, or stop for no reason:
    without the pruning the goal-forfeiture penalty of such branches poisons
    every ancestor's running mean and starves the real candidates.
    """
    reverse = {"ChangeLeft": "ChangeRight", "ChangeRight": "ChangeLeft"}
    out = []
    for m in applicable_macros(state, graph, kin):
        if prev is not None and prev.kind in reverse and m.kind == reverse[prev.kind]:
            continue
        if prev is not None and prev.kind == "Stop" and m.kind == "Stop":
            continue
        if m.kind == "Continue":
            out.append(MacroAction.make("Continue", duration_s=cfg.macro_segment_s))
        elif m.kind == "Stop":
            if propose_stop or state.speed < 3.0:
                out.append(MacroAction.make("Stop", hold_s=cfg.stop_hold_s))
        elif m.kind == "Exit" and goal is not None:
            if _goal_reachable_from(graph, m.get("lane"), goal):
                out.append(m)
        elif m.kind in ("ChangeLeft", "ChangeRight") and goal is not None:
            side = graph.left_of(state.lane) if m.kind == "ChangeLeft" \
                else graph.right_of(state.lane)
            if side is not None and _goal_reachable_from(graph, side, goal):
                out.append(m)
        else:
            out.append(m)
    # a macro set is never empty away from the goal: continuing (or holding
    # still at a dead end) is always proposable
    if not out:
        out.append(MacroAction.make("Stop", hold_s=cfg.stop_hold_s))
    return sorted(out, key=repr)


class _Edge:
    """Closed-loop ego arrays for one macro from a given plan prefix."""

    __slots__ = ("xs", "ys", "hs", "vs", "ac", "end_state", "steps")

    def __init__(self, xs, ys, hs, vs, ac, end_state, steps):
        self.xs, self.ys, self.hs, self.vs, self.ac = xs, ys, hs, vs, ac
        self.end_state = end_state
        self.steps = steps


def _simulate_edge(graph: LaneGraph, kin: Kinematics, state: LocalState,
                   macro: MacroAction, start_t: int, horizon: int, tau: int,
                   draw_rollouts, prefix_positions) -> _Edge | None:
    """Run one macro closed-loop against the drawn non-ego trajectories."""
    from .behavior import MacroExecutor, follow_ceiling

    try:
        ex = MacroExecutor(graph, state, kin, [macro])
    except Exception:
        return None
    xs, ys, hs, vs, ac = [], [], [], [], []
    t = start_t
    try:
        while t < horizon and not ex.plan_exhausted:
            idx = t - tau - 1
            if idx < 0:
                others = prefix_positions
            else:
                others = [(float(r.xs[min(idx, len(r.xs) - 1)]),
                           float(r.ys[min(idx, len(r.ys) - 1)]),
                           float(r.headings[min(idx, len(r.headings) - 1)]))
                          for r in draw_rollouts]
            ceiling = follow_ceiling(kin, graph, ex.lookahead(), others)
            st, _, _ = ex.step(ceiling)
            xs.append(st.position[0])
            ys.append(st.position[1])
            hs.append(st.heading)
            vs.append(st.speed)
            ac.append(st.acceleration)
            t += 1
    except Exception:
        return None
    if not xs:
        return None
    end = LocalState(position=(xs[-1], ys[-1]), heading=hs[-1],
                     speed=max(vs[-1], 0.0), acceleration=ac[-1],
                     lane=ex.state.lane, timestep=t)
    return _Edge(np.array(xs), np.array(ys), np.array(hs), np.array(vs),
                 np.array(ac), end, t - start_t)


class _Node:
    __slots__ = ("children", "visits", "macros", "blacklist")

    def __init__(self):
        self.children: dict[MacroAction, "_Stats"] = {}
        self.visits = 0
        self.macros: list[MacroAction] | None = None
        self.blacklist: set[MacroAction] = set()


class _Stats:
    __slots__ = ("n", "w", "best", "node")

    def __init__(self):
        self.n = 0
        self.w = 0.0
        self.best = -math.inf
        self.node = _Node()


def mcts_plan(graph: LaneGraph, ego_state: LocalState, ego_goal: Goal,
              posterior: "GoalPosterior", horizon: int, seed,
              cfg: PlannerConfig = PlannerConfig(),
              kin: Kinematics = Kinematics(),
              budget: int | None = None,
              root_values: dict | None = None) -> PlanDistribution:
    """UCT search over macro sequences to ``cfg.depth``.

    Each rollout draws one joint non-ego future from the posterior, executes
    the tree path closed-loop (car-following) against it and scores the joint
    trajectory with the scalarised reward.  The returned distribution is the
    frequency distribution of executed root-to-leaf plans, with the
    principal variation first; deterministic given the seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed) & 0x7FFFFFFF, 0x9C7)))
    budget = int(budget if budget is not None else cfg.budget)
    if budget < 1:
        raise PlanningError("budget must be >= 1")
    tau = posterior.tau
    start_t = ego_state.timestep
    total_steps = max(horizon - start_t, 1)
    if ego_goal.contains(*ego_state.position):
        # already at the goal: hold course
        plan = (MacroAction.make("Continue", duration_s=cfg.macro_segment_s),)
        return PlanDistribution(plans=(plan,), probs=(1.0,))
    if not _planner_macros(ego_state, graph, kin, cfg, ego_goal):
        raise PlanningError(f"no applicable macro at the root state "
                            f"(lane {ego_state.lane!r})")

    # relevance: does a predicted trajectory ever touch the ego's world?
    reach = graph.reachable_lanes(ego_state.lane)
    ex_, ey_ = ego_state.position
    rel_cache: dict[tuple[int, int, int], bool] = {}

    def relevant(agent: int, gi: int, ti: int) -> bool:
        key = (agent, gi, ti)
        if key not in rel_cache:
            roll = posterior.traj_for(agent, gi, ti).rollout
            touches = any(l in reach for l in set(roll.lanes))
            if not touches:
                d2 = (roll.xs - ex_) ** 2 + (roll.ys - ey_) ** 2
                touches = bool(d2.size) and float(d2.min()) < 30.0 ** 2
            rel_cache[key] = touches
        return rel_cache[key]

    prefix_positions = []
    stop_reason = False
    ego_lane = graph.lane(ego_state.lane)
    s_ego, _ = ego_lane.project(ego_state.position)
    for a in posterior.agents:
        st = posterior.prefix.state(a, tau)
        prefix_positions.append((st.position[0], st.position[1], st.heading))
        s_o, off_o = ego_lane.project(st.position)
        ahead = s_o - s_ego
        if abs(off_o) < 0.5 * ego_lane.width + 0.3 and 0 < ahead < 25.0 \
                and st.speed < 0.5 * ego_lane.speed_limit:
            stop_reason = True

    root = _Node()
    edge_cache: dict[tuple, _Edge | None] = {}
    values: list[float] = []
    plan_counts: dict[tuple[MacroAction, ...], int] = {}
    plan_values: dict[tuple[MacroAction, ...], float] = {}
    c = cfg.exploration
    ego_id_goal = ego_goal
    # for a deterministic (single-draw) posterior each path's value is exact,
    # so back the search with the best-seen value instead of the mean
    use_max = posterior.deterministic
    warmup = int(0.3 * budget)

    def norm_bounds() -> tuple[float, float]:
        if len(values) < 4:
            lo = min(values) if values else 0.0
            hi = max(values) if values else 1.0
        else:
            arr = np.sort(np.asarray(values))
            lo = float(arr[int(0.25 * (len(arr) - 1))])
            hi = float(arr[-1])
        if hi - lo < 1e-9:
            hi = lo + 1.0
        return lo, hi

    for it in range(budget):
        indices = posterior.draw_indices(rng, alpha=0.0)
        rel_key = tuple(sorted((a, gi, ti) for a, (gi, ti) in indices.items()
                               if relevant(a, gi, ti)))
        draw_rollouts = [posterior.traj_for(a, gi, ti).rollout
                         for a, (gi, ti) in sorted(indices.items())]
        node = root
        state = ego_state
        t = start_t
        path: list[MacroAction] = []
        edges: list[_Edge] = []
        lo, hi = norm_bounds()
        for depth in range(cfg.depth):
            if t >= horizon or ego_goal.contains(*state.position):
                break
            if node.macros is None:
                node.macros = _planner_macros(state, graph, kin, cfg, ego_goal,
                                              prev=path[-1] if path else None,
                                              propose_stop=stop_reason)
            macros = [m for m in node.macros if m not in node.blacklist]
            if not macros:
                break
            edge = None
            expanded_now = False
            while macros:
                unexpanded = [m for m in macros if m not in node.children]
                if depth == 0 and it < warmup:
                    # round-robin over root children during the warmup phase
                    macro = macros[it % len(macros)]
                    expanded_now = macro not in node.children
                elif unexpanded:
                    macro = unexpanded[0]
                    expanded_now = True
                else:
                    logn = math.log(max(node.visits, 1))

                    def uct(m):
                        st = node.children[m]
                        raw = st.best if use_max else st.w / st.n
                        q = (raw - lo) / (hi - lo)
                        return (q + c * math.sqrt(logn / st.n), repr(m))

                    macro = max(macros, key=uct)
                    expanded_now = False
                ck = (tuple(path) + (macro,), rel_key)
                if ck not in edge_cache:
                    edge_cache[ck] = _simulate_edge(graph, kin, state, macro, t,
                                                    horizon, tau, draw_rollouts,
                                                    prefix_positions)
                edge = edge_cache[ck]
                if edge is None:
                    node.blacklist.add(macro)
                    macros = [m for m in macros if m != macro]
                    continue
                break
            if edge is None:
                break
            path.append(macro)
            edges.append(edge)
            node.children.setdefault(macro, _Stats())
            node = node.children[macro].node
            state = edge.end_state
            t = edge.end_state.timestep
            if expanded_now:
                break

        # extension to the horizon for evaluation
        if t < horizon and not ego_goal.contains(*state.position):
            ext = MacroAction.make("Continue", duration_s=(horizon - t) * DT)
            ck = (tuple(path) + ("__ext__",), rel_key)
            if ck not in edge_cache:
                edge_cache[ck] = _simulate_edge(graph, kin, state, ext, t,
                                                horizon, tau, draw_rollouts,
                                                prefix_positions)
            if edge_cache[ck] is not None:
                edges.append(edge_cache[ck])
        elif t < horizon:
            # already in the goal region: pad by holding course
            ext = MacroAction.make("Continue", duration_s=(horizon - t) * DT)
            ck = (tuple(path) + ("__pad__",), rel_key)
            if ck not in edge_cache:
                edge_cache[ck] = _simulate_edge(graph, kin, state, ext, t,
                                                horizon, tau, draw_rollouts,
                                                prefix_positions)
            if edge_cache[ck] is not None:
                edges.append(edge_cache[ck])

        if edges:
            ego_x = np.concatenate([e.xs for e in edges])
            ego_y = np.concatenate([e.ys for e in edges])
            ego_h = np.concatenate([e.hs for e in edges])
            ego_v = np.concatenate([e.vs for e in edges])
            ego_a = np.concatenate([e.ac for e in edges])
        else:
            ego_x = np.array([ego_state.position[0]])
            ego_y = np.array([ego_state.position[1]])
            ego_h = np.array([ego_state.heading])
            ego_v = np.array([ego_state.speed])
            ego_a = np.array([0.0])
        m = min(total_steps, len(ego_x))
        # ego index i is timestep start_t+1+i; draw index j is timestep tau+1+j
        off = start_t - tau
        others_xy = []
        for r in draw_rollouts:
            ox = r.xs[off:] if off < len(r.xs) else r.xs[-1:]
            oy = r.ys[off:] if off < len(r.ys) else r.ys[-1:]
            others_xy.append((ox[:m], oy[:m]))
        r = reward_from_arrays(ego_x[:m], ego_y[:m], ego_h[:m], ego_v[:m],
                               ego_a[:m], ego_id_goal, others_xy=others_xy,
                               reference_speed=cfg.reference_speed)
        value = scalarize(r, cfg.weights)
        values.append(value)

        node = root
        node.visits += 1
        for macro in path:
            st = node.children[macro]
            st.n += 1
            st.w += value
            st.best = max(st.best, value)
            node = st.node
            node.visits += 1
        plan = tuple(path)
        if plan:
            plan_counts[plan] = plan_counts.get(plan, 0) + 1
            plan_values[plan] = max(plan_values.get(plan, -math.inf), value)

    if not plan_counts:
        raise PlanningError("search produced no feasible plan")
    if root_values is not None:
        for macro, st in root.children.items():
            if st.n > 0:
                root_values[repr(macro)] = (st.best if use_max
                                            else st.w / st.n)

    # principal variation: follow max-visit children from the root
    pv: list[MacroAction] = []
    node = root
    while node.children:
        if use_max:
            macro, st = max(node.children.items(),
                            key=lambda kv: (kv[1].best, kv[1].n, repr(kv[0])))
        else:
            macro, st = max(node.children.items(),
                            key=lambda kv: (kv[1].n, repr(kv[0])))
        if st.n == 0:
            break
        pv.append(macro)
        node = st.node
    pv_plan = tuple(pv)
    plan_counts.setdefault(pv_plan, 0)

    def canonical(plan: tuple[MacroAction, ...]) -> tuple[MacroAction, ...]:
        # trailing plain Continues are execution no-ops (rollouts auto-extend)
        out = list(plan)
        while out and out[-1].kind == "Continue" \
                and set(k for k, _ in out[-1].params) <= {"duration_s"}:
            out.pop()
        return tuple(out)

    if use_max:
        # deterministic draw: visit counts concentrate on the argmax and carry
        # no behavioural variation. Weight *behaviour classes* (the non-
        # Continue macro skeleton) by their best value instead, so timing
        # variants of one behaviour do not multiply its probability.
        classes: dict[tuple, tuple[float, tuple[MacroAction, ...]]] = {}
        for p, v in plan_values.items():
            cp = canonical(p)
            key = tuple(repr(m) for m in cp if m.kind != "Continue")
            cur = classes.get(key)
            if cur is None or v > cur[0] or (v == cur[0] and repr(cp) < repr(cur[1])):
                classes[key] = (v, cp)
        vbest = max(v for v, _ in classes.values())
        counts = {rep: 1000.0 * math.exp(cfg.plan_beta * (v - vbest))
                  for v, rep in classes.values()}
        pv_plan = canonical(pv_plan)
        if pv_plan not in counts:
            key = tuple(repr(m) for m in pv_plan if m.kind != "Continue")
            if key in classes:
                pv_plan = classes[key][1]
    else:
        counts = {}
        for p, n in plan_counts.items():
            cp = canonical(p)
            counts[cp] = counts.get(cp, 0.0) + float(n)
        pv_plan = canonical(pv_plan)
    # the principal variation gets at least one virtual visit so it is always
    # drawable and always listed first
    counts[pv_plan] = max(counts.get(pv_plan, 0.0), 1.0)
    items = sorted(counts.items(), key=lambda kv: (-kv[1], repr(kv[0])))
    ordered = [pv_plan] + [p for p, _ in items if p != pv_plan]
    # drop the long tail of barely-visited plans (keep 95% of the mass) but
    # retain the strongest plan per distinct opening macro so smoothing can
    # still reach every root alternative
    total = sum(counts[p] for p in ordered)
    kept, cum = [], 0
    for p in ordered:
        kept.append(p)
        cum += counts[p]
        if cum >= 0.95 * total and len(kept) >= 2:
            break
    openings = {p[0] for p in kept if p}
    for p in ordered:
        if p and p[0] not in openings:
            kept.append(p)
            openings.add(p[0])
    total = sum(counts[p] for p in kept)
    plans = tuple(kept)
    probs = tuple(counts[p] / total for p in kept)
    s = sum(probs)
    probs = tuple(p / s for p in probs)
    return PlanDistribution(plans=plans, probs=probs)


def enumerate_relevant_combos(graph: LaneGraph, ego_state: LocalState,
                              posterior: "GoalPosterior",
                              cap: int = 12) -> list[tuple[dict, float]]:
    """Joint (goal, trajectory) draw combos over *relevant* agents.

    Agents whose predicted trajectories never touch the ego's reachable lanes
    (nor come within 30 m) are pinned to their most likely draw; the rest are
    enumerated jointly. Returns (indices, probability) pairs covering at
    least 97% of the mass, capped and renormalised.
    """
    reach = graph.reachable_lanes(ego_state.lane)
    ex_, ey_ = ego_state.position

    def relevant(agent: int, gi: int, ti: int) -> bool:
        roll = posterior.traj_for(agent, gi, ti).rollout
        if any(l in reach for l in set(roll.lanes)):
            return True
        d2 = (roll.xs - ex_) ** 2 + (roll.ys - ey_) ** 2
        return bool(d2.size) and float(d2.min()) < 30.0 ** 2

    combos: list[tuple[dict, float]] = [({}, 1.0)]
    map_idx = posterior.map_indices()
    for agent in posterior.agents:
        ap = posterior.per_agent[agent]
        options = []
        for gi in range(len(ap.goals)):
            cond = posterior.traj_conditional(agent, gi)
            for ti in range(len(ap.trajectories[gi])):
                p = float(ap.goal_probs[gi] * cond[ti])
                if p > 1e-6 and relevant(agent, gi, ti):
                    options.append(((gi, ti), p))
        if not options:
            options = [(map_idx[agent], 1.0)]
        total = sum(p for _, p in options)
        options = [(idx, p / total) for idx, p in options]
        combos = [({**c, agent: idx}, cp * p)
                  for c, cp in combos for idx, p in options]
        combos.sort(key=lambda cp: (-cp[1], str(sorted(cp[0].items()))))
        if len(combos) > cap:
            combos = combos[:cap]
    combos.sort(key=lambda cp: (-cp[1], str(sorted(cp[0].items()))))
    kept, cum = [], 0.0
    for c, p in combos:
        kept.append((c, p))
        cum += p
        if cum >= 0.97 and len(kept) >= 1:
            break
    total = sum(p for _, p in kept)
    return [(c, p / total) for c, p in kept]


def expected_best_plan(graph: LaneGraph, ego_state: LocalState, ego_goal: Goal,
                       posterior: "GoalPosterior", horizon: int, seed,
                       cfg: PlannerConfig = PlannerConfig(),
                       kin: Kinematics = Kinematics()) -> PlanDistribution:
    """Noise-free planning over a small draw mixture.

    Runs one deterministic conditional search per relevant draw combination
    and ranks the root openings by their exact expected value; mean-backup
    UCT over a mixed stream cannot resolve close races at small budgets.
    """
    if ego_goal.contains(*ego_state.position):
        plan = (MacroAction.make("Continue", duration_s=cfg.macro_segment_s),)
        return PlanDistribution(plans=(plan,), probs=(1.0,))
    combos = enumerate_relevant_combos(graph, ego_state, posterior)
    opening_values: dict[str, float] = {}
    opening_plans: dict[str, tuple] = {}
    opening_mass: dict[str, float] = {}
    for ci, (indices, prob) in enumerate(combos):
        restricted = posterior.restricted(indices)
        stats: dict = {}
        dist = mcts_plan(graph, ego_state, ego_goal, restricted, horizon,
                         seed=(int(seed) * 31 + ci), cfg=cfg, kin=kin,
                         root_values=stats)
        for opening, value in stats.items():
            opening_values[opening] = opening_values.get(opening, 0.0) + prob * value
            opening_mass[opening] = opening_mass.get(opening, 0.0) + prob
        best = dist.plans[0]
        key = repr(best[0]) if best else "()"
        if key not in opening_plans:
            opening_plans[key] = best
    if not opening_values:
        raise PlanningError("no applicable macro at the root state")
    # openings missing from some combo were infeasible there; discount them
    full = [(o, v) for o, v in opening_values.items()
            if opening_mass[o] >= 0.999]
    pool = full if full else list(opening_values.items())
    pool.sort(key=lambda ov: (-ov[1], ov[0]))
    plans = []
    values = []
    for opening, value in pool:
        plan = opening_plans.get(opening)
        if plan is None or not plan or repr(plan[0]) != opening:
            plan = (eval_repr_macro(opening),)
        plans.append(plan)
        values.append(value)
    vmax = values[0]
    weights = [math.exp(2.0 * (v - vmax)) for v in values]
    total = sum(weights)
    probs = tuple(w / total for w in weights)
    s = sum(probs)
    return PlanDistribution(plans=tuple(plans), probs=tuple(p / s for p in probs))


def eval_repr_macro(text: str) -> MacroAction:
    """Rebuild a macro from its compact repr (used for rare fallbacks)."""
    if "(" not in text or text.endswith("()"):
        kind = text.split("(")[0]
        return MacroAction.make(kind)
    kind, rest = text.split("(", 1)
    rest = rest.rstrip(")")
    params = {}
    for part in rest.split(","):
        if not part:
            continue
        k, v = part.split("=", 1)
        try:
            params[k] = float(v) if "." in v else int(v)
        except ValueError:
            params[k] = v
    return MacroAction.make(kind, **params)
