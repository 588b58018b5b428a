"""Probabilistic model of future joint states.

Goal recognition works by rational inverse planning: a goal is likely when
the observed prefix plus an optimal completion costs little more than the
optimal plan from scratch.  Each goal carries up to three predicted
trajectories (optimal, late-lane-change, conservative-speed).  Additive
smoothing interpolates the categorical distributions toward uniform so every
branch stays sampleable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .behavior import (
    Kinematics,
    MacroAction,
    MacroExecutor,
    Rollout,
    follow_ceiling,
    rollout_open_loop,
)
from .planner import (
    PlannerConfig,
    RewardWeights,
    mcts_plan,
    reward_from_arrays,
    scalarize,
)
from .world import (
    DT,
    AgentMeta,
    Goal,
    JointTrace,
    Lane,
    LaneGraph,
    LocalState,
    Scenario,
)


class PredictionError(ValueError):
    pass


@dataclass(frozen=True)
class SmoothingParams:
    alpha: float
    d: int

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.d < 1:
            raise ValueError("d must be >= 1")


def smooth(theta: Sequence[float], alpha: float) -> np.ndarray:
    """Additive smoothing: phi_i = (theta_i + alpha) / (1 + d * alpha)."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    t = np.asarray(theta, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("theta must be a non-empty vector")
    if np.any(t < 0):
        raise ValueError("theta entries must be >= 0")
    if abs(float(t.sum()) - 1.0) > 1e-9:
        raise ValueError("theta must sum to 1")
    d = t.size
    return (t + alpha) / (1.0 + d * alpha)


@dataclass(frozen=True)
class PredictionConfig:
    beta: float = 1.0              # rationality for goal recognition
    traj_beta: float = 5.0         # sharper softmax over trajectory variants
    smooth_levels: str = "goal"    # goal | trajectory | both
    conservative_factor: float = 0.7
    max_trajectories: int = 3
    # structural prior: goals needing lateral moves are a priori less likely
    goal_prior_change_penalty: float = 1.2


@dataclass(frozen=True)
class TrajectoryPrediction:
    """One predicted future for one agent, from tau+1 to the horizon."""

    agent: int
    goal_index: int
    variant: str
    plan: tuple[MacroAction, ...]
    rollout: Rollout
    cost: float
    prob: float = 0.0

    @property
    def xs(self):
        return self.rollout.xs

    @property
    def ys(self):
        return self.rollout.ys


@dataclass
class AgentPrediction:
    agent: int
    goals: list[Goal]
    goal_probs: np.ndarray
    trajectories: list[list[TrajectoryPrediction]]  # per goal, conditionals sum to 1
    warning: bool = False


class GoalPosterior:
    """Per-agent goal marginals and per-goal trajectory conditionals.

    Conditioned on the (windowed) observed prefix ending at ``tau``; predicted
    trajectories run from tau+1 to ``horizon``.
    """

    def __init__(self, prefix: JointTrace, horizon: int,
                 per_agent: Mapping[int, AgentPrediction],
                 smooth_levels: str = "both"):
        self.prefix = prefix
        self.tau = prefix.horizon
        self.horizon = horizon
        self.per_agent = dict(sorted(per_agent.items()))
        self.smooth_levels = smooth_levels
        for ap in self.per_agent.values():
            if abs(float(ap.goal_probs.sum()) - 1.0) > 1e-9:
                raise PredictionError(f"agent {ap.agent}: goal probabilities must sum to 1")
            for trajs in ap.trajectories:
                if not 1 <= len(trajs) <= 3:
                    raise PredictionError(f"agent {ap.agent}: 1..3 trajectories per goal")
                s = sum(t.prob for t in trajs)
                if abs(s - 1.0) > 1e-9:
                    raise PredictionError(f"agent {ap.agent}: trajectory conditionals must sum to 1")

    @property
    def agents(self) -> list[int]:
        return list(self.per_agent)

    @property
    def deterministic(self) -> bool:
        """True when every agent has exactly one goal and one trajectory."""
        return all(len(ap.goals) == 1 and all(len(t) == 1 for t in ap.trajectories)
                   for ap in self.per_agent.values())

    def goal_marginal(self, agent: int, alpha: float = 0.0) -> np.ndarray:
        p = self.per_agent[agent].goal_probs
        if alpha > 0 and self.smooth_levels in ("goal", "both"):
            return smooth(p, alpha)
        return p.copy()

    def traj_conditional(self, agent: int, goal_index: int,
                         alpha: float = 0.0) -> np.ndarray:
        trajs = self.per_agent[agent].trajectories[goal_index]
        p = np.array([t.prob for t in trajs])
        if alpha > 0 and self.smooth_levels in ("trajectory", "both"):
            return smooth(p, alpha)
        return p

    def draw_indices(self, rng: np.random.Generator,
                     alpha: float = 0.0) -> dict[int, tuple[int, int]]:
        out: dict[int, tuple[int, int]] = {}
        for agent in self.per_agent:
            pg = self.goal_marginal(agent, alpha)
            gi = int(rng.choice(len(pg), p=pg / pg.sum()))
            pt = self.traj_conditional(agent, gi, alpha)
            ti = int(rng.choice(len(pt), p=pt / pt.sum()))
            out[agent] = (gi, ti)
        return out

    def traj_for(self, agent: int, gi: int, ti: int) -> TrajectoryPrediction:
        return self.per_agent[agent].trajectories[gi][ti]

    def sample_joint(self, rng: np.random.Generator,
                     alpha: float = 0.0) -> dict[int, TrajectoryPrediction]:
        return {a: self.traj_for(a, gi, ti)
                for a, (gi, ti) in self.draw_indices(rng, alpha).items()}

    def map_indices(self) -> dict[int, tuple[int, int]]:
        out = {}
        for agent, ap in self.per_agent.items():
            gi = int(np.argmax(ap.goal_probs))
            ti = int(np.argmax([t.prob for t in ap.trajectories[gi]]))
            out[agent] = (gi, ti)
        return out

    def restricted(self, indices: Mapping[int, tuple[int, int]]) -> "GoalPosterior":
        """Degenerate posterior that always yields the given draws."""
        per_agent = {}
        for agent, ap in self.per_agent.items():
            gi, ti = indices[agent]
            traj = ap.trajectories[gi][ti]
            fixed = TrajectoryPrediction(agent=agent, goal_index=0,
                                         variant=traj.variant, plan=traj.plan,
                                         rollout=traj.rollout, cost=traj.cost,
                                         prob=1.0)
            per_agent[agent] = AgentPrediction(
                agent=agent, goals=[ap.goals[gi]], goal_probs=np.array([1.0]),
                trajectories=[[fixed]], warning=ap.warning)
        return GoalPosterior(self.prefix, self.horizon, per_agent,
                             smooth_levels=self.smooth_levels)

    def export(self) -> dict:
        out = {}
        for agent, ap in self.per_agent.items():
            goals = []
            for gi, goal in enumerate(ap.goals):
                goals.append({
                    "box": list(goal.box),
                    "p": float(ap.goal_probs[gi]),
                    "trajectories": [
                        {"variant": t.variant, "p": float(t.prob),
                         "plan": [repr(m) for m in t.plan]}
                        for t in ap.trajectories[gi]
                    ],
                })
            out[str(agent)] = {"goals": goals, "warning": ap.warning}
        return out


# ---------------------------------------------------------------------------
# Goal enumeration
# ---------------------------------------------------------------------------


def _lane_end_box(lane: Lane) -> tuple[float, float, float, float]:
    ex, ey = lane.end
    h = lane.heading_at(lane.length)
    depth, half = 10.0, 0.6 * lane.width
    xs = [ex, ex - depth * math.cos(h)]
    ys = [ey, ey - depth * math.sin(h)]
    return (min(xs) - half, min(ys) - half, max(xs) + half, max(ys) + half)


def goals_from_lane(graph: LaneGraph, lane_id: str, agent: int) -> list[Goal]:
    """Reachable lane-terminal goals, with parallel lane ends merged."""
    terminals = graph.terminal_lanes(lane_id)
    if not terminals:
        return []
    clusters: list[list[str]] = []
    for lid in terminals:
        end = graph.lane(lid).end
        placed = False
        for cl in clusters:
            for other in cl:
                o = graph.lane(other).end
                if math.hypot(end[0] - o[0], end[1] - o[1]) <= 1.2 * graph.lane(lid).width:
                    cl.append(lid)
                    placed = True
                    break
            if placed:
                break
        if not placed:
            clusters.append([lid])
    goals = []
    for cl in clusters:
        boxes = [_lane_end_box(graph.lane(lid)) for lid in cl]
        x0 = min(b[0] for b in boxes)
        y0 = min(b[1] for b in boxes)
        x1 = max(b[2] for b in boxes)
        y1 = max(b[3] for b in boxes)
        goals.append(Goal(agent=agent, box=(x0, y0, x1, y1)))
    return sorted(goals, key=lambda g: g.box)


def enumerate_goals(scenario: Scenario, agent: int) -> list[Goal]:
    spec = scenario.agent(agent)
    return goals_from_lane(scenario.graph, spec.spawn.lane, agent)


# ---------------------------------------------------------------------------
# Route planning for single agents
# ---------------------------------------------------------------------------


def _goal_lanes(graph: LaneGraph, goal: Goal) -> set[str]:
    x0, y0, x1, y1 = goal.box
    out = set()
    for lane in graph.lanes.values():
        n = max(2, int(lane.length / 2.0))
        for s in np.linspace(0, lane.length, n):
            x, y = lane.point_at(float(s))
            if x0 <= x <= x1 and y0 <= y <= y1:
                out.add(lane.id)
                break
    return out


def _lane_path(graph: LaneGraph, start: str, goal: Goal) -> list[tuple[str, str]] | None:
    """BFS path: list of (move kind, lane id) including the start lane."""
    targets = _goal_lanes(graph, goal)
    if not targets:
        return None
    if start in targets:
        return [("start", start)]
    frontier = [[("start", start)]]
    seen = {start}
    while frontier:
        nxt = []
        for path in frontier:
            cur = path[-1][1]
            moves: list[tuple[str, str]] = []
            moves += [("forward", c.dst) for c in graph.forward_of(cur)]
            moves += [(("turn-left" if c.kind.endswith("left") else "turn-right"), c.dst)
                      for c in graph.turns_of(cur)]
            for side, fn in (("left", graph.left_of), ("right", graph.right_of)):
                adj = fn(cur)
                if adj is not None:
                    moves.append((f"change-{side}", adj))
            for kind, lid in sorted(moves, key=lambda m: (m[0], m[1])):
                if lid in seen:
                    continue
                seen.add(lid)
                new = path + [(kind, lid)]
                if lid in targets:
                    return new
                nxt.append(new)
        frontier = nxt
    return None


def _plan_variants(graph: LaneGraph, state: LocalState, goal: Goal,
                   cfg: PredictionConfig,
                   kin: Kinematics) -> list[tuple[str, tuple[MacroAction, ...]]]:
    """Up to three macro plans reaching the goal from the state.

    Predictions keep the agent's observed speed (velocity keeping) rather
    than racing to the limit; the variants are the kept-speed route, a
    delayed lane change where the route changes lanes, and a conservative
    slower-speed route.
    """
    path = _lane_path(graph, state.lane, goal)
    if path is None:
        return []
    v_obs = round(max(state.speed, 3.0), 2)

    def route(speed: float) -> list[MacroAction]:
        plan: list[MacroAction] = []
        for kind, lid in path[1:]:
            if kind == "change-left":
                plan.append(MacroAction.make("ChangeLeft"))
            elif kind == "change-right":
                plan.append(MacroAction.make("ChangeRight"))
            elif kind.startswith("turn-"):
                plan.append(MacroAction.make("Exit", direction=kind.split("-")[1],
                                             lane=lid, target_speed=speed))
        plan.append(MacroAction.make("Continue", duration_s=3600.0,
                                     target_speed=speed))
        return plan

    base = route(v_obs)
    variants: list[tuple[str, tuple[MacroAction, ...]]] = [("keeping", tuple(base))]

    has_change = any(m.kind in ("ChangeLeft", "ChangeRight") for m in base)
    if has_change:
        lane = graph.lane(state.lane)
        s, _ = lane.project(state.position)
        room = lane.length - s
        need = v_obs * kin.lane_change_duration(lane.width) + 2.0
        slack = room - need
        if slack > 5.0:
            delay_s = 0.55 * slack / v_obs
            delayed = [MacroAction.make("Continue", duration_s=round(delay_s, 2),
                                        target_speed=v_obs)] + base
            variants.append(("late-change", tuple(delayed)))

    slow = round(cfg.conservative_factor * v_obs, 2)
    variants.append(("conservative", tuple(route(slow))))

    seen: set[tuple] = set()
    out = []
    for name, plan in variants[:cfg.max_trajectories]:
        if plan in seen:
            continue
        seen.add(plan)
        out.append((name, plan))
    return out


def _trajectory_value(roll: Rollout, goal: Goal, weights: RewardWeights,
                      reference_speed: float) -> float:
    r = reward_from_arrays(roll.xs, roll.ys, roll.headings, roll.speeds,
                           roll.accels, goal, reference_speed=reference_speed)
    return scalarize(r, weights)


def goal_posterior(observed: Sequence[LocalState], goals: Sequence[Goal],
                   graph: LaneGraph, beta: float = 1.0,
                   weights: RewardWeights = RewardWeights(),
                   kin: Kinematics = Kinematics(),
                   horizon_steps: int = 400,
                   cfg: PredictionConfig = PredictionConfig()) -> tuple[np.ndarray, bool]:
    """Per-goal probabilities by rational inverse planning.

    P(g) is proportional to exp(-beta * [cost(observed + optimal completion)
    - cost(optimal full plan)]); returns (probabilities, warning) where the
    warning flags a uniform fallback when no goal is reachable.
    """
    if not observed:
        raise PredictionError("observed state sequence must be non-empty")
    if not goals:
        raise PredictionError("goals must be non-empty")
    first, last = observed[0], observed[-1]
    obs_len = len(observed)
    steps_total = max(horizon_steps, obs_len + 50)
    ref = max(l.speed_limit for l in graph.lanes.values())

    logliks: list[float | None] = []
    for goal in goals:
        variants_full = _plan_variants(graph, first, goal, cfg, kin)
        variants_compl = _plan_variants(graph, last, goal, cfg, kin)
        if not variants_full or not variants_compl:
            logliks.append(None)
            continue
        path = _lane_path(graph, first.lane, goal) or []
        lane_changes = sum(1 for kind, _ in path if kind.startswith("change"))
        log_prior = -cfg.goal_prior_change_penalty * lane_changes
        best_full = -math.inf
        for _, plan in variants_full:
            roll = rollout_open_loop(graph, first, plan, steps_total, kin)
            best_full = max(best_full, _trajectory_value(roll, goal, weights, ref))
        best_comp = -math.inf
        for _, plan in variants_compl:
            roll = rollout_open_loop(graph, last, plan, steps_total - obs_len, kin)
            ox = np.concatenate([np.array([s.position[0] for s in observed]), roll.xs])
            oy = np.concatenate([np.array([s.position[1] for s in observed]), roll.ys])
            oh = np.concatenate([np.array([s.heading for s in observed]), roll.headings])
            ov = np.concatenate([np.array([s.speed for s in observed]), roll.speeds])
            oa = np.concatenate([np.array([s.acceleration for s in observed]), roll.accels])
            r = reward_from_arrays(ox, oy, oh, ov, oa, goal, reference_speed=ref)
            best_comp = max(best_comp, scalarize(r, weights))
        # costs are negated values; completion can only be as good as optimal
        gap = max(0.0, best_full - best_comp)
        logliks.append(log_prior - beta * gap)

    if all(v is None for v in logliks):
        return np.full(len(goals), 1.0 / len(goals)), True
    lls = np.array([v if v is not None else -math.inf for v in logliks])
    lls -= lls.max()
    p = np.exp(lls)
    p[np.isneginf(lls)] = 0.0
    return p / p.sum(), False


def _effective_state(graph: LaneGraph, prefix: JointTrace, agent: int,
                     tau: int, cur: LocalState) -> LocalState:
    """Account for an in-progress lane change when predicting from ``cur``.

    A vehicle moving laterally toward an adjacent lane is committed to it;
    predicting from the membership lane would forecast an abort instead of a
    completion.
    """
    from dataclasses import replace as _replace

    if prefix.length < 2:
        return cur
    lane = graph.lane(cur.lane)
    _, off_now = lane.project(cur.position)
    prev = prefix.state(agent, tau - 1)
    _, off_prev = lane.project(prev.position)
    d_off = (off_now - off_prev) / DT
    target = None
    if d_off > 0.4:
        target = graph.left_of(cur.lane)
    elif d_off < -0.4:
        target = graph.right_of(cur.lane)
    if target is None:
        return cur
    return _replace(cur, lane=target)


def build_posterior(scenario: Scenario, prefix: JointTrace, horizon: int,
                    cfg: PredictionConfig = PredictionConfig(),
                    weights: RewardWeights = RewardWeights(),
                    kin: Kinematics = Kinematics()) -> GoalPosterior:
    """Posterior over every non-ego agent's goals and future trajectories."""
    tau = prefix.horizon
    steps = horizon - tau
    if steps < 1:
        raise PredictionError(f"horizon {horizon} not after prefix end {tau}")
    per_agent: dict[int, AgentPrediction] = {}
    ref = max(l.speed_limit for l in scenario.graph.lanes.values())
    for spec in scenario.non_egos:
        agent = spec.id
        cur = prefix.state(agent, tau)
        cur = _effective_state(scenario.graph, prefix, agent, tau, cur)
        goals = goals_from_lane(scenario.graph, cur.lane, agent)
        if not goals:
            goals = [spec.goal]
        observed = [prefix.state(agent, t) for t in range(prefix.start, tau + 1)]
        probs, warn = goal_posterior(observed, goals, scenario.graph, cfg.beta,
                                     weights, kin, horizon_steps=steps + len(observed),
                                     cfg=cfg)
        all_trajs: list[list[TrajectoryPrediction]] = []
        kept_goals: list[Goal] = []
        kept_probs: list[float] = []
        for gi, goal in enumerate(goals):
            variants = _plan_variants(scenario.graph, cur, goal, cfg, kin)
            if not variants:
                continue
            rolls = []
            values = []
            for name, plan in variants:
                roll = rollout_open_loop(scenario.graph, cur, plan, steps, kin)
                rolls.append((name, plan, roll))
                values.append(_trajectory_value(roll, goal, weights, ref))
            v = np.array(values)
            w = np.exp(cfg.traj_beta * (v - v.max()))
            w = w / w.sum()
            trajs = [TrajectoryPrediction(agent=agent, goal_index=len(kept_goals),
                                          variant=name, plan=plan, rollout=roll,
                                          cost=-float(values[i]), prob=float(w[i]))
                     for i, (name, plan, roll) in enumerate(rolls)]
            kept_goals.append(goal)
            kept_probs.append(float(probs[gi]))
            all_trajs.append(trajs)
        if not kept_goals:
            raise PredictionError(f"agent {agent}: no reachable goal hypothesis")
        p = np.array(kept_probs)
        p = p / p.sum() if p.sum() > 0 else np.full(len(kept_probs), 1.0 / len(kept_probs))
        per_agent[agent] = AgentPrediction(agent=agent, goals=kept_goals,
                                           goal_probs=p, trajectories=all_trajs,
                                           warning=warn)
    return GoalPosterior(prefix, horizon, per_agent, smooth_levels=cfg.smooth_levels)


# ---------------------------------------------------------------------------
# Closed-loop sampling
# ---------------------------------------------------------------------------


def sample_closed_loop(scenario: Scenario, posterior: GoalPosterior,
                       from_t: int, horizon: int, seed,
                       alpha: float = 0.0,
                       ego_plan: Sequence[MacroAction] | None = None,
                       plan_provider: Callable[[Mapping[int, tuple[int, int]]],
                                               "object"] | None = None,
                       kin: Kinematics = Kinematics(),
                       planner_cfg: PlannerConfig = PlannerConfig()) -> JointTrace:
    """One joint rollout from tau+1 to the horizon.

    Non-egos follow a goal/trajectory drawn from the smoothed posterior; the
    ego follows a macro plan drawn from the (conditional) plan distribution,
    executed closed-loop with car-following.  Deterministic given the seed.
    """
    if horizon <= from_t:
        raise PredictionError(f"horizon {horizon} must be after start {from_t}")
    if from_t != posterior.tau:
        raise PredictionError("rollout must start at the posterior's tau")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed) & 0x7FFFFFFF, 0x51)))
    indices = posterior.draw_indices(rng, alpha)
    draws = {a: posterior.traj_for(a, gi, ti) for a, (gi, ti) in indices.items()}

    ego_id = scenario.ego.id
    ego_state = posterior.prefix.state(ego_id, from_t)
    if ego_plan is None:
        if plan_provider is not None:
            dist = plan_provider(indices)
        else:
            dist = mcts_plan(scenario.graph, ego_state, scenario.ego.goal,
                             posterior.restricted(indices), horizon,
                             seed=int(seed) ^ 0x7E11, cfg=planner_cfg, kin=kin)
        probs = np.asarray(dist.probs)
        i = int(rng.choice(len(dist.plans), p=probs / probs.sum()))
        ego_plan = dist.plans[i]

    steps = horizon - from_t
    ex = MacroExecutor(scenario.graph, ego_state, kin, list(ego_plan))
    ego_rows = {k: np.empty(steps) for k in ("x", "y", "h", "v", "a")}
    ego_lanes, ego_mans, ego_macs = [], [], []
    agent_ids = sorted(draws)
    for i in range(steps):
        others = [(float(draws[a].rollout.xs[i]), float(draws[a].rollout.ys[i]),
                   float(draws[a].rollout.headings[i])) for a in agent_ids]
        ceiling = follow_ceiling(kin, scenario.graph, ex.lookahead(), others)
        st, man, mac = ex.step(ceiling)
        ego_rows["x"][i], ego_rows["y"][i] = st.position
        ego_rows["h"][i], ego_rows["v"][i], ego_rows["a"][i] = (
            st.heading, st.speed, st.acceleration)
        ego_lanes.append(st.lane)
        ego_mans.append(man)
        ego_macs.append(mac)

    agents = [AgentMeta(ego_id, True)] + [AgentMeta(a, False) for a in agent_ids]
    xs = {ego_id: ego_rows["x"]}
    ys = {ego_id: ego_rows["y"]}
    hs = {ego_id: ego_rows["h"]}
    vs = {ego_id: ego_rows["v"]}
    ac = {ego_id: ego_rows["a"]}
    lanes = {ego_id: tuple(ego_lanes)}
    mans = {ego_id: tuple(ego_mans)}
    macs = {ego_id: tuple(ego_macs)}
    for a in agent_ids:
        roll = draws[a].rollout
        xs[a], ys[a], hs[a] = roll.xs, roll.ys, roll.headings
        vs[a], ac[a] = roll.speeds, roll.accels
        lanes[a], mans[a], macs[a] = roll.lanes, roll.maneuvers, roll.macros
    return JointTrace(agents, from_t + 1, xs, ys, hs, vs, ac, lanes, mans, macs)
