"""Deterministic fixed-step scenario execution.

Produces the factual joint trace at 20 fps.  The ego replans with MCTS every
planning period; scripted agents replay their configured macro sequences
open-loop; predicted-follower agents drive their optimal route closed-loop.
Collisions are recorded through the reward model, never fatal.
"""

from __future__ import annotations

import json
import math
from typing import Mapping

import numpy as np

from .behavior import (
    Kinematics,
    MacroAction,
    MacroExecutor,
    follow_ceiling,
    rollout_open_loop,
)
from .planner import PlannerConfig, RewardWeights, expected_best_plan
from .prediction import PredictionConfig, build_posterior, _plan_variants
from .world import (
    DT,
    FPS,
    AgentMeta,
    JointTrace,
    LocalState,
    Scenario,
)

WINDOW_STEPS = 5 * FPS  # states further than 5 s from `now` are dropped


def _script_plan(spec_script) -> list[MacroAction]:
    plan = []
    for step in spec_script:
        params = {k: v for k, v in step.items() if k != "macro"}
        plan.append(MacroAction.make(str(step["macro"]), **params))
    return plan


def window(trace: JointTrace, now: int) -> JointTrace:
    """Sub-trace within 5 seconds (100 steps) of ``now``."""
    trace.index(now)  # bounds check
    return trace.subtrace(now - WINDOW_STEPS, now + WINDOW_STEPS)


def run(scenario: Scenario, max_steps: int, seed: int,
        kin: Kinematics = Kinematics(),
        planner_cfg: PlannerConfig | None = None,
        pred_cfg: PredictionConfig = PredictionConfig()) -> JointTrace:
    """Execute the scenario for ``max_steps`` timesteps (t = 0 .. max_steps-1).

    Deterministic given the seed: agents update in id order and all planner
    randomness derives from (seed, replan time).
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if planner_cfg is None:
        planner_cfg = PlannerConfig.from_mapping(scenario.planner_config)
    horizon = max_steps - 1
    graph = scenario.graph
    ids = sorted(a.id for a in scenario.agents)
    ego_id = scenario.ego.id

    xs = {a: np.empty(max_steps) for a in ids}
    ys = {a: np.empty(max_steps) for a in ids}
    hs = {a: np.empty(max_steps) for a in ids}
    vs = {a: np.empty(max_steps) for a in ids}
    ac = {a: np.empty(max_steps) for a in ids}
    lanes = {a: [""] * max_steps for a in ids}
    mans = {a: ["lane-follow"] * max_steps for a in ids}
    macs = {a: ["Continue"] * max_steps for a in ids}

    for spec in scenario.agents:
        st = spec.spawn
        xs[spec.id][0], ys[spec.id][0] = st.position
        hs[spec.id][0], vs[spec.id][0], ac[spec.id][0] = st.heading, st.speed, 0.0
        lanes[spec.id][0] = st.lane

    scripted: dict[int, object] = {}
    executors: dict[int, MacroExecutor] = {}
    for spec in scenario.agents:
        if spec.controller == "scripted":
            plan = _script_plan(spec.script)
            scripted[spec.id] = rollout_open_loop(graph, spec.spawn, plan,
                                                  max_steps - 1, kin)
        elif spec.controller == "predicted-follower":
            variants = _plan_variants(graph, spec.spawn, spec.goal, pred_cfg, kin)
            plan = list(variants[0][1]) if variants else []
            executors[spec.id] = MacroExecutor(graph, spec.spawn, kin, plan)
        elif spec.id == ego_id:
            executors[spec.id] = MacroExecutor(graph, spec.spawn, kin, [])

    agents_meta = [AgentMeta(a, a == ego_id) for a in ids]

    def partial_trace(upto: int) -> JointTrace:
        sl = slice(0, upto + 1)
        return JointTrace(agents_meta, 0,
                          {a: xs[a][sl] for a in ids}, {a: ys[a][sl] for a in ids},
                          {a: hs[a][sl] for a in ids}, {a: vs[a][sl] for a in ids},
                          {a: ac[a][sl] for a in ids},
                          {a: lanes[a][sl] for a in ids},
                          {a: mans[a][sl] for a in ids},
                          {a: macs[a][sl] for a in ids})

    replan_steps = planner_cfg.replan_steps
    for t in range(max_steps - 1):
        if t % replan_steps == 0 and ego_id in executors:
            prefix = partial_trace(t)
            lo = max(0, t - WINDOW_STEPS)
            posterior = build_posterior(scenario, prefix.subtrace(lo, t),
                                        horizon, pred_cfg, planner_cfg.weights, kin)
            ego_state = prefix.state(ego_id, t)
            dist = expected_best_plan(graph, ego_state, scenario.ego.goal,
                                      posterior, horizon,
                                      seed=(int(seed) * 1_000_003 + t),
                                      cfg=planner_cfg, kin=kin)
            executors[ego_id].set_plan(list(dist.mode))
        # agents update in id order against positions at time t
        snapshot = {a: (float(xs[a][t]), float(ys[a][t]), float(hs[a][t]))
                    for a in ids}
        for a in ids:
            if a in scripted:
                roll = scripted[a]
                xs[a][t + 1], ys[a][t + 1] = roll.xs[t], roll.ys[t]
                hs[a][t + 1], vs[a][t + 1] = roll.headings[t], roll.speeds[t]
                ac[a][t + 1] = roll.accels[t]
                lanes[a][t + 1] = roll.lanes[t]
                mans[a][t], macs[a][t] = roll.maneuvers[t], roll.macros[t]
            else:
                ex = executors[a]
                others = [snapshot[o] for o in ids if o != a]
                ceiling = follow_ceiling(kin, graph, ex.lookahead(), others)
                st, man, mac = ex.step(ceiling)
                xs[a][t + 1], ys[a][t + 1] = st.position
                hs[a][t + 1], vs[a][t + 1], ac[a][t + 1] = (st.heading, st.speed,
                                                            st.acceleration)
                lanes[a][t + 1] = st.lane
                mans[a][t], macs[a][t] = man, mac
    for a in ids:
        if max_steps >= 2:
            mans[a][-1], macs[a][-1] = mans[a][-2], macs[a][-2]
    return JointTrace(agents_meta, 0, xs, ys, hs, vs, ac,
                      {a: tuple(lanes[a]) for a in ids},
                      {a: tuple(mans[a]) for a in ids},
                      {a: tuple(macs[a]) for a in ids})


def write_jsonl(trace: JointTrace, path: str) -> None:
    with open(path, "w") as fh:
        for rec in trace.jsonl_records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
