"""End-to-end query answering: simulate, resolve, sample, attribute, realise.

One Engine instance owns a scenario plus a seeded factual run; answers are
deterministic functions of (scenario, query, K, alpha, seed).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .behavior import Kinematics, dominant_macro
from .causal import (
    CausalConfig,
    CounterfactualDataset,
    CounterfactualSampler,
    DegenerateDatasetError,
    RollbackConfig,
    SliceAttribution,
    SlicePlan,
    mechanistic_attribution,
    rollback,
    teleological_attribution,
)
from .planner import PlannerConfig, mcts_plan
from .prediction import PredictionConfig, build_posterior, sample_closed_loop
from .query import Query, Resolution, UnmatchedQueryError, resolve_window
from .simulator import WINDOW_STEPS, run as run_scenario
from .world import FPS, JointTrace, Scenario, label_runs


def _derive(*parts) -> int:
    return zlib.crc32("|".join(str(p) for p in parts).encode()) & 0x7FFFFFFF


@dataclass
class AttributionReport:
    """Everything a query answer is built from, JSON-exportable."""

    query: dict
    window: dict
    tau: dict
    K: int
    alpha: float
    seed: int
    teleological: list[tuple[str, float]]
    mechanistic: list[SliceAttribution]
    associative: dict
    resolution_flip: bool
    ego_id: int
    degenerate: dict
    y_mean: dict

    def as_dict(self) -> dict:
        return {
            "query": self.query,
            "window": self.window,
            "tau": self.tau,
            "K": self.K,
            "alpha": self.alpha,
            "seed": self.seed,
            "teleological": [{"component": c, "delta": d}
                             for c, d in self.teleological],
            "mechanistic": [
                {"slice": s.name, "lo": s.lo, "hi": s.hi,
                 "features": [{"name": f.name, "mean": f.mean,
                               "ci": [f.ci[0], f.ci[1]],
                               "samples": list(f.samples)}
                              for f in s.features]}
                for s in self.mechanistic
            ],
            "associative": self.associative,
            "degenerate": self.degenerate,
            "y_mean": self.y_mean,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


class Engine:
    """Scenario runner and query answerer with caching."""

    def __init__(self, scenario: Scenario, seed: int = 21,
                 steps: int | None = None,
                 kin: Kinematics = Kinematics(),
                 pred_cfg: PredictionConfig = PredictionConfig(),
                 planner_cfg: PlannerConfig | None = None,
                 causal_cfg: CausalConfig = CausalConfig()):
        self.scenario = scenario
        self.seed = int(seed)
        self.steps = int(steps if steps is not None
                         else scenario.document.get("max_steps", 280))
        self.kin = kin
        self.pred_cfg = pred_cfg
        self.planner_cfg = (planner_cfg if planner_cfg is not None
                            else PlannerConfig.from_mapping(scenario.planner_config))
        self.causal_cfg = causal_cfg
        self._factual: JointTrace | None = None
        self._sampler: CounterfactualSampler | None = None
        self._predicted: dict[int, JointTrace] = {}

    @property
    def factual(self) -> JointTrace:
        if self._factual is None:
            self._factual = run_scenario(self.scenario, self.steps, self.seed,
                                         self.kin, self.planner_cfg, self.pred_cfg)
        return self._factual

    @property
    def sampler(self) -> CounterfactualSampler:
        if self._sampler is None:
            self._sampler = CounterfactualSampler(
                self.scenario, self.factual, self.kin, self.pred_cfg,
                self.planner_cfg, self.causal_cfg)
        return self._sampler

    # -- resolution helpers -------------------------------------------------

    def predicted_trace(self, now: int) -> JointTrace:
        """Factual prefix up to ``now`` extended with the model's best guess."""
        if now in self._predicted:
            return self._predicted[now]
        factual = self.factual
        if now >= factual.horizon:
            self._predicted[now] = factual
            return factual
        lo = max(factual.start, now - WINDOW_STEPS)
        prefix = factual.subtrace(lo, now)
        posterior = build_posterior(self.scenario, prefix, factual.horizon,
                                    self.pred_cfg, self.planner_cfg.weights,
                                    self.kin)
        indices = posterior.map_indices()
        ego_state = prefix.state(self.scenario.ego.id, now)
        dist = mcts_plan(self.scenario.graph, ego_state, self.scenario.ego.goal,
                         posterior.restricted(indices), factual.horizon,
                         seed=_derive(self.seed, "map", now),
                         cfg=self.planner_cfg, kin=self.kin)
        tail = sample_closed_loop(self.scenario, posterior, now, factual.horizon,
                                  seed=_derive(self.seed, "maproll", now),
                                  alpha=0.0, ego_plan=dist.plans[0],
                                  kin=self.kin, planner_cfg=self.planner_cfg)
        full = factual.subtrace(factual.start, now).concat(tail)
        self._predicted[now] = full
        return full

    def preliminary_samples(self, q: Query, n: int = 20) -> list[JointTrace]:
        """Model rollouts used to anchor what-if windows for unseen actions."""
        factual = self.factual
        anchor = q.query_time
        if q.factuals:
            try:
                res = resolve_window(
                    Query(kind="why", vid=q.vid, tense=q.tense,
                          actions=q.factuals, query_time=q.query_time),
                    factual, predicted=self.predicted_trace(q.query_time)
                    if q.tense == "future" else None)
                anchor = res.window.u
            except UnmatchedQueryError:
                anchor = q.query_time
        cfg = RollbackConfig(tau_min_s=self.causal_cfg.tau_min_s,
                             tau_max_s=self.causal_cfg.tau_max_s,
                             mode="mechanistic")
        tau, _ = rollback(factual, max(anchor, factual.start + 1), cfg)
        posterior = self.sampler.posterior_at(tau)
        out = []
        for k in range(n):
            out.append(sample_closed_loop(
                self.scenario, posterior, tau, factual.horizon,
                seed=_derive(self.seed, "prelim", q.query_time, k),
                alpha=self.causal_cfg.alpha,
                plan_provider=self.sampler._provider(tau, base_seed=21),
                kin=self.kin, planner_cfg=self.planner_cfg))
        return out

    def resolve(self, q: Query) -> Resolution:
        factual = self.factual
        predicted = self.predicted_trace(q.query_time) if q.tense == "future" else None
        samples = None
        if q.kind == "whatif" and not q.negated:
            samples = self.preliminary_samples(q)
        return resolve_window(q, factual, samples=samples, predicted=predicted)

    # -- answering ----------------------------------------------------------

    def _associative(self, dataset: CounterfactualDataset,
                     res: Resolution) -> dict:
        """Dominant ego behaviour over the window among outcome-matching rolls."""
        ego = self.scenario.ego.id
        matching = [tr for tr, yy in zip(dataset.traces, dataset.y) if yy == 1]
        pool = matching if matching else dataset.traces
        lo = max(res.window.u, dataset.traces[0].start)
        hi = min(res.window.v + int(2 * FPS), dataset.traces[0].horizon)
        mans, macs, accs = [], [], []
        for tr in pool:
            win = tr.subtrace(lo, hi)
            mans.append(dominant_macro(win.maneuvers[ego]))
            macs.append(dominant_macro(win.macros[ego]))
            accs.append(float(np.mean(win.accels[ego])))
        man = max(sorted(set(mans)), key=mans.count)
        mac = max(sorted(set(macs)), key=macs.count)
        acc = float(np.mean(accs))
        accel = ("accelerates" if acc > 0.1 else
                 "decelerates" if acc < -0.1 else None)
        return {"macro": mac, "maneuver": man, "accel": accel,
                "support": len(matching) / max(len(dataset.traces), 1)}

    def answer(self, q: Query, K: int | None = None, alpha: float | None = None,
               seed: int | None = None) -> AttributionReport:
        cfg = self.causal_cfg
        K = int(K if K is not None else cfg.K)
        alpha = float(alpha if alpha is not None else cfg.alpha)
        seed = int(seed if seed is not None else self.seed)
        res = self.resolve(q)
        factual = self.factual
        u = res.window.u
        ego_labels = factual.labels(factual.ego_id)

        tau_t, _ = rollback(factual, min(max(u, factual.start), factual.horizon),
                            RollbackConfig(cfg.tau_min_s, cfg.tau_max_s,
                                           "teleological"), ego_labels)
        tau_m, _ = rollback(factual, min(max(u, factual.start + 1), factual.horizon),
                            RollbackConfig(cfg.tau_min_s, cfg.tau_max_s,
                                           "mechanistic"), ego_labels)
        tau_t = min(tau_t, factual.horizon - 2)
        tau_m = min(tau_m, factual.horizon - 2)

        ds_t = self.sampler.sample(res, tau_t, K, alpha, seed=_derive(seed, "tele"))
        ds_m = self.sampler.sample(res, tau_m, K, alpha, seed=_derive(seed, "mech"))

        degenerate = {"teleological": ds_t.degenerate, "mechanistic": ds_m.degenerate}
        tele: list[tuple[str, float]] = []
        if not ds_t.degenerate:
            tele = teleological_attribution(ds_t)
        mech: list[SliceAttribution] = []
        if not ds_m.degenerate:
            endpoint_u = max(u, tau_m + 2)
            plan = SlicePlan((endpoint_u, factual.horizon))
            try:
                mech = mechanistic_attribution(ds_m, plan, cfg.thresholds, cfg,
                                               seed=_derive(seed, "cv"))
            except (DegenerateDatasetError, ValueError):
                degenerate["mechanistic"] = True

        associative = self._associative(ds_t, res)
        return AttributionReport(
            query=q.as_dict(),
            window={"u": res.window.u, "v": res.window.v,
                    "source": res.window.source},
            tau={"teleological": tau_t, "mechanistic": tau_m},
            K=K, alpha=alpha, seed=seed,
            teleological=tele, mechanistic=mech, associative=associative,
            resolution_flip=res.flip, ego_id=factual.ego_id,
            degenerate=degenerate,
            y_mean={"teleological": float(ds_t.y.mean()),
                    "mechanistic": float(ds_m.y.mean())},
        )
