"""Counterfactual causal selection: rollback, sampling, attribution, sweeps.

Given a resolved query window, roll the factual history back to tau, draw K
closed-loop futures from the smoothed probabilistic model, mark each with the
outcome indicator y and the ego reward vector r, then attribute causes:
mechanistic ones by cross-validated logistic-regression weights on sliced
behaviour features, teleological ones by the difference of mean reward
vectors between the two outcome classes.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .behavior import Kinematics
from .features import Thresholds, feature_matrix
from .planner import (
    PlannerConfig,
    RewardVector,
    REWARD_COMPONENTS,
    mcts_plan,
    reward,
)
from .prediction import GoalPosterior, PredictionConfig, build_posterior, sample_closed_loop
from .query import Resolution, outcome_indicator
from .simulator import WINDOW_STEPS, window
from .stats import bootstrap_ci, cv_importance
from .world import FPS, JointTrace, Scenario

# the smoothing strengths used for the distribution-robustness sweep: twenty
# log-spaced values plus zero
ALPHA_SCHEDULE = (0.0, 0.1, 0.14, 0.18, 0.25, 0.34, 0.45, 0.62, 0.83, 1.13,
                  1.53, 2.07, 2.8, 3.79, 5.13, 6.95, 9.41, 12.74, 17.25,
                  23.36, 31.62)


class DegenerateDatasetError(ValueError):
    """All sampled outcomes fell into one class; attribution is undefined."""


class RollbackError(ValueError):
    pass


@dataclass(frozen=True)
class RollbackConfig:
    tau_min_s: float = 2.0
    tau_max_s: float = 5.0
    mode: str = "mechanistic"  # or "teleological"

    def __post_init__(self):
        if not 0 < self.tau_min_s <= self.tau_max_s:
            raise ValueError("need 0 < tau_min <= tau_max")
        if self.mode not in ("teleological", "mechanistic"):
            raise ValueError(f"unknown rollback mode {self.mode!r}")


@dataclass(frozen=True)
class CausalConfig:
    K: int = 100
    alpha: float = 0.1
    tau_min_s: float = 2.0
    tau_max_s: float = 5.0
    folds: int = 5
    repeats: int = 7
    l2: float = 1.0
    weight_floor: float = 0.05  # fraction of the max |mean weight|
    replan: bool = False        # re-run MCTS per sample instead of memoising
    thresholds: Thresholds = field(default_factory=Thresholds)


@dataclass(frozen=True)
class SlicePlan:
    """Endpoints p_1 < ... < p_m partitioning [tau+1, n] into slices."""

    endpoints: tuple[int, ...]

    def __post_init__(self):
        if not self.endpoints:
            raise ValueError("slice plan needs at least one endpoint")
        if list(self.endpoints) != sorted(set(self.endpoints)):
            raise ValueError("endpoints must be strictly increasing")

    def bounds(self, tau: int) -> list[tuple[int, int, str]]:
        """Inclusive (lo, hi, name) slices tiling [tau+1, last endpoint]."""
        out = []
        lo = tau + 1
        eps = self.endpoints
        for j, p in enumerate(eps):
            hi = p - 1 if j < len(eps) - 1 else p
            if hi < lo:
                raise ValueError(f"slice {j} empty: [{lo}, {hi}]")
            if len(eps) == 2:
                name = "past" if j == 0 else "present-future"
            else:
                name = f"slice{j + 1}"
            out.append((lo, hi, name))
            lo = p
        return out


def rollback(trace: JointTrace, u: int, cfg: RollbackConfig,
             ego_labels: Sequence[tuple[str, str]] | None = None) -> tuple[int, bool]:
    """Rollback time tau for a queried window starting at ``u``.

    Teleological causes look forward from the action itself, so tau = u.
    Mechanistic causes roll back to the start of the maneuver run the action
    belongs to, clamped to [u - tau_max, u - tau_min] (in steps) and to the
    trace start.  Returns (tau, clamped-to-start warning).
    """
    trace.index(u)
    if cfg.mode == "teleological":
        return u, False
    pairs = ego_labels if ego_labels is not None else trace.labels(trace.ego_id)
    from .world import label_runs

    runs = label_runs(pairs, trace.start)
    anchor = trace.start
    for man, mac, a, b in runs:
        if a <= u <= b:
            if a < u:
                anchor = a
            # the run starts exactly at u: fall back to the previous run
            break
        if a < u:
            anchor = a
    lo = u - round(cfg.tau_max_s * FPS)
    hi = u - round(cfg.tau_min_s * FPS)
    tau = int(min(max(anchor, lo), hi))
    warning = False
    if tau < trace.start:
        tau = trace.start
        warning = True
    return tau, warning


@dataclass
class CounterfactualDataset:
    """K sampled futures with outcome indicators and ego reward vectors."""

    traces: list[JointTrace]
    y: np.ndarray
    rewards: list[RewardVector]
    tau: int
    alpha: float
    seed: int
    resolution: Resolution

    def __post_init__(self):
        if len(self.traces) != len(self.y) or len(self.traces) != len(self.rewards):
            raise ValueError("traces, y and rewards must align")

    @property
    def K(self) -> int:
        return len(self.traces)

    @property
    def degenerate(self) -> bool:
        return len(np.unique(self.y)) < 2

    def reward_matrix(self) -> np.ndarray:
        return np.asarray([r.as_array() for r in self.rewards])

    def subset(self, indices: Sequence[int]) -> "CounterfactualDataset":
        idx = list(indices)
        return CounterfactualDataset(
            traces=[self.traces[i] for i in idx], y=self.y[idx],
            rewards=[self.rewards[i] for i in idx], tau=self.tau,
            alpha=self.alpha, seed=self.seed, resolution=self.resolution)


def _derive_seed(*parts) -> int:
    text = "|".join(str(p) for p in parts)
    return zlib.crc32(text.encode()) & 0x7FFFFFFF


class CounterfactualSampler:
    """Builds posteriors at rollback times and draws counterfactual datasets.

    The ego's conditional plan distribution is memoised per joint draw of the
    *relevant* non-ego trajectories, so repeated rollouts stay cheap while
    the ego still reacts to what the non-egos were drawn to do.
    """

    def __init__(self, scenario: Scenario, factual: JointTrace,
                 kin: Kinematics = Kinematics(),
                 pred_cfg: PredictionConfig = PredictionConfig(),
                 planner_cfg: PlannerConfig | None = None,
                 causal_cfg: CausalConfig = CausalConfig()):
        self.scenario = scenario
        self.factual = factual
        self.kin = kin
        self.pred_cfg = pred_cfg
        self.planner_cfg = (planner_cfg if planner_cfg is not None
                            else PlannerConfig.from_mapping(scenario.planner_config))
        self.causal_cfg = causal_cfg
        self._posteriors: dict[int, GoalPosterior] = {}
        self._providers: dict[int, Callable] = {}

    @property
    def horizon(self) -> int:
        return self.factual.horizon

    def posterior_at(self, tau: int) -> GoalPosterior:
        if tau not in self._posteriors:
            lo = max(self.factual.start, tau - WINDOW_STEPS)
            prefix = self.factual.subtrace(lo, tau)
            self._posteriors[tau] = build_posterior(
                self.scenario, prefix, self.horizon, self.pred_cfg,
                self.planner_cfg.weights, self.kin)
        return self._posteriors[tau]

    def _provider(self, tau: int, base_seed: int) -> Callable:
        key = tau
        if key in self._providers:
            return self._providers[key]
        posterior = self.posterior_at(tau)
        graph = self.scenario.graph
        ego = self.scenario.ego
        ego_state = posterior.prefix.state(ego.id, tau)
        reach = graph.reachable_lanes(ego_state.lane)
        ex_, ey_ = ego_state.position
        rel_cache: dict[tuple[int, int, int], bool] = {}
        memo: dict[tuple, object] = {}

        def relevant(agent: int, gi: int, ti: int) -> bool:
            k = (agent, gi, ti)
            if k not in rel_cache:
                roll = posterior.traj_for(agent, gi, ti).rollout
                touches = any(l in reach for l in set(roll.lanes))
                if not touches:
                    d2 = (roll.xs - ex_) ** 2 + (roll.ys - ey_) ** 2
                    touches = bool(d2.size) and float(d2.min()) < 30.0 ** 2
                rel_cache[k] = touches
            return rel_cache[k]

        def provider(indices: Mapping[int, tuple[int, int]]):
            rel_key = tuple(sorted((a, gi, ti) for a, (gi, ti) in indices.items()
                                   if relevant(a, gi, ti)))
            if rel_key not in memo:
                memo[rel_key] = mcts_plan(
                    graph, ego_state, ego.goal, posterior.restricted(indices),
                    self.horizon, seed=_derive_seed(base_seed, tau, rel_key),
                    cfg=self.planner_cfg, kin=self.kin)
            return memo[rel_key]

        self._providers[key] = provider
        return provider

    def sample(self, resolution: Resolution, tau: int, K: int, alpha: float,
               seed: int, replan: bool | None = None) -> CounterfactualDataset:
        """Draw K closed-loop rollouts from tau and label them (Alg. 1)."""
        if K < 1:
            raise ValueError("K must be >= 1")
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        replan = self.causal_cfg.replan if replan is None else replan
        posterior = self.posterior_at(tau)
        provider = None if replan else self._provider(tau, base_seed=21)
        ref = max(l.speed_limit for l in self.scenario.graph.lanes.values())
        traces, ys, rewards = [], [], []
        for k in range(K):
            sk = _derive_seed(seed, "rollout", k)
            tr = sample_closed_loop(self.scenario, posterior, tau, self.horizon,
                                    seed=sk, alpha=alpha, plan_provider=provider,
                                    kin=self.kin, planner_cfg=self.planner_cfg)
            traces.append(tr)
            ys.append(outcome_indicator(tr, resolution))
            rewards.append(reward(tr, self.scenario.ego.goal, reference_speed=ref))
        return CounterfactualDataset(traces=traces, y=np.asarray(ys, dtype=int),
                                     rewards=rewards, tau=tau, alpha=alpha,
                                     seed=seed, resolution=resolution)


# ---------------------------------------------------------------------------
# Attribution (Alg. 2)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureAttribution:
    name: str
    mean: float
    ci: tuple[float, float]
    samples: tuple[float, ...]


@dataclass(frozen=True)
class SliceAttribution:
    name: str
    lo: int
    hi: int
    features: tuple[FeatureAttribution, ...]  # ranked by descending |mean|


def mechanistic_attribution(dataset: CounterfactualDataset, plan: SlicePlan,
                            thresholds: Thresholds = Thresholds(),
                            cfg: CausalConfig = CausalConfig(),
                            seed: int = 21) -> list[SliceAttribution]:
    """Per-slice ranked feature weights from cross-validated logistic fits."""
    if dataset.degenerate:
        raise DegenerateDatasetError(
            "all outcomes identical; mechanistic attribution undefined")
    ego = dataset.traces[0].ego_id
    out = []
    for si, (lo, hi, name) in enumerate(plan.bounds(dataset.tau)):
        X, names = feature_matrix(dataset.traces, ego, lo, hi, thresholds)
        keep = np.flatnonzero(X.std(axis=0) > 0)
        if keep.size == 0:
            raise DegenerateDatasetError(f"slice {name!r}: all features constant")
        Xk = X[:, keep]
        kept_names = [names[i] for i in keep]
        samples = cv_importance(Xk, dataset.y, folds=cfg.folds,
                                repeats=cfg.repeats, lam=cfg.l2,
                                seed=_derive_seed(seed, "cv", si))
        means = samples.mean(axis=0)
        floor = cfg.weight_floor * float(np.max(np.abs(means))) if means.size else 0.0
        # descending signed weight: features supporting the queried behaviour
        # first. A negated query flips y, so re-orient by the flip to keep
        # twin queries' rankings aligned.
        sign = -1.0 if dataset.resolution.flip else 1.0
        order = sorted(range(len(kept_names)),
                       key=lambda j: (-sign * means[j], kept_names[j]))
        feats = []
        for j in order:
            if abs(means[j]) < floor:
                continue
            ci = bootstrap_ci(samples[:, j], seed=_derive_seed(seed, "ci", si, j))
            feats.append(FeatureAttribution(name=kept_names[j],
                                            mean=float(means[j]), ci=ci,
                                            samples=tuple(float(x) for x in samples[:, j])))
        out.append(SliceAttribution(name=name, lo=lo, hi=hi, features=tuple(feats)))
    return out


def teleological_attribution(dataset: CounterfactualDataset) -> list[tuple[str, float]]:
    """Average treatment effect of the outcome on each reward component.

    Splits the dataset by y, takes the difference of mean reward vectors
    (matching minus non-matching), and orders components by |delta|.
    """
    if dataset.degenerate:
        raise DegenerateDatasetError(
            "all outcomes identical; teleological attribution undefined")
    R = dataset.reward_matrix()
    y = dataset.y
    delta = R[y == 1].mean(axis=0) - R[y == 0].mean(axis=0)
    pairs = list(zip(REWARD_COMPONENTS, (float(d) for d in delta)))
    return sorted(pairs, key=lambda kv: (-abs(kv[1]), kv[0]))


# ---------------------------------------------------------------------------
# Robustness sweeps
# ---------------------------------------------------------------------------


@dataclass
class SizeSweepResult:
    sizes: list[int]
    feature_names: list[str]
    slice_name: str
    # means[i][r][f]: mean CV weight of feature f at sizes[i], repeat r (NaN
    # when the subsample was degenerate)
    means: np.ndarray
    ci: np.ndarray  # (n_sizes, n_features, 2) bootstrap CI over repeat means

    def as_dict(self) -> dict:
        return {"sizes": self.sizes, "features": self.feature_names,
                "slice": self.slice_name,
                "means": np.where(np.isnan(self.means), None, self.means).tolist(),
                "ci": self.ci.tolist()}


def _stratified_subsample(y: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """K indices without replacement, keeping both classes when possible."""
    idx0 = np.flatnonzero(y == 0)
    idx1 = np.flatnonzero(y == 1)
    if K >= 2 and len(idx0) and len(idx1):
        first = np.array([rng.choice(idx0), rng.choice(idx1)])
        rest = np.setdiff1d(np.arange(len(y)), first)
        picked = rng.choice(rest, size=K - 2, replace=False)
        return np.sort(np.concatenate([first, picked]))
    return np.sort(rng.choice(len(y), size=K, replace=False))


def sweep_sample_size(master: CounterfactualDataset, plan: SlicePlan,
                      thresholds: Thresholds = Thresholds(),
                      cfg: CausalConfig = CausalConfig(),
                      sizes: Sequence[int] = tuple(range(5, 101, 5)),
                      repeats: int = 50, seed: int = 21,
                      slice_name: str = "present-future") -> SizeSweepResult:
    """Re-attribute on K-subsamples of a master dataset, ``repeats`` times."""
    bounds = {name: (lo, hi) for lo, hi, name in plan.bounds(master.tau)}
    if slice_name not in bounds:
        raise ValueError(f"unknown slice {slice_name!r}")
    lo, hi = bounds[slice_name]
    ego = master.traces[0].ego_id
    X, names = feature_matrix(master.traces, ego, lo, hi, thresholds)
    y = master.y
    sizes = [int(k) for k in sizes]
    means = np.full((len(sizes), repeats, len(names)), np.nan)
    for si, K in enumerate(sizes):
        if K > len(y):
            raise ValueError(f"K={K} exceeds master size {len(y)}")
        for r in range(repeats):
            rng = np.random.default_rng(
                np.random.SeedSequence((seed & 0x7FFFFFFF, 0x55, si, r)))
            idx = _stratified_subsample(y, K, rng)
            ys = y[idx]
            if len(np.unique(ys)) < 2:
                continue
            Xs = X[idx]
            keep = np.flatnonzero(Xs.std(axis=0) > 0)
            if keep.size == 0:
                continue
            counts = min(int((ys == 0).sum()), int((ys == 1).sum()))
            folds = min(cfg.folds, counts)
            if folds >= 2:
                samples = cv_importance(Xs[:, keep], ys, folds=folds,
                                        repeats=cfg.repeats, lam=cfg.l2,
                                        seed=_derive_seed(seed, "sw", si, r))
                w = samples.mean(axis=0)
            else:
                from .stats import fit_logistic

                w, _ = fit_logistic(Xs[:, keep], ys, cfg.l2)
            means[si, r, keep] = w
    ci = np.zeros((len(sizes), len(names), 2))
    for si in range(len(sizes)):
        for f in range(len(names)):
            vals = means[si, :, f]
            vals = vals[~np.isnan(vals)]
            if vals.size == 0:
                ci[si, f] = (0.0, 0.0)
            else:
                ci[si, f] = bootstrap_ci(vals, seed=_derive_seed(seed, "sci", si, f))
    return SizeSweepResult(sizes=sizes, feature_names=names,
                           slice_name=slice_name, means=means, ci=ci)


def sweep_alpha(sampler: CounterfactualSampler, resolution: Resolution,
                tau: int, plan: SlicePlan,
                alphas: Sequence[float] = ALPHA_SCHEDULE, K: int = 50,
                thresholds: Thresholds = Thresholds(),
                cfg: CausalConfig = CausalConfig(), seed: int = 21,
                slice_name: str = "present-future") -> list[dict]:
    """Re-sample and re-attribute under each smoothing strength."""
    out = []
    for ai, alpha in enumerate(alphas):
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        ds = sampler.sample(resolution, tau, K, alpha,
                            seed=_derive_seed(seed, "alpha", ai))
        entry: dict = {"alpha": float(alpha), "K": K}
        if ds.degenerate:
            entry["degenerate"] = True
            entry["features"] = []
        else:
            slices = mechanistic_attribution(ds, plan, thresholds, cfg,
                                             seed=_derive_seed(seed, "am", ai))
            chosen = next(s for s in slices if s.name == slice_name)
            entry["degenerate"] = False
            entry["features"] = [{"name": f.name, "mean": f.mean}
                                 for f in chosen.features]
        out.append(entry)
    return out
