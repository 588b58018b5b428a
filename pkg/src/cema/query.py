"""Machine-readable queries, (u, v) window inference and outcome indicators.

A query names a vehicle, a tense, and a list of action names (maneuvers
and/or macro actions).  Resolution filters the relevant trace by tense,
groups the vehicle's labels into contiguous action runs, keeps the runs
matching the action list and picks the one closest to the query time.
Negated why-questions are rewritten into what-ifs about the factual action
list so the outcome variable of the negated twin is the exact complement.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .world import ACTION_NAMES, JointTrace, label_runs

KINDS = ("why", "whatif", "what")
TENSES = ("past", "present", "future")


class QueryError(ValueError):
    """Query document failed validation."""


class UnmatchedQueryError(ValueError):
    """No action run matches the query; carries the candidate runs."""

    def __init__(self, message: str, candidates: Sequence[tuple] = ()):
        super().__init__(message)
        self.candidates = list(candidates)


@dataclass(frozen=True)
class Query:
    kind: str
    vid: int
    tense: str | None
    actions: tuple[str, ...]
    query_time: int
    action_time: int | None = None
    negated: bool = False
    factuals: tuple[str, ...] | None = None

    def as_dict(self) -> dict:
        return {"type": self.kind, "vid": self.vid, "tense": self.tense,
                "actions": list(self.actions), "query_time": self.query_time,
                "action_time": self.action_time, "negated": self.negated,
                "factuals": list(self.factuals) if self.factuals else None}


@dataclass(frozen=True)
class QueryWindow:
    u: int
    v: int
    source: str  # factual-trace | counterfactual-sample | map-prediction

    def __post_init__(self):
        if self.u > self.v:
            raise QueryError(f"window start {self.u} after end {self.v}")


@dataclass(frozen=True)
class Resolution:
    """A resolved query: the window plus how to test a sample against it."""

    window: QueryWindow
    vid: int
    target_actions: tuple[str, ...]
    flip: bool
    target_pair: tuple[str, str] | None = None  # what-queries match a label pair


def parse_query(document: Mapping | str) -> Query:
    """Validate a query JSON document and apply defaults."""
    import json

    doc = json.loads(document) if isinstance(document, str) else dict(document)
    kind = doc.get("type")
    if kind not in KINDS:
        raise QueryError(f"unknown query type {kind!r}; expected one of {KINDS}")
    if "vid" not in doc or not isinstance(doc["vid"], int):
        raise QueryError("vid must be an integer vehicle id")
    tense = doc.get("tense")
    if tense is not None and tense not in TENSES:
        raise QueryError(f"unknown tense {tense!r}")
    if kind in ("why", "whatif") and tense is None:
        raise QueryError(f"{kind} queries require a tense")
    actions = tuple(doc.get("actions") or ())
    for a in actions:
        if a not in ACTION_NAMES:
            raise QueryError(f"unknown action name {a!r}")
    if kind in ("why", "whatif") and not actions:
        raise QueryError(f"{kind} queries require a non-empty action list")
    if "query_time" not in doc or not isinstance(doc["query_time"], int):
        raise QueryError("query_time must be an integer timestep")
    action_time = doc.get("action_time")
    if kind == "what" and action_time is None:
        raise QueryError("what queries require action_time")
    if action_time is not None and (not isinstance(action_time, int) or action_time < 0):
        raise QueryError("action_time must be a non-negative integer")
    negated = bool(doc.get("negated", False))
    factuals = doc.get("factuals")
    if factuals is not None:
        factuals = tuple(factuals)
        for a in factuals:
            if a not in ACTION_NAMES:
                raise QueryError(f"unknown factual action name {a!r}")
    if kind == "whatif" and not negated and not factuals:
        raise QueryError("whatif queries need factuals unless negated")
    return Query(kind=kind, vid=doc["vid"], tense=tense, actions=actions,
                 query_time=doc["query_time"], action_time=action_time,
                 negated=negated, factuals=factuals)


# ---------------------------------------------------------------------------
# Run grouping and matching
# ---------------------------------------------------------------------------


def _run_matches(run: tuple[str, str, int, int], action: str) -> bool:
    man, mac, _, _ = run
    return man == action or mac == action


def tense_filtered_runs(trace: JointTrace, vid: int, tense: str | None,
                        query_time: int) -> list[tuple[str, str, int, int]]:
    """Group the agent's labels into runs after dropping wrong-tense steps."""
    pairs = trace.labels(vid)
    if tense == "past":
        hi = min(query_time - 1, trace.horizon)
        if hi < trace.start:
            return []
        sub = pairs[:hi - trace.start + 1]
        return label_runs(sub, trace.start)
    if tense == "future":
        lo = max(query_time + 1, trace.start)
        if lo > trace.horizon:
            return []
        sub = pairs[lo - trace.start:]
        return label_runs(sub, lo)
    runs = label_runs(pairs, trace.start)
    if tense == "present":
        return [r for r in runs if r[2] <= query_time <= r[3]]
    return runs


def action_blocks(runs: Sequence[tuple[str, str, int, int]],
                  actions: Sequence[str]) -> list[tuple[int, int]]:
    """(start, end) spans where the action list matches the runs.

    A single run matching every action counts (labels co-occur), as does a
    consecutive sequence of runs matching the actions in order.
    """
    out: list[tuple[int, int]] = []
    m = len(actions)
    if m == 0:
        return out
    for i, run in enumerate(runs):
        if all(_run_matches(run, a) for a in actions):
            out.append((run[2], run[3]))
    if m > 1:
        for i in range(len(runs) - m + 1):
            block = runs[i:i + m]
            if all(_run_matches(block[k], actions[k]) for k in range(m)):
                # consecutive runs must be contiguous in time
                if all(block[k + 1][2] == block[k][3] + 1 for k in range(m - 1)):
                    span = (block[0][2], block[-1][3])
                    if span not in out:
                        out.append(span)
    return sorted(set(out))


def _closest_block(blocks: Sequence[tuple[int, int]], query_time: int) -> tuple[int, int]:
    def dist(b):
        u, v = b
        if u <= query_time <= v:
            return 0
        return min(abs(u - query_time), abs(v - query_time))

    return min(blocks, key=lambda b: (dist(b), abs(b[0] - query_time), b[0]))


def _resolve_on_trace(trace: JointTrace, vid: int, tense: str | None,
                      query_time: int, actions: Sequence[str],
                      source: str) -> QueryWindow:
    runs = tense_filtered_runs(trace, vid, tense, query_time)
    blocks = action_blocks(runs, actions)
    if not blocks:
        raise UnmatchedQueryError(
            f"no {tense or 'any'}-tense run of vehicle {vid} matches {list(actions)}",
            candidates=runs)
    u, v = _closest_block(blocks, query_time)
    return QueryWindow(u=u, v=v, source=source)


def resolve_window(q: Query, factual: JointTrace,
                   samples: Sequence[JointTrace] | None = None,
                   predicted: JointTrace | None = None) -> Resolution:
    """Infer the (u, v) window and the outcome test for a query.

    ``predicted`` is the factual prefix extended with the model's best guess,
    used for future-tense resolution; it defaults to the factual trace.
    ``samples`` are preliminary model rollouts, needed only for what-if
    queries about never-observed action lists.
    """
    if q.vid not in factual.agent_ids:
        raise QueryError(f"vehicle {q.vid} not in trace")
    ref = predicted if (q.tense == "future" and predicted is not None) else factual
    source = "map-prediction" if q.tense == "future" else "factual-trace"

    if q.kind == "what":
        u = q.action_time
        trace = ref
        runs = label_runs(trace.labels(q.vid), trace.start)
        run = next((r for r in runs if r[2] <= u <= r[3]), None)
        if run is None:
            raise UnmatchedQueryError(f"action_time {u} outside the trace",
                                      candidates=runs)
        w = QueryWindow(u=u, v=run[3],
                        source="map-prediction" if u > q.query_time else source)
        return Resolution(window=w, vid=q.vid, target_actions=(),
                          flip=q.negated, target_pair=(run[0], run[1]))

    if q.kind == "why" and not q.negated:
        w = _resolve_on_trace(ref, q.vid, q.tense, q.query_time, q.actions, source)
        return Resolution(window=w, vid=q.vid, target_actions=q.actions, flip=False)

    if q.kind == "why" and q.negated:
        # "why not X" is a what-if about the ego itself; with the factual
        # action list given the window comes straight off the factual trace
        if q.factuals:
            w = _resolve_on_trace(ref, q.vid, q.tense, q.query_time,
                                  q.factuals, source)
            return Resolution(window=w, vid=q.vid, target_actions=q.factuals,
                              flip=True)
        # fall back to the longest prefix of the queried actions that matches
        for k in range(len(q.actions), 0, -1):
            try:
                w = _resolve_on_trace(ref, q.vid, q.tense, q.query_time,
                                      q.actions[:k], source)
                return Resolution(window=w, vid=q.vid,
                                  target_actions=q.actions[:k], flip=True)
            except UnmatchedQueryError:
                continue
        raise UnmatchedQueryError(
            f"no factual run of vehicle {q.vid} anchors the negated query "
            f"{list(q.actions)}")

    # what-if
    if q.negated:
        # the action list is factual ("what if you hadn't ...")
        w = _resolve_on_trace(ref, q.vid, q.tense, q.query_time, q.actions, source)
        return Resolution(window=w, vid=q.vid, target_actions=q.actions, flip=True)

    # counterfactual action list: find it in the sampled alternatives, then
    # take the factual run of greatest overlap
    if not samples:
        raise QueryError("whatif resolution requires counterfactual samples")
    cf_blocks: list[tuple[int, int]] = []
    for sample in samples:
        runs = tense_filtered_runs(sample, q.vid, q.tense, q.query_time)
        blocks = action_blocks(runs, q.actions)
        if blocks:
            cf_blocks = blocks
            break
    if not cf_blocks:
        raise UnmatchedQueryError(
            f"no sampled trajectory of vehicle {q.vid} executes {list(q.actions)}")
    fact_runs = tense_filtered_runs(factual, q.vid, q.tense, q.query_time)
    fact_blocks = action_blocks(fact_runs, q.factuals or ())
    best = None
    for cu, cv in cf_blocks:
        for fu, fv in fact_blocks:
            lo, hi = max(cu, fu), min(cv, fv)
            overlap = hi - lo + 1
            if overlap > 0 and (best is None or overlap > best[0]):
                best = (overlap, lo, hi)
    if best is not None:
        _, u, v = best
    else:
        u, v = _closest_block(cf_blocks, q.query_time)
    return Resolution(window=QueryWindow(u=u, v=v, source="counterfactual-sample"),
                      vid=q.vid, target_actions=q.actions, flip=False)


def outcome_indicator(sample: JointTrace, res: Resolution) -> int:
    """y = presence of the target behaviour in the window, XOR the flip."""
    u = max(res.window.u, sample.start)
    v = min(res.window.v, sample.horizon)
    if v < u:
        raise QueryError(f"sample [{sample.start}, {sample.horizon}] does not "
                         f"cover the window [{res.window.u}, {res.window.v}]")
    win = sample.subtrace(u, v)
    runs = label_runs(win.labels(res.vid), win.start)
    if res.target_pair is not None:
        man, mac = res.target_pair
        present = any(r[0] == man and r[1] == mac for r in runs)
    else:
        present = bool(action_blocks(runs, res.target_actions))
    return int(present) ^ int(res.flip)
