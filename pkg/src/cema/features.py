"""Binary behaviour features of non-ego agents over a trace slice.

Per non-ego agent: an acceleration triple (mean acceleration against a small
threshold), a relative-speed triple (mean speed against the ego's), a
stopping indicator (minimum speed), and one-hot encodings of the longest
maneuver and macro action.  Nineteen features per agent, named
``property(vid)`` / ``maneuver:kind(vid)`` / ``macro:kind(vid)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .world import JointTrace, MACROS, MANEUVERS

FEATURES_PER_AGENT = 3 + 3 + 1 + len(MANEUVERS) + len(MACROS)


class FeaturiseError(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    delta_a: float = 0.1  # m/s^2
    delta_v: float = 0.1  # m/s
    delta_s: float = 0.1  # m/s

    def __post_init__(self):
        if min(self.delta_a, self.delta_v, self.delta_s) <= 0:
            raise ValueError("thresholds must be positive")


def feature_names(non_egos: Sequence[int]) -> list[str]:
    names = []
    for vid in sorted(non_egos):
        names += [f"accelerates({vid})", f"decelerates({vid})", f"maintains({vid})",
                  f"faster({vid})", f"slower({vid})", f"same_speed({vid})",
                  f"stops({vid})"]
        names += [f"maneuver:{m}({vid})" for m in MANEUVERS]
        names += [f"macro:{m}({vid})" for m in MACROS]
    return names


@dataclass(frozen=True)
class FeatureVector:
    names: tuple[str, ...]
    values: tuple[int, ...]

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.names, self.values))

    def __len__(self):
        return len(self.values)


def _longest(labels: Sequence[str], vocabulary: Sequence[str]) -> str:
    counts = {k: 0 for k in vocabulary}
    for l in labels:
        counts[l] = counts.get(l, 0) + 1
    # ties break by vocabulary order for determinism
    return max(vocabulary, key=lambda k: counts.get(k, 0))


def featurise(slice_trace: JointTrace, ego: int,
              thresholds: Thresholds = Thresholds()) -> FeatureVector:
    """Binary features of every non-ego agent over the slice.

    The slice must span at least two timesteps (means are undefined
    otherwise).  The ego's own behaviour is excluded: its action is the
    outcome being explained, not a candidate cause.
    """
    if slice_trace.length < 2:
        raise FeaturiseError("slice must cover at least 2 timesteps")
    if ego not in slice_trace.agent_ids:
        raise FeaturiseError(f"ego {ego} not in slice")
    non_egos = sorted(a for a in slice_trace.agent_ids if a != ego)
    ego_speed = float(np.mean(slice_trace.speeds[ego]))
    names: list[str] = []
    values: list[int] = []
    for vid in non_egos:
        mean_acc = float(np.mean(slice_trace.accels[vid]))
        dv = float(np.mean(slice_trace.speeds[vid])) - ego_speed
        min_speed = float(np.min(slice_trace.speeds[vid]))
        acc = (int(mean_acc > thresholds.delta_a),
               int(mean_acc < -thresholds.delta_a),
               int(-thresholds.delta_a <= mean_acc <= thresholds.delta_a))
        spd = (int(dv > thresholds.delta_v),
               int(dv < -thresholds.delta_v),
               int(-thresholds.delta_v <= dv <= thresholds.delta_v))
        stops = int(min_speed <= thresholds.delta_s)
        longest_man = _longest(slice_trace.maneuvers[vid], MANEUVERS)
        longest_mac = _longest(slice_trace.macros[vid], MACROS)
        names += [f"accelerates({vid})", f"decelerates({vid})", f"maintains({vid})",
                  f"faster({vid})", f"slower({vid})", f"same_speed({vid})",
                  f"stops({vid})"]
        values += [acc[0], acc[1], acc[2], spd[0], spd[1], spd[2], stops]
        names += [f"maneuver:{m}({vid})" for m in MANEUVERS]
        values += [int(m == longest_man) for m in MANEUVERS]
        names += [f"macro:{m}({vid})" for m in MACROS]
        values += [int(m == longest_mac) for m in MACROS]
    return FeatureVector(names=tuple(names), values=tuple(values))


def feature_matrix(traces: Sequence[JointTrace], ego: int, lo: int, hi: int,
                   thresholds: Thresholds = Thresholds()) -> tuple[np.ndarray, list[str]]:
    """Stack featurise(trace[lo..hi]) over traces into an (n, m) 0/1 matrix."""
    rows = []
    names: list[str] | None = None
    for tr in traces:
        fv = featurise(tr.subtrace(lo, hi), ego, thresholds)
        if names is None:
            names = list(fv.names)
        rows.append(fv.values)
    if names is None:
        raise FeaturiseError("no traces to featurise")
    return np.asarray(rows, dtype=float), names
