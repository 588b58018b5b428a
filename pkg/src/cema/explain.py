"""Template-based realisation of attribution reports into English answers.

Wording lives in ``templates/realisation.json`` so it can be edited without
touching code.  Realisation is a pure function of (report, query, mode, rank
offset); every sentence's subject vehicle appears in the structured causes by
construction.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

from .query import Query

_TEMPLATES = None

# features that read as verbs and may be merged into one clause
_MERGEABLE = re.compile(r"^(accelerates|decelerates|maintains|stops|maneuver:|macro:)")


class RealisationError(ValueError):
    pass


def _templates() -> dict:
    global _TEMPLATES
    if _TEMPLATES is None:
        text = resources.files("cema.templates").joinpath("realisation.json").read_text()
        _TEMPLATES = json.loads(text)
    return _TEMPLATES


def _split_feature(name: str) -> tuple[str, int]:
    m = re.match(r"^(.*)\((\d+)\)$", name)
    if not m:
        raise RealisationError(f"feature name {name!r} lacks a vehicle id")
    return m.group(1), int(m.group(2))


def _tense(q: Query) -> str:
    return q.tense or "present"


@dataclass
class Explanation:
    text: str
    mode: str
    causes: list[dict]
    consumed: int = 0

    def as_dict(self) -> dict:
        return {"text": self.text, "mode": self.mode, "causes": self.causes}


def realise_teleological(report, q: Query) -> Explanation:
    """'It will decrease the time to the goal.' style answers."""
    tele = report.teleological
    if not tele:
        raise RealisationError("teleological attribution unavailable")
    tpl = _templates()
    component, delta = tele[0]
    style = "contrastive" if (q.negated or q.kind != "why") else "plain"
    modal = tpl["teleological_modals"][style][_tense(q)]
    direction = "increase" if delta > 0 else "decrease"
    verb = tpl["direction_verbs"][direction][modal]
    phrase = tpl["components"][component]
    modal_txt = f"{modal} " if modal not in ("does", "did", "") else ""
    if modal in ("does", "did"):
        text = f"It {verb} {phrase}."
    else:
        text = f"It {modal_txt}{verb} {phrase}."
    causes = [{"kind": "teleological", "vehicle": None, "component": c,
               "direction": ("increase" if d > 0 else "decrease"), "strength": d}
              for c, d in tele]
    return Explanation(text=text, mode="teleological", causes=causes)


def _speakable(report, q: Query, slice_name: str | None) -> list:
    """Ranked mechanistic causes whose sign matches the queried condition."""
    slices = report.mechanistic
    if not slices:
        raise RealisationError("mechanistic attribution unavailable")
    if slice_name is not None:
        chosen = [s for s in slices if s.name == slice_name]
    else:
        chosen = [s for s in slices if s.name == "present-future"] or [slices[-1]]
    want = -1 if report.resolution_flip else 1
    out = [f for f in chosen[0].features if (1 if f.mean >= 0 else -1) == want]
    return out


def realise_mechanistic(report, q: Query, offset: int = 0, top_k: int = 2,
                        slice_name: str | None = None,
                        continuation: bool = False) -> Explanation:
    """'Because vehicle 1 will be slower than us.' style answers.

    ``offset`` walks down the ranked causes across follow-up turns; verb-like
    causes of the same vehicle merge into one clause ('It will decelerate and
    turn right.').
    """
    feats = _speakable(report, q, slice_name)
    if offset >= len(feats):
        raise RealisationError("no further mechanistic causes")
    tpl = _templates()
    tense = _tense(q)
    first = feats[offset]
    prop, vid = _split_feature(first.name)
    if prop not in tpl["features"]:
        raise RealisationError(f"no template for feature {prop!r}")
    aux1, verb1 = tpl["features"][prop][tense]
    verbs = [verb1]
    consumed = 1
    while consumed < top_k and offset + consumed < len(feats):
        nxt = feats[offset + consumed]
        nprop, nvid = _split_feature(nxt.name)
        if nvid != vid or nprop not in tpl["features"]:
            break
        if not (_MERGEABLE.match(prop) and _MERGEABLE.match(nprop)):
            break
        aux2, verb2 = tpl["features"][nprop][tense]
        if aux2 != aux1:
            break
        verbs.append(verb2)
        consumed += 1
    clause = " and ".join(verbs)
    aux_txt = f"{aux1} " if aux1 else ""
    if continuation:
        text = f"It {aux_txt}{clause}."
    else:
        text = f"Because vehicle {vid} {aux_txt}{clause}."
    causes = [{"kind": "mechanistic", "vehicle": _split_feature(f.name)[1],
               "feature": f.name, "direction": ("supports" if f.mean >= 0 else "opposes"),
               "strength": f.mean}
              for f in feats[offset:offset + consumed]]
    return Explanation(text=text, mode="mechanistic", causes=causes,
                       consumed=consumed)


def realise_associative(report, q: Query) -> Explanation:
    """'We would've gone straight.' style answers about the ego itself."""
    assoc = report.associative
    if not assoc:
        raise RealisationError("associative description unavailable")
    tpl = _templates()
    tense = _tense(q)
    action = assoc.get("macro") or assoc.get("maneuver")
    if action in ("Continue", "lane-follow") and assoc.get("maneuver") in (
            "turn-left", "turn-right", "give-way"):
        action = assoc["maneuver"]
    if action not in tpl["ego_actions"]:
        raise RealisationError(f"no template for ego action {action!r}")
    base, pp, past = tpl["ego_actions"][action]
    contrastive = q.negated or q.kind == "whatif"
    if contrastive:
        phrase = f"would've {pp}" if tense == "past" else f"would {base}"
    elif tense == "future":
        phrase = f"will {base}"
    elif tense == "past":
        phrase = past
    else:
        phrase = f"are going to {base}"
    accel = assoc.get("accel")
    if accel in tpl["ego_accel"]:
        ab, app, apast = tpl["ego_accel"][accel]
        if contrastive:
            phrase += f" and {app}" if tense == "past" else f" and {ab}"
        elif tense == "future":
            phrase += f" and {ab}"
        elif tense == "past":
            phrase += f" and {apast}"
        else:
            phrase += f" and {ab}"
    text = f"We {phrase}."
    causes = [{"kind": "associative", "vehicle": report.ego_id,
               "feature": action, "direction": "describes",
               "strength": assoc.get("support", 1.0)}]
    return Explanation(text=text, mode="associative", causes=causes)


def realise(report, q: Query, mode: str, offset: int = 0,
            continuation: bool = False) -> Explanation:
    """Realise one answer in the requested explanatory mode."""
    if mode == "teleological":
        return realise_teleological(report, q)
    if mode == "mechanistic":
        return realise_mechanistic(report, q, offset=offset,
                                   continuation=continuation)
    if mode == "associative":
        return realise_associative(report, q)
    raise RealisationError(f"unknown mode {mode!r}")


def default_mode(q: Query) -> str:
    return "teleological" if q.kind == "why" else "associative"


@dataclass
class ConversationEntry:
    query: Query
    report: object
    mech_cursor: int = 0
    spoke_mechanistic: bool = False


@dataclass
class ConversationState:
    """Per-session history; follow-ups chain onto the last answered query."""

    entries: list[ConversationEntry] = field(default_factory=list)

    def record(self, query: Query, report) -> None:
        self.entries.append(ConversationEntry(query=query, report=report))

    def follow_up(self, kind: str) -> Explanation:
        """why: mechanistic causes on the same window; more: next cause."""
        if not self.entries:
            raise RealisationError("no antecedent query to follow up on")
        last = self.entries[-1]
        top_k = 2 if kind == "why" else 1
        exp = realise_mechanistic(last.report, last.query,
                                  offset=last.mech_cursor, top_k=top_k,
                                  continuation=last.spoke_mechanistic)
        last.mech_cursor += exp.consumed
        last.spoke_mechanistic = True
        return exp
