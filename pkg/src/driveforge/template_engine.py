"""Rule-based, fact-grounded caption and QA generation.

Templates are flat slot patterns ("{weather}", "{count:vehicle}") with a
per-category list of rows; there is no recursive grammar. Each slot is
filled from exactly the facts it consumes, so a caption's ``facts_used``
ledger is a complete grounding record and can be re-checked mechanically.

Output is a pure function of (window, label, template set, seed): template
choice uses a seeded RNG, slot filling is deterministic, and sub-seeds are
hash-derived per category.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .action_labeler import ActionLabel
from .errors import EmptyTemplateSetError, MissingSlotError, SchemaError
from .facts import (DEFAULT_FACT_THRESHOLDS, FactThresholds, action_value,
                    extract_facts, fact_for_subject, facts_from_label,
                    facts_with, nearest_object_id, signal_states)
from .scene_store import SceneWindow
from .seeding import derive_seed

QA_CATEGORIES = ("environment", "static", "dynamic", "reasoning", "action")
MOVING_CATEGORIES = ("vehicle", "pedestrian", "cyclist")

_SLOT_RE = re.compile(r"\{([a-z_]+)(?::([a-z_]+))?\}")

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six",
                "seven", "eight", "nine", "ten", "eleven", "twelve")

SIDE_PHRASES = {
    "front": "ahead",
    "front_left": "ahead on the left",
    "front_right": "ahead on the right",
    "left": "on the left",
    "right": "on the right",
    "rear": "behind",
}
BAND_PHRASES = {
    "near": "within close range",
    "mid": "at a moderate distance",
    "far": "far away",
}
CATEGORY_NOUNS = {
    "vehicle": ("vehicle", "vehicles"),
    "pedestrian": ("pedestrian", "pedestrians"),
    "cyclist": ("cyclist", "cyclists"),
    "traffic_light": ("traffic light", "traffic lights"),
    "traffic_sign": ("traffic sign", "traffic signs"),
    "other": ("obstacle", "obstacles"),
}


# ---------------------------------------------------------------------------
# Template set and prior library


@dataclass(frozen=True)
class TemplateRow:
    id: str
    pattern: str
    required_predicates: tuple[str, ...]
    fallback_id: str | None = None


@dataclass(frozen=True)
class TemplateSet:
    categories: dict
    questions: dict
    phrases: dict
    empty_scene: dict


@dataclass(frozen=True)
class PriorRow:
    trigger: str
    constraint_text: str


@dataclass(frozen=True)
class PriorLibrary:
    rubric: str
    rows: tuple[PriorRow, ...]

    def row_for(self, trigger: str) -> PriorRow | None:
        for row in self.rows:
            if row.trigger == trigger:
                return row
        return None


def _data_text(name: str) -> str:
    return resources.files("driveforge.data").joinpath(name).read_text("utf-8")


def load_template_set(path: str | Path | None = None) -> TemplateSet:
    """Load a template set; None loads the packaged default."""
    raw = Path(path).read_text("utf-8") if path else _data_text("templates.json")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"template set is not valid JSON: {exc}") from exc
    categories = {}
    for cat, rows in doc.get("categories", {}).items():
        parsed = []
        for row in rows:
            parsed.append(TemplateRow(
                id=row["id"],
                pattern=row["pattern"],
                required_predicates=tuple(row.get("required_predicates", [])),
                fallback_id=row.get("fallback_id"),
            ))
        categories[cat] = tuple(parsed)
    return TemplateSet(
        categories=categories,
        questions={k: tuple(v) for k, v in doc.get("questions", {}).items()},
        phrases=doc.get("phrases", {}),
        empty_scene=dict(doc.get("empty_scene", {})),
    )


def load_priors(path: str | Path | None = None) -> PriorLibrary:
    raw = Path(path).read_text("utf-8") if path else _data_text("priors.json")
    doc = json.loads(raw)
    return PriorLibrary(
        rubric=doc.get("rubric", ""),
        rows=tuple(PriorRow(r["trigger"], r["constraint_text"])
                   for r in doc.get("rows", [])),
    )


# ---------------------------------------------------------------------------
# Trigger registry (which human priors apply to a fact set)


def _near_ids(facts, category: str) -> list[str]:
    return sorted(f.subject_ids[0]
                  for f in facts_with(facts, "distance_band", category)
                  if f.value == "near")


def _signal_colors(facts) -> set[str]:
    return {str(f.value) for f in signal_states(facts)}


def _cross_count(facts) -> int:
    rows = facts_with(facts, "lane_topology")
    if not rows:
        return 0
    part = str(rows[0].value).split("cross:")[-1]
    try:
        return int(part)
    except ValueError:
        return 0


_LOW_VISIBILITY = ("fog", "night", "twilight", "rain", "snow")

TRIGGERS = {
    "pedestrian_near": lambda facts: bool(_near_ids(facts, "pedestrian")),
    "cyclist_near": lambda facts: bool(_near_ids(facts, "cyclist")),
    "vehicle_near": lambda facts: bool(_near_ids(facts, "vehicle")),
    "red_signal": lambda facts: "red" in _signal_colors(facts),
    "yellow_signal": lambda facts: bool({"yellow", "amber"} & _signal_colors(facts)),
    "cross_traffic": lambda facts: _cross_count(facts) > 0,
    "low_visibility": lambda facts: any(
        f.value in _LOW_VISIBILITY for f in facts_with(facts, "weather_is")),
}


def active_triggers(facts) -> list[str]:
    """Trigger names that hold on this fact set, sorted for determinism."""
    return sorted(name for name, pred in TRIGGERS.items() if pred(facts))


# ---------------------------------------------------------------------------
# Captions


@dataclass(frozen=True)
class GroundedCaption:
    text: str
    facts_used: tuple[str, ...]
    category: str


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: GroundedCaption
    category: str
    scene_id: str
    window_index: int
    validation: str  # template | mllm_validated | mllm_repaired


def count_phrase(count: int, category: str) -> str:
    singular, plural = CATEGORY_NOUNS[category]
    if count == 0:
        return f"no {plural}"
    if count == 1:
        return f"one {singular}"
    word = NUMBER_WORDS[count] if count < len(NUMBER_WORDS) else str(count)
    return f"{word} {plural}"


def lane_phrase(value: str) -> str:
    parts = dict(p.split(":") for p in value.split(","))
    same, opposite = int(parts["same"]), int(parts["opposite"])
    cross = int(parts.get("cross", 0))
    def lanes(n):
        return f"{n} lane" if n == 1 else f"{n} lanes"
    text = f"{lanes(same)} in the ego direction and {lanes(opposite)} oncoming"
    if cross:
        text += f", plus {cross} crossing lane" + ("s" if cross > 1 else "")
    return text


class _SlotContext:
    """Resolves slots against a fact list and records the facts consumed."""

    def __init__(self, facts, phrases):
        self.facts = facts
        self.phrases = phrases
        self.used: list[str] = []

    def _use(self, *facts):
        for f in facts:
            if f is not None and f.fact_id not in self.used:
                self.used.append(f.fact_id)

    def resolve(self, name: str, arg: str | None, template_id: str) -> str:
        def missing(predicate):
            return MissingSlotError(
                f"template {template_id!r} slot {{{name}}} has no matching "
                f"{predicate} fact", template_id=template_id, predicate=predicate)

        if name == "weather":
            rows = facts_with(self.facts, "weather_is")
            if not rows:
                raise missing("weather_is")
            self._use(rows[0])
            return str(rows[0].value)
        if name == "road":
            rows = facts_with(self.facts, "road_is")
            if not rows:
                raise missing("road_is")
            self._use(rows[0])
            return str(rows[0].value)
        if name == "lanes":
            rows = facts_with(self.facts, "lane_topology")
            if not rows:
                raise missing("lane_topology")
            self._use(rows[0])
            return lane_phrase(str(rows[0].value))
        if name == "count":
            rows = facts_with(self.facts, "count", arg)
            if not rows:
                raise missing(f"count:{arg}")
            self._use(rows[0])
            return count_phrase(int(rows[0].value), arg)
        if name in ("side", "band"):
            oid = nearest_object_id(self.facts, arg)
            if oid is None:
                raise missing(f"position_side:{arg}")
            predicate = "position_side" if name == "side" else "distance_band"
            fact = fact_for_subject(self.facts, predicate, oid)
            if fact is None:
                raise missing(f"{predicate}:{arg}")
            self._use(fact_for_subject(self.facts, "exists", oid), fact)
            table = SIDE_PHRASES if name == "side" else BAND_PHRASES
            return table[str(fact.value)]
        if name == "signal":
            rows = signal_states(self.facts)
            if not rows:
                raise missing("signal_state")
            self._use(rows[0])
            return str(rows[0].value)
        if name == "action":
            value = action_value(self.facts, arg)
            if value is None:
                raise missing("action_is")
            for f in facts_with(self.facts, "action_is"):
                if str(f.value) == f"{arg}:{value}":
                    self._use(f)
            return self.phrases.get(arg, {}).get(value, value)
        raise MissingSlotError(f"unknown slot {{{name}}} in template {template_id!r}",
                               template_id=template_id, predicate=name)


def _requirement_met(req: str, facts) -> bool:
    predicate, _, category = req.partition(":")
    return bool(facts_with(facts, predicate, category or None))


def _fill(row: TemplateRow, facts, phrases) -> tuple[str, tuple[str, ...]]:
    ctx = _SlotContext(facts, phrases)
    def sub(match):
        return ctx.resolve(match.group(1), match.group(2), row.id)
    text = _SLOT_RE.sub(sub, row.pattern)
    return text, tuple(ctx.used)


def render_caption(facts, category: str, templates: TemplateSet,
                   seed: int) -> GroundedCaption:
    """Render one caption for a category from type-checked facts.

    The template is a seeded pseudorandom pick among the category's rows
    whose required predicates all have matching facts. When no row is
    satisfiable a :class:`MissingSlotError` names the first unmet
    predicate so callers can fall back.
    """
    rows = templates.categories.get(category, ())
    if not rows:
        raise EmptyTemplateSetError(f"no templates for category {category!r}")
    eligible = [r for r in rows
                if all(_requirement_met(req, facts) for req in r.required_predicates)]
    if not eligible:
        first = rows[0]
        unmet = next(req for req in first.required_predicates
                     if not _requirement_met(req, facts))
        raise MissingSlotError(
            f"no eligible template for category {category!r}; "
            f"template {first.id!r} requires {unmet!r}",
            template_id=first.id, predicate=unmet)
    rng = random.Random(seed)
    row = eligible[rng.randrange(len(eligible))]
    text, used = _fill(row, facts, templates.phrases)
    return GroundedCaption(text=text, facts_used=used, category=category)


# ---------------------------------------------------------------------------
# Reasoning chains


def _observation_clauses(facts):
    """One clause per hazard fact: near objects, then lit signals."""
    clauses = []
    used = []
    for category in ("pedestrian", "cyclist", "vehicle"):
        for oid in _near_ids(facts, category):
            side = fact_for_subject(facts, "position_side", oid)
            band = fact_for_subject(facts, "distance_band", oid)
            exists = fact_for_subject(facts, "exists", oid)
            singular, _ = CATEGORY_NOUNS[category]
            side_text = SIDE_PHRASES[str(side.value)] if side else "ahead"
            clauses.append(f"A {singular} {side_text} is within close range.")
            used.extend(f.fact_id for f in (exists, side, band) if f)
    for fact in signal_states(facts):
        color = str(fact.value)
        if color in ("red", "yellow", "amber"):
            clauses.append(f"The traffic light ahead shows {color}.")
            used.append(fact.fact_id)
    return clauses, used


def compose_reasoning(facts, label: ActionLabel, templates: TemplateSet,
                      seed: int, priors: PriorLibrary | None = None
                      ) -> GroundedCaption:
    """Observation, constraint, decision: an ordered causal chain.

    Observations cover every hazard-class fact (near pedestrian, cyclist,
    or vehicle; lit signal); constraints come from the human-prior library
    rows whose triggers hold; the decision clause restates the action label
    with its fixed lexeme set, so a Stop label always yields stop wording.
    """
    if priors is None:
        priors = load_priors()
    observations, used = _observation_clauses(facts)
    if not observations:
        observations = ["No hazards are in close range of the ego vehicle."]
        for category in MOVING_CATEGORIES:
            rows = facts_with(facts, "count", category)
            used.extend(f.fact_id for f in rows)

    constraint_rows = [priors.row_for(t) for t in active_triggers(facts)]
    constraint_rows = [r for r in constraint_rows if r is not None]
    if not constraint_rows:
        default = priors.row_for("default")
        constraint_rows = [default] if default else []
    constraints = [r.constraint_text for r in constraint_rows]

    phrases = templates.phrases
    long_phrase = phrases.get("longitudinal", {}).get(
        label.longitudinal, label.longitudinal)
    rng = random.Random(seed)
    intro = rng.choice(("Therefore", "Given these conditions,"))
    decision = f"{intro} the ego vehicle will {long_phrase}"
    if label.maneuver != "GoStraight":
        man_phrase = phrases.get("maneuver", {}).get(label.maneuver, label.maneuver)
        decision += f" and {man_phrase}"
    decision += "."

    for f in facts_with(facts, "action_is"):
        axis = str(f.value).split(":", 1)[0]
        if axis in ("longitudinal", "maneuver") and f.fact_id not in used:
            used.append(f.fact_id)

    text = " ".join(observations + constraints + [decision])
    return GroundedCaption(text=text, facts_used=tuple(used), category="reasoning")


# ---------------------------------------------------------------------------
# QA assembly


def _is_empty_scene(facts) -> bool:
    return all(not facts_with(facts, "count", c) or
               int(facts_with(facts, "count", c)[0].value) == 0
               for c in MOVING_CATEGORIES)


def generate_qa(window: SceneWindow, label: ActionLabel, templates: TemplateSet,
                seed: int, priors: PriorLibrary | None = None,
                thresholds: FactThresholds = DEFAULT_FACT_THRESHOLDS,
                categories=QA_CATEGORIES) -> list[QAPair]:
    """One template-grounded QA pair per enabled category.

    Deterministic: the same (window, label, templates, seed) always yields
    byte-identical pairs regardless of call order, which is what allows
    parallel generation.
    """
    facts = extract_facts(window, thresholds)
    facts = facts + facts_from_label(label, window.last_frame.frame_id)
    pairs = []
    for category in QA_CATEGORIES:
        if category not in categories:
            continue
        qseed = derive_seed(seed, window.key, category, "q")
        aseed = derive_seed(seed, window.key, category, "a")
        questions = templates.questions.get(category, ())
        if not questions:
            raise EmptyTemplateSetError(f"no question templates for {category!r}")
        question = questions[random.Random(qseed).randrange(len(questions))]

        if category == "dynamic" and _is_empty_scene(facts):
            answer = GroundedCaption(templates.empty_scene["dynamic"], (), "dynamic")
        elif category == "reasoning":
            answer = compose_reasoning(facts, label, templates, aseed, priors)
        else:
            answer = render_caption(facts, category, templates, aseed)
        pairs.append(QAPair(
            question=question,
            answer=answer,
            category=category,
            scene_id=window.scene_id,
            window_index=window.window_index,
            validation="template",
        ))
    return pairs
