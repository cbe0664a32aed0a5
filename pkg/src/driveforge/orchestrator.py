"""MLLM orchestration: prompts, transport, grounding validation, repair.

The flow per scene window is: serialize the window's facts and draft
captions into a deterministic prompt, call a chat-completions-style
endpoint (media passed as opaque URIs, never decoded), then run the
completion through a lexicon-based grounding validator. Hallucinations
confined to removable sentences are cut out and the result re-validated;
anything else is rejected and, by policy, replaced with the template
caption or dropped. A finalized annotation whose provenance is not
"template" is guaranteed to re-pass validation.

Validation is deliberately lexicon-based and sentence-local rather than
semantic: category lexemes, digit/number-word counts, and side phrases are
matched per sentence against the fact set, which keeps the check
deterministic and testable.

Every endpoint exchange is appended to a JSONL audit log keyed by window,
which is also what offline mode replays instead of the network.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import (AuthError, BudgetError, MalformedResponseError,
                     MissingInputError, RateLimitError, TransportError)
from .facts import category_count, category_sides, facts_with, nearest_object_id
from .nlg_metrics import tokenize
from .scene_store import SceneWindow
from .template_engine import GroundedCaption, PriorLibrary, active_triggers

TASKS = ("environment", "static", "dynamic", "reasoning", "action")

_TASK_REQUIREMENTS = {
    "environment": "Describe the weather, road type, and lane layout.",
    "static": "Describe the static road structure and any traffic controls.",
    "dynamic": "Describe the moving agents around the ego vehicle.",
    "reasoning": "Explain, step by step, why the planned action is appropriate.",
    "action": "State the action the ego vehicle should take next.",
}

_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


# ---------------------------------------------------------------------------
# Prompt bundles


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    media_refs: tuple[str, ...]
    task: str
    window_key: str

    def request_payload(self, model: str) -> dict:
        content = [{"type": "text", "text": self.user_text}]
        content += [{"type": "image_url", "image_url": {"url": ref}}
                    for ref in self.media_refs]
        return {
            "model": model,
            "messages": [
                {"role": "system", "content": self.system_text},
                {"role": "user", "content": content},
            ],
        }


def serialize_fact(fact) -> str:
    subjects = ",".join(fact.subject_ids)
    return f"- {fact.fact_id} {fact.predicate}({subjects}) = {fact.value}"


def _token_count(text: str) -> int:
    # Budget accounting is whitespace tokens; close enough for truncation.
    return len(text.split())


def _far_subject_ids(facts) -> set[str]:
    return {f.subject_ids[0] for f in facts_with(facts, "distance_band")
            if f.value == "far"}


def build_prompt(window: SceneWindow, facts, captions, priors: PriorLibrary,
                 task: str, token_budget: int = 2048) -> PromptBundle:
    """Assemble the deterministic prompt for one (window, task) pair.

    Facts are serialized sorted by fact id; the system text is the prior
    rows whose triggers hold plus the fixed rubric. When the user text
    exceeds the token budget, fact groups of far-band objects are dropped
    first (farthest ids last-to-first); if the mandatory remainder still
    does not fit, that is a :class:`BudgetError`.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    ordered = sorted(facts, key=lambda f: f.fact_id)

    triggered = [priors.row_for(t) for t in active_triggers(ordered)]
    lines = [row.constraint_text for row in triggered if row is not None]
    system_text = "\n".join(lines + [priors.rubric]) if lines else priors.rubric

    head = [f"TASK: {_TASK_REQUIREMENTS[task]}"]
    drafts = ["DRAFT CAPTIONS:"] + [f"- {c.text}" for c in captions]
    footer = ["Answer using only the facts above."]

    droppable = _far_subject_ids(ordered)
    kept = list(ordered)

    def render(fact_rows):
        body = ["FACTS:"] + [serialize_fact(f) for f in fact_rows]
        return "\n".join(head + body + drafts + footer)

    user_text = render(kept)
    # Drop far-band object groups (all facts of that subject) until we fit.
    drop_order = sorted(droppable, reverse=True)
    while _token_count(user_text) > token_budget and drop_order:
        victim = drop_order.pop(0)
        kept = [f for f in kept if f.subject_ids[0] != victim]
        user_text = render(kept)
    if _token_count(user_text) > token_budget:
        raise BudgetError(
            f"mandatory prompt content needs {_token_count(user_text)} tokens, "
            f"budget is {token_budget}")

    media = tuple(ref for frame in window.frames for ref in frame.media_refs)
    return PromptBundle(
        system_text=system_text,
        user_text=user_text,
        media_refs=media,
        task=task,
        window_key=f"{window.key}/{task}",
    )


# ---------------------------------------------------------------------------
# Endpoint client


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "qwen2.5-vl-72b"
    auth_env: str = "DRIVEFORGE_API_TOKEN"
    timeout_s: float = 30.0
    max_attempts: int = 3
    max_inflight: int = 4
    backoff_base_s: float = 0.5


@dataclass(frozen=True)
class RawCompletion:
    text: str
    usage: dict
    attempts: int


class TransportFailure(Exception):
    """Network-level failure a transport raises; retried as transient."""


@dataclass(frozen=True)
class TransportResponse:
    status_code: int
    headers: dict
    text: str


class RequestsTransport:
    """Default HTTP transport over ``requests``."""

    def __call__(self, url: str, headers: dict, payload: dict,
                 timeout: float) -> TransportResponse:
        import requests

        try:
            resp = requests.post(url, headers=headers, json=payload,
                                 timeout=timeout)
        except requests.RequestException as exc:
            raise TransportFailure(str(exc)) from exc
        return TransportResponse(resp.status_code, dict(resp.headers), resp.text)


class AuditLog:
    """Append-only JSONL log of endpoint exchanges, keyed by window.

    Appends are serialized with a lock; this is the only shared mutable
    resource in the orchestration stage.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, window_key: str, request_hash: str, attempts: int,
               status: str, text: str | None) -> None:
        record = {
            "window_key": window_key,
            "request_hash": request_hash,
            "attempts": attempts,
            "status": status,
            "text": text,
        }
        line = json.dumps(record, sort_keys=True, separators=(",", ":"))
        with self._lock:
            with self.path.open("a", encoding="utf-8") as fp:
                fp.write(line + "\n")

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text("utf-8").splitlines():
            line = line.strip()
            if line:
                out.append(json.loads(line))
        return out

    def replay_text(self, window_key: str) -> str | None:
        """Latest successful completion recorded for a window key."""
        text = None
        for record in self.entries():
            if record.get("window_key") == window_key and record.get("status") == "ok":
                text = record.get("text")
        return text

    def require_replay(self, window_key: str) -> str:
        text = self.replay_text(window_key)
        if text is None:
            raise MissingInputError(
                f"no cached completion for {window_key!r} in audit log "
                f"{self.path}; run the caption stage online first")
        return text


def request_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _auth_headers(endpoint: EndpointConfig) -> dict:
    import os

    headers = {"Content-Type": "application/json"}
    if endpoint.auth_env:
        token = os.environ.get(endpoint.auth_env)
        if not token:
            raise AuthError(
                f"auth token env var {endpoint.auth_env!r} is not set")
        headers["Authorization"] = f"Bearer {token}"
    return headers


def _parse_completion(body: str) -> tuple[str, dict]:
    try:
        data = json.loads(body)
    except json.JSONDecodeError as exc:
        raise MalformedResponseError(
            f"endpoint returned non-JSON body: {body[:200]!r}") from exc
    try:
        text = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponseError(
            f"completion payload missing choices[0].message.content: "
            f"{body[:200]!r}") from exc
    if not isinstance(text, str):
        raise MalformedResponseError("completion content is not a string")
    usage = data.get("usage", {})
    return text, usage if isinstance(usage, dict) else {}


def request_completion(bundle: PromptBundle, endpoint: EndpointConfig,
                       transport=None, sleep=time.sleep,
                       audit: AuditLog | None = None) -> RawCompletion:
    """Call the endpoint with bounded retries and exponential backoff.

    Transient failures (network errors, 429, 5xx) are retried up to
    ``endpoint.max_attempts`` total attempts; 429 honors Retry-After when
    present. Auth failures and malformed bodies are terminal. Every
    outcome is appended to the audit log when one is given.
    """
    payload = bundle.request_payload(endpoint.model)
    rhash = request_hash(payload)
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    headers = _auth_headers(endpoint)
    transport = transport or RequestsTransport()

    def log(attempts, status, text=None):
        if audit is not None:
            audit.append(bundle.window_key, rhash, attempts, status, text)

    last_error: Exception | None = None
    for attempt in range(1, endpoint.max_attempts + 1):
        delay = endpoint.backoff_base_s * (2.0 ** (attempt - 1))
        try:
            resp = transport(url, headers, payload, endpoint.timeout_s)
        except TransportFailure as exc:
            last_error = TransportError(
                f"transport failure after attempt {attempt}: {exc}")
            if attempt < endpoint.max_attempts:
                sleep(delay)
            continue

        if resp.status_code in (401, 403):
            log(attempt, "auth_error")
            raise AuthError(f"endpoint rejected credentials "
                            f"(HTTP {resp.status_code})")
        if resp.status_code == 429:
            retry_after = None
            raw = resp.headers.get("Retry-After")
            if raw is not None:
                try:
                    retry_after = float(raw)
                except ValueError:
                    retry_after = None
            last_error = RateLimitError(
                f"rate limited on attempt {attempt}", retry_after=retry_after)
            if attempt < endpoint.max_attempts:
                sleep(max(delay, retry_after or 0.0))
            continue
        if resp.status_code >= 500:
            last_error = TransportError(
                f"server error HTTP {resp.status_code} on attempt {attempt}")
            if attempt < endpoint.max_attempts:
                sleep(delay)
            continue
        if resp.status_code >= 400:
            log(attempt, "transport_error")
            raise TransportError(f"endpoint error HTTP {resp.status_code}: "
                                 f"{resp.text[:200]}")

        try:
            text, usage = _parse_completion(resp.text)
        except MalformedResponseError:
            log(attempt, "malformed")
            raise
        log(attempt, "ok", text)
        return RawCompletion(text=text, usage=usage, attempts=attempt)

    status = "rate_limited" if isinstance(last_error, RateLimitError) \
        else "transport_error"
    log(endpoint.max_attempts, status)
    raise last_error if last_error else TransportError("no attempts made")


# ---------------------------------------------------------------------------
# Grounding validation


@dataclass(frozen=True)
class Lexicon:
    categories: dict
    sides: dict
    numbers: dict
    signal_colors: tuple[str, ...]
    decision_words: frozenset


def load_lexicon(path: str | Path | None = None) -> Lexicon:
    if path is not None:
        raw = Path(path).read_text("utf-8")
    else:
        raw = resources.files("driveforge.data").joinpath("lexicon.json") \
            .read_text("utf-8")
    doc = json.loads(raw)
    return Lexicon(
        categories={k: tuple(v) for k, v in doc["categories"].items()},
        sides={k: tuple(v) for k, v in doc["sides"].items()},
        numbers=dict(doc["numbers"]),
        signal_colors=tuple(doc["signal_colors"]),
        decision_words=frozenset(doc["decision_words"]),
    )


@dataclass(frozen=True)
class Mention:
    lexeme: str
    category: str
    sentence_index: int
    token_index: int
    resolved_fact_id: str | None


@dataclass(frozen=True)
class CountCheck:
    category: str
    stated: int
    truth: int
    ok: bool
    sentence_index: int


@dataclass(frozen=True)
class SideCheck:
    object_id: str
    stated_side: str
    truth_side: str
    ok: bool
    sentence_index: int


@dataclass(frozen=True)
class ValidationReport:
    mentions: tuple[Mention, ...]
    count_checks: tuple[CountCheck, ...]
    side_checks: tuple[SideCheck, ...]
    verdict: str  # pass | repairable | reject
    failing_sentences: tuple[int, ...] = field(default=())
    num_sentences: int = 0


def split_sentences(text: str) -> list[str]:
    stripped = text.strip()
    if not stripped:
        return []
    return [s for s in _SENTENCE_RE.split(stripped) if s.strip()]


def _phrase_positions(tokens, phrase_tokens, consumed) -> list[int]:
    n = len(phrase_tokens)
    hits = []
    for i in range(len(tokens) - n + 1):
        if any((i + j) in consumed for j in range(n)):
            continue
        if tuple(tokens[i:i + n]) == phrase_tokens:
            hits.append(i)
    return hits


def _scan_phrases(tokens, table: dict, consumed: set) -> list[tuple[str, int, int]]:
    """(key, start, length) per non-overlapping phrase hit, longest first."""
    entries = []
    for key, phrases in table.items():
        for phrase in phrases:
            entries.append((key, tuple(phrase.split())))
    entries.sort(key=lambda e: (-len(e[1]), e[0], e[1]))
    found = []
    for key, phrase_tokens in entries:
        for start in _phrase_positions(tokens, phrase_tokens, consumed):
            found.append((key, start, len(phrase_tokens)))
            consumed.update(range(start, start + len(phrase_tokens)))
    return found


def _stated_count(tokens, mention_start: int, numbers: dict) -> int | None:
    """Digit or number word within the two tokens before the mention."""
    for back in (1, 2):
        idx = mention_start - back
        if idx < 0:
            break
        token = tokens[idx]
        if token in numbers:
            return int(numbers[token])
        if token.isdigit():
            return int(token)
    return None


def validate_grounding(completion_text: str, facts, lexicon: Lexicon
                       ) -> ValidationReport:
    """Check every category mention, stated count, and stated side.

    Resolution is per sentence so that failures localize: the verdict is
    ``pass`` when every check holds, ``repairable`` when all failures sit
    in sentences free of decision wording (they can be cut without touching
    the decision), and ``reject`` otherwise. Unparseable text rejects with
    no mentions.
    """
    sentences = split_sentences(completion_text)
    if not sentences:
        return ValidationReport((), (), (), "reject", (), 0)

    mentions: list[Mention] = []
    count_checks: list[CountCheck] = []
    side_checks: list[SideCheck] = []
    failing: set[int] = set()

    for s_idx, sentence in enumerate(sentences):
        tokens = tokenize(sentence)
        consumed: set[int] = set()
        category_hits = []
        for category, start, length in _scan_phrases(tokens, lexicon.categories,
                                                     consumed):
            # "ego vehicle" is the subject of the caption, not a detection.
            if start > 0 and tokens[start - 1] == "ego":
                continue
            category_hits.append((category, start, length))
        category_hits.sort(key=lambda h: h[1])

        side_hits = _scan_phrases(tokens, lexicon.sides, consumed)

        for category, start, length in category_hits:
            truth_count = category_count(facts, category)
            stated = _stated_count(tokens, start, lexicon.numbers)
            resolved_id = None
            exists_rows = facts_with(facts, "exists", category)
            count_rows = facts_with(facts, "count", category)
            if truth_count > 0:
                resolved_id = (exists_rows[0].fact_id if exists_rows
                               else count_rows[0].fact_id)
            elif stated == 0:
                resolved_id = count_rows[0].fact_id if count_rows else None
            lexeme = " ".join(tokens[start:start + length])
            mentions.append(Mention(lexeme, category, s_idx, start, resolved_id))
            if resolved_id is None:
                failing.add(s_idx)
            if stated is not None:
                ok = stated == truth_count
                count_checks.append(CountCheck(category, stated, truth_count,
                                               ok, s_idx))
                if not ok:
                    failing.add(s_idx)
            if category == "traffic_light":
                colors = {str(f.value) for f in facts_with(facts, "signal_state")}
                stated_colors = [t for t in tokens if t in lexicon.signal_colors]
                for color in stated_colors:
                    if colors and color not in colors:
                        failing.add(s_idx)

        # Side statements attach to the nearest mention in the sentence.
        for side, start, _length in side_hits:
            if not category_hits:
                continue
            category, _, _ = min(category_hits,
                                 key=lambda h: (abs(h[1] - start), h[1]))
            truth_sides = category_sides(facts, category)
            if not truth_sides:
                continue  # already failing via the unresolved mention
            ok = side in truth_sides
            if ok:
                matching = [f.subject_ids[0]
                            for f in facts_with(facts, "position_side", category)
                            if f.value == side]
                object_id = matching[0]
                truth_side = side
            else:
                object_id = nearest_object_id(facts, category) or ""
                row = [f for f in facts_with(facts, "position_side", category)
                       if f.subject_ids[0] == object_id]
                truth_side = str(row[0].value) if row else ""
                failing.add(s_idx)
            side_checks.append(SideCheck(object_id, side, truth_side, ok, s_idx))

    if not failing:
        verdict = "pass"
    else:
        decision_sentences = {
            i for i, s in enumerate(sentences)
            if set(tokenize(s)) & lexicon.decision_words}
        removable = all(i not in decision_sentences for i in failing)
        verdict = "repairable" if removable else "reject"

    return ValidationReport(tuple(mentions), tuple(count_checks),
                            tuple(side_checks), verdict,
                            tuple(sorted(failing)), len(sentences))


# ---------------------------------------------------------------------------
# Repair / finalize


@dataclass(frozen=True)
class FinalAnnotation:
    text: str | None
    validation: str  # mllm_validated | mllm_repaired | template | rejected
    dropped: bool


def repair_or_finalize(completion_text: str, report: ValidationReport, facts,
                       lexicon: Lexicon, policy: str = "fallback",
                       fallback: GroundedCaption | None = None
                       ) -> FinalAnnotation:
    """Resolve a validation report into a final annotation.

    pass: keep the text (mllm_validated). repairable: cut the offending
    sentences and re-validate; only a clean re-pass ships (mllm_repaired),
    anything else falls through to the reject policy. reject: substitute
    the template caption (provenance "template") or drop, per policy.
    One repair round only.
    """
    if policy not in ("fallback", "drop"):
        raise ValueError(f"unknown reject policy {policy!r}")

    if report.verdict == "pass":
        return FinalAnnotation(completion_text, "mllm_validated", False)

    if report.verdict == "repairable":
        sentences = split_sentences(completion_text)
        bad = set(report.failing_sentences)
        repaired = " ".join(s for i, s in enumerate(sentences) if i not in bad)
        if repaired.strip():
            recheck = validate_grounding(repaired, facts, lexicon)
            if recheck.verdict == "pass":
                return FinalAnnotation(repaired, "mllm_repaired", False)

    if policy == "fallback" and fallback is not None:
        return FinalAnnotation(fallback.text, "template", False)
    return FinalAnnotation(None, "rejected", True)
