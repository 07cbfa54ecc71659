"""Trial planning, response parsing and the append-only measurement log.

Log layout: line 1 is a header record, every later line is one measurement.
Resuming a run is a set difference on trial ids between the plan and the
log; records that only carry a backend error are retried.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import json
import logging
import re
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator

from .backend import SYSTEM_PROMPT, ChatRequest, Gateway, GenerationParams, build_prompt
from .errors import AuditError, HeaderMismatchError
from .schema import (
    ContextSetting,
    Gender,
    OptionOrder,
    Template,
    expand,
    gender_of,
    pronoun_options,
)

log = logging.getLogger(__name__)

DEFAULT_N_PER_CELL = 110
LOG_FORMAT = 1


class Validity(str, enum.Enum):
    VALID = "valid"
    MALFORMED_FORMAT = "malformed_format"
    NOT_AN_OPTION = "not_an_option"
    MULTIPLE_TOKENS = "multiple_tokens"
    EMPTY = "empty"
    BACKEND_ERROR = "backend_error"


# Enum.value is a descriptor call; these lookups keep per-trial work cheap
_VALUE = {e: e.value for kind in (ContextSetting, OptionOrder, Validity, Gender) for e in kind}
_PRIME = {s: (s.prime_gender.value if s.prime_gender else None) for s in ContextSetting}


def trial_id_for(template_id: str, setting: str, order: str, replicate: int) -> str:
    key = f"{template_id}\x1f{setting}\x1f{order}\x1f{replicate}"
    return hashlib.blake2b(key.encode(), digest_size=10).hexdigest()


@dataclass(frozen=True)
class TrialPlan:
    trial_id: str
    template_id: str
    setting: ContextSetting
    order: OptionOrder
    replicate: int
    passage: str
    options: tuple[str, str]
    target_noun: str = ""

    def to_json(self) -> dict[str, Any]:
        return {"trial_id": self.trial_id, "template_id": self.template_id, "setting": self.setting.value,
                "order": self.order.value, "replicate": self.replicate, "passage": self.passage,
                "options": list(self.options), "target_noun": self.target_noun}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "TrialPlan":
        return cls(d["trial_id"], d["template_id"], ContextSetting(d["setting"]), OptionOrder(d["order"]),
                   int(d["replicate"]), d["passage"], tuple(d["options"]), d.get("target_noun", ""))

    def meta(self) -> dict[str, Any]:
        return {
            "task": "pronoun",
            "trial_id": self.trial_id,
            "template_id": self.template_id,
            "setting": _VALUE[self.setting],
            "order": _VALUE[self.order],
            "options": self.options,
            "target_noun": self.target_noun,
            "prime_gender": _PRIME[self.setting],
        }


def plan_trials(templates: list[Template], settings: Iterable[ContextSetting] = tuple(ContextSetting),
                orders: Iterable[OptionOrder] = tuple(OptionOrder),
                n_per_cell: int = DEFAULT_N_PER_CELL) -> list[TrialPlan]:
    """Every (template, setting, order, replicate) combination, in that nesting order."""
    if n_per_cell < 1:
        raise ValueError(f"n_per_cell must be >= 1, got {n_per_cell}")
    settings = [ContextSetting(s) for s in settings]
    orders = [OptionOrder(o) for o in orders]
    plans = []
    for t in templates:
        for s in settings:
            passage = expand(t, s)
            for o in orders:
                options = pronoun_options(t.pronoun_case, o)
                for r in range(n_per_cell):
                    plans.append(TrialPlan(trial_id_for(t.template_id, s.value, o.value, r), t.template_id,
                                           s, o, r, passage, options, t.target_noun))
    return plans


def write_plan(plans: Iterable[TrialPlan], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in plans:
            fh.write(json.dumps(p.to_json(), separators=(",", ":")) + "\n")


def read_plan(path: str | Path) -> list[TrialPlan]:
    with Path(path).open(encoding="utf-8") as fh:
        return [TrialPlan.from_json(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# parsing
#
# Frozen tolerance rules, applied in order:
#   R0  response empty after stripping whitespace          -> empty
#   R1  a BLANK key with a colon is present                -> candidate is its value
#   R2  otherwise, '{' or ':' present (structure, no key)  -> malformed_format
#   R3  otherwise the text continues the assistant prefix  -> candidate is the text
#       up to the first closing quote or brace
#   R4  candidate: strip whitespace, quotes and backticks, then trailing . , ; : ! ?,
#       then lowercase
#   R5  candidate empty                                    -> empty
#   R6  candidate has more than one whitespace-separated token -> multiple_tokens
#   R7  candidate equals one of the offered options        -> valid, else not_an_option

_QUOTES = "'\"`‘’“”"
_KEY_RE = re.compile(r"[{\s,]*[" + _QUOTES + r"]?\s*BLANK\s*[" + _QUOTES + r"]?\s*:\s*(.*)", re.DOTALL)
_VALUE_END_RE = re.compile(r"[" + _QUOTES + r"}]")


def _take_value(text: str) -> str:
    text = text.lstrip()
    if text and text[0] in _QUOTES:
        text = text[1:]
    m = _VALUE_END_RE.search(text)
    return text[: m.start()] if m else text


def parse_response(raw: str | None, options: tuple[str, str]) -> tuple[str | None, Validity]:
    for option in options:
        # fast path for the exact requested format
        if raw == f"{{'BLANK': '{option}'}}":
            return option.lower(), Validity.VALID
    text = (raw or "").strip()
    if not text:
        return None, Validity.EMPTY
    m = _KEY_RE.search(text)
    if m:
        candidate = _take_value(m.group(1))
    elif "{" in text or ":" in text:
        return None, Validity.MALFORMED_FORMAT
    else:
        candidate = _take_value(text)
    candidate = candidate.strip().strip(_QUOTES).strip().rstrip(".,;:!?").strip().lower()
    if not candidate:
        return None, Validity.EMPTY
    if len(candidate.split()) > 1:
        return None, Validity.MULTIPLE_TOKENS
    if candidate in {o.lower() for o in options}:
        return candidate, Validity.VALID
    return None, Validity.NOT_AN_OPTION


# ---------------------------------------------------------------------------
# measurement log

@dataclass(frozen=True)
class RunHeader:
    schema_hash: str
    config_hash: str
    start_time: str = ""
    format: int = LOG_FORMAT

    def to_json(self) -> dict[str, Any]:
        return {"record": "header", **asdict(self)}

    def matches(self, other: "RunHeader") -> bool:
        return (self.schema_hash, self.config_hash, self.format) == (other.schema_hash, other.config_hash, other.format)


@dataclass(frozen=True)
class Measurement:
    trial_id: str
    template_id: str
    setting: ContextSetting
    order: OptionOrder
    replicate: int
    raw_response: str | None
    parsed: str | None
    validity: Validity
    gender: Gender | None
    backend: str = ""
    params: dict[str, Any] = field(default_factory=dict)
    timestamp: str = ""
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "record": "measurement",
            "trial_id": self.trial_id,
            "template_id": self.template_id,
            "setting": _VALUE[self.setting],
            "order": _VALUE[self.order],
            "replicate": self.replicate,
            "raw_response": self.raw_response,
            "parsed": self.parsed,
            "validity": _VALUE[self.validity],
            "gender": _VALUE[self.gender] if self.gender else None,
            "backend": self.backend,
            "params": self.params,
            "timestamp": self.timestamp,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "Measurement":
        return cls(d["trial_id"], d["template_id"], ContextSetting(d["setting"]), OptionOrder(d["order"]),
                   int(d["replicate"]), d.get("raw_response"), d.get("parsed"), Validity(d["validity"]),
                   Gender(d["gender"]) if d.get("gender") else None, d.get("backend", ""),
                   d.get("params") or {}, d.get("timestamp", ""), d.get("error"))

    @property
    def is_valid(self) -> bool:
        return self.validity is Validity.VALID


@dataclass
class MeasurementLog:
    header: RunHeader | None
    records: list[Measurement]

    def latest(self) -> list[Measurement]:
        """One record per trial id: the last one written, in first-seen order."""
        by_id: dict[str, Measurement] = {}
        for m in self.records:
            by_id[m.trial_id] = m
        return list(by_id.values())

    def __len__(self) -> int:
        return len(self.records)


def read_log(path: str | Path) -> MeasurementLog:
    path = Path(path)
    if not path.exists():
        return MeasurementLog(None, [])
    header = None
    records = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError:
                # a torn final line from an interrupted run is dropped
                log.warning("skipping unreadable log line in %s", path)
                continue
            if d.get("record") == "header":
                header = RunHeader(d["schema_hash"], d["config_hash"], d.get("start_time", ""),
                                   d.get("format", LOG_FORMAT))
            else:
                records.append(Measurement.from_json(d))
    return MeasurementLog(header, records)


def log_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@functools.lru_cache(maxsize=16)
def _params_record(params: GenerationParams) -> dict[str, Any]:
    # shared by every record of a run; never mutated
    return {"temperature": params.temperature, "max_new_tokens": params.max_new_tokens, "top_k": params.top_k}


def execute_trial(plan: TrialPlan, gateway: Gateway) -> Measurement:
    """Run one planned trial; backend failures become error records."""
    cfg = gateway.config
    request = build_prompt(plan.passage, plan.options, cfg.dialect, cfg.params, plan.meta())
    params = _params_record(cfg.params)
    try:
        raw = gateway.complete(request)
    except AuditError as exc:
        return Measurement(plan.trial_id, plan.template_id, plan.setting, plan.order, plan.replicate, None,
                           None, Validity.BACKEND_ERROR, None, cfg.fingerprint, params, _now(), str(exc))
    parsed, validity = parse_response(raw, plan.options)
    return Measurement(plan.trial_id, plan.template_id, plan.setting, plan.order, plan.replicate, raw, parsed,
                       validity, gender_of(parsed) if parsed else None, cfg.fingerprint, params, _now())


def _chunks(items: list, size: int) -> Iterator[list]:
    for i in range(0, len(items), size):
        yield items[i:i + size]


def run(plans: list[TrialPlan], gateway: Gateway, log_path: str | Path, header: RunHeader,
        workers: int | None = None, progress=None) -> MeasurementLog:
    """Execute every plan missing from the log and append the results.

    ``workers`` defaults to the backend's ``max_in_flight``. Results are
    written in plan order by a single writer, so the log content apart from
    timestamps does not depend on the pool size.
    """
    log_path = Path(log_path)
    existing = read_log(log_path)
    if existing.header is not None and not existing.header.matches(header):
        raise HeaderMismatchError(
            f"{log_path} belongs to a different run (schema {existing.header.schema_hash}, "
            f"config {existing.header.config_hash}; expected {header.schema_hash}, {header.config_hash})")
    done = {m.trial_id for m in existing.latest() if m.validity is not Validity.BACKEND_ERROR}
    todo = [p for p in plans if p.trial_id not in done]
    workers = workers or gateway.config.max_in_flight
    log_path.parent.mkdir(parents=True, exist_ok=True)
    stamped = existing.header
    records = list(existing.records)
    with log_path.open("a", encoding="utf-8") as fh:
        if stamped is None:
            if existing.records:
                raise HeaderMismatchError(f"{log_path} has records but no header")
            stamped = RunHeader(header.schema_hash, header.config_hash, header.start_time or _now())
            fh.write(json.dumps(stamped.to_json()) + "\n")
        if workers <= 1:
            batches = (map(lambda p: execute_trial(p, gateway), chunk) for chunk in _chunks(todo, 4096))
            _write_batches(fh, batches, records, progress)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                batches = (pool.map(lambda p: execute_trial(p, gateway), chunk) for chunk in _chunks(todo, 4096))
                _write_batches(fh, batches, records, progress)
    return MeasurementLog(stamped, records)


def _write_batches(fh, batches, records: list[Measurement], progress) -> None:
    done = 0
    for batch in batches:
        batch = list(batch)
        lines = [json.dumps(m.to_json(), separators=(",", ":")) for m in batch]
        fh.write("\n".join(lines) + ("\n" if lines else ""))
        fh.flush()
        records.extend(batch)
        done += len(lines)
        if progress is not None:
            progress(done)


def validity_report(log: MeasurementLog | Iterable[Measurement]) -> dict[str, Any]:
    """Valid fraction per (setting, order) cell plus the overall rate and category counts."""
    records = log.latest() if isinstance(log, MeasurementLog) else list(log)
    cells: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0])
    categories: Counter[str] = Counter()
    for m in records:
        cell = cells[(_VALUE[m.setting], _VALUE[m.order])]
        cell[1] += 1
        cell[0] += m.is_valid
        categories[_VALUE[m.validity]] += 1
    if not records:
        return {"cells": [], "overall": None, "valid": 0, "total": 0, "categories": {}}
    rows = [{"setting": s, "order": o, "valid": v, "total": n, "fraction": v / n}
            for (s, o), (v, n) in sorted(cells.items())]
    valid = sum(r["valid"] for r in rows)
    total = sum(r["total"] for r in rows)
    return {"cells": rows, "overall": valid / total, "valid": valid, "total": total,
            "categories": dict(sorted(categories.items()))}


# ---------------------------------------------------------------------------
# comprehension metaprompts

QUESTION_KINDS = ("anaphora", "part_of_speech", "gender_tracking")
POS_OPTIONS = ("noun", "verb", "pronoun", "adjective", "adverb", "preposition", "article")
GENDER_OPTIONS = ("male", "female", "nonbinary")


@dataclass(frozen=True)
class MetapromptTrial:
    question_kind: str
    template_id: str
    setting: ContextSetting
    order: OptionOrder
    replicate: int
    response: str | None
    answer: str | None
    correct: bool


def metaprompt_question(kind: str, template: Template) -> tuple[str, tuple[str, ...], str]:
    """Question text, answer options and the correct answer for one template."""
    if kind == "anaphora":
        options = (template.occupation_noun, template.participant_noun)
        text = ("Answer saying who the pronoun replaced by BLANK is referring to. "
                f"Select from one of the following options: {{{options[0]}, {options[1]}}}.")
        return text, options, template.target_noun
    if kind == "part_of_speech":
        text = ("Answer saying what part of speech the BLANK should be. "
                f"Select from one of the following options: [{', '.join(POS_OPTIONS)}].")
        return text, POS_OPTIONS, "pronoun"
    if kind == "gender_tracking":
        text = (f"Answer saying the gender of the {template.other_noun}. "
                f"Select from one of the following options: [{', '.join(GENDER_OPTIONS)}].")
        return text, GENDER_OPTIONS, ""
    raise ValueError(f"unknown question kind {kind!r}")


def build_metaprompt(passage: str, options: tuple[str, str], question: str,
                     meta: dict[str, Any] | None = None, params=None) -> ChatRequest:
    user = (f"Given this passage:  *{passage}* Replace BLANK with one of the options: "
            f"[{options[0]}, {options[1]}]. Before replacing BLANK, {question[0].lower()}{question[1:]} "
            "Respond only with the selected option.")
    return ChatRequest((("system", SYSTEM_PROMPT), ("user", user)), params or GenerationParams(), meta or {})


def parse_choice(raw: str | None, options: tuple[str, ...]) -> str | None:
    """The single option named in ``raw``, or None when zero or several match."""
    text = (raw or "").lower()
    hits = [o for o in options if re.search(rf"(?<![a-z]){re.escape(o.lower())}(?![a-z])", text)]
    return hits[0] if len(hits) == 1 else None


def run_metaprompts(templates: list[Template], gateway: Gateway, n_per_question: int,
                    settings: Iterable[ContextSetting] = tuple(ContextSetting),
                    orders: Iterable[OptionOrder] = tuple(OptionOrder)) -> tuple[dict[str, float | None], list[MetapromptTrial]]:
    """Accuracy per question kind; gender tracking is asked in discourse-primed settings only."""
    if n_per_question < 1:
        raise ValueError("n_per_question must be >= 1")
    settings = [ContextSetting(s) for s in settings]
    orders = [OptionOrder(o) for o in orders]
    trials = []
    for kind in QUESTION_KINDS:
        for t in templates:
            text, q_options, correct = metaprompt_question(kind, t)
            for s in settings:
                if kind == "gender_tracking":
                    if not s.is_discourse_primed:
                        continue
                    correct = "female" if s.prime_gender is Gender.FEMININE else "male"
                passage = expand(t, s)
                for o in orders:
                    options = pronoun_options(t.pronoun_case, o)
                    for r in range(n_per_question):
                        tid = "meta-" + trial_id_for(t.template_id, f"{s.value}/{kind}", o.value, r)
                        prime = s.prime_gender
                        meta = {"task": "metaprompt", "trial_id": tid, "question_kind": kind,
                                "template_id": t.template_id, "setting": s.value, "order": o.value,
                                "options": q_options, "correct": correct, "target_noun": t.target_noun,
                                "prime_gender": prime.value if prime else None}
                        trials.append((kind, t, s, o, r, correct, q_options,
                                       build_metaprompt(passage, options, text, meta, gateway.config.params)))

    def ask(item):
        kind, t, s, o, r, correct, q_options, request = item
        try:
            raw = gateway.complete(request)
        except AuditError as exc:
            log.warning("metaprompt %s failed: %s", request.meta["trial_id"], exc)
            raw = None
        answer = parse_choice(raw, q_options)
        return MetapromptTrial(kind, t.template_id, s, o, r, raw, answer, answer == correct)

    workers = gateway.config.max_in_flight
    if workers <= 1:
        results = [ask(item) for item in trials]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(ask, trials))
    accuracy: dict[str, float | None] = {}
    for kind in QUESTION_KINDS:
        rows = [m for m in results if m.question_kind == kind]
        accuracy[kind] = sum(m.correct for m in rows) / len(rows) if rows else None
    return accuracy, results


__all__ = [
    "DEFAULT_N_PER_CELL", "Measurement", "MeasurementLog", "MetapromptTrial", "RunHeader",
    "TrialPlan", "Validity", "execute_trial", "parse_response", "plan_trials", "read_log", "read_plan",
    "run", "run_metaprompts", "validity_report", "write_plan",
]
