"""Sentence schemas: loading, validation and expansion into prompt passages.

A schema file holds one template per row. Each template has a single
``BLANK`` slot for the target pronoun and a ``partner_body`` (the paired
sentence) carrying a ``PRONOUN`` slot that refers to the other role. The
partner body is used as the priming sentence in the discourse-primed settings.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

from .errors import PairingError, SchemaError

BLANK = "BLANK"
PRONOUN = "PRONOUN"

SCHEMA_COLUMNS = (
    "template_id",
    "pair_id",
    "target_role_kind",
    "occupation_noun",
    "participant_noun",
    "pronoun_case",
    "body",
    "partner_body",
)


class RoleKind(str, enum.Enum):
    OCCUPATION = "occupation"
    PARTICIPANT = "participant"


class PronounCase(str, enum.Enum):
    NOMINATIVE = "nominative"
    ACCUSATIVE = "accusative"
    POSSESSIVE_DEPENDENT = "possessive_dependent"
    POSSESSIVE_INDEPENDENT = "possessive_independent"


class Gender(str, enum.Enum):
    FEMININE = "feminine"
    MASCULINE = "masculine"


class ContextSetting(str, enum.Enum):
    UNPRIMED = "unprimed"
    PRIMED_FEMININE = "primed_feminine"
    PRIMED_MASCULINE = "primed_masculine"
    NULL_1 = "null_1"
    NULL_2 = "null_2"

    @property
    def prime_gender(self) -> Gender | None:
        if self is ContextSetting.PRIMED_FEMININE:
            return Gender.FEMININE
        if self is ContextSetting.PRIMED_MASCULINE:
            return Gender.MASCULINE
        return None

    @property
    def is_discourse_primed(self) -> bool:
        return self.prime_gender is not None


class OptionOrder(str, enum.Enum):
    MASC_FEM = "masc_fem"
    FEM_MASC = "fem_masc"


NULL_PRIMES = {
    ContextSetting.NULL_1: "The sky is blue.",
    ContextSetting.NULL_2: "North is south.",
}

LEXICON: dict[tuple[Gender, PronounCase], str] = {
    (Gender.FEMININE, PronounCase.NOMINATIVE): "she",
    (Gender.FEMININE, PronounCase.ACCUSATIVE): "her",
    (Gender.FEMININE, PronounCase.POSSESSIVE_DEPENDENT): "her",
    (Gender.FEMININE, PronounCase.POSSESSIVE_INDEPENDENT): "hers",
    (Gender.MASCULINE, PronounCase.NOMINATIVE): "he",
    (Gender.MASCULINE, PronounCase.ACCUSATIVE): "him",
    (Gender.MASCULINE, PronounCase.POSSESSIVE_DEPENDENT): "his",
    (Gender.MASCULINE, PronounCase.POSSESSIVE_INDEPENDENT): "his",
}

FEMININE_FORMS = frozenset(v for (g, _), v in LEXICON.items() if g is Gender.FEMININE)
MASCULINE_FORMS = frozenset(v for (g, _), v in LEXICON.items() if g is Gender.MASCULINE)


def pronoun_form(gender: Gender, case: PronounCase) -> str:
    return LEXICON[(Gender(gender), PronounCase(case))]


def gender_of(form: str) -> Gender | None:
    """Gender of a surface pronoun, or None if it is not a binary form."""
    form = form.lower()
    if form in FEMININE_FORMS:
        return Gender.FEMININE
    if form in MASCULINE_FORMS:
        return Gender.MASCULINE
    return None


@dataclass(frozen=True)
class Template:
    template_id: str
    pair_id: str
    target_role_kind: RoleKind
    occupation_noun: str
    participant_noun: str
    pronoun_case: PronounCase
    body: str
    partner_body: str
    # case of the pronoun in partner_body; filled from the pair member at load
    partner_case: PronounCase | None = None

    @property
    def target_noun(self) -> str:
        if self.target_role_kind is RoleKind.OCCUPATION:
            return self.occupation_noun
        return self.participant_noun

    @property
    def other_noun(self) -> str:
        if self.target_role_kind is RoleKind.OCCUPATION:
            return self.participant_noun
        return self.occupation_noun


@dataclass(frozen=True)
class TemplatePair:
    pair_id: str
    first: Template  # occupation-target member
    second: Template  # participant-target member

    @property
    def members(self) -> tuple[Template, Template]:
        return (self.first, self.second)


def _row_errors(row: dict[str, str]) -> list[str]:
    problems = []
    for col in SCHEMA_COLUMNS:
        if not (row.get(col) or "").strip():
            problems.append(f"missing value for {col!r}")
    if problems:
        return problems
    if row["target_role_kind"] not in {r.value for r in RoleKind}:
        problems.append(f"target_role_kind {row['target_role_kind']!r} not in {[r.value for r in RoleKind]}")
    if row["pronoun_case"] not in {c.value for c in PronounCase}:
        problems.append(f"pronoun_case {row['pronoun_case']!r} not in {[c.value for c in PronounCase]}")
    n_blank = row["body"].count(BLANK)
    if n_blank != 1:
        problems.append(f"body must contain exactly one {BLANK} token, found {n_blank}")
    n_pron = row["partner_body"].count(PRONOUN)
    if n_pron != 1:
        problems.append(f"partner_body must contain exactly one {PRONOUN} token, found {n_pron}")
    if BLANK in row["partner_body"]:
        problems.append(f"partner_body must not contain {BLANK}")
    return problems


def _read_rows(path: Path) -> list[dict[str, str]]:
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    if path.suffix in {".jsonl", ".ndjson"}:
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    delimiter = "\t" if path.suffix in {".tsv", ".tab"} else ","
    reader = csv.DictReader(text.splitlines(), delimiter=delimiter)
    missing = [c for c in SCHEMA_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise SchemaError(f"missing columns {missing}", row=0, rule="columns")
    return list(reader)


def schema_violations(path: str | Path) -> list[str]:
    """All structural violations in a schema file, one message per problem."""
    path = Path(path)
    try:
        rows = _read_rows(path)
    except SchemaError as exc:
        return [str(exc)]
    messages = []
    good = []
    seen: set[str] = set()
    for i, row in enumerate(rows, start=1):
        problems = _row_errors(row)
        if row.get("template_id") in seen:
            problems.append(f"duplicate template_id {row['template_id']!r}")
        seen.add(row.get("template_id", ""))
        messages.extend(f"row {i}: {p}" for p in problems)
        if not problems:
            good.append(row)
    if not messages:
        try:
            _pair_up([_template_from_row(r) for r in good])
        except PairingError as exc:
            messages.append(str(exc))
    return messages


def _template_from_row(row: dict[str, str]) -> Template:
    return Template(
        template_id=row["template_id"].strip(),
        pair_id=row["pair_id"].strip(),
        target_role_kind=RoleKind(row["target_role_kind"].strip()),
        occupation_noun=row["occupation_noun"].strip(),
        participant_noun=row["participant_noun"].strip(),
        pronoun_case=PronounCase(row["pronoun_case"].strip()),
        body=row["body"].strip(),
        partner_body=row["partner_body"].strip(),
    )


def _pair_up(templates: Iterable[Template]) -> dict[str, list[Template]]:
    groups: dict[str, list[Template]] = {}
    for t in templates:
        groups.setdefault(t.pair_id, []).append(t)
    orphans = []
    for members in groups.values():
        kinds = {m.target_role_kind for m in members}
        if len(members) != 2 or len(kinds) != 2:
            orphans.extend(m.template_id for m in members)
    if orphans:
        raise PairingError(orphans, "pair_ids need exactly one occupation- and one participant-target member")
    return groups


def load_schema(path: str | Path) -> list[Template]:
    """Load and validate a schema file.

    Raises SchemaError naming the first offending row, or PairingError
    listing every template whose pair_id is incomplete.
    """
    path = Path(path)
    rows = _read_rows(path)
    templates = []
    seen: set[str] = set()
    for i, row in enumerate(rows, start=1):
        problems = _row_errors(row)
        if problems:
            raise SchemaError("; ".join(problems), row=i, rule="structure")
        t = _template_from_row(row)
        if t.template_id in seen:
            raise SchemaError(f"duplicate template_id {t.template_id!r}", row=i, rule="unique_id")
        seen.add(t.template_id)
        templates.append(t)
    return _resolve_partner_cases(templates)


def _resolve_partner_cases(templates: list[Template]) -> list[Template]:
    groups = _pair_up(templates)
    out = []
    for t in templates:
        a, b = groups[t.pair_id]
        partner = b if a.template_id == t.template_id else a
        out.append(replace(t, partner_case=partner.pronoun_case))
    return out


def pair_index(templates: list[Template]) -> list[TemplatePair]:
    """One TemplatePair per pair_id, sorted by pair_id, occupation-target member first."""
    groups = _pair_up(templates)
    pairs = []
    for pair_id in sorted(groups):
        a, b = groups[pair_id]
        if a.target_role_kind is not RoleKind.OCCUPATION:
            a, b = b, a
        pairs.append(TemplatePair(pair_id, a, b))
    return pairs


def expand(template: Template, setting: ContextSetting) -> str:
    """Passage for ``template`` under ``setting``; BLANK is left in place."""
    setting = ContextSetting(setting)
    if setting is ContextSetting.UNPRIMED:
        return template.body
    if setting in NULL_PRIMES:
        return f"{NULL_PRIMES[setting]} {template.body}"
    if template.partner_body.count(PRONOUN) != 1:
        raise SchemaError(f"template {template.template_id}: partner_body has no single {PRONOUN} slot")
    case = template.partner_case or template.pronoun_case
    prime = template.partner_body.replace(PRONOUN, pronoun_form(setting.prime_gender, case))
    return f"{prime} {template.body}"


def pronoun_options(case: PronounCase, order: OptionOrder) -> tuple[str, str]:
    masc = pronoun_form(Gender.MASCULINE, case)
    fem = pronoun_form(Gender.FEMININE, case)
    return (masc, fem) if OptionOrder(order) is OptionOrder.MASC_FEM else (fem, masc)


def schema_hash(templates: list[Template]) -> str:
    h = hashlib.sha256()
    for t in sorted(templates, key=lambda t: t.template_id):
        h.update(json.dumps([t.template_id, t.pair_id, t.target_role_kind.value, t.occupation_noun,
                             t.participant_noun, t.pronoun_case.value, t.body, t.partner_body]).encode())
    return h.hexdigest()[:16]


def write_schema(templates: Iterable[Template], path: str | Path) -> None:
    path = Path(path)
    delimiter = "\t" if path.suffix in {".tsv", ".tab"} else ","
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SCHEMA_COLUMNS, delimiter=delimiter)
        writer.writeheader()
        for t in templates:
            writer.writerow({
                "template_id": t.template_id,
                "pair_id": t.pair_id,
                "target_role_kind": t.target_role_kind.value,
                "occupation_noun": t.occupation_noun,
                "participant_noun": t.participant_noun,
                "pronoun_case": t.pronoun_case.value,
                "body": t.body,
                "partner_body": t.partner_body,
            })


# Winogender/WinoPron-style TSV ingestion.
_WG_SLOTS = {
    "$NOM_PRONOUN": PronounCase.NOMINATIVE,
    "$ACC_PRONOUN": PronounCase.ACCUSATIVE,
    "$POSS_PRONOUN": PronounCase.POSSESSIVE_DEPENDENT,
    "$POSSIND_PRONOUN": PronounCase.POSSESSIVE_INDEPENDENT,
}


def convert_winogender_tsv(path: str | Path) -> list[Template]:
    """Convert a Winogender-layout TSV into Templates.

    Expected columns: ``occupation(0)``, ``other-participant(1)``, ``answer``
    (0 = occupation antecedent, 1 = participant antecedent) and ``sentence``
    containing ``$OCCUPATION``, ``$PARTICIPANT`` and one pronoun slot such as
    ``$NOM_PRONOUN``. Every row becomes one template; rows that share an
    (occupation, participant) pair and have opposite answers are paired, so a
    pair is the first occupation row matched with the first participant row.
    Pronoun case is taken from the slot of each row.
    """
    rows = list(csv.DictReader(Path(path).read_text(encoding="utf-8").splitlines(), delimiter="\t"))

    def col(row: dict, *names: str) -> str:
        for n in names:
            if n in row:
                return row[n].strip()
        raise SchemaError(f"missing any of columns {names}", rule="columns")

    by_pair: dict[tuple[str, str], dict[str, list[tuple[str, PronounCase, str]]]] = {}
    for i, row in enumerate(rows, start=1):
        occ = col(row, "occupation(0)", "occupation")
        part = col(row, "other-participant(1)", "participant", "other-participant")
        answer = col(row, "answer")
        sentence = col(row, "sentence").replace("$OCCUPATION", occ).replace("$PARTICIPANT", part)
        slots = [s for s in _WG_SLOTS if s in sentence]
        if len(slots) != 1 or sentence.count(slots[0]) != 1:
            raise SchemaError("sentence needs exactly one pronoun slot", row=i, rule="structure")
        kind = "occupation" if answer == "0" else "participant"
        sentence = sentence[0].upper() + sentence[1:]
        by_pair.setdefault((occ, part), {"occupation": [], "participant": []})[kind].append(
            (sentence, _WG_SLOTS[slots[0]], slots[0]))

    templates = []
    for (occ, part), members in sorted(by_pair.items()):
        for idx, (occ_row, part_row) in enumerate(zip(members["occupation"], members["participant"])):
            pair_id = f"{occ}-{part}-{idx}"
            for kind, mine, theirs in (("occupation", occ_row, part_row), ("participant", part_row, occ_row)):
                templates.append(Template(
                    template_id=f"{pair_id}-{kind[:3]}",
                    pair_id=pair_id,
                    target_role_kind=RoleKind(kind),
                    occupation_noun=occ,
                    participant_noun=part,
                    pronoun_case=mine[1],
                    body=mine[0].replace(mine[2], BLANK),
                    partner_body=theirs[0].replace(theirs[2], PRONOUN),
                ))
    return _resolve_partner_cases(templates)
