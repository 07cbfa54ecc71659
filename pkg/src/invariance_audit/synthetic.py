"""Synthetic schemas and norms for simulations, smoke tests and demos."""

from __future__ import annotations

from .schema import BLANK, PRONOUN, PronounCase, RoleKind, Template, _resolve_partner_cases

OCCUPATIONS = [
    "mechanic", "nurse", "engineer", "librarian", "surgeon", "secretary", "plumber", "dancer",
    "pilot", "hairdresser", "carpenter", "receptionist", "firefighter", "dietitian", "electrician",
    "paralegal", "janitor", "therapist", "chemist", "cashier", "architect", "baker", "sheriff",
    "teacher", "accountant", "clerk", "painter", "pharmacist", "programmer", "counselor",
]
PARTICIPANTS = [
    "customer", "patient", "client", "visitor", "student", "passenger", "child", "guest",
    "owner", "victim", "resident", "tenant", "buyer", "advisee", "witness",
]

_FRAMES = [
    ("The {occ} called to inform the {part} that {p_occ} had completed the repair.",
     "The {occ} called to inform the {part} that {p_part} car would be ready in the morning.",
     PronounCase.NOMINATIVE, PronounCase.POSSESSIVE_DEPENDENT),
    ("The {occ} told the {part} that the report had been sent to {p_occ} office.",
     "The {occ} told the {part} that the letter was addressed to {p_part}.",
     PronounCase.POSSESSIVE_DEPENDENT, PronounCase.ACCUSATIVE),
    ("The {part} thanked the {occ} because the advice from {p_occ} was useful.",
     "The {part} thanked the {occ} because the gift was a favourite of {p_part}.",
     PronounCase.ACCUSATIVE, PronounCase.POSSESSIVE_INDEPENDENT),
    ("The {occ} asked the {part} whether the final decision was {p_occ}.",
     "The {occ} asked the {part} whether {p_part} had any questions.",
     PronounCase.POSSESSIVE_INDEPENDENT, PronounCase.NOMINATIVE),
]


def synthetic_templates(n_pairs: int) -> list[Template]:
    """``n_pairs`` template pairs cycling through occupations, participants and frames."""
    templates = []
    for i in range(n_pairs):
        occ = OCCUPATIONS[i % len(OCCUPATIONS)]
        part = PARTICIPANTS[(i // len(OCCUPATIONS) + i) % len(PARTICIPANTS)]
        occ_sent, part_sent, occ_case, part_case = _FRAMES[i % len(_FRAMES)]
        pair_id = f"p{i:03d}"
        occ_body = occ_sent.format(occ=occ, part=part, p_occ=BLANK)
        part_body = part_sent.format(occ=occ, part=part, p_part=BLANK)
        templates.append(Template(f"{pair_id}-occ", pair_id, RoleKind.OCCUPATION, occ, part, occ_case,
                                  occ_body, part_body.replace(BLANK, PRONOUN)))
        templates.append(Template(f"{pair_id}-par", pair_id, RoleKind.PARTICIPANT, occ, part, part_case,
                                  part_body, occ_body.replace(BLANK, PRONOUN)))
    return _resolve_partner_cases(templates)


def synthetic_norms(nouns: list[str] | None = None) -> dict[str, float]:
    """Femininity ratings spread evenly over [0.05, 0.95]; every noun is rated."""
    nouns = sorted(set(nouns if nouns is not None else OCCUPATIONS + PARTICIPANTS))
    n = len(nouns)
    # spread by a fixed permutation so alphabetical order is not rating order
    order = sorted(range(n), key=lambda i: (i * 7919) % n)
    return {nouns[idx]: round(0.05 + 0.9 * rank / max(n - 1, 1), 6) for rank, idx in enumerate(order)}
