import csv
import warnings

import pytest

from invariance_audit.report import RunConfig
from invariance_audit.schema import PRONOUN, pair_index, PronounCase, RoleKind, Template, _resolve_partner_cases, write_schema
from invariance_audit.synthetic import synthetic_norms, synthetic_templates

warnings.filterwarnings("ignore", category=DeprecationWarning, module="hypothesis")


@pytest.fixture
def mechanic_pair():
    """The mechanic/customer pair used throughout the worked examples."""
    occ = Template(
        "mech-occ", "mech", RoleKind.OCCUPATION, "mechanic", "customer", PronounCase.NOMINATIVE,
        "The mechanic called to inform the customer that BLANK had completed the repair.",
        f"The mechanic called to inform the customer that {PRONOUN} car would be ready in the morning.",
    )
    par = Template(
        "mech-par", "mech", RoleKind.PARTICIPANT, "mechanic", "customer", PronounCase.POSSESSIVE_DEPENDENT,
        "The mechanic called to inform the customer that BLANK car would be ready in the morning.",
        f"The mechanic called to inform the customer that {PRONOUN} had completed the repair.",
    )
    return _resolve_partner_cases([occ, par])


def write_norms(path, ratings):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["role_noun", "femininity_rating"])
        for noun, r in sorted(ratings.items()):
            w.writerow([noun, r])
    return path


@pytest.fixture
def workspace(tmp_path):
    """Synthetic 20-pair schema plus norms on disk."""
    templates = synthetic_templates(20)
    write_schema(templates, tmp_path / "schema.csv")
    write_norms(tmp_path / "norms.csv", synthetic_norms())
    return tmp_path, templates


def make_config(root, strategy=None, **overrides):
    data = {
        "schema": str(root / "schema.csv"),
        "norms": str(root / "norms.csv"),
        "output_dir": str(root / "run"),
        "n_per_cell": 20,
        "bootstrap": 200,
        "backend": {"kind": "mock_strategy", "strategy": strategy or {"name": "uniform"}},
    }
    backend = overrides.pop("backend", {})
    data["backend"].update(backend)
    data.update(overrides)
    return RunConfig.from_dict(data)


def design_entries(templates, by_order):
    """fixed_table entries; by_order maps order -> (first_f, first_m, second_f, second_m)."""
    entries = []
    for pair in pair_index(templates):
        for order, cells in by_order.items():
            for member, (pf, pm) in zip(pair.members, (cells[:2], cells[2:])):
                entries.append({"template_id": member.template_id, "setting": "primed_feminine", "order": order,
                                "p_feminine": pf})
                entries.append({"template_id": member.template_id, "setting": "primed_masculine", "order": order,
                                "p_feminine": pm})
    return entries
