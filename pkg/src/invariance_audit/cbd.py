"""Contextuality-by-Default analysis of template pairs under the steering design.

Two questions q1, q2 carry binary variables X1, X2 (feminine coded +1). In
ordering o1 the first pair member's sentence is the prime and the second
member's BLANK is measured; o2 is the reverse. For each ordering we hold the
two expectations and the product expectation; the degree of contextuality is

    dc = |<X1X2>_o1 - <X1X2>_o2| - (|<X1>_o1 - <X1>_o2| + |<X2>_o1 - <X2>_o2|)

and a system is contextual when dc exceeds the decision tolerance (0 by
default). :func:`coupling_oracle` decides the same question independently
by exact linear feasibility over the 16 atoms of a joint distribution.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping

import numpy as np

from .errors import DomainError
from .lp import as_fraction, feasible
from .schema import ContextSetting, OptionOrder, TemplatePair

ATOM_TOL = 1e-9
ESTIMATORS = ("mixture", "product")
POOLING_RULES = ("either", "both")


def expectation_from_p(p: float) -> float:
    return 2.0 * p - 1.0


def joint_product(p_i: float, p_j: float) -> float:
    """Product-form joint expectation 4 p_i p_j - 2 p_i - 2 p_j + 1."""
    return 4.0 * p_i * p_j - 2.0 * p_i - 2.0 * p_j + 1.0


def joint_mixture(prime_rate: float, p_given_f: float, p_given_m: float) -> float:
    """E[prime * target] when the prime is feminine with probability ``prime_rate``."""
    return prime_rate * (2.0 * p_given_f - 1.0) - (1.0 - prime_rate) * (2.0 * p_given_m - 1.0)


@dataclass(frozen=True)
class CbdSystem:
    e1_o1: float
    e2_o1: float
    e1_o2: float
    e2_o2: float
    j_o1: float
    j_o2: float
    provenance: str = "direct"

    def atoms(self, ordering: int) -> dict[tuple[int, int], float]:
        """2x2 joint of (X1, X2) in one ordering, keyed by (+-1, +-1)."""
        if ordering == 1:
            e1, e2, j = self.e1_o1, self.e2_o1, self.j_o1
        else:
            e1, e2, j = self.e1_o2, self.e2_o2, self.j_o2
        return {(a, b): (1 + a * e1 + b * e2 + a * b * j) / 4 for a in (1, -1) for b in (1, -1)}

    def check(self) -> None:
        values = (self.e1_o1, self.e2_o1, self.e1_o2, self.e2_o2, self.j_o1, self.j_o2)
        if any(not np.isfinite(v) or abs(v) > 1 + ATOM_TOL for v in values):
            raise DomainError(f"expectations must lie in [-1, 1]: {values}")
        for o in (1, 2):
            worst = min(self.atoms(o).values())
            if worst < -ATOM_TOL:
                raise DomainError(f"ordering o{o} is not a distribution (atom {worst:.3g} < 0)")


def delta_c(system: CbdSystem) -> float:
    system.check()
    s = system
    return abs(s.j_o1 - s.j_o2) - (abs(s.e1_o1 - s.e1_o2) + abs(s.e2_o1 - s.e2_o2))


def is_contextual(dc: float, tol: float = 0.0) -> bool:
    return dc > tol


_STATES = list(itertools.product((1, -1), repeat=4))  # (x1_o1, x2_o1, x1_o2, x2_o2)


def _snap(e1: Fraction, e2: Fraction, j: Fraction) -> tuple[Fraction, Fraction, Fraction]:
    """Project one ordering onto the simplex.

    Float inputs can leave an atom a hair below zero (within ATOM_TOL); exact
    arithmetic would then call the ordering infeasible on its own.
    """
    atoms = {(a, c): max((1 + a * e1 + c * e2 + a * c * j) / 4, Fraction(0)) for a in (1, -1) for c in (1, -1)}
    total = sum(atoms.values())
    atoms = {k: v / total for k, v in atoms.items()}
    return (sum(a * p for (a, _), p in atoms.items()), sum(c * p for (_, c), p in atoms.items()),
            sum(a * c * p for (a, c), p in atoms.items()))


def coupling_oracle(system: CbdSystem) -> bool:
    """True when a maximal coupling exists (the system is noncontextual).

    The coupling is a distribution over the 16 joint states of the four
    context-indexed variables that reproduces both within-ordering 2x2
    joints and makes ``P(X_i^o1 = X_i^o2) = 1 - |<X_i>_o1 - <X_i>_o2| / 2``
    for both i. Floats enter as their shortest decimal representation.
    """
    system.check()
    e = {k: as_fraction(getattr(system, k)) for k in ("e1_o1", "e2_o1", "e1_o2", "e2_o2", "j_o1", "j_o2")}
    e["e1_o1"], e["e2_o1"], e["j_o1"] = _snap(e["e1_o1"], e["e2_o1"], e["j_o1"])
    e["e1_o2"], e["e2_o2"], e["j_o2"] = _snap(e["e1_o2"], e["e2_o2"], e["j_o2"])
    A: list[list[int]] = []
    b: list[Fraction] = []
    for o, (e1, e2, j) in ((0, (e["e1_o1"], e["e2_o1"], e["j_o1"])), (2, (e["e1_o2"], e["e2_o2"], e["j_o2"]))):
        for a, c in ((1, 1), (1, -1), (-1, 1)):
            A.append([int(s[o] == a and s[o + 1] == c) for s in _STATES])
            b.append((1 + a * e1 + c * e2 + a * c * j) / 4)
    A.append([1] * 16)
    b.append(Fraction(1))
    A.append([int(s[0] == s[2]) for s in _STATES])
    b.append(1 - abs(e["e1_o1"] - e["e1_o2"]) / 2)
    A.append([int(s[1] == s[3]) for s in _STATES])
    b.append(1 - abs(e["e2_o1"] - e["e2_o2"]) / 2)
    ok, _ = feasible(A, b)
    return ok


# ---------------------------------------------------------------------------
# steering systems from Bernoulli counts

CellCounts = tuple[int, int]  # (n_valid, n_feminine)


@dataclass(frozen=True)
class PairCounts:
    """Valid/feminine counts for both members under both discourse primes."""

    first_f: CellCounts
    first_m: CellCounts
    second_f: CellCounts
    second_m: CellCounts

    def to_json(self) -> dict[str, list[int]]:
        return {"first_primed_feminine": list(self.first_f), "first_primed_masculine": list(self.first_m),
                "second_primed_feminine": list(self.second_f), "second_primed_masculine": list(self.second_m)}


def _steering_terms(n_f, k_f, n_m, k_m, prime_rate, estimator):
    """Prime expectation, target expectation and joint for one ordering (vectorised)."""
    p_f = k_f / n_f
    p_m = k_m / n_m
    r = n_f / (n_f + n_m) if prime_rate is None else prime_rate
    p_target = r * p_f + (1 - r) * p_m
    e_prime = 2 * r - 1
    e_target = 2 * p_target - 1
    if estimator == "mixture":
        j = r * (2 * p_f - 1) - (1 - r) * (2 * p_m - 1)
    else:
        j = 4 * r * p_target - 2 * r - 2 * p_target + 1
    return e_prime, e_target, j


def steering_system(counts: PairCounts, estimator: str = "mixture", prime_rate: float | None = None) -> CbdSystem:
    """Cyclic-2 system for one pair under the steering mapping.

    o1 primes with the first member's sentence (X1 fixed) and measures the
    second member's BLANK (X2); o2 primes with X2 and measures X1. Prime
    expectations come from the prime mixture rate, which is the empirical
    share of feminine-primed valid trials unless ``prime_rate`` is given.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    for cell in (counts.first_f, counts.first_m, counts.second_f, counts.second_m):
        if cell[0] <= 0:
            raise DomainError("every primed cell needs at least one valid measurement")
    e1_o1, e2_o1, j_o1 = _steering_terms(*counts.second_f, *counts.second_m, prime_rate, estimator)
    e2_o2, e1_o2, j_o2 = _steering_terms(*counts.first_f, *counts.first_m, prime_rate, estimator)
    return CbdSystem(float(e1_o1), float(e2_o1), float(e1_o2), float(e2_o2), float(j_o1), float(j_o2),
                     provenance=f"{estimator}_estimator")


def _delta_c_vec(counts_arrays, prime_rate, estimator):
    (n1f, k1f), (n1m, k1m), (n2f, k2f), (n2m, k2m) = counts_arrays
    e1_o1, e2_o1, j_o1 = _steering_terms(n2f, k2f, n2m, k2m, prime_rate, estimator)
    e2_o2, e1_o2, j_o2 = _steering_terms(n1f, k1f, n1m, k1m, prime_rate, estimator)
    return np.abs(j_o1 - j_o2) - (np.abs(e1_o1 - e1_o2) + np.abs(e2_o1 - e2_o2))


def bootstrap_ci(counts: PairCounts, replicates: int = 1000, seed: int = 0, estimator: str = "mixture",
                 prime_rate: float | None = None, level: float = 0.95) -> tuple[float, float]:
    """Percentile interval for dc from parametric resampling of each cell's binomial counts."""
    if replicates < 100:
        raise ValueError(f"need at least 100 bootstrap replicates, got {replicates}")
    rng = np.random.default_rng(seed)
    cells = []
    for n, k in (counts.first_f, counts.first_m, counts.second_f, counts.second_m):
        cells.append((np.full(replicates, float(n)), rng.binomial(n, k / n, size=replicates).astype(float)))
    draws = _delta_c_vec(cells, prime_rate, estimator)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(draws, [alpha, 1 - alpha])
    return float(lo), float(hi)


@dataclass(frozen=True)
class DeltaCResult:
    pair_id: str
    order: OptionOrder
    delta_c: float | None
    contextual: bool
    estimator: str
    tol: float = 0.0
    ci: tuple[float, float] | None = None
    counts: PairCounts | None = None
    system: CbdSystem | None = None
    skipped: str | None = None

    @property
    def contextual_ci(self) -> bool:
        """Contextual and the bootstrap lower bound is above zero."""
        return self.contextual and self.ci is not None and self.ci[0] > 0

    def verdict(self, gate: str = "point") -> bool:
        return self.contextual_ci if gate == "ci" else self.contextual

    def to_json(self) -> dict[str, Any]:
        return {
            "pair_id": self.pair_id,
            "order": self.order.value,
            "delta_c": self.delta_c,
            "contextual": self.contextual,
            "contextual_ci": self.contextual_ci,
            "estimator": self.estimator,
            "tol": self.tol,
            "ci": list(self.ci) if self.ci else None,
            "counts": self.counts.to_json() if self.counts else None,
            "skipped": self.skipped,
        }


def pair_counts(estimates: Mapping, pair: TemplatePair, order: OptionOrder | str) -> PairCounts | None:
    """Primed counts for both members from an estimate index, or None if any cell is missing.

    ``estimates`` maps (template_id, setting, order) to objects with
    ``n_valid`` and ``n_feminine``.
    """
    order = OptionOrder(order).value
    cells = []
    for member in pair.members:
        for setting in (ContextSetting.PRIMED_FEMININE, ContextSetting.PRIMED_MASCULINE):
            est = estimates.get((member.template_id, setting.value, order))
            if est is None or est.n_valid == 0:
                return None
            cells.append((est.n_valid, est.n_feminine))
    return PairCounts(*cells)


def pair_analysis(estimates: Mapping, pair: TemplatePair, order: OptionOrder | str, estimator: str = "mixture",
                  tol: float = 0.0, prime_rate: float | None = None, bootstrap: int | None = None,
                  seed: int = 0) -> DeltaCResult:
    order = OptionOrder(order)
    counts = pair_counts(estimates, pair, order)
    if counts is None:
        return DeltaCResult(pair.pair_id, order, None, False, estimator, tol,
                            skipped="missing valid primed measurements for a pair member")
    system = steering_system(counts, estimator, prime_rate)
    dc = delta_c(system)
    ci = bootstrap_ci(counts, bootstrap, seed, estimator, prime_rate) if bootstrap else None
    return DeltaCResult(pair.pair_id, order, dc, is_contextual(dc, tol), estimator, tol, ci, counts, system)


@dataclass
class ContextualitySummary:
    per_order: dict[str, dict[str, float | int]]
    pooled: dict[str, float | int | str]
    overlap: dict[str, dict[str, int]] = field(default_factory=dict)
    skipped: list[dict[str, str]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {"per_order": self.per_order, "pooled": self.pooled, "overlap": self.overlap, "skipped": self.skipped}


def contextual_pairs(results: Iterable[DeltaCResult], rule: str = "either", gate: str = "point") -> set[str]:
    """Pair ids counted as contextual after pooling the two option orders."""
    if rule not in POOLING_RULES:
        raise ValueError(f"rule must be one of {POOLING_RULES}")
    by_pair: dict[str, list[bool]] = {}
    for r in results:
        if r.skipped is None:
            by_pair.setdefault(r.pair_id, []).append(r.verdict(gate))
    if rule == "either":
        return {p for p, v in by_pair.items() if any(v)}
    return {p for p, v in by_pair.items() if v and all(v)}


def contextuality_summary(runs: Mapping[str, list[DeltaCResult]], rule: str = "either",
                          gate: str = "point") -> dict[str, ContextualitySummary]:
    """Per-order and pooled contextual fractions per run, plus pairwise overlaps of contextual pair sets."""
    if not runs:
        raise ValueError("no results to summarise")
    summaries = {}
    pair_sets = {}
    for name, results in runs.items():
        analysed = [r for r in results if r.skipped is None]
        per_order = {}
        for order in OptionOrder:
            rows = [r for r in analysed if r.order is order]
            hits = sum(r.verdict(gate) for r in rows)
            per_order[order.value] = {"contextual": hits, "analysed": len(rows),
                                      "fraction": hits / len(rows) if rows else None}
        pairs = {r.pair_id for r in analysed}
        ctx = contextual_pairs(analysed, rule, gate)
        pair_sets[name] = ctx
        summaries[name] = ContextualitySummary(
            per_order,
            {"rule": rule, "gate": gate, "contextual": len(ctx), "analysed": len(pairs),
             "fraction": len(ctx) / len(pairs) if pairs else None},
            skipped=[{"pair_id": r.pair_id, "order": r.order.value, "reason": r.skipped}
                     for r in results if r.skipped is not None],
        )
    names = list(runs)
    overlap = {a: {b: len(pair_sets[a] & pair_sets[b]) for b in names} for a in names}
    for s in summaries.values():
        s.overlap = overlap
    return summaries
