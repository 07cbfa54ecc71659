"""Exact feasibility of small linear systems ``A x = b, x >= 0`` over the rationals.

Phase-one simplex on a dense tableau of ``fractions.Fraction`` with Bland's
rule, so it terminates and never suffers rounding. Meant for systems with a
few dozen columns, such as couplings of four binary variables.
"""

from __future__ import annotations

from fractions import Fraction
from numbers import Rational
from typing import Sequence


def as_fraction(x) -> Fraction:
    """Exact rational for ints/Fractions; shortest decimal repr for floats."""
    if isinstance(x, Rational):
        return Fraction(x)
    return Fraction(repr(float(x)))


def feasible(A: Sequence[Sequence], b: Sequence) -> tuple[bool, list[Fraction] | None]:
    """Decide whether some ``x >= 0`` satisfies ``A x = b`` exactly.

    Returns ``(True, x)`` with a feasible basic solution, or ``(False, None)``.
    """
    m = len(A)
    n = len(A[0]) if m else 0
    rows = []
    for i in range(m):
        row = [as_fraction(v) for v in A[i]]
        rhs = as_fraction(b[i])
        if rhs < 0:
            row = [-v for v in row]
            rhs = -rhs
        rows.append(row + [Fraction(int(i == k)) for k in range(m)] + [rhs])
    width = n + m
    basis = list(range(n, n + m))

    # phase-one objective: minimise the sum of artificials; reduced costs kept in `cost`
    cost = [Fraction(0)] * (width + 1)
    for row in rows:
        for j in range(n):
            cost[j] -= row[j]
        cost[width] -= row[width]

    while True:
        entering = next((j for j in range(width) if cost[j] < 0), None)
        if entering is None:
            break
        best = None
        for i, row in enumerate(rows):
            if row[entering] > 0:
                ratio = row[width] / row[entering]
                if best is None or ratio < best[0] or (ratio == best[0] and basis[i] < basis[best[1]]):
                    best = (ratio, i)
        if best is None:  # unbounded direction; cannot happen in phase one
            break
        _pivot(rows, cost, best[1], entering)
        basis[best[1]] = entering

    if cost[width] != 0:
        return False, None
    x = [Fraction(0)] * n
    for i, j in enumerate(basis):
        if j < n:
            x[j] = rows[i][width]
    return True, x


def _pivot(rows: list[list[Fraction]], cost: list[Fraction], r: int, c: int) -> None:
    pivot_row = rows[r]
    p = pivot_row[c]
    if p != 1:
        rows[r] = pivot_row = [v / p for v in pivot_row]
    nz = [(j, v) for j, v in enumerate(pivot_row) if v]
    for i, row in enumerate(rows):
        if i != r and row[c]:
            f = row[c]
            for j, v in nz:
                row[j] -= f * v
    f = cost[c]
    if f:
        for j, v in nz:
            cost[j] -= f * v
