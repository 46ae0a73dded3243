"""Contingency tables, odds ratios and the exact odds-shifting crossover."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .cp_engine import FeatureSplit, Permutation
from .data import Dataset


class FairnessError(ValueError):
    pass


class UndefinedOdds(FairnessError):
    pass


@dataclass(frozen=True)
class Predicate:
    """Conjunction of equality tests ``x[j] == v`` on binary features; empty means TRUE."""

    terms: tuple[tuple[int, int], ...] = ()

    @classmethod
    def parse(cls, text: str | None, feature_names) -> "Predicate":
        """Parse ``"f1=1,f2=0"``; empty text or ``TRUE`` gives the trivial predicate."""
        if text is None or text.strip() in ("", "TRUE", "true"):
            return cls()
        names = list(feature_names)
        terms = []
        for part in text.split(","):
            name, sep, val = part.partition("=")
            if not sep:
                raise FairnessError(f"predicate term {part!r} is not of the form name=value")
            name = name.strip()
            if name not in names:
                raise FairnessError(f"unknown feature {name!r} in predicate")
            terms.append((names.index(name), int(float(val))))
        return cls(tuple(terms))

    @property
    def features(self) -> set[int]:
        return {j for j, _ in self.terms}

    def holds(self, X: np.ndarray) -> np.ndarray:
        mask = np.ones(X.shape[0], dtype=bool)
        for j, v in self.terms:
            mask &= X[:, j] == v
        return mask


TRUE = Predicate()


@dataclass(frozen=True)
class ContingencyTable:
    """Counts over rows satisfying the predicate.

    a: x_A=0, x_C=0   b: x_A=0, x_C=1
    c: x_A=1, x_C=0   d: x_A=1, x_C=1
    """

    a: int
    b: int
    c: int
    d: int

    def __post_init__(self):
        for name in "abcd":
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise FairnessError(f"count {name} must be a non-negative integer")
            object.__setattr__(self, name, int(v))

    @property
    def predicate_support(self) -> int:
        return self.a + self.b + self.c + self.d

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.a, self.b, self.c, self.d)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "d": self.d,
                "predicate_support": self.predicate_support}


def _is_binary(col: np.ndarray) -> bool:
    return bool(np.all((col == 0) | (col == 1)))


def _check_features(X, xC, xA, pi):
    d = X.shape[1]
    for j in (xC, xA, *pi.features):
        if not 0 <= j < d:
            raise FairnessError(f"feature index {j} out of range")
    if xC == xA:
        raise FairnessError("x_C and x_A must be distinct")
    if {xC, xA} & pi.features:
        raise FairnessError("the predicate may not reference x_C or x_A")
    for j in (xC, xA, *pi.features):
        if not _is_binary(X[:, j]):
            raise FairnessError(f"feature {j} is not binary 0/1")


def contingency(ds: Dataset, xC: int, xA: int, pi: Predicate = TRUE) -> ContingencyTable:
    X = ds.observations
    _check_features(X, xC, xA, pi)
    mask = pi.holds(X)
    if not mask.any():
        raise FairnessError("empty support: the predicate excludes every row")
    A, C = X[mask, xA], X[mask, xC]
    return ContingencyTable(int(np.sum((A == 0) & (C == 0))), int(np.sum((A == 0) & (C == 1))),
                            int(np.sum((A == 1) & (C == 0))), int(np.sum((A == 1) & (C == 1))))


def odds_ratio(t: ContingencyTable, convention: str = "counts") -> Fraction:
    """counts: b/d; probability: (b/(a+b)) / (d/(c+d)). Exact."""
    if convention == "counts":
        if t.d == 0:
            raise UndefinedOdds("undefined odds: d = 0")
        return Fraction(t.b, t.d)
    if convention == "probability":
        if t.a + t.b == 0 or t.d == 0:
            raise UndefinedOdds("undefined odds: empty x_A=0 row or d = 0")
        return Fraction(t.b, t.a + t.b) / Fraction(t.d, t.c + t.d)
    raise FairnessError(f"unknown odds convention {convention!r}")


def shift_range(t: ContingencyTable) -> tuple[int, int]:
    return -min(t.b, t.c), min(t.a, t.d)


def odds_delta(t: ContingencyTable, i: int) -> Fraction:
    """(b+d)/(d-i) * i/d."""
    return Fraction(t.b + t.d, t.d - i) * Fraction(i, t.d)


@dataclass(frozen=True)
class OddsShiftPlan:
    table: ContingencyTable
    new_table: ContingencyTable
    i: int
    delta: Fraction


def plan_odds_shift(t: ContingencyTable, i: int) -> OddsShiftPlan:
    """Move i rows from (x_A=1, x_C=1) to (x_A=0, x_C=1) and i from (0,0) to (1,0)."""
    i = int(i)
    lo, hi = shift_range(t)
    if t.d == 0:
        raise UndefinedOdds("undefined odds: d = 0")
    if not lo <= i <= hi:
        raise FairnessError(f"shift i={i} outside the legal range [{lo}, {hi}]")
    if i == t.d:
        raise UndefinedOdds("shift would empty cell d (i = d)")
    new = ContingencyTable(t.a - i, t.b + i, t.c + i, t.d - i)
    return OddsShiftPlan(t, new, i, odds_delta(t, i))


def legal_shifts(t: ContingencyTable) -> list[int]:
    lo, hi = shift_range(t)
    return [i for i in range(lo, hi + 1) if i != t.d]


class OddsCP(NamedTuple):
    split: FeatureSplit
    permutation: Permutation
    block_class: bool
    plan: OddsShiftPlan


def _pair_rows(donors: np.ndarray, takers: np.ndarray, labels: np.ndarray, n: int):
    """Pick n (donor, taker) pairs, within-class first, lowest indices first."""
    pairs = []
    used_d, used_t = set(), set()
    for c in (1, -1):
        dc = [r for r in donors if labels[r] == c]
        tc = [r for r in takers if labels[r] == c]
        for r, s in zip(dc, tc):
            if len(pairs) == n:
                break
            pairs.append((r, s))
            used_d.add(r)
            used_t.add(s)
    within = len(pairs)
    rest_d = [r for r in donors if r not in used_d]
    rest_t = [r for r in takers if r not in used_t]
    for r, s in zip(rest_d, rest_t):
        if len(pairs) == n:
            break
        pairs.append((r, s))
    if len(pairs) < n:
        raise FairnessError(f"insufficient rows to pair: need {n}, found {len(pairs)}")
    return pairs, within == n


def build_odds_cp(ds: Dataset, xC: int, xA: int, pi: Predicate, i: int) -> OddsCP:
    """Crossover that realises ``plan_odds_shift(contingency(...), i)`` exactly.

    Only x_A is shuffled; every transposition exchanges x_A between a row of
    one cell and a row of the opposite cell with the same x_C.
    """
    t = contingency(ds, xC, xA, pi)
    plan = plan_odds_shift(t, i)
    X = ds.observations
    split = FeatureSplit(tuple(j for j in range(ds.d) if j != xA), (xA,))
    perm = np.arange(ds.m)
    if plan.i == 0:
        return OddsCP(split, Permutation(perm), True, plan)
    inside = pi.holds(X)
    A, C = X[:, xA], X[:, xC]
    cell = {(va, vc): np.flatnonzero(inside & (A == va) & (C == vc))
            for va in (0, 1) for vc in (0, 1)}
    n = abs(plan.i)
    if plan.i > 0:
        # (1,1) rows lose x_A=1 to (0,0) rows
        pairs, block = _pair_rows(cell[(1, 1)], cell[(0, 0)], ds.labels, n)
    else:
        # (0,1) rows lose x_A=0 to (1,0) rows
        pairs, block = _pair_rows(cell[(0, 1)], cell[(1, 0)], ds.labels, n)
    for r, s in pairs:
        perm[r], perm[s] = s, r
    return OddsCP(split, Permutation(perm), block, plan)


def shift_for_target(t: ContingencyTable, target, convention: str = "counts") -> tuple[int, Fraction]:
    """Legal shift whose odds ratio is closest to ``target`` (ties: smaller |i|).

    Raises FairnessError when the target lies outside the reachable range.
    """
    target = Fraction(target).limit_denominator(10**12) if not isinstance(target, Fraction) else target
    options = []
    for i in legal_shifts(t):
        try:
            rho = odds_ratio(plan_odds_shift(t, i).new_table, convention)
        except UndefinedOdds:
            continue
        options.append((i, rho))
    if not options:
        raise FairnessError("no legal shift gives a defined odds ratio")
    rhos = [r for _, r in options]
    if not min(rhos) <= target <= max(rhos):
        raise FairnessError(f"target odds {float(target):.6g} unreachable; reachable range "
                            f"[{float(min(rhos)):.6g}, {float(max(rhos)):.6g}] "
                            f"for shifts {options[0][0]}..{options[-1][0]}")
    i, rho = min(options, key=lambda o: (abs(o[1] - target), abs(o[0])))
    return i, rho


@dataclass(frozen=True)
class Criterion:
    """Target set for the odds ratio: closed interval [low, high] or open (low, inf)."""

    kind: str
    low: float
    high: float

    @classmethod
    def exact(cls) -> "Criterion":
        return cls("exact", 1.0, 1.0)

    @classmethod
    def band(cls, eps: float) -> "Criterion":
        if eps < 0:
            raise FairnessError("band width must be non-negative")
        return cls("band", 1.0 - eps, 1.0 + eps)

    @classmethod
    def disparate_impact(cls, threshold: float = 0.8) -> "Criterion":
        return cls("disparate_impact", threshold, float("inf"))

    def contains(self, rho) -> bool:
        if self.kind == "exact":
            return rho == 1
        if self.kind == "disparate_impact":
            return rho > Fraction(self.low).limit_denominator(10**9)
        return Fraction(self.low).limit_denominator(10**9) <= rho <= \
            Fraction(self.high).limit_denominator(10**9)


def fairness_check(t: ContingencyTable, criterion: Criterion, convention: str = "counts") -> bool:
    return criterion.contains(odds_ratio(t, convention))
