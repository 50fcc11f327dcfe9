"""Multi-objective helpers on finite candidate sets (all objectives minimised).

Points may be plain sequences of numbers or :class:`ObjectivePoint` instances
carrying a payload. Functions that return points return the caller's objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Hashable, Sequence


class ParetoError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectivePoint:
    values: tuple[float, ...]
    payload: Hashable | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not all(math.isfinite(v) for v in self.values):
            raise ParetoError(f"non-finite objective values {self.values}")

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]


def _vec(p) -> tuple[float, ...]:
    return p.values if isinstance(p, ObjectivePoint) else tuple(float(v) for v in p)


def _vectors(s: Sequence) -> list[tuple[float, ...]]:
    vs = [_vec(p) for p in s]
    if vs and len({len(v) for v in vs}) != 1:
        raise ParetoError("points differ in dimension")
    return vs


def _require_nonempty(s: Sequence) -> None:
    if len(s) == 0:
        raise ParetoError("empty feasible set")


def dominates(q, p) -> bool:
    """True when ``q`` is no worse than ``p`` everywhere and strictly better somewhere."""
    q, p = _vec(q), _vec(p)
    if len(q) != len(p):
        raise ParetoError("points differ in dimension")
    return all(a <= b for a, b in zip(q, p)) and any(a < b for a, b in zip(q, p))


def utopia_point(s: Sequence) -> tuple[float, ...]:
    _require_nonempty(s)
    return tuple(min(col) for col in zip(*_vectors(s)))


def is_pareto_optimal(p, s: Sequence) -> bool:
    vs = _vectors(s)
    pv = _vec(p)
    if pv not in vs:
        raise ParetoError(f"point {pv} is not a member of the set")
    return not any(dominates(q, pv) for q in vs)


def pareto_front(s: Sequence) -> list:
    """Non-dominated members of ``s`` in input order; duplicates are all kept."""
    _require_nonempty(s)
    vs = _vectors(s)
    return [p for p, v in zip(s, vs) if not any(dominates(q, v) for q in vs)]


def weighted_sum(p, w: Sequence[float]) -> float:
    pv, wv = _vec(p), tuple(float(x) for x in w)
    if len(pv) != len(wv):
        raise ParetoError(f"weight dimension {len(wv)} does not match point dimension {len(pv)}")
    if any(x < 0 for x in wv):
        raise ParetoError("weights must be nonnegative")
    # correctly rounded, hence monotone: a dominating point never scores higher
    return math.fsum(a * b for a, b in zip(pv, wv))


def argmin_weighted(s: Sequence, w: Sequence[float]) -> Any:
    """Member minimising ``weighted_sum``; ties go to the lowest index.

    Among exactly tied minimisers a dominated one is skipped, so the result is
    Pareto optimal even when rounding hides a strict improvement.
    """
    _require_nonempty(s)
    if any(float(x) <= 0 for x in w):
        raise ParetoError("weights must be strictly positive")
    vs = _vectors(s)
    scores = [weighted_sum(v, w) for v in vs]
    best = min(scores)
    tied = [i for i, sc in enumerate(scores) if sc == best]
    for i in tied:
        if not any(dominates(vs[j], vs[i]) for j in tied):
            return s[i]
    return s[tied[0]]  # unreachable: a finite tie set has a non-dominated member
