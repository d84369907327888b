"""Context identity matching by attribute agreement.

Finds the context-database entry whose labels best agree with a query:
1. Most agreeing attributes (gender, age, race)
2. Ties: largest sum of the query's confidences over the agreeing attributes
3. Ties: lowest entry id

Used by the pipeline after attribute classification to pick the context image.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Protocol

from errors import ArgumentError

logger = logging.getLogger(__name__)

MATCH_ATTRIBUTES = ("gender", "age", "race")


class Labeled(Protocol):
    def value(self, attribute: str) -> str: ...


@dataclass(frozen=True)
class MatchResult:
    entry_id: int
    agreement: Dict[str, bool]
    score: float
    confidence_mass: float

    @property
    def agree_count(self) -> int:
        return sum(self.agreement.values())

    def as_dict(self) -> dict:
        return {
            "entry_id": self.entry_id,
            "agreement": dict(self.agreement),
            "score": self.score,
            "confidence_mass": self.confidence_mass,
        }


def _agreement(query: Labeled, candidate: Labeled) -> Dict[str, bool]:
    return {attr: query.value(attr) == candidate.value(attr) for attr in MATCH_ATTRIBUTES}


def match_key(query: Labeled, confidences: Mapping[str, float], candidate: Labeled, entry_id: int):
    """Sort key; the smallest key wins."""
    flags = _agreement(query, candidate)
    mass = sum(float(confidences.get(a, 0.0)) for a, ok in flags.items() if ok)
    return (-sum(flags.values()), -mass, entry_id)


def match_context(query, entries: Iterable) -> MatchResult:
    """Exhaustive scan over ``entries`` (objects with ``entry_id`` and ``labels``).

    ``query`` is an AttributeLabels (``value(attr)`` and ``confidences``).
    Raises ArgumentError on an empty database.
    """
    best = None
    best_key = None
    for entry in entries:
        key = match_key(query, query.confidences, entry.labels, int(entry.entry_id))
        if best_key is None or key < best_key:
            best, best_key = entry, key
    if best is None:
        raise ArgumentError("context database is empty")

    flags = _agreement(query, best.labels)
    result = MatchResult(
        entry_id=int(best.entry_id),
        agreement=flags,
        score=float(sum(flags.values())),
        confidence_mass=-best_key[1],
    )
    logger.debug(f"Matched context {result.entry_id} ({result.agree_count}/3 attributes)")
    return result
