"""Exact-match span scoring with per-role and micro-averaged precision/recall/F1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence, Union

from .corpus import ROLES, RoleLabel, Span, SpatialRelation


@dataclass(frozen=True)
class PRF:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def defined(self) -> bool:
        """False when there was nothing to find and nothing was predicted."""
        return self.tp + self.fp + self.fn > 0

    @property
    def precision(self) -> float:
        if self.tp + self.fp == 0:
            return 1.0 if self.fn == 0 else 0.0
        return self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> float:
        if self.tp + self.fn == 0:
            return 1.0 if self.fp == 0 else 0.0
        return self.tp / (self.tp + self.fn)

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    def __add__(self, other: "PRF") -> "PRF":
        return PRF(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def count(gold: Iterable[Hashable], pred: Iterable[Hashable]) -> PRF:
    g, p = set(gold), set(pred)
    tp = len(g & p)
    return PRF(tp, len(p) - tp, len(g) - tp)


@dataclass(frozen=True)
class RoleScores:
    roles: dict[RoleLabel, PRF]

    @property
    def overall(self) -> PRF:
        total = PRF()
        for prf in self.roles.values():
            total = total + prf
        return total

    def __add__(self, other: "RoleScores") -> "RoleScores":
        return RoleScores({r: self.roles[r] + other.roles[r] for r in ROLES})

    @classmethod
    def empty(cls) -> "RoleScores":
        return cls({r: PRF() for r in ROLES})


Relations = Union[Sequence[SpatialRelation], Mapping[Hashable, SpatialRelation]]


def _keyed(relations: Relations) -> dict[Hashable, SpatialRelation]:
    if isinstance(relations, Mapping):
        return dict(relations)
    return {rel.indicator.key: rel for rel in relations}


def exact_match(gold: Relations, pred: Relations) -> RoleScores:
    """Score predicted role spans against gold, relation by relation.

    Relations are paired by key: the indicator span for plain sequences, or
    the mapping key (e.g. ``(report_id, sentence_id, start, end)``). A span is
    a true positive only if a gold span of the same role under the same key
    has identical boundaries.
    """
    g, p = _keyed(gold), _keyed(pred)
    scores = {}
    for role in ROLES:
        gold_spans = {(k, s.key) for k, rel in g.items() for s in rel.spans(role)}
        pred_spans = {(k, s.key) for k, rel in p.items() for s in rel.spans(role)}
        scores[role] = count(gold_spans, pred_spans)
    return RoleScores(scores)


def span_match(gold: Iterable[tuple[Hashable, Span]], pred: Iterable[tuple[Hashable, Span]]) -> PRF:
    """Exact-match counts for keyed spans, e.g. ``(sentence key, indicator span)``."""
    return count(((k, s.key) for k, s in gold), ((k, s.key) for k, s in pred))
