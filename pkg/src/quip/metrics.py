"""Extractive QA scoring: exact match and token-overlap F1."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

from .numerics import InvalidArgumentError


def normalize_answer(text: str) -> list[str]:
    # tokens are already split on whitespace and carry no attached punctuation
    return text.lower().split()


def exact_match(pred: str, golds: Sequence[str]) -> int:
    if not golds:
        raise InvalidArgumentError("need at least one gold answer")
    p = normalize_answer(pred)
    return int(any(p == normalize_answer(g) for g in golds))


def _f1(pred: list[str], gold: list[str]) -> float:
    if not pred or not gold:
        return float(pred == gold)
    common = sum((Counter(pred) & Counter(gold)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(pred), common / len(gold)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, golds: Sequence[str]) -> float:
    """Max over golds of the multiset-overlap F1."""
    if not golds:
        raise InvalidArgumentError("need at least one gold answer")
    p = normalize_answer(pred)
    return max(_f1(p, normalize_answer(g)) for g in golds)
