"""Answer utility (ACC, NLS) and per-answer loss signals."""
from __future__ import annotations

import enum
from collections.abc import Sequence

import numpy as np

from .synthdata import Document, detokenize


class UtilityKind(str, enum.Enum):
    ACC = "acc"
    NLS = "nls"


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance between two sequences (strings, token lists...)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _as_text(x) -> str:
    return x if isinstance(x, str) else detokenize(x)


def nls(pred, gold) -> float:
    """Normalized Levenshtein similarity at character level, zeroed at NL >= 0.5."""
    p, g = _as_text(pred), _as_text(gold)
    longest = max(len(p), len(g))
    if longest == 0:
        return 1.0
    nl = levenshtein(p, g) / longest
    return 1.0 - nl if nl < 0.5 else 0.0


def acc(pred, gold) -> float:
    return float(_as_text(pred).strip().lower() == _as_text(gold).strip().lower())


def utility(kind: UtilityKind | str, pred, gold) -> float:
    kind = UtilityKind(kind)
    return nls(pred, gold) if kind is UtilityKind.NLS else acc(pred, gold)


def answer_token_logprobs(model, document: Document, question, answer) -> np.ndarray:
    """Teacher-forced ``log p(a_k | a_<k, x, q)`` for each answer token and ``<eos>``."""
    return model.answer_token_logprobs(document, question, answer)


def answer_loss(model, document: Document, question, answer) -> float:
    return model.answer_loss(document, question, answer)
