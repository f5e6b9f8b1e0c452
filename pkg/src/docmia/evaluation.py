"""Balanced accuracy, F1, ROC / TPR at fixed FPR, strata and train-test gap."""
from __future__ import annotations

import csv
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import utility
from .seqmodel import generate
from .synthdata import Document, detokenize

log = logging.getLogger(__name__)

FPR_TARGETS = (0.01, 0.03)


@dataclass
class Classification:
    balanced_accuracy: float
    f1: float
    tpr: float
    tnr: float
    precision: float
    zero_division: bool = False


def _check_labels(y_true, y_pred=None) -> np.ndarray:
    y = np.asarray(y_true).astype(np.int64)
    if not set(np.unique(y)) <= {0, 1}:
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("truth must contain both members and non-members")
    if y_pred is not None and len(y_pred) != len(y):
        raise ValueError("truth and predictions differ in length")
    return y


def classification_metrics(y_true, y_pred) -> Classification:
    """Member (1) is the positive class."""
    y = _check_labels(y_true, y_pred)
    p = np.asarray(y_pred).astype(np.int64)
    tp = int(np.sum((y == 1) & (p == 1)))
    fn = int(np.sum((y == 1) & (p == 0)))
    tn = int(np.sum((y == 0) & (p == 0)))
    fp = int(np.sum((y == 0) & (p == 1)))
    tpr = tp / (tp + fn)
    tnr = tn / (tn + fp)
    zero = tp + fp == 0
    precision = 0.0 if zero else tp / (tp + fp)
    f1 = 0.0 if precision + tpr == 0 else 2 * precision * tpr / (precision + tpr)
    return Classification((tpr + tnr) / 2, f1, tpr, tnr, precision, zero)


def roc_curve(scores, y_true) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds); predict member iff score >= threshold.

    Tied scores cross a threshold together.  The first point is (0, 0) at a
    threshold of +inf.
    """
    y = _check_labels(y_true)
    s = np.asarray(scores, dtype=np.float64)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    thr = np.unique(s)[::-1]
    pos, neg = y.sum(), (1 - y).sum()
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp_cum = np.cumsum(y_sorted)
    fp_cum = np.cumsum(1 - y_sorted)
    # last index of each tied run
    ends = np.searchsorted(-s_sorted, -thr, side="right") - 1
    tpr = np.concatenate([[0.0], tp_cum[ends] / pos])
    fpr = np.concatenate([[0.0], fp_cum[ends] / neg])
    return fpr, tpr, np.concatenate([[np.inf], thr])


def auc(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def tpr_at_fpr(scores, y_true, targets: Sequence[float] = FPR_TARGETS) -> dict[float, float]:
    """Best TPR over thresholds whose empirical FPR does not exceed each target."""
    y = _check_labels(y_true)
    n_neg = int((1 - y).sum())
    fpr, tpr, _ = roc_curve(scores, y)
    out = {}
    for f in targets:
        if n_neg * f < 1:
            log.debug("only %d non-members: FPR granularity is coarser than %.3g", n_neg, f)
        ok = fpr <= f + 1e-12
        out[f] = float(tpr[ok].max())
    return out


def stratified_report(doc_ids: Sequence[str], y_true, y_pred, question_counts: Mapping[str, int], strata=(1, 2, 3)) -> dict[str, dict]:
    """Member-recall on member documents grouped by number of questions.

    Returns ``{"1": {...}, "2": ..., "3": ..., "rest": ..., "all": ...}`` with
    ``n`` and ``accuracy``; empty strata are omitted.
    """
    y = np.asarray(y_true)
    p = np.asarray(y_pred)
    m = np.array([question_counts[d] for d in doc_ids])
    members = y == 1
    groups = {str(k): members & (m == k) for k in strata}
    groups["rest"] = members & ~np.isin(m, strata)
    groups["all"] = members
    out = {}
    for name, mask in groups.items():
        n = int(mask.sum())
        if n == 0:
            log.info("stratum %s is empty and is omitted", name)
            continue
        out[name] = {"n": n, "accuracy": float((p[mask] == 1).mean())}
    return out


def mean_utility(model, docs: Sequence[Document], kind: str = "nls", questions=None) -> float:
    """Mean over documents of the mean utility of greedy answers."""
    per_doc = []
    for d in docs:
        qs = list(questions(d) if questions else d.qa)
        gens = generate(model, [(d, qa.question) for qa in qs])
        per_doc.append(np.mean([utility(kind, detokenize(g.tokens), detokenize(qa.answer)) for g, qa in zip(gens, qs)]))
    return float(np.mean(per_doc))


def traintest_gap(model, members: Sequence[Document], nonmembers: Sequence[Document], kind: str = "nls") -> float:
    if not members or not nonmembers:
        raise ValueError("both member and non-member documents are needed")
    return mean_utility(model, members, kind) - mean_utility(model, nonmembers, kind)


@dataclass
class EvalReport:
    attack: str
    balanced_accuracy: float
    f1: float
    tpr_at_1_fpr: float
    tpr_at_3_fpr: float
    auc: float
    roc_fpr: list[float]
    roc_tpr: list[float]
    strata: dict = field(default_factory=dict)
    traintest_gap: float | None = None
    seed: int | None = None
    config_hash: str | None = None
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        r = {k: v for k, v in asdict(self).items() if k not in ("roc_fpr", "roc_tpr", "strata", "extra")}
        for name, s in self.strata.items():
            r[f"member_acc_m{name}"] = s["accuracy"]
        for k, v in self.extra.items():
            if isinstance(v, (int, float, str)) or v is None:
                r[k] = v
        return r


def evaluate(attack: str, y_true, y_pred, scores, doc_ids=None, question_counts=None, **kw) -> EvalReport:
    cls = classification_metrics(y_true, y_pred)
    fpr, tpr, _ = roc_curve(scores, y_true)
    at = tpr_at_fpr(scores, y_true, FPR_TARGETS)
    strata = {}
    if doc_ids is not None and question_counts is not None:
        strata = stratified_report(doc_ids, y_true, y_pred, question_counts)
    n_neg = int(len(y_true) - np.sum(y_true))
    coarse = [f for f in FPR_TARGETS if n_neg * f < 1]
    if coarse:
        kw["extra"] = {**kw.get("extra", {}), "fpr_granularity_warning": f"{n_neg} non-members cannot resolve FPR {', '.join(map(str, coarse))}"}
    return EvalReport(attack, cls.balanced_accuracy, cls.f1, at[0.01], at[0.03], auc(fpr, tpr), fpr.tolist(), tpr.tolist(), strata, **kw)


def write_reports(reports: Sequence[EvalReport], json_path=None, csv_path=None) -> None:
    if json_path is not None:
        Path(json_path).write_text(json.dumps([asdict(r) for r in reports], indent=2, sort_keys=True) + "\n")
    if csv_path is not None:
        rows = [r.row() for r in reports]
        keys: list[str] = []
        for r in rows:
            keys += [k for k in r if k not in keys]
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in rows:
                w.writerow(r)


def read_reports(json_path) -> list[EvalReport]:
    return [EvalReport(**r) for r in json.loads(Path(json_path).read_text())]
