"""Prediction and reasonability metrics.

AUC and ACC score correctness prediction. Three further metrics check that a
traced mastery evolution behaves the way teachers expect:

- consistency: when a response makes the examined KC's mastery drop, no other
  KC's mastery may rise across the same update;
- gaucm: per-question AUC of mastery against correctness, weighted by how
  often the question was answered (monotonicity of mastery);
- repetition: immediately re-asking an answered question should reproduce the
  observed outcome.

Each function is paired with a brute-force oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndefinedMetric(ValueError):
    """The metric has no value on this input (e.g. single-class AUC)."""


@dataclass
class EvalRecord:
    score: float
    label: int
    question: int
    mastery: float
    mask: bool = True


@dataclass
class ReasonabilityReport:
    auc: float
    acc: float
    consistency: float
    gaucm: float
    repetition: float

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "acc": self.acc,
            "consistency": self.consistency,
            "gaucm": self.gaucm,
            "repetition": self.repetition,
        }


def auc(pairs) -> float:
    """Rank-based AUC; tied scores get half credit.

    Raises UndefinedMetric when only one class is present.
    """
    scores = np.asarray([p[0] for p in pairs], dtype=np.float64)
    labels = np.asarray([p[1] for p in pairs], dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both classes")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank of the tie block
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(pairs, threshold: float = 0.5) -> float:
    """Fraction of responses where (score >= threshold) matches the label."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("accuracy of an empty set is undefined")
    hits = sum(1 for score, label in pairs
               if (1 if score >= threshold else 0) == label)
    return hits / len(pairs)


def _iter_steps(traces):
    for item in traces:
        steps = getattr(item, "steps", None)
        if steps is None:
            yield item
        else:
            yield from steps


def consistency(traces) -> float:
    """Mean fraction of KCs moving consistently at qualifying updates.

    A step qualifies when at least one examined KC's mastery strictly
    declines across the update; the step then contributes the fraction of all
    KCs whose mastery did not increase. No qualifying steps means the
    condition is vacuously satisfied and the metric is 1.0.
    """
    ratios = []
    for step in _iter_steps(traces):
        pre = np.asarray(step.pre, dtype=np.float64)
        post = np.asarray(step.post, dtype=np.float64)
        if not any(pre[c] > post[c] for c in step.examined):
            continue
        ratios.append(int((pre >= post).sum()) / pre.size)
    if not ratios:
        return 1.0
    return sum(ratios) / len(ratios)


def gaucm(records) -> float:
    """Answer-count-weighted mean of per-question mastery AUCs.

    Questions whose answers are all one class have no AUC and are excluded
    from both the numerator and the weight total.
    """
    by_question: dict[int, list[tuple[float, int]]] = {}
    for r in records:
        if not r.mask:
            continue
        by_question.setdefault(r.question, []).append((r.mastery, r.label))

    num = 0.0
    den = 0.0
    for q in sorted(by_question):
        pairs = by_question[q]
        try:
            score = auc(pairs)
        except UndefinedMetric:
            continue
        num += len(pairs) * score
        den += len(pairs)
    if den == 0:
        raise UndefinedMetric("no question has both outcome classes")
    return num / den


def repetition(model, sequences) -> float:
    """Accuracy of immediately re-asked questions against the observed answer.

    `model.reask_scores(seq)` must return, per real response, the model's
    probability for the same question asked again right after the response
    was processed (a counterfactual probe: the re-ask itself must not change
    the model state).
    """
    pairs = []
    for seq in sequences:
        pairs.extend(model.reask_scores(seq))
    return accuracy(pairs)
