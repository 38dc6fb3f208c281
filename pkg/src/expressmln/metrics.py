"""Evaluation metrics: AUC-PR, filtered ranks, MRR and Hits@10."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .logic import GroundAtom


@dataclass(frozen=True)
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    area: float

    def to_csv(self) -> str:
        rows = ["recall,precision"] + [f"{r!r},{p!r}" for r, p in zip(self.recall.tolist(), self.precision.tolist())]
        return "\n".join(rows) + "\n"


def pr_curve(labels, scores) -> PrCurve:
    """Precision/recall at every distinct score threshold, highest first.

    The curve starts at (recall 0, precision 1) and the area is the
    trapezoidal integral over recall.
    """
    y = np.asarray(labels).astype(bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError("labels and scores must have equal length")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("AUC-PR needs at least one positive and one negative label")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = np.r_[1.0, tp / (tp + fp)]
    recall = np.r_[0.0, tp / n_pos]
    area = float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))
    return PrCurve(recall, precision, area)


def auc_pr(labels, scores) -> float:
    return pr_curve(labels, scores).area


@dataclass(frozen=True)
class RankTask:
    """One ranking problem: the query's score among its candidates."""

    scores: np.ndarray  # one score per candidate
    query: int  # index of the query candidate
    known_true: np.ndarray  # bool mask of candidates that are true facts

    def __post_init__(self):
        if not 0 <= self.query < len(self.scores):
            raise ValueError("query index is not among the candidates")


def filtered_rank(task: RankTask) -> int:
    """1 + number of unfiltered other candidates scoring at least the query.

    Ties count against the query. Known-true candidates other than the
    query itself are removed first.
    """
    scores = np.asarray(task.scores, dtype=np.float64)
    keep = ~np.asarray(task.known_true, dtype=bool)
    keep[task.query] = False
    return 1 + int(np.count_nonzero(scores[keep] >= scores[task.query]))


def mrr_hits(ranks: Iterable[int], k: int = 10):
    """``(MRR, Hits@k in percent)``."""
    r = np.asarray(list(ranks), dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks given")
    return float(np.mean(1.0 / r)), float(100.0 * np.mean(r <= k))


def completion_tasks(score_fn: Callable[[list], np.ndarray], queries: Sequence[GroundAtom],
                     n_entities: int, known_true: set, slots: Sequence[int] | None = None) -> list:
    """Rank tasks replacing each argument slot of each query by every constant."""
    tasks = []
    for q in queries:
        for slot in (range(len(q.args)) if slots is None else slots):
            cands = []
            for c in range(n_entities):
                args = list(q.args)
                args[slot] = c
                cands.append(GroundAtom(q.predicate, tuple(args)))
            scores = np.asarray(score_fn(cands), dtype=np.float64)
            known = np.fromiter((a in known_true for a in cands), dtype=bool, count=n_entities)
            tasks.append(RankTask(scores, q.args[slot], known))
    return tasks


def metrics_report(auc: float | None = None, mrr: float | None = None, hits10: float | None = None,
                   n_queries: int = 0, **extra) -> str:
    out = {"auc_pr": auc, "mrr": mrr, "hits10": hits10, "n_queries": n_queries, **extra}
    out = {k: v for k, v in out.items() if v is not None}
    return json.dumps(out, sort_keys=True)
