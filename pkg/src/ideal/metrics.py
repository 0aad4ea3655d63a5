"""Evaluation primitives: ROC AUC, nDCG ranking agreement, selection overlap,
paired t-tests and the Dice coefficient."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats

REL_TOP = 5.5
REL_STEP = 0.5
REL_FLOOR = 1.0


class UndefinedMetricError(ValueError):
    pass


def roc_auc(scores, labels):
    """Area under the ROC curve, ties counted as half (Mann-Whitney U / n+ n-)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in shape")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes present")
    ranks = stats.rankdata(s)  # midranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def relevance(position):
    """Graded relevance of a 0-based reference position: 5.5, 5.0, ... floored at 1."""
    return max(REL_TOP - REL_STEP * position, REL_FLOOR)


def dcg(rels):
    rels = np.asarray(rels, dtype=float)
    disc = np.log2(np.arange(2, len(rels) + 2))
    return float(np.sum((2.0 ** rels - 1.0) / disc))


@dataclass
class RankingComparison:
    reference: list
    candidate: list
    p: int
    rel: dict
    dcg: float
    idcg: float

    @property
    def ndcg(self):
        return self.dcg / self.idcg


def compare_rankings(candidate, reference, p=10):
    candidate = list(candidate)
    reference = list(reference)
    if set(candidate) != set(reference) or len(candidate) != len(reference):
        raise ValueError("candidate and reference must rank the same ids")
    if not 1 <= p <= len(reference):
        raise ValueError(f"p must lie in [1, {len(reference)}], got {p}")
    rel = {i: relevance(k) for k, i in enumerate(reference)}
    d = dcg([rel[i] for i in candidate[:p]])
    idcg = dcg([rel[i] for i in reference[:p]])
    return RankingComparison(reference, candidate, p, rel, d, idcg)


def ndcg(candidate, reference, p=10):
    """nDCG@p of ``candidate`` with graded relevance taken from ``reference`` order."""
    return compare_rankings(candidate, reference, p).ndcg


def overlap_fraction(selection_sets, batch_size=None):
    """|intersection of all sets| / batch size (default: size of the first set)."""
    sets = [set(s) for s in selection_sets]
    if len(sets) < 2:
        raise ValueError("overlap needs at least two selection sets")
    b = batch_size if batch_size is not None else len(sets[0])
    if b == 0:
        return 0.0
    return len(set.intersection(*sets)) / b


def paired_t_test(a, b):
    """Two-sided p-value of the paired t-test on equal-length samples."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if not sd > 0:
        raise UndefinedMetricError("differences have zero variance; t is undefined")
    t = d.mean() / (sd / np.sqrt(n))
    return float(2.0 * stats.t.sf(abs(t), df=n - 1))


def dice(pred_mask, true_mask, threshold=0.5):
    """2|A n B| / (|A| + |B|); a non-boolean ``pred_mask`` is binarised at 0.5."""
    p = np.asarray(pred_mask)
    t = np.asarray(true_mask).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    if p.dtype != bool:
        p = p >= threshold
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / denom)


def write_ndcg_long(path, rows):
    """Rows of (method, increment, ndcg) as a long-form CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "increment", "ndcg"])
        for method, inc, val in rows:
            w.writerow([method, f"{inc:.2f}", f"{val:.6f}"])
