"""Informativeness features computed on saliency maps.

* :func:`kurtosis_score` -- Pearson kurtosis of the 64-bin map histogram.
* :func:`first_order_features` -- kurtosis, skewness, entropy, total energy.
* :func:`glcm_features` -- sum entropy, IDN, difference entropy, MCC.
* :func:`shape_features` -- sphericity, spherical disproportion, elongation.
* :func:`borda_rank` -- fuse per-feature rankings by summed rank.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats
from skimage.filters import threshold_otsu
from skimage.measure import find_contours

N_BINS = 64
GLCM_LEVELS = 32
# (drow, dcol) offsets for 0, 45, 90 and 135 degrees at distance 1
GLCM_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1))

FIRST_ORDER = ("kurtosis", "skewness", "entropy", "total_energy")
GLCM = ("sum_entropy", "idn", "difference_entropy", "mcc")
SHAPE2D = ("sphericity", "spherical_disproportion", "elongation")
FAMILIES = {"first_order": FIRST_ORDER, "glcm": GLCM, "shape2d": SHAPE2D}

# +1: higher value = more informative
FIRST_ORDER_DIRECTIONS = {name: 1 for name in FIRST_ORDER}


@dataclass
class FeatureVector:
    family: str
    values: dict
    degenerate: bool = False
    flags: list = field(default_factory=list)

    def as_array(self):
        return np.array([self.values[k] for k in FAMILIES[self.family]], dtype=float)


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def centers(self):
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def histogram(values, bins=N_BINS):
    """Uniform histogram over [min(0, min), max]; a flat zero map gets edges [0, 1]."""
    v = np.asarray(values, dtype=float).ravel()
    lo = min(0.0, float(v.min()))
    hi = float(v.max())
    if hi <= lo:
        hi = lo + 1.0
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return Histogram(edges, counts)


def kurtosis_score(values):
    """Pearson (non-excess) kurtosis of the histogram-weighted intensities.

    Constant maps return ``-inf`` so they sort as least informative.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0 or np.ptp(v) == 0:
        return -math.inf
    h = histogram(v)
    w = h.counts / h.counts.sum()
    c = h.centers
    mu = np.sum(w * c)
    m2 = np.sum(w * (c - mu) ** 2)
    if m2 <= 0:
        return -math.inf
    m4 = np.sum(w * (c - mu) ** 4)
    return float(m4 / m2 ** 2)


def _entropy_bits(p):
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p))) + 0.0 if p.size else 0.0


def first_order_features(values):
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("empty map")
    h = histogram(v)
    energy = float(np.sum(v * v))
    entropy = _entropy_bits(h.counts / v.size)
    d = v - v.mean()
    m2 = np.mean(d ** 2)
    if v.max() == v.min() or m2 <= 0:
        return FeatureVector("first_order", {"kurtosis": 0.0, "skewness": 0.0,
                                             "entropy": entropy, "total_energy": energy},
                             degenerate=True, flags=["zero_variance"])
    vals = {
        "kurtosis": float(np.mean(d ** 4) / m2 ** 2),
        "skewness": float(np.mean(d ** 3) / m2 ** 1.5),
        "entropy": entropy,
        "total_energy": energy,
    }
    return FeatureVector("first_order", vals)


def quantize(values, levels=GLCM_LEVELS):
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=int)
    q = np.floor((v - lo) / (hi - lo) * levels).astype(int)
    return np.clip(q, 0, levels - 1)


def glcm(q, offset, levels=GLCM_LEVELS):
    """Symmetric, normalised co-occurrence matrix of a quantised image."""
    dr, dc = offset
    h, w = q.shape
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    a = q[r0:r1, c0:c1].ravel()
    b = q[r0 + dr:r1 + dr, c0 + dc:c1 + dc].ravel()
    P = np.zeros((levels, levels))
    np.add.at(P, (a, b), 1.0)
    P = P + P.T
    total = P.sum()
    return P / total if total > 0 else P


def _mcc(p):
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    keep_i = px > 0
    keep_k = py > 0
    if keep_i.sum() < 2:
        return 0.0, False
    pk = p[np.ix_(keep_i, keep_k)]
    q = (pk / px[keep_i][:, None] / py[keep_k][None, :]) @ pk.T
    try:
        ev = np.sort(np.real(np.linalg.eigvals(q)))[::-1]
    except np.linalg.LinAlgError:
        return 0.0, True
    second = ev[1]
    if not np.isfinite(second) or second < -1e-9:
        return 0.0, True
    return float(np.sqrt(max(second, 0.0))), False


def haralick(p, levels=GLCM_LEVELS):
    """The four selected Haralick features of one normalised GLCM."""
    i, j = np.indices(p.shape)
    p_sum = np.bincount((i + j).ravel(), weights=p.ravel(), minlength=2 * levels - 1)
    p_diff = np.bincount(np.abs(i - j).ravel(), weights=p.ravel(), minlength=levels)
    mcc, flagged = _mcc(p)
    return {
        "sum_entropy": _entropy_bits(p_sum),
        "idn": float(np.sum(p / (1.0 + np.abs(i - j) / levels))),
        "difference_entropy": _entropy_bits(p_diff),
        "mcc": mcc,
    }, flagged


def glcm_features(values, levels=GLCM_LEVELS, offsets=GLCM_OFFSETS):
    v = np.asarray(values, dtype=float)
    if v.ndim != 2 or min(v.shape) < 2:
        raise ValueError("GLCM features need a 2-D map of at least 2x2")
    if np.ptp(v) == 0:
        return FeatureVector("glcm", {"sum_entropy": 0.0, "idn": 1.0,
                                      "difference_entropy": 0.0, "mcc": 0.0},
                             degenerate=True, flags=["constant_map"])
    q = quantize(v, levels)
    acc = {k: 0.0 for k in GLCM}
    flags = []
    for off in offsets:
        feats, flagged = haralick(glcm(q, off, levels), levels)
        if flagged:
            flags.append(f"mcc_degenerate@{off}")
        for k in GLCM:
            acc[k] += feats[k] / len(offsets)
    return FeatureVector("glcm", acc, flags=flags)


def _perimeter(mask):
    padded = np.pad(mask.astype(float), 1)
    total = 0.0
    for c in find_contours(padded, 0.5):
        total += float(np.sum(np.hypot(*np.diff(c, axis=0).T)))
    return total


def shape_features(values):
    """Geometry of the largest Otsu foreground component (8-connectivity)."""
    v = np.asarray(values, dtype=float)
    zero = {"sphericity": 0.0, "spherical_disproportion": 0.0, "elongation": 0.0}
    if np.ptp(v) == 0:
        return FeatureVector("shape2d", zero, degenerate=True, flags=["empty_foreground"])
    fg = v > threshold_otsu(v)
    labels, n = ndimage.label(fg, structure=np.ones((3, 3)))
    if n == 0:
        return FeatureVector("shape2d", zero, degenerate=True, flags=["empty_foreground"])
    sizes = np.bincount(labels.ravel())[1:]
    comp = labels == (int(np.argmax(sizes)) + 1)
    area = float(comp.sum())
    perim = _perimeter(comp)
    sph = 2.0 * math.sqrt(math.pi * area) / perim if perim > 0 else 0.0
    rr, cc = np.nonzero(comp)
    if len(rr) > 1:
        ev = np.linalg.eigvalsh(np.cov(np.vstack([rr, cc]).astype(float), bias=True))
        major, minor = max(ev[1], 0.0), max(ev[0], 0.0)
        elong = math.sqrt(minor / major) if major > 0 else 1.0
    else:
        elong = 1.0
    return FeatureVector("shape2d", {"sphericity": sph,
                                     "spherical_disproportion": 1.0 / sph if sph > 0 else 0.0,
                                     "elongation": elong})


def otsu_mask(values):
    v = np.asarray(values, dtype=float)
    if np.ptp(v) == 0:
        return np.zeros(v.shape, dtype=bool)
    return v > threshold_otsu(v)


FAMILY_FUNCS = {"first_order": first_order_features, "glcm": glcm_features,
                "shape2d": shape_features}


def feature_matrix(maps, family):
    """(n_maps, n_features) matrix for one family."""
    fn = FAMILY_FUNCS[family]
    return np.array([fn(m).as_array() for m in maps], dtype=float).reshape(len(maps), -1)


# Borda fusion ----------------------------------------------------------------

@dataclass
class BordaRanking:
    ids: list
    ranks: np.ndarray       # (n, K), 1 = most informative for that feature
    rank_sums: np.ndarray   # (n,)
    order: list             # ids sorted by (rank sum, id)

    @property
    def best(self):
        return self.order[0]


def _sort_key_ids(ids):
    # position of each id in ascending id order, used as the tie-break
    pos = np.empty(len(ids), dtype=int)
    pos[sorted(range(len(ids)), key=lambda k: ids[k])] = np.arange(len(ids))
    return pos


def borda_rank(matrix, directions, ids=None):
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise ValueError("feature matrix must be 2-D (samples x features)")
    n, k = m.shape
    ids = list(range(n)) if ids is None else list(ids)
    d = np.asarray(directions, dtype=float)
    if d.shape != (k,) or not np.all(np.isin(d, (-1, 1))):
        raise ValueError("directions must be +1/-1 per feature")
    bad = np.argwhere(np.isnan(m))
    if len(bad):
        i, j = bad[0]
        raise ValueError(f"NaN feature value at sample {ids[i]!r}, feature {j}")
    tie = _sort_key_ids(ids)
    ranks = np.empty((n, k), dtype=int)
    for col in range(k):
        # most informative first, equal values ordered by id
        order = np.lexsort((tie, -d[col] * m[:, col]))
        ranks[order, col] = np.arange(1, n + 1)
    sums = ranks.sum(axis=1)
    order = np.lexsort((tie, sums))
    return BordaRanking(ids, ranks, sums, [ids[i] for i in order])


def calibrate_directions(matrix, delta_auc):
    """Sign of the Spearman correlation of each feature with per-sample dAUC (0 -> +1)."""
    m = np.asarray(matrix, dtype=float)
    out = []
    for col in m.T:
        if np.ptp(col) == 0 or np.ptp(delta_auc) == 0:
            out.append(1)
            continue
        rho = stats.spearmanr(col, delta_auc).statistic
        out.append(-1 if rho < 0 else 1)
    return out


def write_features_csv(path, ids, vectors):
    """``features.csv``: one row per sample, columns in the fixed family order."""
    family = vectors[0].family if vectors else "first_order"
    names = FAMILIES[family]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *names])
        for i, fv in zip(ids, vectors):
            w.writerow([i, *(repr(float(fv.values[n])) for n in names)])


def write_directions(path, directions):
    with open(path, "w") as fh:
        json.dump(directions, fh, indent=2, sort_keys=True)
