"""Deep saliency-feature ranking: ordinal clustering of autoencoder latents,
ΔAUC-ordered cluster labels and an online random forest that scores new maps.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import UndefinedMetricError, roc_auc
from .nnet import TrainConfig, train_classifier

K_DEFAULT = 10
PROBE_EPOCHS = 5


# clustering --------------------------------------------------------------------

@dataclass
class ClusterModel:
    K: int
    centroids: np.ndarray
    assignment: np.ndarray
    sse_history: list = field(default_factory=list)
    n_iter: int = 0

    def members(self, k):
        return np.flatnonzero(self.assignment == k)


def _sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X, K, rng):
    """Greedy k-means++: each step keeps the best of 2 + ln K D²-sampled trials."""
    n = len(X)
    trials = 2 + int(math.log(K))
    centers = [X[rng.integers(n)]]
    d2 = _sq_dists(X, np.array(centers))[:, 0]
    for _ in range(1, K):
        tot = d2.sum()
        if tot > 0:
            cand = rng.choice(n, size=trials, p=d2 / tot)
        else:
            cand = rng.integers(n, size=trials)
        cand_d2 = np.minimum(d2[None, :], _sq_dists(X[cand], X))
        best = int(np.argmin(cand_d2.sum(axis=1)))
        centers.append(X[cand[best]])
        d2 = cand_d2[best]
    return np.array(centers, dtype=float)


def ordinal_cluster(latents, K=K_DEFAULT, seed=0, max_iter=100):
    """k-means (k-means++ seeding, Lloyd until the assignment stops changing)."""
    X = np.asarray(latents, dtype=float)
    if X.ndim != 2:
        raise ValueError("latents must be a 2-D array")
    if len(X) < K:
        raise ValueError(f"{len(X)} samples cannot form {K} clusters")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, K, rng)
    rows = np.arange(len(X))
    assign = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, C)
        new = np.argmin(d, axis=1)
        for k in range(K):
            if not np.any(new == k):
                # reseed an empty cluster with the point farthest from its centroid
                gaps = d[rows, new]
                gaps[np.isin(new, np.flatnonzero(np.bincount(new, minlength=K) == 1))] = -1
                new[int(np.argmax(gaps))] = k
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        C = np.array([X[assign == k].mean(axis=0) for k in range(K)])
        history.append(float(_sq_dists(X, C)[rows, assign].sum()))
    return ClusterModel(K, C, assign, history, it)


def adjusted_rand_index(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    comb = lambda x: x * (x - 1) / 2.0  # noqa: E731
    sum_ij = comb(table).sum()
    sum_a = comb(table.sum(1)).sum()
    sum_b = comb(table.sum(0)).sum()
    expected = sum_a * sum_b / comb(len(a))
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0
    return float((sum_ij - expected) / (maximum - expected))


def representatives(cluster_model, latents, ids=None):
    """Per cluster, the member closest to the centroid (ties -> lowest id)."""
    X = np.asarray(latents, dtype=float)
    ids = list(range(len(X))) if ids is None else list(ids)
    reps = []
    for k in range(cluster_model.K):
        members = cluster_model.members(k)
        if len(members) == 0:
            reps.append(None)
            continue
        d = np.sqrt(((X[members] - cluster_model.centroids[k]) ** 2).sum(axis=1))
        best = min(zip(d, (ids[m] for m in members)), key=lambda t: (t[0], t[1]))
        reps.append(best[1])
    return reps


# ΔAUC ranking -------------------------------------------------------------------

@dataclass
class ClusterRanking:
    delta_auc: np.ndarray
    ordinal_label: np.ndarray   # cluster -> 1..K, 1 = most informative
    auc_control: float = float("nan")


def _auc_or_half(model, X, y):
    try:
        return roc_auc(model.predict_proba(X), y)
    except UndefinedMetricError:
        return 0.5


def probe_delta_auc(base_model, train, extra, validation, cfg, epochs=PROBE_EPOCHS,
                    control=None):
    """ΔAUC of fine-tuning ``base_model`` with the extra labeled sample(s).

    The reference is the same fine-tune run without the extra sample, so the
    measured change isolates the sample's effect from further training.
    Returns (ΔAUC, control AUC).
    """
    Xv, yv = validation
    Xt, yt = train
    Xe, ye = extra
    if control is None:
        ctrl_model, _ = train_classifier(base_model, Xt, yt, cfg, epochs=epochs)
        control = _auc_or_half(ctrl_model, Xv, yv)
    m, _ = train_classifier(base_model, np.concatenate([Xt, Xe]), np.concatenate([yt, ye]),
                            cfg, epochs=epochs)
    return _auc_or_half(m, Xv, yv) - control, control


def order_clusters(delta_auc):
    """Ordinal labels 1..K by decreasing ΔAUC, ties to the lower cluster index."""
    d = np.asarray(delta_auc, dtype=float)
    order = np.lexsort((np.arange(len(d)), -d))
    labels = np.empty(len(d), dtype=int)
    labels[order] = np.arange(1, len(d) + 1)
    return labels


def rank_clusters_by_delta_auc(base_model, reps, validation, train, cfg=None,
                               epochs=PROBE_EPOCHS):
    """``reps``: per cluster a (image, label) pair (or None for an empty cluster)."""
    Xv, yv = validation
    if len(Xv) == 0:
        raise ValueError("validation set is empty")
    cfg = cfg or TrainConfig()
    control = None
    deltas = np.full(len(reps), -np.inf)
    for k, rep in enumerate(reps):
        if rep is None:
            continue
        img, lab = rep
        deltas[k], control = probe_delta_auc(
            base_model, train, (np.asarray(img)[None], np.array([lab])), validation, cfg,
            epochs, control)
    return ClusterRanking(deltas, order_clusters(deltas), control)


def propagate(cluster_model, ranking, queried_labels=None, pseudo_labels=False):
    """Informativeness level of every clustered sample = its cluster's ordinal label.

    Returns (levels, pseudo class labels or None). Pseudo class labels are only
    produced when ``pseudo_labels`` is set.
    """
    levels = ranking.ordinal_label[cluster_model.assignment]
    pseudo = None
    if pseudo_labels and queried_labels is not None:
        q = np.asarray([-1 if v is None else v for v in queried_labels])
        pseudo = q[cluster_model.assignment]
    return levels, pseudo


# online random forest ---------------------------------------------------------------

def _entropy(counts):
    tot = counts.sum(axis=-1, keepdims=True)
    p = np.divide(counts, tot, out=np.zeros_like(counts), where=tot > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log2(p), 0.0).sum(axis=-1)
    return h


class _Tree:
    """Online extremely-randomised tree over informativeness levels 0..K-1."""

    def __init__(self, K, n_candidates, min_split, min_gain, max_depth):
        self.K = K
        self.n_candidates = n_candidates
        self.min_split = min_split
        self.min_gain = min_gain
        self.max_depth = max_depth
        self.feature = [-1]
        self.threshold = [0.0]
        self.left = [-1]
        self.right = [-1]
        self.depth = [0]
        self.counts = [np.zeros(K)]
        self.cand = [None]       # leaf -> (features, thresholds, stats[n_cand, 2, K])

    def leaf_of(self, x):
        node = 0
        while self.feature[node] >= 0:
            node = self.left[node] if x[self.feature[node]] < self.threshold[node] \
                else self.right[node]
        return node

    def _new_candidates(self, lo, hi, rng):
        f = rng.integers(len(lo), size=self.n_candidates)
        t = lo[f] + rng.random(self.n_candidates) * (hi[f] - lo[f])
        return f, t, np.zeros((self.n_candidates, 2, self.K))

    def update(self, x, level, weight, lo, hi, rng):
        node = self.leaf_of(x)
        self.counts[node][level] += weight
        if self.depth[node] >= self.max_depth:
            return
        if self.cand[node] is None:
            self.cand[node] = self._new_candidates(lo, hi, rng)
        f, t, stats = self.cand[node]
        side = (x[f] >= t).astype(int)
        stats[np.arange(len(f)), side, level] += weight
        # candidate statistics only cover samples seen since the leaf was created
        tot = stats.sum(axis=2)
        if tot[0].sum() < self.min_split:
            return
        ok = (tot[:, 0] > 0) & (tot[:, 1] > 0)
        if not ok.any():
            return
        h_parent = _entropy(stats[0].sum(axis=0))
        h_child = (tot[:, 0] * _entropy(stats[:, 0]) + tot[:, 1] * _entropy(stats[:, 1])) \
            / tot.sum(axis=1)
        gain = np.where(ok, h_parent - h_child, -np.inf)
        best = int(np.argmax(gain))
        if gain[best] <= self.min_gain:
            return
        self._split(node, int(f[best]), float(t[best]), stats[best])

    def _split(self, node, feat, thr, stats):
        self.feature[node] = feat
        self.threshold[node] = thr
        self.cand[node] = None
        d = self.depth[node] + 1
        for side in (0, 1):
            self.feature.append(-1)
            self.threshold.append(0.0)
            self.left.append(-1)
            self.right.append(-1)
            self.depth.append(d)
            self.counts.append(stats[side].copy())
            self.cand.append(None)
        self.left[node] = len(self.feature) - 2
        self.right[node] = len(self.feature) - 1

    def posterior(self, x):
        c = self.counts[self.leaf_of(x)]
        tot = c.sum()
        return c / tot if tot > 0 else np.full(self.K, 1.0 / self.K)

    def digest(self, h):
        h.update(np.asarray(self.feature, dtype="<i8").tobytes())
        h.update(np.asarray(self.threshold, dtype="<f8").tobytes())
        h.update(np.asarray(self.counts, dtype="<f8").tobytes())


class OnlineForest:
    """Online bagging forest: each sample reaches each tree Poisson(1) times."""

    def __init__(self, K=K_DEFAULT, n_trees=25, n_candidates=20, min_split=10,
                 min_gain=1e-3, max_depth=12, seed=0):
        self.K = K
        self.n_trees = n_trees
        self.params = dict(n_candidates=n_candidates, min_split=min_split,
                           min_gain=min_gain, max_depth=max_depth)
        self.seed = seed
        self.trees = [_Tree(K, **self.params) for _ in range(n_trees)]
        self.rng = np.random.default_rng(seed)
        self.lo = None
        self.hi = None
        self.n_seen = 0

    def hash(self):
        h = hashlib.sha256()
        for t in self.trees:
            t.digest(h)
        if self.lo is not None:
            h.update(self.lo.astype("<f8").tobytes())
            h.update(self.hi.astype("<f8").tobytes())
        return h.hexdigest()[:16]

    def n_splits(self):
        return sum(sum(f >= 0 for f in t.feature) for t in self.trees)

    def update(self, latents, levels):
        X = np.asarray(latents, dtype=float)
        y = np.asarray(levels, dtype=int)
        if len(X) == 0:
            return self
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError("latents must be (n, d) with one level per row")
        if np.any((y < 1) | (y > self.K)):
            raise ValueError(f"informativeness levels must lie in 1..{self.K}")
        lo, hi = X.min(axis=0), X.max(axis=0)
        self.lo = lo if self.lo is None else np.minimum(self.lo, lo)
        self.hi = hi if self.hi is None else np.maximum(self.hi, hi)
        for x, lev in zip(X, y):
            w = self.rng.poisson(1.0, size=self.n_trees)
            for t, wt in zip(self.trees, w):
                if wt > 0:
                    t.update(x, lev - 1, float(wt), self.lo, self.hi, self.rng)
        self.n_seen += len(X)
        return self

    def posterior(self, latents):
        X = np.atleast_2d(np.asarray(latents, dtype=float))
        return np.array([np.mean([t.posterior(x) for t in self.trees], axis=0) for x in X])

    def expected_level(self, latents):
        # row-wise sum rather than a matvec, so a score never depends on batch order
        return (self.posterior(latents) * np.arange(1, self.K + 1)).sum(axis=1)

    def predict_level(self, latents):
        return np.argmax(self.posterior(latents), axis=1) + 1


def rf_update(forest, latents, levels):
    return forest.update(latents, levels)


def rf_rank(forest, latents, ids=None):
    """(scores, order): expected level per sample and ids sorted best first."""
    scores = forest.expected_level(latents) if len(latents) else np.zeros(0)
    ids = list(range(len(scores))) if ids is None else list(ids)
    order = sorted(range(len(scores)), key=lambda i: (scores[i], ids[i]))
    return scores, [ids[i] for i in order]


# self-supervised training stage ------------------------------------------------------

@dataclass
class SSLResult:
    forest: OnlineForest
    journal: list
    queries: int
    labels: dict


def ssl_round(Z, positions, pool_ids, images, oracle, model, train, validation, forest,
              K=K_DEFAULT, cfg=None, seed=0, pseudo_labels=False, probe_epochs=PROBE_EPOCHS,
              queried=None):
    """One cluster -> query -> order -> propagate -> forest update round.

    ``Z`` holds the latents of ``positions`` (indices into ``pool_ids`` and
    ``images``). Returns the cluster model, representative positions, ranking,
    propagated levels and the number of oracle queries made.
    """
    cm = ordinal_cluster(Z, K, seed=seed)
    rep_pos = representatives(cm, Z, ids=list(positions))
    reps = []
    n_queries = 0
    for r in rep_pos:
        if r is None:
            reps.append(None)
            continue
        lab = oracle.label(pool_ids[r])
        n_queries += 1
        if queried is not None:
            queried[pool_ids[r]] = lab
        reps.append((images[r], lab))
    ranking = rank_clusters_by_delta_auc(model, reps, validation, train, cfg, probe_epochs)
    levels, _ = propagate(cm, ranking, [None if r is None else r[1] for r in reps],
                          pseudo_labels)
    forest.update(Z, levels)
    return cm, rep_pos, ranking, levels, n_queries


def run_self_supervised_training(pool_ids, latents, images, oracle, base_model, train,
                                 validation, K=K_DEFAULT, cfg=None, seed=0, forest=None,
                                 journal_path=None, pseudo_labels=False,
                                 probe_epochs=PROBE_EPOCHS):
    """Iterate cluster -> query representatives -> ΔAUC ordering -> propagate ->
    forest update, removing the representatives, until the pool is used up.

    ``images`` maps pool position to pixels; ``train`` is the base model's labeled
    set. When fewer than K samples remain, the last round is topped up with the
    most recently used representatives so every round still queries K labels.
    """
    pool_ids = list(pool_ids)
    Z = np.asarray(latents, dtype=float)
    images = np.asarray(images)
    if len(pool_ids) < K:
        raise ValueError(f"pool of {len(pool_ids)} is smaller than K={K}")
    cfg = cfg or TrainConfig()
    forest = forest if forest is not None else OnlineForest(K=K, seed=seed)
    remaining = list(range(len(pool_ids)))
    used = []
    journal = []
    queried = {}
    n_queries = 0
    it = 0
    fh = open(journal_path, "w") if journal_path else None
    try:
        while remaining:
            it += 1
            active = list(remaining)
            if len(active) < K:
                pad = [u for u in reversed(used) if u not in active][:K - len(active)]
                active = active + pad
            cm, rep_pos, ranking, levels, n = ssl_round(
                Z[active], active, pool_ids, images, oracle, base_model, train, validation,
                forest, K, cfg, seed + it, pseudo_labels, probe_epochs, queried)
            n_queries += n
            chosen = {r for r in rep_pos if r is not None}
            remaining = [r for r in remaining if r not in chosen]
            used.extend(r for r in rep_pos if r is not None)
            rec = {
                "iteration": it,
                "cluster_sizes": [int((cm.assignment == k).sum()) for k in range(K)],
                "representative_ids": [None if r is None else pool_ids[r] for r in rep_pos],
                "delta_auc": [None if not math.isfinite(v) else float(v)
                              for v in ranking.delta_auc],
                "ordinal_labels": [int(v) for v in ranking.ordinal_label],
                "queries": n_queries,
                "forest_hash": forest.hash(),
            }
            journal.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if fh:
            fh.close()
    return SSLResult(forest, journal, n_queries, queried)
