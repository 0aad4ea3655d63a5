"""Sample-selection strategies behind one scoring interface.

Every strategy maps a pool of images to a :class:`ScoreSheet` where a higher
score means "more informative". :func:`select_top_n` turns a sheet into the
ordered batch to query.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import features as F
from .nnet import mc_dropout_samples, prepare_map
from .saliency import saliency_batch

BASE = ("random", "uncertainty", "kurtosis", "pyrad_1st", "pyrad_glcm", "pyrad_shape",
        "deep_features")
PYRAD_FAMILY = {"pyrad_1st": "first_order", "pyrad_glcm": "glcm", "pyrad_shape": "shape2d"}
SALIENCY_BASED = ("kurtosis", "pyrad_1st", "pyrad_glcm", "pyrad_shape", "deep_features")


class StrategyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyId:
    name: str
    reversed: bool = False
    on_raw_image: bool = False

    def __post_init__(self):
        if self.name not in BASE:
            raise StrategyConfigError(f"unknown strategy {self.name!r}; expected one of {BASE}")
        # random scores never look at pixels, so the raw-image modifier is moot
        if self.on_raw_image and self.name not in SALIENCY_BASED + ("random",):
            raise StrategyConfigError(f"{self.name} has no raw-image variant")

    @classmethod
    def parse(cls, text):
        """``name[+reversed][+raw]``, e.g. ``pyrad_1st+raw``."""
        if isinstance(text, StrategyId):
            return text
        parts = str(text).split("+")
        mods = set(parts[1:])
        unknown = mods - {"reversed", "raw"}
        if unknown:
            raise StrategyConfigError(f"unknown strategy modifier(s) {sorted(unknown)}")
        return cls(parts[0], "reversed" in mods, "raw" in mods)

    def __str__(self):
        return self.name + ("+reversed" if self.reversed else "") + \
            ("+raw" if self.on_raw_image else "")

    @property
    def representation(self):
        return "raw" if self.on_raw_image else "saliency"


@dataclass
class ScoreSheet:
    ids: list
    scores: np.ndarray
    strategy: str
    model_hash: str | None = None

    def order(self):
        """Total order: descending score, ties by ascending id."""
        return sorted(range(len(self.ids)), key=lambda i: (-self.scores[i], self.ids[i]))

    def ranking(self):
        return [self.ids[i] for i in self.order()]

    def write_csv(self, path, header=None):
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "score", "rank"])
            for r, i in enumerate(self.order(), start=1):
                w.writerow([self.ids[i], repr(float(self.scores[i])), r])


def read_score_csv(path):
    ids, scores = [], []
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    for row in csv.DictReader(rows):
        ids.append(row["id"])
        scores.append(float(row["score"]))
    return ScoreSheet(ids, np.array(scores), "file")


@dataclass
class StrategyContext:
    """Everything a strategy may need beyond the model and the pool images.

    ``deep`` maps a representation (``saliency``/``raw``) to an (autoencoder,
    forest) pair; ``directions`` maps a feature family to its Borda signs.
    """
    saliency_method: str = "deep_taylor"
    mc_samples: int = 20
    aggregate: str = "sum"
    seed: int = 0
    deep: dict = field(default_factory=dict)
    directions: dict = field(default_factory=dict)

    def family_directions(self, family):
        if family in self.directions:
            return list(self.directions[family])
        if family == "first_order":
            return [F.FIRST_ORDER_DIRECTIONS[n] for n in F.FIRST_ORDER]
        return [1] * len(F.FAMILIES[family])


def _mc_variance(p, s2):
    # (1/T)Σŷ² − ((1/T)Σŷ)² + (1/T)Σσ̂² with correctly rounded sums
    T = len(p)
    epistemic = 0.0 if min(p) == max(p) else \
        math.fsum(v * v for v in p) / T - (math.fsum(p) / T) ** 2
    return epistemic + math.fsum(s2) / T


def uncertainty_from_samples(probs, sigma2, aggregate="sum"):
    """MC-dropout predictive variance per sample.

    ``probs`` and ``sigma2`` have shape (T, n, ...); the per-output variances
    over trailing axes (pixels or logits) are summed, or averaged with
    ``aggregate='mean'``.
    """
    p = np.asarray(probs, dtype=float)
    s2 = np.asarray(sigma2, dtype=float)
    if p.shape != s2.shape or p.ndim < 2:
        raise ValueError("probs and sigma2 must share a (T, n, ...) shape")
    T, n = p.shape[:2]
    pf = p.reshape(T, n, -1)
    sf = s2.reshape(T, n, -1)
    var = np.array([[_mc_variance(pf[:, i, j].tolist(), sf[:, i, j].tolist())
                     for j in range(pf.shape[2])] for i in range(n)])
    return var.sum(axis=1) if aggregate == "sum" else var.mean(axis=1)


def _representations(strategy, model, images, context):
    if strategy.on_raw_image:
        return np.asarray(images, dtype=float)
    maps, _, _ = saliency_batch(model, images, context.saliency_method)
    return maps


def deep_latents(ae, maps):
    return np.array([ae.encode(prepare_map(m))[0] for m in maps]) if len(maps) else \
        np.zeros((0, 32))


def score_pool(strategy, model, pool_ids, pool_images, context=None):
    strategy = StrategyId.parse(strategy)
    context = context or StrategyContext()
    ids = list(pool_ids)
    images = np.asarray(pool_images)
    n = len(ids)
    mh = model.weights_hash() if model is not None else None
    if n == 0:
        return ScoreSheet(ids, np.zeros(0), str(strategy), mh)
    name = strategy.name
    if name == "random":
        scores = np.random.default_rng(context.seed).random(n)
    elif name == "uncertainty":
        samples = mc_dropout_samples(model, images, T=context.mc_samples,
                                     rng=np.random.default_rng(context.seed))
        probs = np.array([s[0] for s in samples])
        s2 = np.array([s[1] for s in samples])
        scores = uncertainty_from_samples(probs, s2, context.aggregate)
    else:
        maps = _representations(strategy, model, images, context)
        if name == "kurtosis":
            scores = np.array([F.kurtosis_score(m) for m in maps])
        elif name in PYRAD_FAMILY:
            fam = PYRAD_FAMILY[name]
            borda = F.borda_rank(F.feature_matrix(maps, fam), context.family_directions(fam),
                                 ids)
            scores = -borda.rank_sums.astype(float)
        else:
            pair = context.deep.get(strategy.representation)
            if pair is None:
                raise StrategyConfigError(
                    f"{strategy} needs a trained autoencoder and forest in the context")
            ae, forest = pair
            scores = -forest.expected_level(deep_latents(ae, maps))
    return ScoreSheet(ids, np.asarray(scores, dtype=float), str(strategy), mh)


def select_top_n(sheet, n, reversed=False):
    """The n most informative ids (least informative first when ``reversed``)."""
    total = len(sheet.ids)
    if n > total:
        warnings.warn(f"requested {n} samples from a pool of {total}; taking all")
        n = total
    if n < 0:
        raise ValueError("n must be non-negative")
    ranking = sheet.ranking()
    if reversed:
        ranking = ranking[::-1]
    return ranking[:n]
