"""Segmentation use case: a one-level encoder-decoder trained on selected
images and their oracle masks, with selection driven by the saliency of a
proxy image-level classifier (mask area above 15% = positive).
"""
from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import alloop
from .alloop import ALConfig, LearningCurve, SeedRun, _Task
from .metrics import dice
from .nnet import Classifier, TrainConfig, TrainingError, train_classifier
from .nnet.layers import Conv2D, MaxPool2, ReLU, Sequential, Upsample2
from .nnet.optim import Adam
from .strategies import StrategyContext, StrategyId, score_pool, select_top_n
from .synthdata import DatasetSpec, Oracle, evaluation_labels

log = logging.getLogger(__name__)

STANDARD_GLANDS = DatasetSpec(n_images=200, size=32, positive_fraction=0.5, contrast=0.3,
                              noise_sigma=0.05, vendor="A", task="gland_seg", seed=0)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class SegModel:
    """conv(8)+ReLU+pool -> conv(16)+ReLU -> upsample -> conv(8)+ReLU -> conv(1)+sigmoid."""

    def __init__(self, size=32, seed=0, input_offset=0.5, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.size = size
        self.seed = seed
        self.input_offset = float(input_offset)
        self.dtype = np.dtype(dtype)
        self.net = Sequential([
            Conv2D(1, 8, 3, rng=rng), ReLU(), MaxPool2(),
            Conv2D(8, 16, 3, rng=rng), ReLU(), Upsample2(),
            Conv2D(16, 8, 3, rng=rng), ReLU(),
            Conv2D(8, 1, 3, rng=rng),
        ]).astype(self.dtype)

    def _input(self, images):
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.size, self.size):
            raise ValueError(f"expected (N, {self.size}, {self.size}) images, got {x.shape}")
        return x[..., None] - self.dtype.type(self.input_offset)

    def logits(self, images):
        out = [self.net.forward(self._input(images[i:i + 128]))[..., 0]
               for i in range(0, len(images), 128)]
        return np.concatenate(out) if out else np.zeros((0, self.size, self.size))

    def predict(self, images):
        """Per-pixel foreground probability in (0, 1)."""
        images = np.asarray(images)
        single = images.ndim == 2
        p = _sigmoid(self.logits(images[None] if single else images).astype(float))
        return p[0] if single else p

    def loss_and_grad(self, images, masks):
        z = self.net.forward(self._input(images))[..., 0].astype(float)
        y = np.asarray(masks, dtype=float)
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        g = ((_sigmoid(z) - y) / y.size)[..., None].astype(self.dtype)
        self.net.backward(g, input_grad=False)
        return loss

    def parameters(self):
        return [a for _, _, a in self.net.parameters()]

    def gradients(self):
        return [g for _, _, g in self.net.gradients()]

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat):
        i = 0
        for p in self.parameters():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def clone(self):
        return copy.deepcopy(self)

    def weights_hash(self):
        return hashlib.sha256(self.get_flat().astype("<f8").tobytes()).hexdigest()[:16]


def mean_dice(model, images, masks):
    pred = model.predict(images)
    return float(np.mean([dice(p, m) for p, m in zip(pred, masks)])) if len(images) else 1.0


@dataclass
class SegHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1


def train_segmenter(init, images, masks, cfg=None, val=None, epochs=None):
    """Per-pixel BCE training; returns (model, SegHistory).

    ``masks`` must hold one mask per image (``None`` entries are rejected).
    With a validation pair, per-epoch Dice is logged and the best-Dice weights kept.
    """
    cfg = cfg or TrainConfig(lr=3e-3, max_epochs=60)
    if any(m is None for m in masks):
        raise ValueError("every labeled image needs an oracle mask")
    X = np.asarray(images, dtype=float)
    M = np.asarray(masks, dtype=bool)
    if len(X) == 0:
        raise ValueError("labeled set is empty")
    if X.shape != M.shape:
        raise ValueError(f"image/mask shapes differ: {X.shape} vs {M.shape}")
    model = init.clone()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2)
    params = model.parameters()
    hist = SegHistory()
    best, best_d, stale = None, -1.0, 0
    for epoch in range(cfg.max_epochs if epochs is None else epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss = model.loss_and_grad(X[idx], M[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite segmentation loss at epoch {epoch}")
            opt.step(params, model.gradients())
            total += loss * len(idx)
        row = {"epoch": epoch, "train_loss": total / len(X)}
        if val is not None:
            row["val_dice"] = mean_dice(model, *val)
            if row["val_dice"] > best_d:
                best, best_d, stale = model.get_flat().copy(), row["val_dice"], 0
                hist.best_epoch = epoch
            else:
                stale += 1
        hist.epochs.append(row)
        if val is not None and stale >= cfg.patience:
            break
    if best is not None:
        model.set_flat(best)
    return model, hist


@dataclass
class SegALConfig(ALConfig):
    dataset: dict = field(default_factory=lambda: STANDARD_GLANDS.to_dict())
    seg_train: dict = field(
        default_factory=lambda: TrainConfig(lr=3e-3, max_epochs=60, patience=15).to_dict())
    seg_finetune_epochs: int = 15
    freeze_proxy: bool = False

    def validate(self):
        super().validate()
        if self.dataset_spec().task != "gland_seg":
            raise alloop.ConfigError("segmentation runs need a gland_seg dataset")
        return self

    def seg_config(self, seed):
        return replace(TrainConfig.from_dict(self.seg_train), seed=seed)


class _SegTask(_Task):
    def __init__(self, spec, seed, noise_sigma):
        super().__init__(spec, seed, noise_sigma)
        vi, ti = list(self.pool.validation), list(self.pool.test)
        self.val_masks = np.array([self.ds._masks[k] for k in self.ds.indices(vi)])
        self.test_masks = np.array([self.ds._masks[k] for k in self.ds.indices(ti)])

    def evaluate_seg(self, model):
        return (mean_dice(model, self.val[0], self.val_masks),
                mean_dice(model, self.test[0], self.test_masks))


def _seg_fsl(cfg, task, seed):
    key = alloop._key("segfsl", cfg.dataset, cfg.seg_train, cfg.noise_sigma, seed)

    def fit():
        ids = task.pool_ids
        masks = np.array([task.ds._masks[k] for k in task.ds.indices(ids)])
        model, _ = train_segmenter(SegModel(task.spec.size, seed), task.images(ids), masks,
                                   cfg.seg_config(seed), val=(task.val[0], task.val_masks))
        va, te = task.evaluate_seg(model)
        return {"val": va, "test": te}
    return alloop._cached(key, fit)


def _seg_base(cfg, task, seed, init_ids, masks):
    key = alloop._key("segbase", cfg.dataset, cfg.seg_train, cfg.noise_sigma, seed, init_ids)

    def fit():
        model, _ = train_segmenter(SegModel(task.spec.size, seed), task.images(init_ids),
                                   masks, cfg.seg_config(seed),
                                   val=(task.val[0], task.val_masks))
        return model
    return alloop._cached(key, fit)


def _run_seg_seed(cfg, strategy, seed):
    task = _SegTask(cfg.dataset_spec(), seed, cfg.noise_sigma)
    oracle = Oracle(task.ds)
    pool_size = len(task.pool_ids)
    init_ids = alloop._init_ids(task, cfg.init_fraction, seed)
    labels = dict(zip(init_ids, (int(v) for v in oracle.labels(init_ids))))
    masks = {i: oracle.mask(i) for i in init_ids}
    unlabeled = [i for i in task.pool_ids if i not in labels]
    # the proxy classifier only ever sees image-level labels
    proxy = alloop._base(cfg, task, seed, init_ids, np.array([labels[i] for i in init_ids]))
    seg = _seg_base(cfg, task, seed, init_ids, np.array([masks[i] for i in init_ids]))
    fsl = _seg_fsl(cfg, task, seed)
    context = StrategyContext(saliency_method=cfg.saliency, mc_samples=cfg.mc_samples,
                              aggregate=cfg.aggregate, seed=seed)
    if strategy.name == "deep_features":
        ae, forest, _ = alloop._deep_context(
            cfg, strategy, task, seed, proxy, init_ids,
            np.array([labels[i] for i in init_ids]), unlabeled)
        context.deep[strategy.representation] = (ae, forest)
    elif strategy.name in ("pyrad_glcm", "pyrad_shape"):
        fam, dirs = alloop._calibrate(cfg, strategy, task, seed, proxy, init_ids,
                                      np.array([labels[i] for i in init_ids]), unlabeled)
        context.directions[fam] = dirs
    va, te = task.evaluate_seg(seg)
    states = [{"iteration": 0, "n_labeled": len(labels), "fraction": len(labels) / pool_size,
               "val": va, "test": te}]
    selections = []
    it = 0
    while unlabeled and (it == 0 or len(labels) / pool_size < cfg.max_fraction - 1e-12):
        it += 1
        context.seed = int(np.random.default_rng([seed, it]).integers(2 ** 31))
        sheet = score_pool(strategy, proxy, unlabeled, task.images(unlabeled), context)
        batch = select_top_n(sheet, min(cfg.batch_size, len(unlabeled)), strategy.reversed)
        for i in batch:
            labels[i] = oracle.label(i)
            masks[i] = oracle.mask(i)
        chosen = set(batch)
        unlabeled = [i for i in unlabeled if i not in chosen]
        selections.append(list(batch))
        ids = list(labels)
        X = task.images(ids)
        if not cfg.freeze_proxy:
            proxy, _ = train_classifier(proxy, X, np.array([labels[i] for i in ids]),
                                        cfg.train_config(seed * 1000 + it), val=task.val,
                                        epochs=cfg.finetune_epochs)
        seg, _ = train_segmenter(seg, X, np.array([masks[i] for i in ids]),
                                 cfg.seg_config(seed * 1000 + it),
                                 val=(task.val[0], task.val_masks),
                                 epochs=cfg.seg_finetune_epochs)
        va, te = task.evaluate_seg(seg)
        states.append({"iteration": it, "n_labeled": len(labels),
                       "fraction": len(labels) / pool_size, "val": va, "test": te})
    states[-1]["iterations_to_full"] = -(-(pool_size - len(init_ids)) // cfg.batch_size)
    return SeedRun(seed, states, fsl, oracle.count, selections)


def run_segmentation_al(cfg):
    """All seeds of one segmentation configuration -> Dice LearningCurve."""
    if isinstance(cfg, dict):
        cfg = SegALConfig.from_dict(cfg)
    cfg.validate()
    strategy = StrategyId.parse(cfg.strategy)
    runs = []
    for seed in cfg.seeds:
        try:
            runs.append(_run_seg_seed(cfg, strategy, seed))
        except (TrainingError, ValueError) as exc:
            log.warning("segmentation seed %s aborted: %s", seed, exc)
            runs.append(SeedRun(seed, [], {}, 0, [], aborted=f"{type(exc).__name__}: {exc}"))
    return LearningCurve(str(strategy), runs, cfg.increment, metric="dice")


def dice_at(curve, fraction):
    """Per-seed test Dice at the first state reaching ``fraction`` (seed -> value)."""
    out = {}
    for r in curve.ok_runs:
        hit = next((s for s in r.states if s["fraction"] >= fraction - 1e-9), None)
        if hit is not None:
            out[r.seed] = hit["test"]
    return out
