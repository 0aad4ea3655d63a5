"""Tiny convolutional classifier with a heteroscedastic variance head.

Architecture (NHWC, single grey channel in)::

    conv(8, 3x3) -> ReLU -> dropout -> maxpool(2)
    conv(16, 3x3) -> ReLU -> dropout
    global average pool -> dense(2) = (logit, log-variance)
"""
from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .layers import (Conv2D, Dense, Dropout, GlobalAvgPool, MaxPool2, ReLU,
                     Sequential)
from .optim import Adam

log = logging.getLogger(__name__)

EVAL_CHUNK = 128


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.93
    beta2: float = 0.999
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 32
    augment_folds: int = 4
    rotation: float = 25.0
    translation: float = 10.0
    scale: tuple = (0.95, 1.05)
    variance_head: bool = True
    variance_weight: float = 0.1
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["scale"] = list(self.scale)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "scale" in d:
            d["scale"] = tuple(d["scale"])
        return cls(**d)


@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1

    def add(self, **row):
        self.epochs.append(row)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Classifier:
    """Binary image classifier returning a logit and a log-variance per image."""

    def __init__(self, size=64, dropout_p=0.2, bias=True, widths=(8, 16), seed=0,
                 dtype=np.float32, input_offset=0.5):
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.size = size
        # pixels are shifted before conv1, by a constant or by each image's own
        # mean ("image_mean"); without a shift the brightness-dominated mean
        # activation swamps the lesion signal after global pooling
        self.input_offset = input_offset if input_offset == "image_mean" \
            else float(input_offset)
        self.dropout_p = dropout_p
        self.bias = bias
        self.widths = tuple(widths)
        self.seed = seed
        c1, c2 = widths
        self.net = Sequential([
            Conv2D(1, c1, 3, bias=bias, rng=rng),
            ReLU(),
            Dropout(dropout_p),
            MaxPool2(),
            Conv2D(c1, c2, 3, bias=bias, rng=rng),
            ReLU(),
            Dropout(dropout_p),
            GlobalAvgPool(),
            Dense(c2, 2, bias=bias, rng=rng),
        ]).astype(self.dtype)

    # indices into net.layers used by the attribution code
    CONV1, RELU1, DROP1, POOL, CONV2, RELU2, DROP2, GAP, HEAD = range(9)

    def _check(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (self.size, self.size):
            raise ValueError(
                f"expected images of shape (N, {self.size}, {self.size}), got {x.shape}")
        return x[..., None]

    def net_input(self, x):
        """Checked NHWC raw pixels -> what the first conv layer sees."""
        if self.input_offset == "image_mean":
            return x - x.mean(axis=(1, 2, 3), keepdims=True)
        return x - self.dtype.type(self.input_offset) if self.input_offset else x

    def forward(self, images, dropout=False, rng=None, keep=False):
        x = self.net_input(self._check(images))
        return self.net.forward(x, dropout=dropout, rng=rng, keep=keep)

    def backward(self, grad_out, input_grad=True):
        g = self.net.backward(grad_out, input_grad=input_grad)
        return None if g is None else g[..., 0]

    def outputs(self, images, dropout=False, rng=None):
        """(logit, log_var) arrays for a batch, evaluated in chunks."""
        x = np.asarray(images, dtype=float)
        if x.ndim == 2:
            x = x[None]
        outs = [self.forward(x[i:i + EVAL_CHUNK], dropout=dropout, rng=rng)
                for i in range(0, len(x), EVAL_CHUNK)]
        out = np.concatenate(outs) if outs else np.zeros((0, 2))
        return out[:, 0], out[:, 1]

    def predict_proba(self, images):
        logit, _ = self.outputs(images)
        return _sigmoid(logit)

    # parameters ----------------------------------------------------------

    def parameters(self):
        return [a for _, _, a in self.net.parameters()]

    def gradients(self):
        return [g for _, _, g in self.net.gradients()]

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat):
        flat = np.asarray(flat)
        i = 0
        for p in self.parameters():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size
        if i != flat.size:
            raise ValueError(f"weight vector has {flat.size} values, model needs {i}")

    def clone(self):
        return copy.deepcopy(self)

    def weights_hash(self):
        return hashlib.sha256(self.get_flat().astype("<f8").tobytes()).hexdigest()[:16]

    def layer_shapes(self):
        return [[i, name, list(a.shape)] for i, name, a in self.net.parameters()]

    def config(self):
        return {"size": self.size, "dropout_p": self.dropout_p, "bias": self.bias,
                "widths": list(self.widths), "seed": self.seed, "dtype": self.dtype.name,
                "input_offset": self.input_offset}

    # loss ------------------------------------------------------------------

    def loss_and_grad(self, images, labels, cfg=None, rng=None, dropout=True,
                      input_grad=False):
        """Forward+backward on one minibatch; returns (total loss, bce)."""
        cfg = cfg or TrainConfig()
        y = np.asarray(labels, dtype=float)
        out = self.forward(images, dropout=dropout, rng=rng)
        logit, logvar = out[:, 0], out[:, 1]
        n = len(y)
        bce = np.mean(np.logaddexp(0.0, logit) - y * logit)
        p = _sigmoid(logit)
        g = np.zeros(out.shape, dtype=out.dtype)
        g[:, 0] = (p - y) / n
        loss = bce
        if cfg.variance_head and cfg.variance_weight > 0:
            # regress log-variance onto the (detached) squared residual
            target = np.log((y - p) ** 2 + 1e-4)
            d = logvar - target
            ad = np.abs(d)
            loss += cfg.variance_weight * np.mean(np.where(ad < 1, 0.5 * d * d, ad - 0.5))
            g[:, 1] = cfg.variance_weight * np.clip(d, -1, 1) / n
        self.backward(g, input_grad=input_grad)
        return loss, bce

    def bce(self, images, labels):
        y = np.asarray(labels, dtype=float)
        logit, _ = self.outputs(images)
        return float(np.mean(np.logaddexp(0.0, logit) - y * logit))


def predict(model, image):
    """Eval-mode (probability, sigma2) for a single image."""
    logit, logvar = model.outputs(np.asarray(image)[None] if np.ndim(image) == 2 else image)
    if np.ndim(image) == 2:
        return float(_sigmoid(logit[0])), float(np.exp(logvar[0]))
    return _sigmoid(logit), np.exp(logvar)


def mc_dropout_samples(model, image, T=20, rng=None):
    """T stochastic passes with fresh dropout masks: list of (prob, sigma2)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(image, dtype=float)
    single = x.ndim == 2
    out = []
    for _ in range(T):
        logit, logvar = model.outputs(x, dropout=True, rng=rng)
        p, s2 = _sigmoid(logit), np.exp(logvar)
        out.append((float(p[0]), float(s2[0])) if single else (p, s2))
    return out


def augment(images, folds, rng, cfg=None):
    """``folds`` random affine copies of each image (rotation, shift, isotropic scale)."""
    cfg = cfg or TrainConfig()
    images = np.asarray(images, dtype=float)
    n, h, w = images.shape
    out = np.empty((n * folds, h, w))
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    k = 0
    for img in images:
        for _ in range(folds):
            theta = np.deg2rad(rng.uniform(-cfg.rotation, cfg.rotation))
            s = rng.uniform(*cfg.scale)
            shift = rng.uniform(-cfg.translation, cfg.translation, size=2)
            c, si = np.cos(theta), np.sin(theta)
            # output->input mapping for ndimage.affine_transform
            mat = np.array([[c, -si], [si, c]]) / s
            offset = centre - mat @ (centre + shift)
            out[k] = ndimage.affine_transform(img, mat, offset=offset, order=1, mode="nearest")
            k += 1
    return out


def _accuracy(model, X, y):
    return float(np.mean((model.predict_proba(X) >= 0.5) == (np.asarray(y) == 1)))


def train_classifier(init, X, y, cfg=None, val=None, test=None, epochs=None):
    """Train a copy of ``init`` on (X, y); returns (model, History).

    With a validation pair the weights with the best validation accuracy
    (ties broken by lower validation loss) are restored at the end, and
    training stops after ``cfg.patience`` epochs without improvement.
    """
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) == 0:
        raise ValueError("labeled set is empty")
    if len(X) != len(y):
        raise ValueError("images and labels differ in length")
    model = init.clone()
    rng = np.random.default_rng(cfg.seed)
    if cfg.augment_folds > 0:
        Xa = np.concatenate([X, augment(X, cfg.augment_folds, rng, cfg)])
        ya = np.concatenate([y, np.repeat(y, cfg.augment_folds)])
    else:
        Xa, ya = X, y
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2)
    params = model.parameters()
    hist = History()
    max_epochs = cfg.max_epochs if epochs is None else epochs
    best = None
    best_key = None
    stale = 0
    for epoch in range(max_epochs):
        order = rng.permutation(len(Xa))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss, _ = model.loss_and_grad(Xa[idx], ya[idx], cfg, rng=rng)
            if not np.isfinite(loss):
                norms = {f"{li}.{name}": float(np.linalg.norm(a))
                         for li, name, a in model.net.parameters()}
                raise TrainingError(f"non-finite loss at epoch {epoch}; layer norms {norms}")
            opt.step(params, model.gradients())
            total += loss * len(idx)
        row = {"epoch": epoch, "train_loss": total / len(Xa)}
        if val is not None:
            row["val_loss"] = model.bce(*val)
            row["val_acc"] = _accuracy(model, *val)
        if test is not None:
            row["test_loss"] = model.bce(*test)
        hist.add(**row)
        if val is None:
            continue
        key = (row["val_acc"], -row["val_loss"])
        if best_key is None or key > best_key:
            best_key, best, stale = key, model.get_flat().copy(), 0
            hist.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best is not None:
        model.set_flat(best)
    return model, hist
