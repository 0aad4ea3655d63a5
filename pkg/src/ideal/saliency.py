"""Saliency maps from a trained classifier.

Three attribution methods, all returning non-negative H x W maps:

``deep_taylor``
    z+ relevance propagation from the target score down to the pixels.
``grad_cam``
    ReLU of the gradient-weighted last conv feature map, upsampled bilinearly.
``grad_input``
    |d score / d pixel * pixel|.

The target score of class 1 is the logit, of class 0 the negated logit.
The default target class is the model's own prediction.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nnet.layers import (Conv2D, Dense, Dropout, Flatten, GlobalAvgPool, MaxPool2,
                          ReLU, Sequential, Upsample2)
from .synthdata import read_pgm, write_pgm

METHODS = ("deep_taylor", "grad_cam", "grad_input")
CHUNK = 64


class UnsupportedMethodError(ValueError):
    pass


@dataclass
class SaliencyMap:
    values: np.ndarray
    method: str
    source_image_id: str | None = None
    model_hash: str | None = None
    target_class: int = 1
    flags: list = field(default_factory=list)


class LinearScorer:
    """Bias-free linear model ``score = w . x`` over an image, for closed-form checks."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        self.shape = w.shape
        dense = Dense(w.size, 2, bias=False)
        dense.params["W"] = np.stack([w.ravel(), np.zeros(w.size)], axis=1)
        self.net = Sequential([Flatten(), dense])

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == len(self.shape):
            x = x[None]
        return x[..., None]

    def net_input(self, x):
        return x

    def weights_hash(self):
        return "linear"


def _targets(model, x, target_class):
    out = model.net.forward(model.net_input(x))
    logit = out[:, 0]
    if target_class is None:
        cls = (logit > 0).astype(int)
    else:
        cls = np.broadcast_to(np.asarray(target_class, dtype=int), logit.shape).copy()
    if np.any((cls != 0) & (cls != 1)):
        raise ValueError("target_class must be 0 or 1")
    sign = np.where(cls == 1, 1.0, -1.0)
    return cls, sign, sign * logit


def _safe_div(num, den):
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def _zplus_dense(a, W, R):
    wp = np.maximum(W, 0.0)
    z = a @ wp
    return a * (_safe_div(R, z) @ wp.T)


def _zplus_conv(layer, a, R):
    wp = np.maximum(layer.params["W"], 0.0)
    z = layer.conv(a, wp)
    return a * layer.conv_transpose(_safe_div(R, z), wp, a.shape)


def relevance(model, images, target_class=None, return_layers=False):
    """z+ relevance maps for a batch; returns (maps, target classes, layer sums).

    ``layer sums`` holds, per sample, the total relevance entering each layer
    from the top (index 0 = target score) down to the input pixels.
    """
    x = model._check(images)
    cls, sign, score = _targets(model, x, target_class)
    _, acts = model.net.forward(model.net_input(x), keep=True)
    # an input offset acts like a bias on the first layer: relevance flows to raw pixels
    acts[0] = x
    layers = model.net.layers
    head = layers[-1]
    if not isinstance(head, Dense):
        raise UnsupportedMethodError("relevance propagation expects a dense output layer")
    R_top = np.maximum(score, 0.0)
    sums = [R_top.copy()]
    # class-0 scores negate the logit, so the effective head weights flip sign per sample
    a = acts[-2]
    wcol = head.params["W"][:, 0]
    wp = np.maximum(sign[:, None] * wcol[None, :], 0.0)
    z = np.sum(a * wp, axis=1)
    R = a * wp * _safe_div(R_top, z)[:, None]
    sums.append(R.reshape(len(R), -1).sum(axis=1))
    for k in range(len(layers) - 2, -1, -1):
        layer = layers[k]
        a = acts[k]
        if isinstance(layer, (ReLU, Dropout)):
            pass
        elif isinstance(layer, Flatten):
            R = R.reshape(a.shape)
        elif isinstance(layer, GlobalAvgPool):
            tot = a.sum(axis=(1, 2))
            R = a * _safe_div(R, tot)[:, None, None, :]
        elif isinstance(layer, MaxPool2):
            R = layer.route(R)
        elif isinstance(layer, Upsample2):
            R = layer.backward(R)
        elif isinstance(layer, Conv2D):
            R = _zplus_conv(layer, a, R)
        elif isinstance(layer, Dense):
            R = _zplus_dense(a, layer.params["W"], R)
        else:
            raise UnsupportedMethodError(f"no relevance rule for {type(layer).__name__}")
        sums.append(R.reshape(len(R), -1).sum(axis=1))
    maps = R[..., 0]
    if return_layers:
        return maps, cls, score, np.stack(sums, axis=1)
    return maps, cls, score


def _score_input_gradient(model, x, sign):
    out = model.net.forward(model.net_input(x))
    g = np.zeros(out.shape, dtype=out.dtype)
    g[:, 0] = sign
    return model.net.backward(g)


def _last_conv(model):
    idx = [k for k, layer in enumerate(model.net.layers) if isinstance(layer, Conv2D)]
    if not idx:
        raise UnsupportedMethodError("grad_cam needs a model with a convolutional layer")
    return idx[-1]


def _upsample(cam, size):
    if cam.shape[1] == size:
        return cam
    zoom = (1, size / cam.shape[1], size / cam.shape[2])
    return np.maximum(ndimage.zoom(cam, zoom, order=1, mode="nearest", grid_mode=True), 0.0)


def _grad_cam_batch(model, images, target_class):
    x = model._check(images)
    L = _last_conv(model)
    cls, sign, score = _targets(model, x, target_class)
    _, acts = model.net.forward(model.net_input(x), keep=True)
    layers = model.net.layers
    # feature map = output of the activation right after the last conv
    start = L + 2 if L + 1 < len(layers) and isinstance(layers[L + 1], ReLU) else L + 1
    A = acts[start]
    g = np.zeros(acts[-1].shape, dtype=acts[-1].dtype)
    g[:, 0] = sign
    for layer in reversed(layers[start:]):
        g = layer.backward(g)
    alpha = g.mean(axis=(1, 2))
    cam = np.maximum(np.einsum("nhwc,nc->nhw", A, alpha), 0.0)
    return _upsample(cam, x.shape[1]), cls, score


def _grad_input_batch(model, images, target_class):
    x = model._check(images)
    cls, sign, score = _targets(model, x, target_class)
    g = _score_input_gradient(model, x, sign)
    return np.abs(g * x)[..., 0], cls, score


def _deep_taylor_batch(model, images, target_class):
    return relevance(model, images, target_class)


_BATCH = {"deep_taylor": _deep_taylor_batch, "grad_cam": _grad_cam_batch,
          "grad_input": _grad_input_batch}


def saliency_batch(model, images, method="deep_taylor", target_class=None):
    """(N, H, W) float64 maps plus the target class and score used per image."""
    if method not in _BATCH:
        raise UnsupportedMethodError(f"unknown saliency method {method!r}")
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    maps, classes, scores = [], [], []
    for i in range(0, len(images), CHUNK):
        tc = target_class
        if tc is not None and np.ndim(tc) > 0:
            tc = np.asarray(tc)[i:i + CHUNK]
        m, c, s = _BATCH[method](model, images[i:i + CHUNK], tc)[:3]
        maps.append(np.asarray(m, dtype=float))
        classes.append(c)
        scores.append(s)
    maps = np.concatenate(maps)
    maps[~np.isfinite(maps)] = 0.0
    return maps, np.concatenate(classes), np.concatenate(scores)


def _single(method, model, image, target_class, image_id):
    maps, cls, score = saliency_batch(model, np.asarray(image)[None], method, target_class)
    flags = []
    if method == "deep_taylor" and score[0] < 0:
        warnings.warn("target score is negative; z+ relevance is undefined, returning zeros")
        flags.append("negative_target_score")
    return SaliencyMap(maps[0], method, image_id, model.weights_hash(), int(cls[0]), flags)


def deep_taylor(model, image, target_class=None, image_id=None):
    return _single("deep_taylor", model, image, target_class, image_id)


def grad_cam(model, image, target_class=None, image_id=None):
    return _single("grad_cam", model, image, target_class, image_id)


def grad_input(model, image, target_class=None, image_id=None):
    return _single("grad_input", model, image, target_class, image_id)


def mass_inside(maps, masks):
    """Fraction of each map's total mass falling inside the matching mask."""
    maps = np.asarray(maps, dtype=float)
    masks = np.asarray(masks, dtype=bool)
    tot = maps.reshape(len(maps), -1).sum(axis=1)
    inside = (maps * masks).reshape(len(maps), -1).sum(axis=1)
    return np.divide(inside, tot, out=np.zeros_like(tot), where=tot > 0)


def export_map(smap, path):
    """PGM (P5) of the min-max scaled map with a ``.json`` sidecar {min, max, method}."""
    path = Path(path)
    v = np.asarray(smap.values, dtype=float)
    lo, hi = float(v.min()), float(v.max())
    scaled = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    write_pgm(path, scaled)
    meta = {"min": lo, "max": hi, "method": smap.method,
            "source_image_id": smap.source_image_id, "model_hash": smap.model_hash,
            "target_class": smap.target_class}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def import_map(path):
    path = Path(path)
    q = read_pgm(path).astype(float)
    side = path.with_suffix(".json")
    if side.exists():
        meta = json.loads(side.read_text())
    else:
        meta = {"min": 0.0, "max": 1.0, "method": "unknown"}
    values = meta["min"] + q / 255.0 * (meta["max"] - meta["min"])
    return SaliencyMap(values, meta.get("method", "unknown"), meta.get("source_image_id"),
                       meta.get("model_hash"), meta.get("target_class", 1))
