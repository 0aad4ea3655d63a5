"""Dense autoencoder over saliency maps (1024 -> 256 -> 128 -> 64 -> 32 and back)."""
from __future__ import annotations

import numpy as np

from .layers import Dense, ReLU, Sequential
from .optim import Adam

AE_SIDE = 32
ENCODER_WIDTHS = (256, 128, 64)
LATENT = 32


def area_resize(img, side=AE_SIDE):
    """Area-average resample of a 2-D array to ``side`` x ``side``."""
    img = np.asarray(img, dtype=float)
    return _area_matrix(img.shape[0], side) @ img @ _area_matrix(img.shape[1], side).T


def _area_matrix(n_in, n_out):
    # row i averages the input span [i*n_in/n_out, (i+1)*n_in/n_out)
    edges = np.arange(n_out + 1) * n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(np.floor(lo)), int(np.ceil(hi))):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / (n_in / n_out)


def prepare_map(values, side=AE_SIDE):
    """Min-max normalise a map to [0, 1] then area-resample it."""
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    v = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    return area_resize(v, side).ravel()


class Autoencoder:
    def __init__(self, n_in=AE_SIDE * AE_SIDE, widths=ENCODER_WIDTHS, latent=LATENT, seed=0):
        rng = np.random.default_rng(seed)
        self.n_in = n_in
        self.widths = tuple(widths)
        self.latent = latent
        dims = [n_in, *widths]
        enc = []
        for a, b in zip(dims[:-1], dims[1:]):
            enc += [Dense(a, b, rng=rng), ReLU()]
        enc.append(Dense(dims[-1], latent, rng=rng))
        dims_dec = [latent, *reversed(widths)]
        dec = []
        for a, b in zip(dims_dec[:-1], dims_dec[1:]):
            dec += [Dense(a, b, rng=rng), ReLU()]
        dec.append(Dense(dims_dec[-1], n_in, rng=rng))
        self.encoder = Sequential(enc)
        self.decoder = Sequential(dec)

    def encode(self, x):
        return self.encoder.forward(np.atleast_2d(np.asarray(x, dtype=float)))

    def reconstruct(self, x):
        return self.decoder.forward(self.encode(x))

    def mse(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return float(np.mean((self.reconstruct(x) - x) ** 2))

    def parameters(self):
        return ([a for _, _, a in self.encoder.parameters()]
                + [a for _, _, a in self.decoder.parameters()])

    def gradients(self):
        return ([g for _, _, g in self.encoder.gradients()]
                + [g for _, _, g in self.decoder.gradients()])

    def loss_and_grad(self, x):
        z = self.encoder.forward(x)
        r = self.decoder.forward(z)
        diff = r - x
        loss = float(np.mean(diff ** 2))
        g = 2.0 * diff / diff.size
        self.encoder.backward(self.decoder.backward(g))
        return loss


def train_autoencoder(maps, epochs=150, lr=1e-3, batch_size=32, seed=0, init=None):
    """Fit an autoencoder to prepared map vectors (rows of ``maps``).

    Returns ``(ae, losses)`` where ``losses[0]`` is the reconstruction MSE at
    initialisation and ``losses[-1]`` after the final epoch.
    """
    x = np.atleast_2d(np.asarray(maps, dtype=float))
    if len(x) < LATENT:
        raise ValueError(f"need at least {LATENT} maps to train the autoencoder, got {len(x)}")
    ae = init if init is not None else Autoencoder(n_in=x.shape[1], seed=seed)
    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr, beta1=0.9, beta2=0.999)
    params = ae.parameters()
    losses = [ae.mse(x)]
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(x), batch_size):
            ae.loss_and_grad(x[order[i:i + batch_size]])
            opt.step(params, ae.gradients())
        losses.append(ae.mse(x))
    return ae, losses
