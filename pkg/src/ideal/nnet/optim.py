import numpy as np


class Adam:
    """Adam with bias correction, updating parameter arrays in place.

    ``params`` and ``grads`` are parallel sequences of arrays; the optimizer
    keeps one first/second moment pair per position.
    """

    def __init__(self, lr=1e-4, beta1=0.93, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": [a.copy() for a in self.m or []],
                "v": [a.copy() for a in self.v or []]}
