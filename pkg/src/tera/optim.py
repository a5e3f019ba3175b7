"""Adam and global-norm gradient clipping over name -> Tensor parameter dicts."""

import numpy as np


class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self, params, grads, lr, lr_scale=None):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            rate = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
            update = rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


def clip_by_global_norm(grads, max_norm):
    if not max_norm or max_norm <= 0:
        return grads, None
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        grads = {n: g * np.asarray(scale, dtype=g.dtype) for n, g in grads.items()}
    return grads, total
