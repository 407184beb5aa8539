"""Adam optimizer over named parameter collections."""

from __future__ import annotations

import numpy as np


class OptimError(ValueError):
    pass


class Adam:
    """Bias-corrected Adam; parameters are updated in place.

    ``params`` is a dict name -> array.  The learning rate may be changed
    between steps (the training loop decays it per epoch).
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.t = 0

    def step(self, grads):
        """One update from a dict of gradients (same keys as params)."""
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.params:
                raise OptimError(f"gradient for unknown parameter {name!r}")
            if not np.isfinite(g).all():
                raise OptimError(f"non-finite gradient for {name!r}; "
                                 "training halted")
            p = self.params[name]
            g = np.asarray(g, dtype=p.dtype)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            mhat = m / b1c
            vhat = v / b2c
            p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def state_tensors(self):
        """Moment arrays keyed for checkpointing."""
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out
