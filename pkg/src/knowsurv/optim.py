"""Adam with two learning-rate groups.

The pathology adapter trains at its own (higher) rate; every other
parameter uses the base rate. Weight decay is L2-coupled (added to the
gradient), matching the common Adam-with-weight-decay usage.

On construction the parameters are re-seated as views into one flat
buffer, so each update is a handful of vectorized operations instead of
per-tensor loops; layer code is unaffected because it always goes
through Parameter.value / Parameter.grad.
"""

from __future__ import annotations

import numpy as np

PATHOLOGY_ADAPTER_PREFIX = "pathology_adapter."


def group_lr(name: str, lr_pathology_adapter: float, lr_other: float) -> float:
    if name.startswith(PATHOLOGY_ADAPTER_PREFIX):
        return lr_pathology_adapter
    return lr_other


class Adam:
    def __init__(self, params, lr_pathology_adapter, lr_other, weight_decay=0.0,
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lrs = [group_lr(p.name, lr_pathology_adapter, lr_other) for p in self.params]
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        total = sum(p.value.size for p in self.params)
        self.flat_value = np.empty(total)
        self.flat_grad = np.zeros(total)
        self.flat_lr = np.empty(total)
        offset = 0
        for p, lr in zip(self.params, self.lrs):
            n = p.value.size
            sl = slice(offset, offset + n)
            self.flat_value[sl] = p.value.ravel()
            self.flat_lr[sl] = lr
            p.value = self.flat_value[sl].reshape(p.value.shape)
            p.grad = self.flat_grad[sl].reshape(p.grad.shape)
            offset += n
        self.m = np.zeros(total)
        self.v = np.zeros(total)
        self._g = np.empty(total)
        self._u = np.empty(total)

    def lr_audit(self) -> dict[str, float]:
        """Exact learning rate applied to every parameter, by name."""
        return {p.name: lr for p, lr in zip(self.params, self.lrs)}

    def zero_grads(self):
        self.flat_grad[...] = 0.0

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        g, u = self._g, self._u
        if self.weight_decay:
            np.multiply(self.flat_value, self.weight_decay, out=g)
            g += self.flat_grad
        else:
            g[...] = self.flat_grad
        self.m *= self.beta1
        np.multiply(g, 1.0 - self.beta1, out=u)
        self.m += u
        self.v *= self.beta2
        np.multiply(g, g, out=u)
        u *= 1.0 - self.beta2
        self.v += u
        # u = lr * (m / b1c) / (sqrt(v / b2c) + eps)
        np.divide(self.v, b2c, out=u)
        np.sqrt(u, out=u)
        u += self.eps
        np.divide(self.m, u, out=u)
        u *= self.flat_lr
        u /= b1c
        self.flat_value -= u
