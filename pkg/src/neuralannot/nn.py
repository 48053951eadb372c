"""Fully connected layers with a hand-written reverse pass."""

from __future__ import annotations

import numpy as np


def init_dense(rng, n_in: int, n_out: int, gain: float = np.sqrt(2.0)):
    """He-normal weights and zero bias."""
    return rng.normal(scale=gain / np.sqrt(n_in), size=(n_in, n_out)), np.zeros(n_out)


class MLP:
    """Stack of dense layers, ReLU between them (none after the last).

    Weights live in the caller's parameter dictionary under
    ``{prefix}{i}.W`` / ``{prefix}{i}.b`` so one optimizer can own all of them.
    """

    def __init__(self, prefix: str, sizes: list, final_relu: bool = False):
        self.prefix = prefix
        self.sizes = list(sizes)
        self.final_relu = final_relu

    def names(self):
        for i in range(len(self.sizes) - 1):
            yield f"{self.prefix}{i}.W", f"{self.prefix}{i}.b"

    def init(self, params: dict, rng, last_gain: float | None = None) -> None:
        n = len(self.sizes) - 1
        for i, (wn, bn) in enumerate(self.names()):
            gain = last_gain if (i == n - 1 and last_gain is not None) else np.sqrt(2.0)
            params[wn], params[bn] = init_dense(rng, self.sizes[i], self.sizes[i + 1], gain)

    def forward(self, params: dict, x):
        acts = [x]
        n = len(self.sizes) - 1
        for i, (wn, bn) in enumerate(self.names()):
            x = x @ params[wn] + params[bn]
            if i < n - 1 or self.final_relu:
                x = np.maximum(x, 0.0)
            acts.append(x)
        return x, acts

    def backward(self, params: dict, acts, grad, grads: dict):
        """Accumulate parameter gradients into ``grads``; return the input gradient."""
        n = len(self.sizes) - 1
        names = list(self.names())
        for i in range(n - 1, -1, -1):
            wn, bn = names[i]
            if i < n - 1 or self.final_relu:
                grad = grad * (acts[i + 1] > 0)
            grads[wn] = grads.get(wn, 0.0) + acts[i].T @ grad
            grads[bn] = grads.get(bn, 0.0) + grad.sum(axis=0)
            grad = grad @ params[wn].T
        return grad
