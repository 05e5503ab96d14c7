"""Shared building blocks: Xavier init and a plain fully-connected stack."""

from __future__ import annotations

import numpy as np

from .numcore import Tensor, add, matmul, relu


def xavier(rng, fan_in, fan_out):
    """Uniform init in [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class Mlp:
    """Fully connected stack: ReLU between layers, linear final layer.

    Weights are (fan_in x fan_out) so a batch flows as ``x @ w + b``.
    Biases start at zero.
    """

    def __init__(self, dims, rng, name="mlp"):
        if len(dims) < 2:
            raise ValueError("Mlp needs at least input and output dims")
        self.dims = tuple(int(d) for d in dims)
        self.name = name
        self.weights = []
        self.biases = []
        for i, (din, dout) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            self.weights.append(
                Tensor(xavier(rng, din, dout), requires_grad=True, name=f"{name}.w{i}")
            )
            self.biases.append(
                Tensor(np.zeros((1, dout)), requires_grad=True, name=f"{name}.b{i}")
            )

    def __call__(self, x):
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = add(matmul(h, w), b)
            if i < last:
                h = relu(h)
        return h

    def params(self):
        return list(self.weights) + list(self.biases)

    def named_params(self):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{self.name}.w{i}", w))
            out.append((f"{self.name}.b{i}", b))
        return out
