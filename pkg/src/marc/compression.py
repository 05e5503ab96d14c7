"""Compression network and the HSIC dependence measure that constrains it.

HSIC with Gaussian kernels measures dependence between two same-length
samples of possibly different dimension, which is exactly what lets the
compressed representation be tied to the original one without any
dimension-matching projection. The estimator here is
``Tr(K_X J K_Y J) / (n-1)^2`` with centering matrix ``J = I - (1/n) 1 1^T``,
computed via double-centering so the cost stays O(n^2) in the batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import Mlp
from .numcore import (
    Tensor,
    add,
    exp,
    matmul,
    mul,
    pairwise_sqdist,
    scale,
    sqdist_matrix,
    sub,
    sum_all,
)


@dataclass
class KernelConfig:
    """Gaussian kernel bandwidth policy: per-batch median heuristic or fixed."""

    sigma_policy: str = "median"  # "median" | "fixed"
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma_policy not in ("median", "fixed"):
            raise ValueError(f"KernelConfig: unknown sigma_policy {self.sigma_policy!r}")
        if self.sigma_policy == "fixed" and not self.sigma > 0:
            raise ValueError("KernelConfig: fixed sigma must be > 0")


class CompressionNet:
    """MLP mapping original representations (d_o) to compressed ones (d_c)."""

    def __init__(self, input_dim, output_dim, rng, hidden=(256, 128), name="compress"):
        if not output_dim < input_dim:
            raise ValueError(
                f"CompressionNet: output dim {output_dim} must be < input dim {input_dim}"
            )
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.hidden = tuple(hidden)
        self.mlp = Mlp([input_dim, *hidden, output_dim], rng, name=name)

    def __call__(self, r):
        return compress(r, self)

    def params(self):
        return self.mlp.params()

    def named_params(self):
        return self.mlp.named_params()


def compress(r, net):
    """c = g(r): batch of original representations to compressed ones."""
    t = r if isinstance(r, Tensor) else Tensor(r)
    if t.shape[1] != net.input_dim:
        raise ValueError(
            f"compress: input has {t.shape[1]} columns, network expects {net.input_dim}"
        )
    return net.mlp(t)


def median_sigma(x):
    """Bandwidth from the median heuristic: sqrt(median nonzero sqdist / 2).

    Falls back to 1.0 when all rows coincide.
    """
    d = sqdist_matrix(x)
    iu = np.triu_indices(d.shape[0], k=1)
    vals = d[iu]
    vals = vals[vals > 0.0]
    if vals.size == 0:
        return 1.0
    return float(np.sqrt(np.median(vals) / 2.0))


def _resolve_sigma(values, cfg):
    if cfg.sigma_policy == "fixed":
        return cfg.sigma
    # median heuristic is re-estimated per batch and treated as a constant
    # during differentiation
    return median_sigma(values)


def gaussian_kernel_matrix(x, sigma):
    """n x n Gaussian kernel matrix with entries exp(-||x_i - x_j||^2 / (2 sigma^2))."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.shape[0] < 2:
        raise ValueError(f"gaussian_kernel_matrix: needs n >= 2 rows, got {t.shape[0]}")
    if not sigma > 0:
        raise ValueError(f"gaussian_kernel_matrix: sigma must be > 0, got {sigma}")
    return exp(scale(pairwise_sqdist(t), -1.0 / (2.0 * sigma * sigma)))


def _double_center(k, n):
    ones_row = Tensor(np.ones((1, n)))
    ones_col = Tensor(np.ones((n, 1)))
    col_means = scale(matmul(ones_row, k), 1.0 / n)  # 1 x n
    row_means = scale(matmul(k, ones_col), 1.0 / n)  # n x 1
    grand = scale(sum_all(k), 1.0 / (n * n))
    return add(sub(sub(k, col_means), row_means), grand)


def hsic(x, y, cfg=None):
    """Empirical HSIC between two paired samples of any dimensions.

    Nonnegative (up to roundoff) for Gaussian kernels, zero when either
    side is constant, differentiable in both inputs.
    """
    cfg = cfg or KernelConfig()
    tx = x if isinstance(x, Tensor) else Tensor(x)
    ty = y if isinstance(y, Tensor) else Tensor(y)
    n = tx.shape[0]
    if ty.shape[0] != n:
        raise ValueError(f"hsic: row counts differ, {tx.shape} vs {ty.shape}")
    if n < 2:
        raise ValueError(f"hsic: needs n >= 2 samples, got {n}")
    kx = gaussian_kernel_matrix(tx, _resolve_sigma(tx.values, cfg))
    ky = gaussian_kernel_matrix(ty, _resolve_sigma(ty.values, cfg))
    # Tr(Kx J Ky J) = sum((J Kx J) * (J Ky J)) since J is idempotent and the
    # kernels are symmetric; centering both sides makes a constant input give
    # exactly zero
    kxc = _double_center(kx, n)
    kyc = _double_center(ky, n)
    return scale(sum_all(mul(kxc, kyc)), 1.0 / ((n - 1) ** 2))


def hsic_loss(r_u, c_u, r_i, c_i, cfg=None):
    """-(HSIC(R_u, C_u) + HSIC(R_i, C_i)) / 2.

    Negated so that minimizing the total training loss maximizes the
    dependence between original and compressed representations.
    """
    return scale(add(hsic(r_u, c_u, cfg), hsic(r_i, c_i, cfg)), -0.5)
