"""Reference compressors and proxy objectives for the layer-advantage study.

PCA (own cyclic-Jacobi eigensolver), a reconstruction autoencoder loss, the
cosine-similarity proxy, an in-batch contrastive proxy, and nested
(prefix-wise) compression with one matching head per prefix width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matching import MatchingNet, cosine_target_loss, match_loss, predict_match
from .numcore import (
    Tensor,
    div,
    exp,
    log,
    matmul,
    mean_all,
    mul,
    row_sum,
    scale,
    slice_cols,
    sqrt,
    sub,
    sum_all,
    trace,
    transpose,
)

DEFAULT_PREFIX_DIMS = (16, 32, 64, 128)


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaModel:
    mean: np.ndarray  # (1, d)
    components: np.ndarray  # (d, k), orthonormal columns, descending eigenvalue
    eigenvalues: np.ndarray  # (k,)

    @property
    def output_dim(self):
        return self.components.shape[1]


def jacobi_eigh(a, tol=1e-12, max_sweeps=60):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues desc, eigenvectors as columns).
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"jacobi_eigh: needs a square matrix, got {a.shape}")
    v = np.eye(n)
    norm = max(1.0, float(np.abs(a).max()))
    for _ in range(max_sweeps):
        off = np.sqrt((a * a).sum() - (np.diag(a) ** 2).sum())
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol * norm * 1e-4:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def pca_fit(x, k):
    """Top-k principal components of the sample covariance of ``x``.

    Component signs are fixed so each column's largest-magnitude entry is
    positive.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if k < 1:
        raise ValueError("pca_fit: k must be >= 1")
    if k >= d:
        raise ValueError(f"pca_fit: k={k} must be < feature dim {d}")
    if n <= k:
        raise ValueError(f"pca_fit: needs more samples than components, n={n} k={k}")
    mean = x.mean(axis=0, keepdims=True)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1)
    w, v = jacobi_eigh(cov)
    w = np.clip(w, 0.0, None)
    comps = v[:, :k].copy()
    for j in range(k):
        i = int(np.argmax(np.abs(comps[:, j])))
        if comps[i, j] < 0:
            comps[:, j] = -comps[:, j]
    return PcaModel(mean=mean, components=comps, eigenvalues=w[:k].copy())


def pca_transform(x, model):
    """(x - mean) @ components."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != model.mean.shape[1]:
        raise ValueError(
            f"pca_transform: input dim {x.shape[1]} != fitted dim {model.mean.shape[1]}"
        )
    return (x - model.mean) @ model.components


def pca_reconstruction_error(x, model):
    """Total squared residual / (n - 1); equals the discarded eigenvalue sum."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - model.mean
    proj = (xc @ model.components) @ model.components.T
    return float(((xc - proj) ** 2).sum() / (x.shape[0] - 1))


# ---------------------------------------------------------------------------
# proxy objectives


def cs_proxy_loss(r_u, r_i, y):
    """Cosine-similarity proxy: mean (cos(r_u, r_i) - (2y - 1))^2."""
    return cosine_target_loss(r_u, r_i, y)


def cl_proxy_loss(r_u, r_i, tau=0.07):
    """In-batch contrastive proxy over cosine similarities.

    Row i of ``r_u`` pairs with row i of ``r_i``; every other row in the
    batch is a negative. Mean cross-entropy of the row softmax of
    cos/tau with the diagonal as targets.
    """
    tu = r_u if isinstance(r_u, Tensor) else Tensor(r_u)
    ti = r_i if isinstance(r_i, Tensor) else Tensor(r_i)
    if tu.shape != ti.shape:
        raise ValueError(f"cl_proxy_loss: shapes differ, {tu.shape} vs {ti.shape}")
    n = tu.shape[0]
    if n < 2:
        raise ValueError("cl_proxy_loss: needs n >= 2 for in-batch negatives")
    if not tau > 0:
        raise ValueError("cl_proxy_loss: tau must be > 0")
    if (tu.values * tu.values).sum(axis=1).min() <= 0 or (ti.values * ti.values).sum(axis=1).min() <= 0:
        raise ValueError("cl_proxy_loss: zero-norm row")
    un = div(tu, sqrt(row_sum(mul(tu, tu))))
    vn = div(ti, sqrt(row_sum(mul(ti, ti))))
    sims = scale(matmul(un, transpose(vn)), 1.0 / tau)
    # mean over rows of (logsumexp - diagonal); |sims| <= 1/tau keeps exp safe
    lse = log(row_sum(exp(sims)))
    return scale(sub(sum_all(lse), trace(sims)), 1.0 / n)


# ---------------------------------------------------------------------------
# nested (prefix) compression


class NestedHeads:
    """One matching head per nested prefix width of the compressed space."""

    def __init__(self, prefix_dims, d_c, rng, use_explicit_interactions=True):
        dims = tuple(int(m) for m in prefix_dims)
        if not dims:
            raise ValueError("NestedHeads: needs at least one prefix dim")
        if any(m2 <= m1 for m1, m2 in zip(dims, dims[1:])):
            raise ValueError(f"NestedHeads: prefix dims must be strictly increasing, got {dims}")
        if dims[-1] > d_c:
            raise ValueError(f"NestedHeads: prefix {dims[-1]} exceeds d_c={d_c}")
        self.prefix_dims = dims
        self.d_c = int(d_c)
        self.use_explicit_interactions = use_explicit_interactions
        mult = 4 if use_explicit_interactions else 2
        self.heads = [MatchingNet(mult * m, rng, name=f"nested.head{m}") for m in dims]

    def params(self):
        out = []
        for h in self.heads:
            out.extend(h.params())
        return out

    def named_params(self):
        out = []
        for h in self.heads:
            out.extend(h.named_params())
        return out


def mrl_loss(c_u, c_i, y, heads):
    """Sum of matching losses over nested prefixes, equal weights."""
    from .matching import MarcLossConfig

    tu = c_u if isinstance(c_u, Tensor) else Tensor(c_u)
    ti = c_i if isinstance(c_i, Tensor) else Tensor(c_i)
    if tu.shape[1] < heads.prefix_dims[-1]:
        raise ValueError(
            f"mrl_loss: prefix {heads.prefix_dims[-1]} exceeds representation width {tu.shape[1]}"
        )
    cfg = MarcLossConfig(use_explicit_interactions=heads.use_explicit_interactions)
    total = None
    for m, head in zip(heads.prefix_dims, heads.heads):
        pu = slice_cols(tu, 0, m) if m < tu.shape[1] else tu
        pi = slice_cols(ti, 0, m) if m < ti.shape[1] else ti
        term = match_loss(predict_match(pu, pi, head, cfg), y)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# autoencoder


def ae_loss(r, encoder, decoder):
    """Mean over the batch of ||r - dec(enc(r))||^2 / d_o."""
    t = r if isinstance(r, Tensor) else Tensor(r)
    recon = decoder(encoder(t))
    if recon.shape != t.shape:
        raise ValueError(f"ae_loss: reconstruction {recon.shape} != input {t.shape}")
    err = sub(t, recon)
    return mean_all(mul(err, err))
