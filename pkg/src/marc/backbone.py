"""Representation backbone: a residual feed-forward stack over feature vectors.

Users and items share one encoder. Both sides are presented in a common
input layout ``[entity features | context]``: the user context block is the
mean of the user's history item vectors, the item context block is zeros.
Every layer's output is exposed for layer probing; layer 0 is the input
projection and layer l adds one residual block on top of layer l-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import xavier
from .numcore import Tensor, add, matmul, relu


@dataclass
class EncoderConfig:
    input_dim: int
    hidden_dim: int = 64
    num_layers: int = 6
    output_dim: int | None = None  # representation width d_o; equals hidden_dim
    block_scale: float = 0.1  # damping on each block's second weight at init

    def __post_init__(self):
        if self.output_dim is None:
            self.output_dim = self.hidden_dim
        if self.num_layers < 1:
            raise ValueError("EncoderConfig: num_layers must be >= 1")
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError("EncoderConfig: all dims must be >= 1")
        if self.output_dim != self.hidden_dim:
            raise ValueError(
                "EncoderConfig: output_dim must equal hidden_dim; the residual "
                "trunk preserves width"
            )


class EncoderStack:
    """Input projection plus ``num_layers`` residual two-layer blocks."""

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        d = cfg.hidden_dim
        self.proj = Tensor(xavier(rng, cfg.input_dim, d), requires_grad=True, name="encoder.proj")
        self.blocks = []
        for l in range(cfg.num_layers):
            w1 = Tensor(xavier(rng, d, d), requires_grad=True, name=f"encoder.block{l}.w1")
            # damped second weight keeps every layer's output near the input
            # at init while leaving all gradients nonzero
            w2 = Tensor(
                cfg.block_scale * xavier(rng, d, d),
                requires_grad=True,
                name=f"encoder.block{l}.w2",
            )
            self.blocks.append((w1, w2))

    @property
    def num_layers(self):
        return self.cfg.num_layers

    @property
    def output_dim(self):
        return self.cfg.output_dim

    def params(self):
        out = [self.proj]
        for w1, w2 in self.blocks:
            out.extend((w1, w2))
        return out

    def named_params(self):
        out = [("encoder.proj", self.proj)]
        for l, (w1, w2) in enumerate(self.blocks):
            out.append((f"encoder.block{l}.w1", w1))
            out.append((f"encoder.block{l}.w2", w2))
        return out


class IdentityEncoder:
    """Frozen pass-through for ingested, externally produced representations."""

    def __init__(self, input_dim):
        self.cfg = None
        self.input_dim = int(input_dim)

    @property
    def num_layers(self):
        return 0

    @property
    def output_dim(self):
        return self.input_dim

    def params(self):
        return []

    def named_params(self):
        return []


def encode_all_layers(x, enc):
    """All layer outputs for a batch, layer 0 (projection) through layer L.

    ``x`` rows must have ``enc.cfg.input_dim`` columns. With all block
    weights zero every layer equals the input projection (residual
    identity).
    """
    if isinstance(enc, IdentityEncoder):
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.shape[1] != enc.input_dim:
            raise ValueError(
                f"encode_all_layers: input has {t.shape[1]} columns, encoder expects {enc.input_dim}"
            )
        return [t]
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.shape[1] != enc.cfg.input_dim:
        raise ValueError(
            f"encode_all_layers: input has {t.shape[1]} columns, encoder expects {enc.cfg.input_dim}"
        )
    h = matmul(t, enc.proj)
    outs = [h]
    for w1, w2 in enc.blocks:
        h = add(h, matmul(relu(matmul(h, w1)), w2))
        outs.append(h)
    return outs


def pool_user_input(user_features, history_item_vectors, item_dim):
    """Concatenate user features with the mean of history item vectors.

    An empty history contributes a zero vector of ``item_dim``.
    """
    uf = np.asarray(user_features, dtype=np.float64).ravel()
    if len(history_item_vectors) == 0:
        hist = np.zeros(item_dim)
    else:
        vecs = [np.asarray(v, dtype=np.float64).ravel() for v in history_item_vectors]
        dims = {v.shape[0] for v in vecs}
        if len(dims) != 1:
            raise ValueError(f"pool_user_input: inconsistent history dims {sorted(dims)}")
        if vecs[0].shape[0] != item_dim:
            raise ValueError(
                f"pool_user_input: history dim {vecs[0].shape[0]} != item_dim {item_dim}"
            )
        hist = np.mean(vecs, axis=0)
    return np.concatenate([uf, hist])


def build_model_inputs(dataset):
    """Per-user and per-item encoder input matrices for a dataset.

    User rows are ``[user features | mean history item vector]``; item rows
    are ``[item features | zeros]`` so both sides share one input space.
    """
    uf = dataset.user_features
    itf = dataset.item_features
    item_dim = itf.shape[1]
    n_users = uf.shape[0]
    hist_mean = np.zeros((n_users, item_dim))
    for u in range(n_users):
        h = dataset.histories[u]
        if h:
            hist_mean[u] = itf[h].mean(axis=0)
    user_inputs = np.concatenate([uf, hist_mean], axis=1)
    item_inputs = np.concatenate(
        [itf, np.zeros((itf.shape[0], user_inputs.shape[1] - item_dim))], axis=1
    )
    return user_inputs, item_inputs
