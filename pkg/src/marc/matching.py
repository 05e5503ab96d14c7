"""User-item matching network and the end-to-end training loss.

All task supervision enters through this module: the backbone output is
only ever touched through the compression network g and the matching
network f, never by a loss directly. Ablation variants (no HSIC term, no
explicit interactions, no matching network, cosine objective) are config
flags on the same forward path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .compression import KernelConfig, hsic_loss
from .nets import Mlp
from .numcore import (
    Tensor,
    absolute,
    add,
    clamp,
    concat_cols,
    div,
    log,
    mean_all,
    mul,
    row_sum,
    scale,
    sigmoid,
    sqrt,
    sub,
    sum_all,
)

PROB_EPS = 1e-12


@dataclass
class MarcLossConfig:
    """Loss weights and ablation switches for one trained model."""

    alpha: float = 0.01
    use_hsic: bool = True
    use_explicit_interactions: bool = True
    use_matching_net: bool = True
    proxy_override: str = "none"  # "none" | "cosine"
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("MarcLossConfig: alpha must be >= 0")
        if self.proxy_override not in ("none", "cosine"):
            raise ValueError(f"MarcLossConfig: unknown proxy_override {self.proxy_override!r}")


class MatchingNet:
    """MLP over interaction features with hidden layout [128] and a scalar output.

    The sigmoid is applied by :func:`predict_match`; with all weights zero
    the prediction is exactly 0.5.
    """

    def __init__(self, input_dim, rng, hidden=(128,), name="match"):
        self.input_dim = int(input_dim)
        self.hidden = tuple(hidden)
        self.mlp = Mlp([input_dim, *hidden, 1], rng, name=name)

    def params(self):
        return self.mlp.params()

    def named_params(self):
        return self.mlp.named_params()


class Batch(NamedTuple):
    """One mini-batch of (user input row, item input row, binary label)."""

    user_inputs: np.ndarray
    item_inputs: np.ndarray
    labels: np.ndarray


def explicit_features(c_u, c_i):
    """Manual pair features in fixed order: [c_i, c_u, |c_i - c_u|, c_i * c_u]."""
    tu = c_u if isinstance(c_u, Tensor) else Tensor(c_u)
    ti = c_i if isinstance(c_i, Tensor) else Tensor(c_i)
    if tu.shape != ti.shape:
        raise ValueError(f"explicit_features: shapes differ, {tu.shape} vs {ti.shape}")
    return concat_cols([ti, tu, absolute(sub(ti, tu)), mul(ti, tu)])


def predict_match(c_u, c_i, net, cfg=None):
    """Match probability per row; without explicit interactions the input is
    just [c_i, c_u]."""
    cfg = cfg or MarcLossConfig()
    tu = c_u if isinstance(c_u, Tensor) else Tensor(c_u)
    ti = c_i if isinstance(c_i, Tensor) else Tensor(c_i)
    if cfg.use_explicit_interactions:
        feats = explicit_features(tu, ti)
    else:
        if tu.shape != ti.shape:
            raise ValueError(f"predict_match: shapes differ, {tu.shape} vs {ti.shape}")
        feats = concat_cols([ti, tu])
    if feats.shape[1] != net.input_dim:
        raise ValueError(
            f"predict_match: features have {feats.shape[1]} columns, net expects {net.input_dim}"
        )
    return sigmoid(net.mlp(feats))


def match_loss(y_hat, y):
    """Mean binary cross-entropy with the probabilities clamped away from 0/1."""
    p = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    yv = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if p.shape[0] != yv.shape[0] or p.shape[1] != 1:
        raise ValueError(f"match_loss: predictions {p.shape} vs labels {yv.shape}")
    if not np.isin(yv, (0.0, 1.0)).all():
        raise ValueError("match_loss: labels must be in {0, 1}")
    yt = Tensor(yv)
    p = clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    ll = add(mul(yt, log(p)), mul(1.0 - yt, log(1.0 - p)))
    return scale(mean_all(ll), -1.0)


def row_cosine(a, b):
    """Cosine similarity per row as an n x 1 tensor; zero-norm rows are an error."""
    ta = a if isinstance(a, Tensor) else Tensor(a)
    tb = b if isinstance(b, Tensor) else Tensor(b)
    if ta.shape != tb.shape:
        raise ValueError(f"row_cosine: shapes differ, {ta.shape} vs {tb.shape}")
    na = (ta.values * ta.values).sum(axis=1)
    nb = (tb.values * tb.values).sum(axis=1)
    if na.min() <= 0.0 or nb.min() <= 0.0:
        raise ValueError("row_cosine: zero-norm row")
    dot = row_sum(mul(ta, tb))
    return div(dot, mul(sqrt(row_sum(mul(ta, ta))), sqrt(row_sum(mul(tb, tb)))))


def cosine_target_loss(r_u, r_i, y):
    """Mean squared gap between row cosines and the +/-1 label targets."""
    yv = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if not np.isin(yv, (0.0, 1.0)).all():
        raise ValueError("cosine_target_loss: labels must be in {0, 1}")
    gap = sub(row_cosine(r_u, r_i), Tensor(2.0 * yv - 1.0))
    return mean_all(mul(gap, gap))


def _cosine_split_loss(c_u, c_i, y):
    # 1 - mean cosine over positives + mean cosine over negatives
    yv = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    cos = row_cosine(c_u, c_i)
    n_pos = max(1.0, float(yv.sum()))
    n_neg = max(1.0, float((1.0 - yv).sum()))
    pos_part = scale(sum_all(mul(cos, Tensor(yv))), 1.0 / n_pos)
    neg_part = scale(sum_all(mul(cos, Tensor(1.0 - yv))), 1.0 / n_neg)
    return add(sub(Tensor(1.0), pos_part), neg_part)


def task_and_constraint_loss(r_u, r_i, model, labels, cfg):
    """Total objective given original representations of a batch.

    Shared by end-to-end training and the per-layer proxy evaluation so
    both always use identical loss code.
    """
    if model.compressor is not None:
        c_u = model.compressor(r_u)
        c_i = model.compressor(r_i)
    else:
        c_u, c_i = r_u, r_i
    if cfg.proxy_override == "cosine":
        task = cosine_target_loss(c_u, c_i, labels)
    elif not cfg.use_matching_net:
        task = _cosine_split_loss(c_u, c_i, labels)
    else:
        task = match_loss(predict_match(c_u, c_i, model.matcher, cfg), labels)
    if cfg.use_hsic and cfg.alpha > 0:
        return add(task, scale(hsic_loss(r_u, c_u, r_i, c_i, cfg.kernel), cfg.alpha))
    return task


def total_loss(batch, model, cfg=None):
    """Matching loss plus alpha times the HSIC term for one batch.

    Runs backbone -> compress -> predict; supervision reaches the backbone
    only through g and f.
    """
    from .backbone import encode_all_layers

    cfg = cfg or model.loss_cfg
    r_u = encode_all_layers(Tensor(batch.user_inputs), model.encoder)[-1]
    r_i = encode_all_layers(Tensor(batch.item_inputs), model.encoder)[-1]
    return task_and_constraint_loss(r_u, r_i, model, batch.labels, cfg)
