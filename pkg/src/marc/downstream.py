"""Downstream consumers of frozen representations and evaluation metrics.

The CTR probe is a DCN-lite: id embeddings, one mixture-of-experts adapter
per representation input, a single cross layer and a sigmoid MLP head.
Representations enter as constants, so nothing ever trains through them.
Metric evaluators (AUC, logloss, NDCG/MAP/HitRate/MRR) and storage-cost
accounting live here too.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .matching import match_loss
from .nets import Mlp, xavier
from .numcore import (
    Adam,
    Tape,
    Tensor,
    add,
    backward,
    concat_cols,
    matmul,
    mul,
    sigmoid,
    slice_cols,
    softmax_rows,
    take_rows,
)
from .rng import stream


@dataclass
class CtrProbeConfig:
    num_experts: int = 3  # valid range 2..5
    id_dim: int = 32
    expert_hidden: tuple = (128, 32)
    out_hidden: tuple = (200, 80)
    lr: float = 3e-3
    batch_size: int = 1024
    max_epochs: int = 30
    min_delta: float = 1e-4
    patience: int = 3
    max_rows: int | None = None  # subsample of training rows, None = all
    use_reps: bool = True  # False = id-only baseline, no representation inputs
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_experts <= 5:
            raise ValueError(f"CtrProbeConfig: num_experts must be in [2, 5], got {self.num_experts}")


class MoeAdapter:
    """Softmax-gated mixture of expert MLPs over one representation input."""

    def __init__(self, input_dim, cfg, rng, name):
        h1, h2 = cfg.expert_hidden
        self.experts = [
            Mlp([input_dim, h1, h2], rng, name=f"{name}.expert{e}") for e in range(cfg.num_experts)
        ]
        self.gate_w = Tensor(
            xavier(rng, input_dim, cfg.num_experts), requires_grad=True, name=f"{name}.gate_w"
        )
        self.gate_b = Tensor(
            np.zeros((1, cfg.num_experts)), requires_grad=True, name=f"{name}.gate_b"
        )

    def __call__(self, x):
        gate = softmax_rows(add(matmul(x, self.gate_w), self.gate_b))
        out = None
        for e, expert in enumerate(self.experts):
            term = mul(slice_cols(gate, e, e + 1), expert(x))
            out = term if out is None else add(out, term)
        return out

    def gate_values(self, x):
        return softmax_rows(add(matmul(x, self.gate_w), self.gate_b)).values

    def params(self):
        out = [self.gate_w, self.gate_b]
        for e in self.experts:
            out.extend(e.params())
        return out


class CtrProbe:
    """DCN-lite CTR model over id embeddings plus frozen representations."""

    def __init__(self, num_users, num_items, rep_dim, cfg, rng):
        self.cfg = cfg
        d = cfg.id_dim
        # zero-init id tables: unseen (test) users contribute nothing
        self.user_emb = Tensor(np.zeros((num_users, d)), requires_grad=True, name="probe.user_emb")
        self.item_emb = Tensor(np.zeros((num_items, d)), requires_grad=True, name="probe.item_emb")
        if cfg.use_reps:
            self.moe_user = MoeAdapter(rep_dim, cfg, rng, "probe.moe_user")
            self.moe_item = MoeAdapter(rep_dim, cfg, rng, "probe.moe_item")
            width = 2 * d + 2 * cfg.expert_hidden[-1]
        else:
            self.moe_user = self.moe_item = None
            width = 2 * d
        self.cross_w = Tensor(xavier(rng, width, width), requires_grad=True, name="probe.cross_w")
        # small random cross bias: keeps the first activations alive even
        # when every input block starts at zero
        self.cross_b = Tensor(
            0.01 * rng.standard_normal((1, width)), requires_grad=True, name="probe.cross_b"
        )
        self.out = Mlp([width, *cfg.out_hidden, 1], rng, name="probe.out")
        self.train_log = None

    def forward(self, u_idx, i_idx, user_reps, item_reps):
        """Match probabilities for (user, item) index pairs.

        ``user_reps``/``item_reps`` are plain arrays; they are wrapped as
        constants so no gradient can reach them.
        """
        ue = take_rows(self.user_emb, u_idx)
        ie = take_rows(self.item_emb, i_idx)
        blocks = [ue, ie]
        if self.cfg.use_reps:
            blocks.append(self.moe_user(Tensor(user_reps[u_idx])))
            blocks.append(self.moe_item(Tensor(item_reps[i_idx])))
        x0 = concat_cols(blocks)
        x1 = add(add(mul(x0, matmul(x0, self.cross_w)), self.cross_b), x0)
        return sigmoid(self.out(x1))

    def params(self):
        out = [self.user_emb, self.item_emb, self.cross_w, self.cross_b]
        if self.cfg.use_reps:
            out.extend(self.moe_user.params())
            out.extend(self.moe_item.params())
        out.extend(self.out.params())
        return out


def standardize_columns(a):
    """Column-standardized copy (zero mean, unit std; constant columns to zero)."""
    a = np.asarray(a, dtype=np.float64)
    mu = a.mean(axis=0, keepdims=True)
    sd = a.std(axis=0, keepdims=True)
    sd[sd < 1e-12] = 1.0
    return (a - mu) / sd


def train_ctr_probe(dataset, reps, cfg=None):
    """Train a CTR probe on the train split with frozen representations.

    ``reps`` is a (user_reps, item_reps) pair indexed by user/item id. The
    tables are column-standardized internally so layers of different scale
    are probed on equal footing. Stops when the train loss has not improved
    by more than ``min_delta`` for ``patience`` epochs, or at ``max_epochs``.
    """
    cfg = cfg or CtrProbeConfig()
    n_users = dataset.user_features.shape[0]
    n_items = dataset.item_features.shape[0]
    labels = np.asarray(dataset.labels)
    if labels.min() == labels.max():
        raise ValueError("train_ctr_probe: labels are single-class, AUC is undefined")

    if cfg.use_reps:
        user_reps, item_reps = reps
        user_reps = np.asarray(user_reps, dtype=np.float64)
        item_reps = np.asarray(item_reps, dtype=np.float64)
        missing = []
        if user_reps.shape[0] < n_users:
            missing.append(f"users {user_reps.shape[0]}..{n_users - 1}")
        if item_reps.shape[0] < n_items:
            missing.append(f"items {item_reps.shape[0]}..{n_items - 1}")
        if missing:
            raise ValueError(f"train_ctr_probe: missing representation rows for {'; '.join(missing)}")
        user_reps = standardize_columns(user_reps)
        item_reps = standardize_columns(item_reps)
        if user_reps.shape[1] != item_reps.shape[1]:
            raise ValueError(
                f"train_ctr_probe: user and item rep dims differ, "
                f"{user_reps.shape[1]} vs {item_reps.shape[1]}"
            )
    else:
        user_reps = np.zeros((n_users, 1))
        item_reps = np.zeros((n_items, 1))

    train_rows = np.flatnonzero(dataset.train_mask[dataset.users])
    rng = stream(cfg.seed, "probe-train")
    if cfg.max_rows is not None and train_rows.size > cfg.max_rows:
        train_rows = train_rows[rng.choice(train_rows.size, cfg.max_rows, replace=False)]
    u = dataset.users[train_rows]
    it = dataset.items[train_rows]
    y = labels[train_rows].astype(np.float64)

    probe = CtrProbe(n_users, n_items, user_reps.shape[1] if cfg.use_reps else 0, cfg, rng)
    opt = Adam(probe.params(), lr=cfg.lr)
    epoch_losses = []
    best = np.inf
    stale = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(u.size)
        total = 0.0
        count = 0
        for start in range(0, u.size, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            if sel.size < 2:
                continue
            with Tape():
                p = probe.forward(u[sel], it[sel], user_reps, item_reps)
                loss = match_loss(p, y[sel])
                backward(loss)
            opt.step()
            total += loss.item() * sel.size
            count += sel.size
        mean_loss = total / max(1, count)
        epoch_losses.append(mean_loss)
        if best - mean_loss > cfg.min_delta:
            best = mean_loss
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    probe.train_log = {
        "epoch_losses": epoch_losses,
        "epochs_run": len(epoch_losses),
        "seconds": time.perf_counter() - t0,
    }
    probe._reps = (user_reps, item_reps)
    return probe


def score_records(probe, u, it, user_reps, item_reps, chunk=8192):
    """Probe scores for record index arrays, no tape."""
    out = np.empty(u.shape[0])
    for start in range(0, u.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = probe.forward(u[sl], it[sl], user_reps, item_reps).values.ravel()
    return out


def eval_ctr_probe(probe, dataset, split="test"):
    """AUC and logloss of a trained probe on the requested user split."""
    user_reps, item_reps = probe._reps
    mask = dataset.train_mask if split == "train" else ~dataset.train_mask
    rows = np.flatnonzero(mask[dataset.users])
    scores = score_records(probe, dataset.users[rows], dataset.items[rows], user_reps, item_reps)
    labels = dataset.labels[rows]
    return auc(scores, labels), logloss(scores, labels)


# ---------------------------------------------------------------------------
# metrics


def auc(scores, labels):
    """Probability a random positive outscores a random negative, ties at 1/2.

    Rank-based; agrees exactly with brute-force pairwise counting.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc: needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(labels.size)
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    pos_rank_sum = ranks[pos].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def logloss(scores, labels):
    """Per-example mean binary cross-entropy with clamped probabilities."""
    p = np.clip(np.asarray(scores, dtype=np.float64).ravel(), 1e-12, 1.0 - 1e-12)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("logloss: labels must be in {0, 1}")
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


def rank_metrics(ranked_lists, ks):
    """NDCG@K, MAP@K, HitRate@K and MRR for binary-relevance ranked lists.

    Each list holds 0/1 relevance in ranked order. NDCG uses log2 discounts
    with ideal-DCG normalization; metrics are averaged over lists. Every
    list must contain at least one relevant item and be at least max(K)
    long.
    """
    ks = sorted(int(k) for k in ks)
    lists = [np.asarray(l).ravel() for l in ranked_lists]
    if not lists:
        raise ValueError("rank_metrics: no lists")
    for l in lists:
        if ks and ks[-1] > l.size:
            raise ValueError(f"rank_metrics: K={ks[-1]} exceeds list length {l.size}")
        if l.sum() == 0:
            raise ValueError("rank_metrics: a list has no relevant item (MAP/MRR undefined)")
    ndcg = {k: 0.0 for k in ks}
    mapk = {k: 0.0 for k in ks}
    hit = {k: 0.0 for k in ks}
    mrr = 0.0
    for rel in lists:
        first = int(np.flatnonzero(rel)[0])
        mrr += 1.0 / (first + 1)
        total_rel = int(rel.sum())
        for k in ks:
            top = rel[:k]
            disc = 1.0 / np.log2(np.arange(2, k + 2))
            dcg = float((top * disc).sum())
            ideal_hits = min(total_rel, k)
            idcg = float(disc[:ideal_hits].sum())
            ndcg[k] += dcg / idcg
            hits = np.flatnonzero(top)
            precisions = [(i + 1.0) / (r + 1.0) for i, r in enumerate(hits)]
            mapk[k] += sum(precisions) / min(total_rel, k)
            hit[k] += 1.0 if hits.size else 0.0
    n = len(lists)
    return {
        "ndcg": {k: v / n for k, v in ndcg.items()},
        "map": {k: v / n for k, v in mapk.items()},
        "hitrate": {k: v / n for k, v in hit.items()},
        "mrr": mrr / n,
    }


def storage_report(num_users, num_items, dims):
    """Float32 serving-table sizes per dimension, with ratios vs the smallest."""
    if num_users <= 0 or num_items <= 0:
        raise ValueError("storage_report: counts must be positive")
    dims = [int(d) for d in dims]
    entities = num_users + num_items
    sizes = {d: entities * d * 4 for d in dims}
    base = min(dims)
    return {
        "num_users": num_users,
        "num_items": num_items,
        "bytes_per_dim": {str(d): sizes[d] for d in dims},
        "ratio_vs_smallest": {str(d): sizes[d] / sizes[base] for d in dims},
    }
