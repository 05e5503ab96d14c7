"""Synthetic data generation, user-disjoint splitting, and file round-trips.

File formats:
  embeddings  magic "MARCEMB1", u32 version, u64 count, u32 dim, then
              count x dim float32 LE row-major; optional sidecar "<path>.ids"
              with one identifier per row
  model       magic "MARCMDL1", u32 version, u64 header length, JSON header
              (hyperparameters + tensor manifest), then raw float64 LE
              payloads at the manifest offsets
  dataset dir interactions.csv (user_id,item_id,label[,timestamp]),
              users.emb / items.emb (+ .ids), split.json, meta.json
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import trainer
from .rng import stream

EMB_MAGIC = b"MARCEMB1"
MODEL_MAGIC = b"MARCMDL1"
EMB_VERSION = 1
MODEL_VERSION = 1


@dataclass
class SyntheticConfig:
    num_users: int = 2000
    num_items: int = 1000
    num_interactions: int = 50000
    latent_dim: int = 8
    observable_dim: int = 64
    temperature: float = 1.0
    history_cap: int = 30
    seed: int = 0
    train_frac: float = 0.9

    def __post_init__(self):
        if min(self.num_users, self.num_items, self.num_interactions) < 1:
            raise ValueError("SyntheticConfig: counts must be positive")
        if self.observable_dim < self.latent_dim:
            raise ValueError("SyntheticConfig: observable_dim must be >= latent_dim")
        if not self.temperature > 0:
            raise ValueError("SyntheticConfig: temperature must be > 0")


@dataclass
class InteractionDataset:
    """Feature tables plus labeled (user, item, label) records and a user split."""

    user_features: np.ndarray  # (U, d_f)
    item_features: np.ndarray  # (I, d)
    users: np.ndarray  # record user ids
    items: np.ndarray  # record item ids
    labels: np.ndarray  # record labels in {0, 1}
    histories: list  # per user: positive item ids, capped
    train_mask: np.ndarray  # (U,) bool, True = train user
    meta: dict = field(default_factory=dict)
    latents: tuple | None = None  # (z_u, z_i) for synthetic data only

    @property
    def num_users(self):
        return self.user_features.shape[0]

    @property
    def num_items(self):
        return self.item_features.shape[0]


def split_by_user(num_users, seed, train_frac=0.9):
    """User-disjoint split mask; train share within one user of exact."""
    if num_users < 10:
        raise ValueError(f"split_by_user: needs at least 10 users, got {num_users}")
    order = stream(seed, "split").permutation(num_users)
    n_train = int(round(num_users * train_frac))
    mask = np.zeros(num_users, dtype=bool)
    mask[order[:n_train]] = True
    return mask


def _expand(z, out_dim, rng):
    # fixed random nonlinear expansion: project, tanh, project again
    k = z.shape[1]
    h = max(16, 2 * k)
    p1 = rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, h))
    p2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, out_dim))
    return np.tanh(z @ p1) @ p2


def gen_synthetic(cfg):
    """Synthetic interaction data with planted low-rank preference structure.

    Latents z ~ N(0, I_k) per user/item; observables are a fixed random
    nonlinear expansion of the latents; labels are Bernoulli with
    P(y=1) = sigmoid(z_u . z_i / temperature); histories are each user's
    positive items in record order, capped. Deterministic given the seed.
    """
    if cfg.num_interactions > cfg.num_users * cfg.num_items:
        raise ValueError(
            f"gen_synthetic: {cfg.num_interactions} interactions exceed "
            f"{cfg.num_users} x {cfg.num_items} possible pairs"
        )
    z_u = stream(cfg.seed, "latents").normal(size=(cfg.num_users, cfg.latent_dim))
    z_i = stream(cfg.seed, "latents", "items").normal(size=(cfg.num_items, cfg.latent_dim))
    user_features = _expand(z_u, cfg.observable_dim, stream(cfg.seed, "expand-user"))
    item_features = _expand(z_i, cfg.observable_dim, stream(cfg.seed, "expand-item"))

    flat = stream(cfg.seed, "pairs").choice(
        cfg.num_users * cfg.num_items, size=cfg.num_interactions, replace=False
    )
    users = (flat // cfg.num_items).astype(np.int64)
    items = (flat % cfg.num_items).astype(np.int64)
    logits = (z_u[users] * z_i[items]).sum(axis=1) / cfg.temperature
    p = 1.0 / (1.0 + np.exp(-logits))
    labels = (stream(cfg.seed, "labels").random(cfg.num_interactions) < p).astype(np.int64)

    histories = [[] for _ in range(cfg.num_users)]
    for u, i, y in zip(users, items, labels):
        if y == 1 and len(histories[u]) < cfg.history_cap:
            histories[u].append(int(i))

    mask = split_by_user(cfg.num_users, cfg.seed, cfg.train_frac)
    meta = {
        "num_users": cfg.num_users,
        "num_items": cfg.num_items,
        "num_interactions": cfg.num_interactions,
        "latent_dim": cfg.latent_dim,
        "observable_dim": cfg.observable_dim,
        "temperature": cfg.temperature,
        "history_cap": cfg.history_cap,
        "seed": cfg.seed,
        "train_frac": cfg.train_frac,
    }
    return InteractionDataset(
        user_features=user_features,
        item_features=item_features,
        users=users,
        items=items,
        labels=labels,
        histories=histories,
        train_mask=mask,
        meta=meta,
        latents=(z_u, z_i),
    )


# ---------------------------------------------------------------------------
# embedding files


def save_embeddings(table, path, ids=None):
    """Write a float32 embedding table; optional sidecar id file."""
    table = np.ascontiguousarray(np.asarray(table), dtype=np.float32)
    if table.ndim != 2:
        raise ValueError(f"save_embeddings: table must be 2-D, got shape {table.shape}")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<I", EMB_VERSION))
        f.write(struct.pack("<Q", table.shape[0]))
        f.write(struct.pack("<I", table.shape[1]))
        f.write(table.tobytes(order="C"))
    if ids is not None:
        if len(ids) != table.shape[0]:
            raise ValueError(
                f"save_embeddings: {len(ids)} ids for {table.shape[0]} rows"
            )
        Path(str(path) + ".ids").write_text("".join(f"{i}\n" for i in ids))


def load_embeddings(path):
    """Read a float32 embedding table; bit-identical round trip with save."""
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise ValueError(f"load_embeddings: truncated header in {path}")
    if raw[:8] != EMB_MAGIC:
        raise ValueError(f"load_embeddings: bad magic in {path}")
    version = struct.unpack_from("<I", raw, 8)[0]
    if version != EMB_VERSION:
        raise ValueError(f"load_embeddings: unsupported version {version} in {path}")
    count = struct.unpack_from("<Q", raw, 12)[0]
    dim = struct.unpack_from("<I", raw, 20)[0]
    expected = count * dim * 4
    payload = raw[24:]
    if len(payload) < expected:
        raise ValueError(f"load_embeddings: truncated payload in {path}")
    if len(payload) > expected:
        raise ValueError(f"load_embeddings: count/dim mismatch with payload size in {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).copy()


def load_embedding_ids(path):
    """Row identifiers from the sidecar file of an embedding table."""
    ids_path = Path(str(path) + ".ids")
    if not ids_path.exists():
        raise FileNotFoundError(f"load_embedding_ids: no sidecar {ids_path}")
    return ids_path.read_text().splitlines()


# ---------------------------------------------------------------------------
# model files


def save_model(model, path):
    """Serialize a trained model; parameters round-trip exactly (float64)."""
    hyper, tensors = trainer.model_payload(model)
    manifest = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        blob = arr.tobytes(order="C")
        manifest.append(
            {"name": name, "rows": arr.shape[0], "cols": arr.shape[1], "dtype": "f8", "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"hyper": hyper, "tensors": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", MODEL_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_model(path):
    """Load a model file written by :func:`save_model`."""
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise ValueError(f"load_model: truncated header in {path}")
    if raw[:8] != MODEL_MAGIC:
        raise ValueError(f"load_model: bad magic in {path}")
    version = struct.unpack_from("<I", raw, 8)[0]
    if version != MODEL_VERSION:
        raise ValueError(f"load_model: unsupported model version {version} in {path}")
    header_len = struct.unpack_from("<Q", raw, 12)[0]
    header = json.loads(raw[20 : 20 + header_len].decode("utf-8"))
    payload = raw[20 + header_len :]
    tensors = {}
    for entry in header["tensors"]:
        n = entry["rows"] * entry["cols"] * 8
        start = entry["offset"]
        if start + n > len(payload):
            raise ValueError(f"load_model: truncated payload for tensor {entry['name']!r}")
        tensors[entry["name"]] = (
            np.frombuffer(payload[start : start + n], dtype="<f8")
            .reshape(entry["rows"], entry["cols"])
            .copy()
        )
    return trainer.model_from_payload(header["hyper"], tensors)


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(dataset, out_dir):
    """Write a dataset directory (feature tables, records, split, meta)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(dataset.user_features, out / "users.emb", ids=range(dataset.num_users))
    save_embeddings(dataset.item_features, out / "items.emb", ids=range(dataset.num_items))
    with open(out / "interactions.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["user_id", "item_id", "label"])
        for u, i, y in zip(dataset.users, dataset.items, dataset.labels):
            w.writerow([int(u), int(i), int(y)])
    split = {
        "train_users": [int(u) for u in np.flatnonzero(dataset.train_mask)],
        "test_users": [int(u) for u in np.flatnonzero(~dataset.train_mask)],
    }
    (out / "split.json").write_text(json.dumps(split, sort_keys=True))
    (out / "meta.json").write_text(json.dumps(dataset.meta, sort_keys=True, indent=2))


def load_dataset(data_dir):
    """Load a dataset directory written by :func:`save_dataset`.

    Histories are rebuilt from the record table: each user's positive items
    in record order (or timestamp order when a timestamp column exists),
    capped at the meta history cap.
    """
    d = Path(data_dir)
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    user_features = load_embeddings(d / "users.emb").astype(np.float64)
    item_features = load_embeddings(d / "items.emb").astype(np.float64)
    users, items, labels, stamps = [], [], [], []
    with open(d / "interactions.csv", newline="") as f:
        reader = csv.DictReader(f)
        has_ts = reader.fieldnames is not None and "timestamp" in reader.fieldnames
        for row in reader:
            users.append(int(row["user_id"]))
            items.append(int(row["item_id"]))
            y = int(row["label"])
            if y not in (0, 1):
                raise ValueError(f"load_dataset: label {y} not in {{0, 1}}")
            labels.append(y)
            if has_ts:
                stamps.append(float(row["timestamp"]))
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    order = np.argsort(np.asarray(stamps), kind="stable") if stamps else np.arange(users.size)

    cap = int(meta.get("history_cap", 30))
    histories = [[] for _ in range(user_features.shape[0])]
    for r in order:
        u, i, y = int(users[r]), int(items[r]), int(labels[r])
        if y == 1 and len(histories[u]) < cap:
            histories[u].append(i)

    split = json.loads((d / "split.json").read_text())
    mask = np.zeros(user_features.shape[0], dtype=bool)
    mask[np.asarray(split["train_users"], dtype=np.int64)] = True
    return InteractionDataset(
        user_features=user_features,
        item_features=item_features,
        users=users,
        items=items,
        labels=labels,
        histories=histories,
        train_mask=mask,
        meta=meta,
    )
