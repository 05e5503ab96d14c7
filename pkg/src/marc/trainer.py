"""Training loops for every method and the trained-model container.

Methods:
  marc  backbone + compression net + matching net, end to end, with the
        HSIC information constraint (ablatable via flags)
  cs    backbone alone, cosine-similarity proxy on final-layer outputs
  cl    backbone alone, in-batch contrastive proxy on positive pairs
  mrl   backbone + plain compression net + nested per-prefix matching heads
  ae    frozen backbone, reconstruction autoencoder on its representations
  pca   frozen backbone, principal components of its representations
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .backbone import EncoderConfig, EncoderStack, IdentityEncoder, build_model_inputs, encode_all_layers
from .baselines import (
    DEFAULT_PREFIX_DIMS,
    NestedHeads,
    PcaModel,
    ae_loss,
    cl_proxy_loss,
    cs_proxy_loss,
    mrl_loss,
    pca_fit,
    pca_reconstruction_error,
    pca_transform,
)
from .compression import CompressionNet, KernelConfig
from .matching import Batch, MarcLossConfig, MatchingNet, task_and_constraint_loss, total_loss
from .nets import Mlp
from .numcore import Adam, Tape, Tensor, backward
from .rng import stream

log = logging.getLogger("marc")

METHODS = ("marc", "cs", "cl", "mrl", "ae", "pca")
DIM_SWEEP = (16, 32, 64, 128, 256, 512)


@dataclass
class RunConfig:
    """One training run: method, dims, loss knobs and optimization settings."""

    method: str = "marc"
    d_c: int = 128
    alpha: float = 0.01
    sigma_policy: str = "median"
    sigma: float = 1.0
    hidden_dim: int = 64  # representation width d_o
    num_layers: int = 6
    no_hsic: bool = False
    no_ei: bool = False
    no_mn: bool = False
    proxy: str = "none"  # "none" | "cosine"
    epochs: int = 8
    batch_size: int = 256
    lr: float = 1e-3
    train_sample: int = 20000
    cl_tau: float = 0.07
    mrl_prefixes: tuple = DEFAULT_PREFIX_DIMS
    num_experts: int = 3
    backbone: str = "trainable"  # "trainable" | "frozen"
    backbone_lr_taper: float = 1.0  # per-block lr decay toward the top, 1 = off
    seed: int = 0

    def validate(self):
        if self.method not in METHODS:
            raise ValueError(f"RunConfig: unknown method {self.method!r}, expected one of {METHODS}")
        if (self.no_hsic or self.no_ei or self.no_mn or self.proxy != "none") and self.method != "marc":
            raise ValueError("RunConfig: ablation flags are only valid for method='marc'")
        if self.proxy not in ("none", "cosine"):
            raise ValueError(f"RunConfig: unknown proxy {self.proxy!r}")
        if self.backbone not in ("trainable", "frozen"):
            raise ValueError(f"RunConfig: unknown backbone mode {self.backbone!r}")
        if min(self.d_c, self.hidden_dim, self.num_layers, self.batch_size, self.epochs) < 1:
            raise ValueError("RunConfig: dims and counts must be positive")
        if self.method in ("marc", "mrl", "ae", "pca") and self.d_c >= self.hidden_dim:
            raise ValueError(
                f"RunConfig: compressed dim d_c={self.d_c} must be < d_o={self.hidden_dim}"
            )
        if not 2 <= self.num_experts <= 5:
            raise ValueError("RunConfig: num_experts must be in [2, 5]")
        if not 0 < self.backbone_lr_taper <= 1:
            raise ValueError("RunConfig: backbone_lr_taper must be in (0, 1]")
        return self

    def loss_config(self):
        return MarcLossConfig(
            alpha=self.alpha,
            use_hsic=not self.no_hsic,
            use_explicit_interactions=not self.no_ei,
            use_matching_net=not self.no_mn,
            proxy_override=self.proxy,
            kernel=KernelConfig(sigma_policy=self.sigma_policy, sigma=self.sigma),
        )


@dataclass
class MarcModel:
    """Parameters of backbone plus per-method heads, with their hyperparameters."""

    method: str
    encoder: EncoderStack | IdentityEncoder
    loss_cfg: MarcLossConfig
    d_c: int | None = None
    compressor: CompressionNet | None = None
    matcher: MatchingNet | None = None
    heads: NestedHeads | None = None
    pca: PcaModel | None = None
    ae_encoder: Mlp | None = None
    ae_decoder: Mlp | None = None
    cl_tau: float = 0.07
    backbone_mode: str = "trainable"
    trained: bool = False
    train_log: dict = field(default_factory=dict)

    @property
    def d_o(self):
        return self.encoder.output_dim

    def trainable_params(self):
        out = [] if self.backbone_mode == "frozen" else list(self.encoder.params())
        for part in (self.compressor, self.matcher, self.heads, self.ae_encoder, self.ae_decoder):
            if part is not None:
                out.extend(part.params())
        return out

    def named_params(self):
        out = list(self.encoder.named_params())
        for part in (self.compressor, self.matcher, self.heads, self.ae_encoder, self.ae_decoder):
            if part is not None:
                out.extend(part.named_params())
        return out

    # ---- inference -------------------------------------------------------

    def layer_output_arrays(self, user_inputs, item_inputs, chunk=4096):
        """Per-layer representation tables for all users and all items."""
        def run(mat):
            outs = None
            for start in range(0, mat.shape[0], chunk):
                layers = encode_all_layers(Tensor(mat[start : start + chunk]), self.encoder)
                if outs is None:
                    outs = [[l.values] for l in layers]
                else:
                    for acc, l in zip(outs, layers):
                        acc.append(l.values)
            return [np.concatenate(acc, axis=0) for acc in outs]

        return run(np.asarray(user_inputs)), run(np.asarray(item_inputs))

    def compress_array(self, r):
        """Map original representations to the served compressed space."""
        r = np.asarray(r, dtype=np.float64)
        if self.method == "pca":
            return pca_transform(r, self.pca)
        if self.method == "ae":
            return self.ae_encoder(Tensor(r)).values
        if self.compressor is not None:
            return self.compressor(Tensor(r)).values
        raise ValueError(f"method {self.method!r} has no compressed representation")

    def reps(self, dataset, kind="compressed"):
        """(user, item) representation tables, compressed or original."""
        user_inputs, item_inputs = build_model_inputs(dataset)
        lu, li = self.layer_output_arrays(user_inputs, item_inputs)
        if kind == "original":
            return lu[-1], li[-1]
        if kind == "compressed":
            return self.compress_array(lu[-1]), self.compress_array(li[-1])
        raise ValueError(f"unknown representation kind {kind!r}")


def _lr_scales(model, taper):
    """Per-parameter lr multipliers: blocks closer to the output move less.

    Tapering the backbone toward the top is the desk-scale stand-in for
    constrained fine-tuning: task adaptation concentrates in early blocks
    while late layers keep their representation role. External modules
    always train at full rate.
    """
    scales = []
    if model.backbone_mode != "frozen":
        scales.append(1.0)  # input projection
        for l in range(model.encoder.num_layers):
            s = taper ** (l + 1)
            scales.extend((s, s))
    for part in (model.compressor, model.matcher, model.heads, model.ae_encoder, model.ae_decoder):
        if part is not None:
            scales.extend(1.0 for _ in part.params())
    return scales


def _train_records(dataset, cfg, positives_only=False):
    rows = np.flatnonzero(dataset.train_mask[dataset.users])
    if positives_only:
        rows = rows[dataset.labels[rows] == 1]
    if cfg.train_sample and rows.size > cfg.train_sample:
        rng = stream(cfg.seed, "sample")
        rows = rows[rng.choice(rows.size, cfg.train_sample, replace=False)]
    return rows


def train(dataset, cfg):
    """Train one method on the train split and return the frozen model."""
    cfg.validate()
    t0 = time.perf_counter()
    user_inputs, item_inputs = build_model_inputs(dataset)
    enc_cfg = EncoderConfig(
        input_dim=user_inputs.shape[1], hidden_dim=cfg.hidden_dim, num_layers=cfg.num_layers
    )
    encoder = EncoderStack(enc_cfg, stream(cfg.seed, "init", "encoder"))
    frozen = cfg.backbone == "frozen" or cfg.method in ("ae", "pca")

    model = MarcModel(
        method=cfg.method,
        encoder=encoder,
        loss_cfg=cfg.loss_config(),
        d_c=cfg.d_c if cfg.method in ("marc", "mrl", "ae", "pca") else None,
        cl_tau=cfg.cl_tau,
        backbone_mode="frozen" if frozen else "trainable",
    )
    d_o = encoder.output_dim
    if cfg.method == "marc":
        model.compressor = CompressionNet(d_o, cfg.d_c, stream(cfg.seed, "init", "compress"))
        in_mult = 4 if not cfg.no_ei else 2
        model.matcher = MatchingNet(in_mult * cfg.d_c, stream(cfg.seed, "init", "match"))
    elif cfg.method == "mrl":
        model.compressor = CompressionNet(d_o, cfg.d_c, stream(cfg.seed, "init", "compress"))
        dims = tuple(m for m in cfg.mrl_prefixes if m <= cfg.d_c) or (cfg.d_c,)
        model.heads = NestedHeads(dims, cfg.d_c, stream(cfg.seed, "init", "heads"))
    elif cfg.method == "ae":
        model.ae_encoder = Mlp([d_o, 256, 128, cfg.d_c], stream(cfg.seed, "init", "ae-enc"), name="ae_enc")
        model.ae_decoder = Mlp([cfg.d_c, 128, 256, d_o], stream(cfg.seed, "init", "ae-dec"), name="ae_dec")

    if cfg.method == "pca":
        lu, li = model.layer_output_arrays(user_inputs, item_inputs)
        model.pca = pca_fit(np.vstack([lu[-1], li[-1]]), cfg.d_c)
        model.trained = True
        model.train_log = {"method": cfg.method, "epoch_losses": [], "seconds": time.perf_counter() - t0}
        return model

    if cfg.method == "ae":
        lu, li = model.layer_output_arrays(user_inputs, item_inputs)
        rows = np.vstack([lu[-1], li[-1]])
        losses = _fit_rows(
            lambda b: ae_loss(Tensor(b), model.ae_encoder, model.ae_decoder),
            rows,
            model.trainable_params(),
            cfg,
        )
        model.trained = True
        model.train_log = {"method": cfg.method, "epoch_losses": losses, "seconds": time.perf_counter() - t0}
        return model

    rows = _train_records(dataset, cfg, positives_only=cfg.method == "cl")
    if rows.size < cfg.batch_size:
        log.info("train: only %d records available for batches of %d", rows.size, cfg.batch_size)
    u_all = dataset.users[rows]
    i_all = dataset.items[rows]
    y_all = dataset.labels[rows].astype(np.float64)

    opt = Adam(
        model.trainable_params(),
        lr=cfg.lr,
        lr_scales=_lr_scales(model, cfg.backbone_lr_taper),
    )
    losses = []
    for epoch in range(cfg.epochs):
        perm = stream(cfg.seed, "epoch", epoch).permutation(rows.size)
        total = 0.0
        count = 0
        for start in range(0, rows.size, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            if sel.size < 2:
                continue
            bu = user_inputs[u_all[sel]]
            bi = item_inputs[i_all[sel]]
            by = y_all[sel]
            with Tape():
                if cfg.method == "marc":
                    loss = total_loss(Batch(bu, bi, by), model)
                elif cfg.method == "cs":
                    r_u = encode_all_layers(Tensor(bu), encoder)[-1]
                    r_i = encode_all_layers(Tensor(bi), encoder)[-1]
                    loss = cs_proxy_loss(r_u, r_i, by)
                elif cfg.method == "cl":
                    r_u = encode_all_layers(Tensor(bu), encoder)[-1]
                    r_i = encode_all_layers(Tensor(bi), encoder)[-1]
                    loss = cl_proxy_loss(r_u, r_i, cfg.cl_tau)
                else:  # mrl
                    r_u = encode_all_layers(Tensor(bu), encoder)[-1]
                    r_i = encode_all_layers(Tensor(bi), encoder)[-1]
                    loss = mrl_loss(model.compressor(r_u), model.compressor(r_i), by, model.heads)
                backward(loss)
            opt.step()
            total += loss.item() * sel.size
            count += sel.size
        losses.append(total / max(1, count))
        log.info("train[%s] epoch %d loss %.6f", cfg.method, epoch, losses[-1])
    model.trained = True
    model.train_log = {"method": cfg.method, "epoch_losses": losses, "seconds": time.perf_counter() - t0}
    return model


def _fit_rows(loss_fn, rows, params, cfg):
    """Generic row-batch optimizer loop (autoencoder fitting)."""
    opt = Adam(params, lr=cfg.lr)
    losses = []
    for epoch in range(cfg.epochs):
        perm = stream(cfg.seed, "epoch", epoch).permutation(rows.shape[0])
        total = 0.0
        count = 0
        for start in range(0, rows.shape[0], cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            if sel.size < 2:
                continue
            with Tape():
                loss = loss_fn(rows[sel])
                backward(loss)
            opt.step()
            total += loss.item() * sel.size
            count += sel.size
        losses.append(total / max(1, count))
    return losses


def method_proxy_loss(model, layer_u, layer_i, labels):
    """The model's own training objective evaluated on given representations.

    Uses the identical loss code as training. Methods whose loss lives in
    the compressed space route the representations through their trained
    compressor first.
    """
    labels = np.asarray(labels, dtype=np.float64)
    tu, ti = Tensor(layer_u), Tensor(layer_i)
    if model.method == "marc":
        return task_and_constraint_loss(tu, ti, model, labels, model.loss_cfg).item()
    if model.method == "cs":
        return cs_proxy_loss(tu, ti, labels).item()
    if model.method == "cl":
        pos = labels == 1.0
        if pos.sum() < 2:
            raise ValueError("method_proxy_loss: contrastive proxy needs >= 2 positive rows")
        return cl_proxy_loss(Tensor(layer_u[pos]), Tensor(layer_i[pos]), model.cl_tau).item()
    if model.method == "mrl":
        return mrl_loss(model.compressor(tu), model.compressor(ti), labels, model.heads).item()
    if model.method == "ae":
        both = np.vstack([layer_u, layer_i])
        return ae_loss(Tensor(both), model.ae_encoder, model.ae_decoder).item()
    if model.method == "pca":
        return pca_reconstruction_error(np.vstack([layer_u, layer_i]), model.pca)
    raise ValueError(f"unknown method {model.method!r}")


# ---------------------------------------------------------------------------
# (de)serialization payloads, consumed by dataio.save_model / load_model


def model_payload(model):
    """(hyper dict, ordered name->array dict) describing a trained model."""
    enc = model.encoder
    hyper = {
        "method": model.method,
        "d_c": model.d_c,
        "cl_tau": model.cl_tau,
        "backbone_mode": model.backbone_mode,
        "trained": model.trained,
        "loss": {
            "alpha": model.loss_cfg.alpha,
            "use_hsic": model.loss_cfg.use_hsic,
            "use_explicit_interactions": model.loss_cfg.use_explicit_interactions,
            "use_matching_net": model.loss_cfg.use_matching_net,
            "proxy_override": model.loss_cfg.proxy_override,
            "sigma_policy": model.loss_cfg.kernel.sigma_policy,
            "sigma": model.loss_cfg.kernel.sigma,
        },
    }
    if isinstance(enc, IdentityEncoder):
        hyper["encoder"] = {"kind": "identity", "input_dim": enc.input_dim}
    else:
        hyper["encoder"] = {
            "kind": "stack",
            "input_dim": enc.cfg.input_dim,
            "hidden_dim": enc.cfg.hidden_dim,
            "num_layers": enc.cfg.num_layers,
        }
    if model.heads is not None:
        hyper["mrl_prefixes"] = list(model.heads.prefix_dims)
    tensors = {name: t.values for name, t in model.named_params()}
    if model.pca is not None:
        tensors["pca.mean"] = model.pca.mean
        tensors["pca.components"] = model.pca.components
        tensors["pca.eigenvalues"] = model.pca.eigenvalues.reshape(1, -1)
    return hyper, tensors


def model_from_payload(hyper, tensors):
    """Rebuild a MarcModel from a payload produced by :func:`model_payload`."""
    enc_info = hyper["encoder"]
    if enc_info["kind"] == "identity":
        encoder = IdentityEncoder(enc_info["input_dim"])
    else:
        enc_cfg = EncoderConfig(
            input_dim=enc_info["input_dim"],
            hidden_dim=enc_info["hidden_dim"],
            num_layers=enc_info["num_layers"],
        )
        encoder = EncoderStack(enc_cfg, stream(0, "rebuild"))
    loss = hyper["loss"]
    loss_cfg = MarcLossConfig(
        alpha=loss["alpha"],
        use_hsic=loss["use_hsic"],
        use_explicit_interactions=loss["use_explicit_interactions"],
        use_matching_net=loss["use_matching_net"],
        proxy_override=loss["proxy_override"],
        kernel=KernelConfig(sigma_policy=loss["sigma_policy"], sigma=loss["sigma"]),
    )
    model = MarcModel(
        method=hyper["method"],
        encoder=encoder,
        loss_cfg=loss_cfg,
        d_c=hyper["d_c"],
        cl_tau=hyper["cl_tau"],
        backbone_mode=hyper["backbone_mode"],
        trained=hyper["trained"],
    )
    d_o = encoder.output_dim
    d_c = model.d_c
    rng = stream(0, "rebuild")
    if model.method == "marc":
        model.compressor = CompressionNet(d_o, d_c, rng)
        in_mult = 4 if loss_cfg.use_explicit_interactions else 2
        model.matcher = MatchingNet(in_mult * d_c, rng)
    elif model.method == "mrl":
        model.compressor = CompressionNet(d_o, d_c, rng)
        model.heads = NestedHeads(tuple(hyper["mrl_prefixes"]), d_c, rng)
    elif model.method == "ae":
        model.ae_encoder = Mlp([d_o, 256, 128, d_c], rng, name="ae_enc")
        model.ae_decoder = Mlp([d_c, 128, 256, d_o], rng, name="ae_dec")
    elif model.method == "pca":
        model.pca = PcaModel(
            mean=tensors.pop("pca.mean"),
            components=tensors.pop("pca.components"),
            eigenvalues=tensors.pop("pca.eigenvalues").ravel(),
        )
    for name, t in model.named_params():
        if name not in tensors:
            raise ValueError(f"model payload is missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != t.values.shape:
            raise ValueError(
                f"model payload tensor {name!r} has shape {arr.shape}, expected {t.values.shape}"
            )
        t.values = np.ascontiguousarray(arr, dtype=np.float64)
    return model
