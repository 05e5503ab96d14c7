"""Layer-probe harness: charts representation quality against encoder depth.

For a trained model, every backbone layer's user/item representations are
frozen and handed to a fresh CTR probe (one fixed derived seed shared by
all layers, so the curves differ only through the representations), and
the method's own proxy objective is evaluated on the same layer outputs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .backbone import build_model_inputs
from .downstream import CtrProbeConfig, eval_ctr_probe, train_ctr_probe
from .rng import derive_key, stream
from .trainer import method_proxy_loss

SCHEMA_VERSION = 1


@dataclass
class ProbeConfig:
    """Layer-sweep settings: downstream probe knobs plus proxy evaluation."""

    probe: CtrProbeConfig = field(default_factory=CtrProbeConfig)
    proxy_rows: int = 2048
    probe_repeats: int = 1  # probes per layer (fixed derived seeds), AUC averaged
    jobs: int = 1
    seed: int = 0


@dataclass
class LayerEntry:
    layer: int
    auc: float
    logloss: float
    proxy_loss: float


@dataclass
class LayerProbeReport:
    """Per-layer downstream metrics and proxy losses for one trained model."""

    method: str
    d_c: int | None
    seed: int
    entries: list
    mra_peak_layer: int
    final_layer_gap: float

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "layer_probe",
            "method": self.method,
            "d_c": self.d_c,
            "seed": self.seed,
            "entries": [asdict(e) for e in self.entries],
            "mra_peak_layer": self.mra_peak_layer,
            "final_layer_gap": self.final_layer_gap,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"LayerProbeReport: unsupported schema_version {d.get('schema_version')}")
        return cls(
            method=d["method"],
            d_c=d["d_c"],
            seed=d["seed"],
            entries=[LayerEntry(**e) for e in d["entries"]],
            mra_peak_layer=d["mra_peak_layer"],
            final_layer_gap=d["final_layer_gap"],
        )

    def csv_rows(self):
        """(layer, auc, logloss, proxy_loss) rows for plotting."""
        return [(e.layer, e.auc, e.logloss, e.proxy_loss) for e in self.entries]


def peak_layer(aucs):
    """Argmax layer index, ties broken toward the deepest layer."""
    aucs = np.asarray(aucs)
    return int(aucs.size - 1 - np.argmax(aucs[::-1]))


def layer_sweep(model, dataset, cfg=None):
    """Train one CTR probe per backbone layer and report the layer curve."""
    cfg = cfg or ProbeConfig()
    if not model.trained:
        raise ValueError("layer_sweep: model has not been trained")
    user_inputs, item_inputs = build_model_inputs(dataset)
    layers_u, layers_i = model.layer_output_arrays(user_inputs, item_inputs)

    train_rows = np.flatnonzero(dataset.train_mask[dataset.users])
    rng = stream(cfg.seed, "proxy-batch")
    take = min(cfg.proxy_rows, train_rows.size)
    proxy_rows = train_rows[rng.choice(train_rows.size, take, replace=False)]
    pu, pi, py = dataset.users[proxy_rows], dataset.items[proxy_rows], dataset.labels[proxy_rows]

    # one fixed probe seed per repeat, shared by every layer, so the layer
    # curves differ only through the representations
    repeat_seeds = [derive_key(cfg.seed, "layer-probe", r) for r in range(cfg.probe_repeats)]

    def run_layer(l):
        aucs, lls = [], []
        for s in repeat_seeds:
            probe = train_ctr_probe(dataset, (layers_u[l], layers_i[l]), replace(cfg.probe, seed=s))
            test_auc, test_logloss = eval_ctr_probe(probe, dataset, split="test")
            aucs.append(test_auc)
            lls.append(test_logloss)
        proxy = method_proxy_loss(model, layers_u[l][pu], layers_i[l][pi], py)
        return LayerEntry(
            layer=l, auc=float(np.mean(aucs)), logloss=float(np.mean(lls)), proxy_loss=proxy
        )

    n_layers = len(layers_u)
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            entries = list(pool.map(run_layer, range(n_layers)))
    else:
        entries = [run_layer(l) for l in range(n_layers)]

    aucs = [e.auc for e in entries]
    return LayerProbeReport(
        method=model.method,
        d_c=model.d_c,
        seed=cfg.seed,
        entries=entries,
        mra_peak_layer=peak_layer(aucs),
        final_layer_gap=float(aucs[-1] - max(aucs[:-1])) if n_layers > 1 else 0.0,
    )


def mra_summary(reports):
    """Per-method comparison rows aggregated over seeds.

    One row per method: modal peak layer, median final gap, median
    best-layer and final-layer AUC.
    """
    if not reports:
        raise ValueError("mra_summary: no reports")
    by_method = {}
    for r in reports:
        by_method.setdefault(r.method, []).append(r)
    rows = []
    for method in sorted(by_method):
        group = by_method[method]
        peaks = [r.mra_peak_layer for r in group]
        gaps = [r.final_layer_gap for r in group]
        best = [max(e.auc for e in r.entries) for r in group]
        final = [r.entries[-1].auc for r in group]
        values, counts = np.unique(peaks, return_counts=True)
        rows.append(
            {
                "method": method,
                "seeds": sorted(r.seed for r in group),
                "peak_layer_mode": int(values[np.argmax(counts)]),
                "median_final_gap": float(np.median(gaps)),
                "median_best_layer_auc": float(np.median(best)),
                "median_final_layer_auc": float(np.median(final)),
            }
        )
    return rows
