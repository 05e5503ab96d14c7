"""Command-line surface: generate data, train, compress, probe, evaluate, report.

Config precedence is flags > config file > defaults. All machine-readable
outputs are timestamp-free; wall-clock timings go only to the training log
file. Log verbosity follows the MARC_LOG environment variable
(error | info | debug).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dataio
from .downstream import CtrProbeConfig, eval_ctr_probe, rank_metrics, storage_report, train_ctr_probe
from .probe import SCHEMA_VERSION, LayerProbeReport, ProbeConfig, layer_sweep, mra_summary
from .trainer import DIM_SWEEP, RunConfig, train

log = logging.getLogger("marc")


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("MARC_LOG", "error").lower(), logging.ERROR
    )
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _run_config(args):
    """Build a RunConfig with precedence flags > config file > defaults."""
    values = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
        known = {f.name for f in fields(RunConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
        values.update(raw)
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    if "mrl_prefixes" in values:
        values["mrl_prefixes"] = tuple(values["mrl_prefixes"])
    return RunConfig(**values).validate()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    cfg = dataio.SyntheticConfig(
        num_users=args.users,
        num_items=args.items,
        num_interactions=args.interactions,
        latent_dim=args.latent_dim,
        observable_dim=args.obs_dim,
        temperature=args.tau,
        history_cap=args.history_cap,
        seed=args.seed,
    )
    ds = dataio.gen_synthetic(cfg)
    dataio.save_dataset(ds, args.out)
    print(f"wrote dataset to {args.out}: {ds.num_users} users, {ds.num_items} items, "
          f"{ds.labels.size} interactions, positive rate {ds.labels.mean():.3f}")
    return 0


def cmd_train(args):
    cfg = _run_config(args)
    ds = dataio.load_dataset(args.data)
    model = train(ds, cfg)
    dataio.save_model(model, args.out)
    log_path = Path(str(args.out) + ".log.json")
    _write_json(log_path, {"config": {f.name: _jsonable(getattr(cfg, f.name)) for f in fields(RunConfig)},
                           "log": model.train_log})
    print(f"trained {cfg.method} -> {args.out} (log: {log_path})")
    return 0


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def cmd_compress(args):
    model = dataio.load_model(args.model)
    table = dataio.load_embeddings(args.embeddings).astype(np.float64)
    if table.shape[1] != model.d_o:
        raise ValueError(
            f"compress: embeddings have dim {table.shape[1]}, model expects d_o={model.d_o}"
        )
    out = model.compress_array(table)
    ids = None
    try:
        ids = dataio.load_embedding_ids(args.embeddings)
    except FileNotFoundError:
        pass
    dataio.save_embeddings(out, args.out, ids=ids)
    print(f"compressed {table.shape[0]} x {table.shape[1]} -> {out.shape[0]} x {out.shape[1]} at {args.out}")
    return 0


def _probe_config(args, seed):
    probe_kwargs = {}
    if args.probe_epochs is not None:
        probe_kwargs["max_epochs"] = args.probe_epochs
    if args.probe_rows is not None:
        probe_kwargs["max_rows"] = args.probe_rows
    if args.experts is not None:
        probe_kwargs["num_experts"] = args.experts
    return ProbeConfig(probe=CtrProbeConfig(**probe_kwargs), jobs=args.jobs, seed=seed)


def cmd_probe_layers(args):
    model = dataio.load_model(args.model)
    ds = dataio.load_dataset(args.data)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    reports = [layer_sweep(model, ds, _probe_config(args, s)) for s in seeds]
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "layer_probe_set",
        "reports": [r.to_dict() for r in reports],
        "summary": mra_summary(reports),
    }
    _write_json(args.out, payload)
    csv_path = Path(args.out).with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "d_c", "seed", "layer", "auc", "logloss", "proxy_loss"])
        for r in reports:
            for row in r.csv_rows():
                w.writerow([r.method, r.d_c, r.seed, *row])
    for r in reports:
        print(f"seed {r.seed}: peak layer {r.mra_peak_layer}, final gap {r.final_layer_gap:+.4f}")
    print(f"wrote {args.out} and {csv_path}")
    return 0


def cmd_eval_ctr(args):
    model = dataio.load_model(args.model)
    ds = dataio.load_dataset(args.data)
    reps = model.reps(ds, kind=args.rep)
    cfg = CtrProbeConfig(seed=args.seed, **({"max_epochs": args.probe_epochs} if args.probe_epochs else {}))
    ctr_probe = train_ctr_probe(ds, reps, cfg)
    a, ll = eval_ctr_probe(ctr_probe, ds, split="test")
    dim = reps[0].shape[1]
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "ctr_eval",
        "method": model.method,
        "rep": args.rep,
        "dim": dim,
        "d_c": model.d_c,
        "seed": args.seed,
        "auc": a,
        "logloss": ll,
        "storage": storage_report(ds.num_users, ds.num_items, sorted({dim, model.d_o})),
    }
    _write_json(args.out, payload)
    print(f"{model.method} [{args.rep}, dim {dim}] auc {a:.4f} logloss {ll:.4f} -> {args.out}")
    return 0


def cmd_eval_rank(args):
    model = dataio.load_model(args.model)
    ds = dataio.load_dataset(args.data)
    user_reps, item_reps = model.reps(ds, kind=args.rep)
    ks = [int(k) for k in args.ks.split(",")]
    if max(ks) > ds.num_items:
        raise ValueError(f"eval-rank: K={max(ks)} exceeds item count {ds.num_items}")
    # two-tower retrieval: cosine-score every item for each test user
    un = user_reps / np.maximum(np.linalg.norm(user_reps, axis=1, keepdims=True), 1e-12)
    iN = item_reps / np.maximum(np.linalg.norm(item_reps, axis=1, keepdims=True), 1e-12)
    lists = []
    test_users = np.flatnonzero(~ds.train_mask)
    skipped = 0
    for u in test_users:
        rows = (ds.users == u) & (ds.labels == 1)
        relevant = set(ds.items[rows].tolist())
        if not relevant:
            skipped += 1
            continue
        scores = iN @ un[u]
        ranked = np.argsort(-scores, kind="mergesort")
        lists.append(np.isin(ranked, list(relevant)).astype(np.int64))
    if not lists:
        raise ValueError("eval-rank: no test user has a positive item")
    metrics = rank_metrics(lists, ks)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": "rank_eval",
        "method": model.method,
        "rep": args.rep,
        "d_c": model.d_c,
        "seed": args.seed,
        "num_lists": len(lists),
        "skipped_users": skipped,
        "ndcg": {str(k): v for k, v in metrics["ndcg"].items()},
        "map": {str(k): v for k, v in metrics["map"].items()},
        "hitrate": {str(k): v for k, v in metrics["hitrate"].items()},
        "mrr": metrics["mrr"],
    }
    _write_json(args.out, payload)
    shown = ", ".join(f"ndcg@{k} {metrics['ndcg'][k]:.4f}" for k in ks)
    print(f"{model.method} [{args.rep}] {shown}, mrr {metrics['mrr']:.4f} -> {args.out}")
    return 0


def cmd_report(args):
    layer_reports = []
    evals = []
    for path in args.inputs:
        payload = json.loads(Path(path).read_text())
        if payload.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"report: conflicting schema_version in {path}")
        kind = payload.get("kind")
        if kind == "layer_probe_set":
            layer_reports.extend(LayerProbeReport.from_dict(r) for r in payload["reports"])
        elif kind == "layer_probe":
            layer_reports.append(LayerProbeReport.from_dict(payload))
        elif kind in ("ctr_eval", "rank_eval"):
            evals.append(payload)
        else:
            raise ValueError(f"report: unknown report kind {kind!r} in {path}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    merged = {
        "schema_version": SCHEMA_VERSION,
        "kind": "merged_report",
        "evals": sorted(evals, key=lambda e: (e["kind"], e["method"], str(e.get("d_c")), e["seed"])),
        "layer_summary": mra_summary(layer_reports) if layer_reports else [],
    }
    _write_json(out_dir / "metrics.json", merged)
    if layer_reports:
        with open(out_dir / "curves.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "d_c", "seed", "layer", "auc", "logloss", "proxy_loss"])
            for r in sorted(layer_reports, key=lambda r: (r.method, str(r.d_c), r.seed)):
                for row in r.csv_rows():
                    w.writerow([r.method, r.d_c, r.seed, *row])
    if evals:
        keys = ["kind", "method", "rep", "d_c", "seed", "auc", "logloss", "mrr"]
        with open(out_dir / "metrics.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(keys)
            for e in merged["evals"]:
                w.writerow([e.get(k, "") for k in keys])
    print(f"merged {len(evals)} eval reports and {len(layer_reports)} layer reports into {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="marc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic interaction dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--users", type=int, default=2000)
    g.add_argument("--items", type=int, default=1000)
    g.add_argument("--interactions", type=int, default=50000)
    g.add_argument("--latent-dim", type=int, default=8)
    g.add_argument("--obs-dim", type=int, default=64)
    g.add_argument("--tau", type=float, default=1.0, help="label noise temperature")
    g.add_argument("--history-cap", type=int, default=30)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a method on a dataset directory")
    t.add_argument("--config", help="JSON config file with RunConfig keys")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output model file")
    t.add_argument("--method", choices=["marc", "cs", "cl", "mrl", "ae", "pca"])
    t.add_argument("--d-c", dest="d_c", type=int, help=f"compressed dim (sweep set {DIM_SWEEP})")
    t.add_argument("--alpha", type=float)
    t.add_argument("--sigma-policy", dest="sigma_policy", choices=["median", "fixed"])
    t.add_argument("--sigma", type=float)
    t.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    t.add_argument("--num-layers", dest="num_layers", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--train-sample", dest="train_sample", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-hsic", dest="no_hsic", action="store_const", const=True)
    t.add_argument("--no-ei", dest="no_ei", action="store_const", const=True)
    t.add_argument("--no-mn", dest="no_mn", action="store_const", const=True)
    t.add_argument("--proxy", choices=["none", "cosine"])
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="compress an embedding file with a trained model")
    c.add_argument("--model", required=True)
    c.add_argument("--embeddings", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compress)

    pl = sub.add_parser("probe-layers", help="train a CTR probe per backbone layer")
    pl.add_argument("--model", required=True)
    pl.add_argument("--data", required=True)
    pl.add_argument("--out", required=True, help="output report JSON (CSV written alongside)")
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--seeds", help="comma-separated list for a multi-seed sweep")
    pl.add_argument("--jobs", type=int, default=1)
    pl.add_argument("--probe-epochs", dest="probe_epochs", type=int)
    pl.add_argument("--probe-rows", dest="probe_rows", type=int)
    pl.add_argument("--experts", type=int)
    pl.set_defaults(func=cmd_probe_layers)

    ec = sub.add_parser("eval-ctr", help="train and evaluate a CTR probe on model representations")
    ec.add_argument("--model", required=True)
    ec.add_argument("--data", required=True)
    ec.add_argument("--out", required=True)
    ec.add_argument("--rep", choices=["compressed", "original"], default="compressed")
    ec.add_argument("--seed", type=int, default=0)
    ec.add_argument("--probe-epochs", dest="probe_epochs", type=int)
    ec.set_defaults(func=cmd_eval_ctr)

    er = sub.add_parser("eval-rank", help="two-tower retrieval metrics on test users")
    er.add_argument("--model", required=True)
    er.add_argument("--data", required=True)
    er.add_argument("--out", required=True)
    er.add_argument("--rep", choices=["compressed", "original"], default="compressed")
    er.add_argument("--ks", default="10,20,50")
    er.add_argument("--seed", type=int, default=0)
    er.set_defaults(func=cmd_eval_rank)

    r = sub.add_parser("report", help="merge report files into consolidated CSV/JSON")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
