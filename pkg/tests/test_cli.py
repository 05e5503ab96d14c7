import json
from pathlib import Path

import pytest

from marc.cli import main
from marc.dataio import load_embeddings, load_model


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    rc = main([
        "gen-data", "--out", str(d), "--users", "60", "--items", "30",
        "--interactions", "800", "--latent-dim", "3", "--obs-dim", "6", "--seed", "1",
    ])
    assert rc == 0
    return d


@pytest.fixture(scope="module")
def model_path(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-model") / "m.bin"
    cfg = tmp_path_factory.mktemp("cli-cfg") / "cfg.json"
    cfg.write_text(json.dumps({
        "method": "marc", "d_c": 3, "hidden_dim": 6, "num_layers": 2,
        "epochs": 1, "batch_size": 64, "lr": 0.001, "train_sample": 300, "seed": 1,
    }))
    rc = main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(out)])
    assert rc == 0
    return out


def test_gen_data_writes_expected_files(data_dir):
    for name in ("interactions.csv", "users.emb", "items.emb", "split.json", "meta.json"):
        assert (data_dir / name).exists(), name


def test_gen_data_idempotent(data_dir, tmp_path):
    other = tmp_path / "again"
    rc = main([
        "gen-data", "--out", str(other), "--users", "60", "--items", "30",
        "--interactions", "800", "--latent-dim", "3", "--obs-dim", "6", "--seed", "1",
    ])
    assert rc == 0
    for name in ("interactions.csv", "users.emb", "items.emb", "split.json", "meta.json"):
        assert (other / name).read_bytes() == (data_dir / name).read_bytes()


def test_train_writes_model_and_log(model_path):
    assert model_path.exists()
    log = json.loads(Path(str(model_path) + ".log.json").read_text())
    assert log["config"]["method"] == "marc"
    assert len(log["log"]["epoch_losses"]) == 1


def test_flag_overrides_config(data_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "method": "marc", "d_c": 3, "hidden_dim": 6, "num_layers": 2,
        "epochs": 1, "batch_size": 64, "lr": 0.001, "train_sample": 300, "seed": 1,
    }))
    out = tmp_path / "cs.bin"
    rc = main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(out),
               "--method", "cs"])
    assert rc == 0
    assert load_model(out).method == "cs"


def test_unknown_config_key_rejected(data_dir, tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"method": "marc", "nope": 1}))
    rc = main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "x.bin")])
    assert rc == 1


def test_compress_outputs_dc_dim(model_path, data_dir, tmp_path):
    model = load_model(model_path)
    # build an embedding file in the original representation space
    from marc.backbone import build_model_inputs
    from marc.dataio import load_dataset, save_embeddings

    ds = load_dataset(data_dir)
    ui, ii = build_model_inputs(ds)
    _, li = model.layer_output_arrays(ui, ii)
    emb_in = tmp_path / "orig.emb"
    save_embeddings(li[-1], emb_in, ids=range(li[-1].shape[0]))
    emb_out = tmp_path / "comp.emb"
    rc = main(["compress", "--model", str(model_path), "--embeddings", str(emb_in),
               "--out", str(emb_out)])
    assert rc == 0
    table = load_embeddings(emb_out)
    assert table.shape == (ds.num_items, model.d_c)


def test_probe_layers_and_report(model_path, data_dir, tmp_path):
    rep_path = tmp_path / "probe.json"
    rc = main(["probe-layers", "--model", str(model_path), "--data", str(data_dir),
               "--out", str(rep_path), "--seed", "3", "--probe-epochs", "2", "--experts", "2"])
    assert rc == 0
    payload = json.loads(rep_path.read_text())
    assert payload["kind"] == "layer_probe_set"
    assert len(payload["reports"][0]["entries"]) == 3
    assert rep_path.with_suffix(".csv").exists()

    out_dir = tmp_path / "merged"
    rc = main(["report", "--inputs", str(rep_path), "--out-dir", str(out_dir)])
    assert rc == 0
    merged = json.loads((out_dir / "metrics.json").read_text())
    assert merged["layer_summary"][0]["method"] == "marc"
    assert (out_dir / "curves.csv").exists()


def test_probe_layers_multi_seed_summary(model_path, data_dir, tmp_path):
    rep_path = tmp_path / "probe2.json"
    rc = main(["probe-layers", "--model", str(model_path), "--data", str(data_dir),
               "--out", str(rep_path), "--seeds", "3,4", "--probe-epochs", "2", "--experts", "2"])
    assert rc == 0
    payload = json.loads(rep_path.read_text())
    assert [r["seed"] for r in payload["reports"]] == [3, 4]
    assert payload["summary"][0]["seeds"] == [3, 4]


def test_eval_ctr_and_rank_and_report(model_path, data_dir, tmp_path):
    ctr_path = tmp_path / "ctr.json"
    rc = main(["eval-ctr", "--model", str(model_path), "--data", str(data_dir),
               "--out", str(ctr_path), "--rep", "compressed", "--probe-epochs", "2"])
    assert rc == 0
    ctr = json.loads(ctr_path.read_text())
    assert 0.0 <= ctr["auc"] <= 1.0
    assert ctr["dim"] == 3

    rank_path = tmp_path / "rank.json"
    rc = main(["eval-rank", "--model", str(model_path), "--data", str(data_dir),
               "--out", str(rank_path), "--ks", "5,10"])
    assert rc == 0
    rank = json.loads(rank_path.read_text())
    assert set(rank["ndcg"]) == {"5", "10"}
    assert 0.0 <= rank["mrr"] <= 1.0

    out_dir = tmp_path / "merged2"
    rc = main(["report", "--inputs", str(ctr_path), str(rank_path), "--out-dir", str(out_dir)])
    assert rc == 0
    assert (out_dir / "metrics.csv").exists()
    merged = json.loads((out_dir / "metrics.json").read_text())
    assert len(merged["evals"]) == 2


def test_eval_ctr_original_rep(model_path, data_dir, tmp_path):
    out = tmp_path / "ctr_orig.json"
    rc = main(["eval-ctr", "--model", str(model_path), "--data", str(data_dir),
               "--out", str(out), "--rep", "original", "--probe-epochs", "2"])
    assert rc == 0
    assert json.loads(out.read_text())["dim"] == 6


def test_help_exits_zero(capsys):
    for sub in ("gen-data", "train", "compress", "probe-layers", "eval-ctr", "eval-rank", "report"):
        assert main([sub, "--help"]) == 0
        assert "--" in capsys.readouterr().out


def test_unknown_subcommand_nonzero():
    assert main(["frobnicate"]) == 2


def test_unknown_flag_nonzero():
    assert main(["gen-data", "--out", "x", "--bogus", "1"]) == 2


def test_config_defaults_match_pinned_values():
    from marc.compression import CompressionNet
    from marc.downstream import CtrProbeConfig
    from marc.matching import MatchingNet
    from marc.rng import stream
    from marc.trainer import RunConfig

    rc = RunConfig()
    assert rc.alpha == 0.01
    assert CompressionNet(512, 128, stream(0, "t")).hidden == (256, 128)
    assert MatchingNet(512, stream(0, "t")).hidden == (128,)
    probe = CtrProbeConfig()
    assert probe.expert_hidden == (128, 32)
    assert probe.id_dim == 32
    assert probe.out_hidden == (200, 80)


def test_missing_file_single_line_error(tmp_path, capsys):
    rc = main(["compress", "--model", str(tmp_path / "no.bin"),
               "--embeddings", str(tmp_path / "no.emb"), "--out", str(tmp_path / "o.emb")])
    assert rc == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error:")
    assert "\n" not in err
