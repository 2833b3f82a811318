import json

import pytest

from mgam.cli import main
from mgam.config import Config, parse_config, substream
from mgam.errors import ConfigError


# ---------------------------------------------------------------------------
# config resolution

def test_defaults():
    cfg = parse_config()
    assert cfg.embedding_dim == 32
    assert cfg.num_subsets == 3
    assert cfg.gcn_layers == 2
    assert cfg.lambda1 == 0.5
    assert cfg.margin == 1.0
    assert cfg.learning_rate == 0.001
    assert cfg.batch_size == 256
    assert cfg.epochs == 100
    assert cfg.train_negatives == 1
    assert cfg.eval_negatives == 100
    assert cfg.ks_list() == [5, 10]
    assert cfg.kmeans_max_iters == 100
    assert cfg.kmeans_restarts == 3
    assert cfg.seed == 42
    assert cfg.graph_weighted is False
    assert cfg.ablated() == []


def test_file_then_override_precedence(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text("num_subsets = 5\nseed = 7\n# comment\nks = 3,5\n")
    cfg = parse_config(f, overrides=["num_subsets=3"])
    assert cfg.num_subsets == 3  # override wins
    assert cfg.seed == 7
    assert cfg.ks_list() == [3, 5]


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="'lr'"):
        parse_config(None, overrides=["lr=0.1"])


def test_unknown_key_in_file_named(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text("lr = 0.1\n")
    with pytest.raises(ConfigError, match="'lr'"):
        parse_config(f)


def test_bad_value_named():
    with pytest.raises(ConfigError, match="'epochs'"):
        parse_config(None, overrides=["epochs=ten"])


def test_out_of_range_values():
    with pytest.raises(ConfigError, match="embedding_dim"):
        parse_config(None, overrides=["embedding_dim=7"])
    with pytest.raises(ConfigError, match="lambda1"):
        parse_config(None, overrides=["lambda1=-1"])
    with pytest.raises(ConfigError, match="ks"):
        parse_config(None, overrides=["ks=0"])
    with pytest.raises(ConfigError):
        parse_config(None, overrides=["graph.weighted=true"])
    with pytest.raises(ConfigError, match="ablate"):
        parse_config(None, overrides=["ablate=fusion"])


def test_ablate_parsing():
    cfg = parse_config(None, overrides=["ablate=subpe,suppe"])
    assert cfg.ablated() == ["subpe", "suppe"]


def test_resolved_echo_roundtrip():
    cfg = parse_config(None, overrides=["num_subsets=5", "graph.weighted=false"])
    echo = cfg.resolved()
    again = parse_config(None, overrides=[f"{k}={v}" for k, v in echo.items()])
    assert again == cfg


def test_substream_distinct():
    assert substream(42, 1) != substream(42, 2)
    assert substream(42, 1, 0) != substream(42, 1, 1)


# ---------------------------------------------------------------------------
# CLI end-to-end on a small dataset

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main(["gen-data", "--out", str(data), "--users", "40", "--items", "80",
               "--groups", "10", "--min-group-size", "3", "--max-group-size", "5",
               "--cohorts", "2", "--positives-per-group", "6", "--seed", "7"])
    assert rc == 0
    ckpt = root / "ckpt"
    rc = main(["train", "--data", str(data), "--out", str(ckpt),
               "--set", "epochs=2", "--set", "batch_size=16",
               "--set", "embedding_dim=8", "--set", "eval_negatives=30"])
    assert rc == 0
    return {"root": root, "data": str(data), "ckpt": str(ckpt)}


def test_train_outputs(workspace):
    import pathlib
    ckpt = pathlib.Path(workspace["ckpt"])
    assert (ckpt / "manifest.json").exists()
    assert (ckpt / "params.bin").exists()
    assert (ckpt / "train_log.csv").exists()
    assert (ckpt / "config.resolved").exists()
    manifest = json.loads((ckpt / "manifest.json").read_text())
    assert manifest["format_version"] == 1
    assert manifest["config"]["embedding_dim"] == 8


def test_eval_writes_metrics(workspace, capsys):
    rc = main(["eval", "--data", workspace["data"], "--ckpt", workspace["ckpt"],
               "--ks", "5,10"])
    assert rc == 0
    import pathlib
    lines = (pathlib.Path(workspace["ckpt"]) / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "model,K,HR,NDCG,n_groups,seed"
    assert len(lines) == 3  # one row per K
    assert lines[1].startswith("mgam,5,")


def test_eval_adopts_checkpoint_config(workspace):
    # checkpoint was trained with d=8; no overrides needed for a match
    rc = main(["eval", "--data", workspace["data"], "--ckpt", workspace["ckpt"]])
    assert rc == 0


def test_eval_dimension_mismatch_fails(workspace, capsys):
    rc = main(["eval", "--data", workspace["data"], "--ckpt", workspace["ckpt"],
               "--set", "embedding_dim=16"])
    assert rc == 1
    assert "user_emb" in capsys.readouterr().err


def test_ablate_runs_all_single_removals(workspace):
    import pathlib
    out = pathlib.Path(workspace["root"]) / "ablate"
    rc = main(["ablate", "--data", workspace["data"], "--ckpt", workspace["ckpt"],
               "--out", str(out)])
    assert rc == 0
    rows = (out / "metrics.csv").read_text().strip().splitlines()[1:]
    models = {r.split(",")[0] for r in rows}
    assert models == {"mgam", "mgam-wo-subpe", "mgam-wo-gpe", "mgam-wo-suppe"}


def test_ablate_all_disabled_is_usage_error(workspace, capsys):
    rc = main(["ablate", "--data", workspace["data"], "--ckpt", workspace["ckpt"],
               "--disable", "subpe", "--disable", "gpe", "--disable", "suppe"])
    assert rc == 2
    assert "usage error" in capsys.readouterr().err


def test_recommend_prints_topk(workspace, capsys):
    rc = main(["recommend", "--data", workspace["data"], "--ckpt",
               workspace["ckpt"], "--group-id", "3", "--k", "4"])
    assert rc == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 4
    rank, item, score = out[0].split("\t")
    assert rank == "1"
    float(score)


def test_recommend_explain_json(workspace, capsys):
    rc = main(["recommend", "--data", workspace["data"], "--ckpt",
               workspace["ckpt"], "--group-id", "3", "--k", "2", "--explain"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["group"] == "3"
    assert set(payload["fusion_rows"]) == {"subpe", "gpe", "suppe"}
    assert len(payload["fusion_attention"]) == 3
    assert abs(sum(payload["group_member_weights"].values()) - 1) < 1e-9
    assert abs(sum(payload["subset_weights"]) - 1) < 1e-9
    assert payload["recommendations"]


def test_recommend_unknown_group(workspace, capsys):
    rc = main(["recommend", "--data", workspace["data"], "--ckpt",
               workspace["ckpt"], "--group-id", "nope"])
    assert rc == 2


def test_dump_graph_format(workspace, tmp_path):
    out = tmp_path / "graph.tsv"
    rc = main(["dump-graph", "--data", workspace["data"], "--out", str(out)])
    assert rc == 0
    for line in out.read_text().strip().splitlines():
        a, b = line.split("\t")
        assert a != b  # self-loops omitted
    assert (tmp_path / "graph.tsv.config").exists()


def test_dump_subsets_format(workspace, tmp_path):
    out = tmp_path / "subsets.tsv"
    rc = main(["dump-subsets", "--data", workspace["data"], "--out", str(out),
               "--set", "num_subsets=2"])
    assert rc == 0
    lines = [l.split("\t") for l in out.read_text().strip().splitlines()]
    assert all(len(l) == 3 for l in lines)
    subset_indices = {int(s) for _, s, _ in lines}
    assert subset_indices <= {0, 1}


def test_baseline_writes_three_models(workspace, tmp_path):
    out = tmp_path / "base"
    rc = main(["baseline", "--data", workspace["data"], "--out", str(out),
               "--set", "epochs=2", "--set", "eval_negatives=20"])
    assert rc == 0
    rows = (out / "metrics.csv").read_text().strip().splitlines()[1:]
    models = {r.split(",")[0] for r in rows}
    assert models == {"mf-avg", "mf-lm", "mf-ms"}


def test_sweep_subsets_one_row_per_m(workspace, tmp_path):
    out = tmp_path / "sweep"
    rc = main(["sweep-subsets", "--data", workspace["data"], "--out", str(out),
               "--m-values", "1,2", "--set", "epochs=1",
               "--set", "embedding_dim=8", "--set", "eval_negatives=20"])
    assert rc == 0
    lines = (out / "sweep.csv").read_text().strip().splitlines()
    assert lines[0].startswith("m,hr_5,ndcg_5,hr_10,ndcg_10")
    assert [l.split(",")[0] for l in lines[1:]] == ["1", "2"]


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_config_error_exits_2(workspace, capsys):
    rc = main(["train", "--data", workspace["data"], "--out",
               str(workspace["root"]) + "/x", "--set", "lr=0.1"])
    assert rc == 2


def test_runtime_error_exits_1(tmp_path, capsys):
    rc = main(["dump-graph", "--data", str(tmp_path), "--out",
               str(tmp_path / "g.tsv")])
    assert rc == 1  # missing data files


def test_gen_data_meta(workspace):
    import pathlib
    meta = json.loads((pathlib.Path(workspace["data"]) / "meta.json").read_text())
    assert meta["seed"] == 7
    assert meta["params"]["n_groups"] == 10


def test_eval_detail_writes_per_group_rows(workspace, tmp_path):
    out = tmp_path / "detail"
    rc = main(["eval", "--data", workspace["data"], "--ckpt", workspace["ckpt"],
               "--out", str(out), "--detail"])
    assert rc == 0
    lines = (out / "metrics_detail.csv").read_text().strip().splitlines()
    assert lines[0] == "model,group,position,K,HR,NDCG"
    assert len(lines) > 1


def test_recommend_explain_specific_item(workspace, capsys):
    rc = main(["recommend", "--data", workspace["data"], "--ckpt",
               workspace["ckpt"], "--group-id", "3", "--item", "12",
               "--explain"])
    assert rc == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["item"] == "12"
    assert 0.0 < payload["score"] < 1.0


def test_missing_checkpoint_is_runtime_error(workspace, tmp_path, capsys):
    rc = main(["eval", "--data", workspace["data"], "--ckpt",
               str(tmp_path / "nope")])
    assert rc == 1
