import io
import json

import pytest

from starec import cli

TOY = {
    "synth": {"n_users": 30, "n_items": 20, "n_categories": 5, "events_per_user": [8, 12],
              "period_range": [3, 6], "mean_gap": 2.0, "seed": 3},
    "train": {"dim": 4, "mlp_hidden": [4], "epochs": 2, "batch_size": 8, "dropout": 0.0,
              "init_scale": 0.3},
    "search": {"seq_len": 5, "n_similar_users": 1},
}


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path))
    (tmp_path / "toy.json").write_text(json.dumps(TOY), encoding="utf-8")
    return tmp_path


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture
def data(root):
    assert run("synth", "--config", "toy.json", "--out", "data") == 0
    return "data/interactions.tsv"


def test_synth_with_the_same_seed_is_byte_identical(root):
    assert run("synth", "--config", "toy.json", "--seed", "7", "--out", "a") == 0
    assert run("synth", "--config", "toy.json", "--seed", "7", "--out", "b") == 0
    assert (root / "a/interactions.tsv").read_bytes() == (root / "b/interactions.tsv").read_bytes()
    resolved = json.loads((root / "a/resolved_config.json").read_text())
    assert resolved["synth"]["seed"] == 7


def test_ingest_reports_counts(root, data):
    assert run("ingest", "--config", "toy.json", "--data", data, "--out", "ing") == 0
    report = json.loads((root / "ing/ingest_report.json").read_text())
    assert report["users"] == 30 and report["train"] == 30 and report["rejected"] == 0


def test_train_then_evaluate_writes_metrics(root, data):
    assert run("train", "--config", "toy.json", "--data", data, "--out", "run") == 0
    assert (root / "run/checkpoint.npz").exists()
    assert len((root / "run/train_report.tsv").read_text().splitlines()) == 3
    assert run("evaluate", "--config", "toy.json", "--data", data,
               "--checkpoint", "run/checkpoint.npz", "--out", "eval") == 0
    header, *rows = (root / "eval/metrics.tsv").read_text().splitlines()
    assert header.split("\t")[:2] == ["split", "AUC"]
    assert [r.split("\t")[0] for r in rows] == ["validation", "test"]
    assert float(rows[1].split("\t")[1]) > 0


def test_resolved_config_replays_the_run_bit_exactly(root, data):
    assert run("train", "--config", "toy.json", "--data", data, "--out", "one") == 0
    assert run("train", "--config", "one/resolved_config.json", "--out", "two") == 0
    assert (root / "one/checkpoint.npz").read_bytes() == (root / "two/checkpoint.npz").read_bytes()
    assert (root / "one/train_report.tsv").read_text() == (root / "two/train_report.tsv").read_text()


def test_ablate_lists_six_variants_and_the_ratio_sweep(root, data):
    assert run("ablate", "--config", "toy.json", "--data", data, "--set", "train.epochs=1",
               "--out", "abl", "--plot") == 0
    rows = (root / "abl/ablation.tsv").read_text().splitlines()[1:]
    names = [r.split("\t")[0] for r in rows]
    assert names == ["STARec", "STARec-time", "STARec-recent", "STARec+label", "GRU", "GRU+label",
                     "STARec@recent=0.25", "STARec@recent=0.5", "STARec@recent=0.75"]
    assert all(r.endswith("\tok") for r in rows)
    assert (root / "abl/ablation.png").stat().st_size > 0


def test_index_and_serve_round_trip(root, data, monkeypatch, capsys):
    assert run("train", "--config", "toy.json", "--data", data, "--out", "run") == 0
    assert run("index", "--config", "toy.json", "--data", data,
               "--checkpoint", "run/checkpoint.npz", "--out", "idx") == 0
    (root / "q.tsv").write_text("lipstick\t2\n", encoding="utf-8")
    monkeypatch.setattr("sys.stdin", io.StringIO("0\tlipstick\t2\t1,2,3\n4\t-\t1\t5,6\n"))
    capsys.readouterr()
    assert run("serve", "--checkpoint", "run/checkpoint.npz", "--index", "idx/index.npz",
               "--queries", "q.tsv") == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3
    assert all(len(line.split("\t")[1].split(".")[1]) == 6 for line in lines)


def test_unknown_key_exits_with_config_error(root, capsys):
    assert run("synth", "--out", "x", "--set", "train.speed=3") == cli.EXIT_CONFIG
    assert "train.speed" in capsys.readouterr().err
    (root / "bad.json").write_text(json.dumps({"model": {}}), encoding="utf-8")
    assert run("synth", "--config", "bad.json", "--out", "x") == cli.EXIT_CONFIG


def test_invalid_value_exits_with_config_error(root, capsys):
    assert run("synth", "--out", "x", "--set", "search.tau=1.5") == cli.EXIT_CONFIG
    assert "tau" in capsys.readouterr().err


def test_missing_data_path_is_a_config_error(root):
    assert run("train", "--out", "x") == cli.EXIT_CONFIG


def test_bad_data_exits_with_data_error(root, capsys):
    (root / "bad.tsv").write_text("user_id\titem_id\ttimestamp\tlabel\n1\t2\t3\t1\n", encoding="utf-8")
    assert run("train", "--data", "bad.tsv", "--out", "x") == cli.EXIT_DATA
    assert "category_id" in capsys.readouterr().err
    assert run("train", "--data", "missing.tsv", "--out", "x") == cli.EXIT_DATA


def test_strict_loading_reports_the_line(root, capsys):
    (root / "bad.tsv").write_text("user_id\titem_id\tcategory_id\ttimestamp\tlabel\n1\t2\t3\t4\t1\n1\t2\t3\tx\t1\n",
                                  encoding="utf-8")
    assert run("ingest", "--data", "bad.tsv", "--set", "data.strict=true", "--out", "x") == cli.EXIT_DATA
    assert "line 3" in capsys.readouterr().err


def test_divergence_exits_with_code_four_and_keeps_the_last_good_state(root, data):
    code = run("train", "--config", "toy.json", "--data", data, "--set", "train.init_scale=1e300",
               "--out", "div")
    assert code == cli.EXIT_DIVERGED
    assert (root / "div/last_good.npz").exists()


def test_every_run_directory_has_config_and_log(root, data):
    assert run("ingest", "--config", "toy.json", "--data", data, "--out", "ing") == 0
    for name in ("resolved_config.json", "invocation.json", "log.txt"):
        assert (root / "ing" / name).exists()
    resolved = json.loads((root / "ing/resolved_config.json").read_text())
    assert set(resolved) == set(cli.SECTIONS)
    assert resolved["data"]["path"] == data
