import csv
import json
import time

import pytest
import yaml

from cdnas import cli

TINY = {
    "data": {"synth": {"n_users": 30, "n_items_per_domain": 15, "positives_per_user": 4, "seed": 0}},
    "training": {"max_epochs": 3, "warmup_epochs": 1, "batch_size": 64, "lr_inner": 0.005, "alpha": 0.001,
                 "T_inner": 2, "K": 2},
    "model": {"dim": 8, "head_widths": [8], "perceptron_dim": 4, "perceptron_hidden": 4},
    "seeds": [0, 1],
}


def write_cfg(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "c.yaml", TINY)
    assert run("train", "--config", cfg, "--out", root / "full") == 0
    assert run("train", "--config", cfg, "--variant", "NO-SOURCE", "--out", root / "nosrc") == 0
    return root


def read_tsv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


class TestSynth:
    def test_files_and_counts(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.yaml", {"data": {"synth": {"n_users": 20, "positives_per_user": 5}}})
        assert run("synth", "--config", cfg, "--out", tmp_path / "d") == 0
        rows = read_tsv(tmp_path / "d" / "data.tsv")
        assert sum(int(r["label"]) for r in rows) == 20 * 2 * 5
        assert len(read_tsv(tmp_path / "d" / "oracle.tsv")) == len(rows)
        meta = json.loads((tmp_path / "d" / "meta.json").read_text())
        assert meta["synth_config"]["n_users"] == 20 and meta["n_interactions"] == len(rows)

    def test_byte_identical(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.yaml", {"data": {"synth": {"n_users": 15}}})
        run("synth", "--config", cfg, "--seed", "3", "--out", tmp_path / "a")
        run("synth", "--config", cfg, "--seed", "3", "--out", tmp_path / "b")
        assert (tmp_path / "a" / "data.tsv").read_bytes() == (tmp_path / "b" / "data.tsv").read_bytes()

    def test_full_noise_against_oracle(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.yaml", {"data": {"synth": {"n_users": 15, "source_noise_fraction": 1.0}}})
        run("synth", "--config", cfg, "--out", tmp_path / "d")
        data = {(r["user_id"], r["item_id"]): int(r["label"]) for r in read_tsv(tmp_path / "d" / "data.tsv")}
        for r in read_tsv(tmp_path / "d" / "oracle.tsv"):
            flipped = data[(r["user_id"], r["item_id"])] != int(r["clean_label"])
            assert flipped == (r["domain"] != "d0")


class TestTrain:
    def test_run_dir_is_self_describing(self, trained):
        d = trained / "full"
        for name in ("config.yaml", "version.json", "records.jsonl", "report.json"):
            assert (d / name).is_file()
        recs = [json.loads(line) for line in (d / "records.jsonl").read_text().splitlines()]
        assert [r["seed"] for r in recs] == [0, 1]
        assert set(recs[0]) == {"run_id", "seed", "variant", "auc", "logloss", "gamma_domains", "arch_mixtures"}
        epochs = [json.loads(line) for line in (d / "seed0" / "epochs.jsonl").read_text().splitlines()]
        assert [e["epoch"] for e in epochs] == [0, 1, 2]
        assert (d / "seed1" / "checkpoint.pt").is_file()

    def test_no_source_records_zero_source_edges(self, trained):
        info = json.loads((trained / "nosrc" / "seed0" / "run.json").read_text())
        assert info["n_source_edges"] == 0

    def test_reproducible(self, trained, tmp_path):
        cfg = write_cfg(tmp_path / "c.yaml", TINY)
        run("train", "--config", cfg, "--out", tmp_path / "again")
        assert (tmp_path / "again" / "records.jsonl").read_text() == (trained / "full" / "records.jsonl").read_text()

    def test_file_dataset(self, tmp_path):
        cfg = write_cfg(tmp_path / "s.yaml", TINY)
        run("synth", "--config", cfg, "--out", tmp_path / "d")
        file_cfg = dict(TINY, data={"path": str(tmp_path / "d" / "data.tsv"), "target": "d0"}, seeds=[0])
        assert run("train", "--config", write_cfg(tmp_path / "f.yaml", file_cfg), "--out", tmp_path / "r") == 0

    def test_fifty_user_single_seed_under_five_minutes(self, tmp_path):
        cfg = {"data": {"synth": {"n_users": 50, "seed": 0}},
               "training": {"max_epochs": 20, "warmup_epochs": 5, "lr_inner": 0.005, "alpha": 0.001},
               "model": {"dim": 32, "head_widths": [64, 32]}}
        start = time.perf_counter()
        assert run("train", "--config", write_cfg(tmp_path / "c.yaml", cfg), "--seed", "1", "--out", tmp_path / "r") == 0
        assert time.perf_counter() - start < 300
        assert (tmp_path / "r" / "report.json").is_file()

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
        cfg = write_cfg(tmp_path / "c.yaml", dict(TINY, seeds=[0]))
        assert run("train", "--config", cfg) == 0
        assert any((tmp_path / "root").iterdir())

    def test_runtime_failure_keeps_partial_results(self, tmp_path, monkeypatch):
        real = cli.train

        def flaky(graph, spec, config, *a, **kw):
            if config.seed == 1:
                raise RuntimeError("boom")
            return real(graph, spec, config, *a, **kw)

        monkeypatch.setattr(cli, "train", flaky)
        assert run("train", "--config", write_cfg(tmp_path / "c.yaml", TINY), "--out", tmp_path / "r") == 2
        recs = (tmp_path / "r" / "records.jsonl").read_text().splitlines()
        assert len(recs) == 1 and json.loads(recs[0])["seed"] == 0


class TestConfigErrors:
    def test_missing_dataset_names_path(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.yaml", {"data": {"path": str(tmp_path / "absent.tsv"), "target": "A"}})
        assert run("train", "--config", cfg) == 1
        assert "absent.tsv" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        assert run("train", "--config", write_cfg(tmp_path / "c.yaml", dict(TINY, extra=1))) == 1
        nested = dict(TINY, training={"max_epochs": 3, "learning_rate": 1.0})
        assert run("train", "--config", write_cfg(tmp_path / "d.yaml", nested)) == 1

    def test_bad_value(self, tmp_path):
        bad = dict(TINY, training={"K": -1})
        assert run("train", "--config", write_cfg(tmp_path / "c.yaml", bad)) == 1

    def test_missing_config(self, tmp_path):
        assert run("train", "--config", tmp_path / "none.yaml") == 1
        assert run("train") == 1

    def test_bad_seed_flag(self, tmp_path):
        assert run("train", "--config", write_cfg(tmp_path / "c.yaml", TINY), "--seed", "a,b") == 1

    def test_unknown_command(self):
        assert run("frobnicate") == 1


class TestReport:
    def test_mixtures_sum_to_one(self, trained, capsys):
        assert run("report", trained / "full") == 0
        rep = json.loads((trained / "full" / "report.json").read_text())
        for doms in rep["arch_mixtures"].values():
            for ops in doms.values():
                assert abs(sum(ops.values()) - 1) < 1e-6
        assert "layer1 d0" in capsys.readouterr().out

    def test_rela_impr_between_runs(self, trained, capsys):
        assert run("report", trained / "full", "--baseline", trained / "nosrc") == 0
        a = json.loads((trained / "full" / "report.json").read_text())["auc"]["mean"]
        b = json.loads((trained / "nosrc" / "report.json").read_text())["auc"]["mean"]
        want = ((a - 0.5) / (b - 0.5) - 1) * 100
        assert f"AUC {want:+.2f}%" in capsys.readouterr().out

    def test_empty_dir(self, tmp_path, capsys):
        assert run("report", tmp_path) == 1
        assert "records.jsonl" in capsys.readouterr().err


class TestEval:
    def test_matches_recorded_metrics(self, trained, capsys):
        capsys.readouterr()
        assert run("eval", trained / "full") == 0
        out = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        recs = [json.loads(line) for line in (trained / "full" / "records.jsonl").read_text().splitlines()]
        for o, r in zip(out, recs):
            assert o["run_id"] == r["run_id"] and o["auc"] == pytest.approx(r["auc"], abs=1e-12)


def test_ablate_six_rows(tmp_path, capsys):
    cfg = dict(TINY, training=dict(TINY["training"], max_epochs=2))
    assert run("ablate", "--config", write_cfg(tmp_path / "c.yaml", cfg), "--out", tmp_path / "abl") == 0
    table = json.loads((tmp_path / "abl" / "ablation.json").read_text())
    rows = {r["variant"]: r for r in table["rows"]}
    assert set(rows) == {"FULL", "MANUAL", "MIX", "DISCRETE", "NO-SOURCE", "NO-IMPO"}
    assert all(r["seeds"] == [0, 1] for r in rows.values())
    assert all("t_vs_full" in r for v, r in rows.items() if v != "FULL")
    for mixture in rows["DISCRETE"]["arch_mixtures_per_seed"].values():
        for doms in mixture.values():
            for ops in doms.values():
                assert sorted(ops.values()) == [0, 0, 0, 0, 1.0]
    assert "NO-IMPO" in capsys.readouterr().out
