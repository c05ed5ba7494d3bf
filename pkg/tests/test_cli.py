import csv
import json

import pytest

from sparse_ib.cli import CliError, RunConfig, apply_settings, main, read_config_file

TINY = """\
# tiny run for tests
num_train = 48
num_val = 16
num_test = 16
epochs = 2
patience = 2
embed_dim = 8
hidden_dim = 8
sparsity_runs = 5
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY)
    return path


def cli(*argv):
    return main([str(a) for a in argv])


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return err[0]


class TestConfig:
    def test_file_parsing_and_types(self, cfg_file):
        cfg = apply_settings(RunConfig(), read_config_file(cfg_file))
        assert cfg.synth.num_train == 48 and cfg.trainer.epochs == 2 and cfg.embed_dim == 8

    def test_lists_and_optional(self):
        cfg = apply_settings(RunConfig(), {"seeds": "0, 1,2", "pi_list": "0.1 0.3", "lam": "none",
                                           "learnable_pi": "true"})
        assert cfg.seeds == [0, 1, 2] and cfg.pi_list == [0.1, 0.3]
        assert cfg.objective.lam is None and cfg.objective.learnable_pi is True

    def test_unknown_key(self):
        with pytest.raises(CliError, match="unknown config key"):
            apply_settings(RunConfig(), {"bogus": "1"})

    def test_bad_value(self):
        with pytest.raises(CliError) as exc:
            apply_settings(RunConfig(), {"epochs": "ten"})
        assert exc.value.code == "CONFIG"

    def test_flags_override_file(self, cfg_file, tmp_path):
        out = tmp_path / "o"
        cfg_file.write_text(TINY + "pi = 0.3\nseeds = 4,5\n")
        assert cli("verify-ib", "--config", cfg_file, "--pi", 0.4, "--seed", 9, "--out", out) == 0
        snap = read_config_file(out / "config.txt")
        assert snap["pi"] == "0.4" and snap["seeds"] == "9" and snap["num_train"] == "48"

    def test_snapshot_round_trips(self, cfg_file, tmp_path):
        cli("verify-ib", "--config", cfg_file, "--out", tmp_path)
        again = apply_settings(RunConfig(), read_config_file(tmp_path / "config.txt"))
        assert again.flat() == apply_settings(RunConfig(), read_config_file(cfg_file)).flat() | {
            "out_dir": str(tmp_path)}


class TestErrors:
    def test_invalid_objective(self, cfg_file, tmp_path, capsys):
        assert cli("train", "--config", cfg_file, "--objective", "magic", "--out", tmp_path) == 2
        assert error_line(capsys).startswith("error: CONFIG: ")
        assert not (tmp_path / "model-seed0.json").exists()

    def test_invalid_combination_fails_before_training(self, cfg_file, tmp_path, capsys):
        cfg_file.write_text(TINY + "objective = sl0\nlearnable_pi = true\n")
        assert cli("train", "--config", cfg_file, "--out", tmp_path) == 2
        assert error_line(capsys).startswith("error: CONFIG: ")

    def test_unknown_key_in_file(self, cfg_file, tmp_path, capsys):
        cfg_file.write_text(TINY + "colour = blue\n")
        assert cli("generate", "--config", cfg_file, "--out", tmp_path) == 2
        assert "colour" in error_line(capsys)

    def test_missing_checkpoint_names_path(self, cfg_file, tmp_path, capsys):
        missing = tmp_path / "nope.json"
        assert cli("eval", "--config", cfg_file, "--checkpoint", missing, "--out", tmp_path) == 2
        line = error_line(capsys)
        assert line.startswith("error: CHECKPOINT: ") and "nope.json" in line

    def test_missing_dataset_names_path(self, cfg_file, tmp_path, capsys):
        assert cli("train", "--config", cfg_file, "--data", tmp_path / "absent", "--out", tmp_path) == 2
        line = error_line(capsys)
        assert line.startswith("error: DATA: ") and "absent" in line

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli("generate", "--config", tmp_path / "none.cfg") == 2
        assert error_line(capsys).startswith("error: CONFIG: ")


def test_generate_train_eval_pipeline(cfg_file, tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert cli("generate", "--config", cfg_file, "--out", data) == 0
    assert sorted(p.name for p in data.iterdir()) == ["config.txt", "test.jsonl", "train.jsonl", "val.jsonl"]

    assert cli("train", "--config", cfg_file, "--data", data, "--out", run, "--seed", 3) == 0
    ckpt = run / "model-seed3.json"
    header = (run / "epochs-seed3.tsv").read_text().splitlines()[0].split("\t")
    assert header[0] == "epoch" and header[-1] == "prior_pi"

    capsys.readouterr()
    assert cli("eval", "--config", cfg_file, "--data", data, "--checkpoint", ckpt, "--out", run) == 0
    first = (run / "metrics.json").read_bytes()
    assert capsys.readouterr().out.encode() == first
    assert cli("eval", "--config", cfg_file, "--data", data, "--checkpoint", ckpt, "--out", run) == 0
    assert (run / "metrics.json").read_bytes() == first

    payload = json.loads(first)
    assert payload["runs"][0]["seed"] == 3
    assert set(payload) == {"runs", "mean", "std"}
    assert payload["std"]["iou_f1"] == 0.0


def test_eval_trains_per_seed(cfg_file, tmp_path):
    cfg_file.write_text(TINY + "seeds = 0,1\n")
    assert cli("eval", "--config", cfg_file, "--out", tmp_path) == 0
    payload = json.loads((tmp_path / "metrics.json").read_text())
    assert [r["seed"] for r in payload["runs"]] == [0, 1]
    vals = [r["metrics"]["task_metric"] for r in payload["runs"]]
    assert payload["mean"]["task_metric"] == pytest.approx(sum(vals) / 2)


def test_sweep_rows_and_header(cfg_file, tmp_path):
    cfg_file.write_text(TINY + "epochs = 1\nseeds = 0,1,2,3,4\npi_list = 0.1,0.2,0.3,0.4,0.5\n")
    assert cli("sweep", "--config", cfg_file, "--out", tmp_path) == 0
    with (tmp_path / "sweep.csv").open() as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "pi,seed,task_metric,iou_f1,token_f1,sparsity_mean,sparsity_var"
    rows = list(csv.DictReader(lines))
    assert len(rows) == 25
    assert {(float(r["pi"]), int(r["seed"])) for r in rows} == {
        (p, s) for p in (0.1, 0.2, 0.3, 0.4, 0.5) for s in range(5)}


def test_verify_ib_default(tmp_path, capsys):
    assert cli("verify-ib", "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert out.startswith("default: mi=")
    report = json.loads((tmp_path / "ib_report.json").read_text())
    assert report["bound_holds"]
    d = report["reports"]["default"]
    assert d["bound"] >= d["mi"] and d["decomposition_residual"] < 1e-12


def test_grad_check(tmp_path, capsys):
    assert cli("grad-check", "--out", tmp_path) == 0
    table = (tmp_path / "gradcheck.txt").read_text().splitlines()
    assert len(table) == 33
    assert all(row.endswith("pass") for row in table)
