import json

import numpy as np
import pytest

from armmt import cli
from armmt.training import NumericError


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "tiny.sessions.jsonl"
    code = cli.main(
        [
            "gen-data",
            "--sessions", "12",
            "--seed", "3",
            "--catalog-size", "240",
            "--categories", "8",
            "--out", str(path),
        ]
    )
    assert code == 0
    return path


@pytest.fixture(scope="module")
def ckpt_file(tmp_path_factory, data_file):
    path = tmp_path_factory.mktemp("cli") / "model.ckpt"
    code = cli.main(
        [
            "train",
            "--data", str(data_file),
            "--variant", "full",
            "--epochs", "1",
            "--batch", "8",
            "--seed", "1",
            "--out", str(path),
        ]
    )
    assert code == 0
    return path


class TestUsage:
    def test_train_without_data_is_usage_error(self, capsys):
        code, out, err = run(["train", "--out", "x.ckpt"], capsys)
        assert code == 1
        assert "required" in err or "usage" in err

    def test_unknown_flag_rejected(self, capsys):
        code, out, err = run(["gen-data", "--sessions", "1", "--out", "x", "--bogus"], capsys)
        assert code == 1

    def test_defaults_echoed_before_work(self, capsys):
        # missing file fails after the config echo, which must show the defaults
        code, out, err = run(
            ["train", "--data", "/nonexistent.jsonl", "--out", "/tmp/x.ckpt"], capsys
        )
        assert code == 2
        line = next(l for l in out.splitlines() if l.startswith("config[train]"))
        resolved = json.loads(line.split(": ", 1)[1])
        assert resolved["lr"] == 0.07
        assert resolved["epochs"] == 20
        assert resolved["batch"] == 128
        assert resolved["lam"] == 1.0

    def test_missing_dataset_is_data_error(self, capsys):
        code, out, err = run(["eval", "--ckpt", "/no.ckpt", "--data", "/no.jsonl"], capsys)
        assert code == 2

    def test_numeric_failure_maps_to_exit_3(self, capsys, monkeypatch):
        def boom(args):
            raise NumericError("synthetic")

        monkeypatch.setitem(cli._COMMANDS, "train", boom)
        code, out, err = run(
            ["train", "--data", "x", "--out", "y"], capsys
        )
        assert code == 3


class TestGenData:
    def test_deterministic_output(self, tmp_path, capsys):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        args = ["gen-data", "--sessions", "6", "--seed", "5",
                "--catalog-size", "240", "--categories", "8"]
        assert cli.main(args + ["--out", str(a)]) == 0
        assert cli.main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_bad_mix_is_data_error(self, tmp_path, capsys):
        code, out, err = run(
            ["gen-data", "--sessions", "2", "--mix", "0.5,0.2,0.2",
             "--out", str(tmp_path / "x.jsonl")],
            capsys,
        )
        assert code == 2


class TestPipeline:
    def test_train_prints_loss_log(self, data_file, tmp_path, capsys):
        out_path = tmp_path / "m.ckpt"
        log_path = tmp_path / "loss.csv"
        code, out, err = run(
            ["train", "--data", str(data_file), "--epochs", "1", "--batch", "8",
             "--seed", "2", "--out", str(out_path), "--loss-log", str(log_path)],
            capsys,
        )
        assert code == 0
        lines = log_path.read_text().strip().splitlines()
        assert len(lines) == 1
        epoch, loss = lines[0].split(",")
        assert epoch == "0"
        assert float(loss) > 0

    def test_eval_writes_report(self, data_file, ckpt_file, tmp_path, capsys):
        report_path = tmp_path / "report.jsonl"
        code, out, err = run(
            ["eval", "--ckpt", str(ckpt_file), "--data", str(data_file),
             "--out", str(report_path)],
            capsys,
        )
        assert code == 0
        record = json.loads(report_path.read_text().strip())
        assert 0.0 <= record["auc"] <= 1.0
        assert record["sessions"] == 12

    def test_rerank_output_contract(self, data_file, ckpt_file, capsys):
        code, out, err = run(
            ["rerank", "--ckpt", str(ckpt_file), "--session-file", str(data_file)],
            capsys,
        )
        assert code == 0
        rows = [l for l in out.splitlines() if l and l[0].isdigit() and "," in l]
        assert len(rows) == 30
        scores = [float(r.split(",")[2]) for r in rows]
        assert all(a >= b for a, b in zip(scores, scores[1:]))
        assert abs(sum(scores) - 1.0) < 1e-6

    def test_inspect_writes_dump(self, data_file, ckpt_file, tmp_path, capsys):
        out_path = tmp_path / "weights.csv"
        code, out, err = run(
            ["inspect", "--ckpt", str(ckpt_file), "--data", str(data_file),
             "--out", str(out_path), "--limit", "3"],
            capsys,
        )
        assert code == 0
        lines = out_path.read_text().strip().splitlines()
        assert len(lines) == 1 + 3 * 30
