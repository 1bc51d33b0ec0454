import json
import subprocess
import sys

import pytest

from sgm.cli import CHECKPOINT_NAME, CONFIG_NAME, FEATURES_NAME, GRAPHS_NAME, LOG_NAME, main
from sgm.graphs import load_corpus

TRAIN_FLAGS = ["--batch", "4", "--lr", "0.005", "--d2", "4", "--dim", "8", "--epochs", "60"]


def run(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--seed", "7", "--pairs", "8", "--out", str(data)]) == 0
    for mode, name in (("SGM", "sgm"), ("OOM", "oom")):
        assert main(["train", "--data", str(data), "--out", str(root / name), "--mode", mode] + TRAIN_FLAGS) == 0
    return root


class TestSynth:
    def test_writes_loadable_corpus(self, tmp_path, capsys):
        code, _, _ = run(["synth", "--seed", "7", "--pairs", "16", "--out", str(tmp_path)], capsys)
        assert code == 0
        corpus = load_corpus(tmp_path / GRAPHS_NAME, tmp_path / FEATURES_NAME)
        assert len(corpus) == 16
        assert json.loads((tmp_path / CONFIG_NAME).read_text())["seed"] == 7

    def test_byte_identical(self, tmp_path, capsys):
        for d in ("a", "b"):
            assert run(["synth", "--seed", "3", "--pairs", "6", "--out", str(tmp_path / d)], capsys)[0] == 0
        for name in (GRAPHS_NAME, FEATURES_NAME):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_single_pair_is_usage_error(self, tmp_path, capsys):
        code, _, err = run(["synth", "--pairs", "1", "--out", str(tmp_path)], capsys)
        assert code == 1 and "pairs" in err

    def test_unwritable_path(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code, _, err = run(["synth", "--out", str(blocker / "sub")], capsys)
        assert code == 2 and "I/O" in err


class TestTrain:
    def test_outputs(self, workspace):
        out = workspace / "sgm"
        assert (out / CHECKPOINT_NAME).exists()
        records = [json.loads(line) for line in (out / LOG_NAME).read_text().splitlines()]
        assert [r["epoch"] for r in records] == list(range(1, 61))
        assert {"loss", "val_r1_sum"} <= set(records[0])
        assert json.loads((out / CONFIG_NAME).read_text())["lr"] == 0.005

    def test_oom_zero_gradient_logged(self, workspace):
        records = [json.loads(line) for line in (workspace / "oom" / LOG_NAME).read_text().splitlines()]
        check = [r for r in records if r.get("event") == "relationship_grad_check"]
        assert len(check) == 1 and check[0]["passed"] and check[0]["relationship_grad_mass"] == 0.0

    @pytest.mark.parametrize("flags", [["--batch", "1"], ["--lr", "0.1", "--flavor", "mscoco"],
                                       ["--clip-norm", "5", "--no-clip"], ["--mode", "BOTH"]])
    def test_usage_errors(self, workspace, tmp_path, capsys, flags):
        code, _, _ = run(["train", "--data", str(workspace / "data"), "--out", str(tmp_path)] + flags, capsys)
        assert code == 1

    def test_d1_mismatch(self, workspace, tmp_path, capsys):
        code, _, err = run(["train", "--data", str(workspace / "data"), "--out", str(tmp_path), "--d1", "5"], capsys)
        assert code == 1 and "5" in err and "8" in err

    def test_invalid_corpus(self, workspace, tmp_path, capsys):
        doc = json.loads((workspace / "data" / GRAPHS_NAME).read_text())
        doc["pairs"][0]["relationships"][0]["obj"] = 99
        (tmp_path / GRAPHS_NAME).write_text(json.dumps(doc))
        (tmp_path / FEATURES_NAME).write_bytes((workspace / "data" / FEATURES_NAME).read_bytes())
        code, _, err = run(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")], capsys)
        assert code == 1 and "99" in err

    def test_missing_data(self, tmp_path, capsys):
        code, _, _ = run(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)], capsys)
        assert code == 2


class TestEvalScore:
    def test_eval_report(self, workspace, tmp_path, capsys):
        report = tmp_path / "report.json"
        code, out, _ = run(["eval", "--checkpoint", str(workspace / "sgm" / CHECKPOINT_NAME),
                            "--data", str(workspace / "data"), "--report", str(report)], capsys)
        assert code == 0 and "R@1" in out
        payload = json.loads(report.read_text())
        assert [p["direction"] for p in payload] == ["caption-retrieval", "image-retrieval"]
        assert all(p["r1"] == 100.0 for p in payload)

    def test_eval_single_direction(self, workspace, capsys):
        code, out, _ = run(["eval", "--checkpoint", str(workspace / "sgm" / CHECKPOINT_NAME),
                            "--data", str(workspace / "data"), "--direction", "image-retrieval"], capsys)
        assert code == 0
        assert json.loads(out.splitlines()[-1])["direction"] == "image-retrieval"

    def test_tables_identical(self, workspace, capsys):
        argv = ["eval", "--checkpoint", str(workspace / "sgm" / CHECKPOINT_NAME), "--data", str(workspace / "data")]
        assert run(argv, capsys)[1] == run(argv, capsys)[1]

    def _score(self, workspace, capsys, run_name, i, j):
        code, out, _ = run(["score", "--checkpoint", str(workspace / run_name / CHECKPOINT_NAME),
                            "--data", str(workspace / "data"), "--image", str(i), "--caption", str(j)], capsys)
        assert code == 0
        return json.loads(out)

    def test_matching_pair_scores_highest(self, workspace, capsys):
        for i in range(8):
            s = [self._score(workspace, capsys, "sgm", i, j)["s_total"] for j in range(8)]
            assert all(s[i] > s[j] for j in range(8) if j != i)

    def test_score_breakdown(self, workspace, capsys):
        out = self._score(workspace, capsys, "sgm", 0, 0)
        assert abs(out["s_total"] - out["s_object"] - out["s_relationship"]) < 1e-12
        assert out["object_alignment"] and out["relationship_alignment"]

    def test_oom_relationship_score_is_zero(self, workspace, capsys):
        assert self._score(workspace, capsys, "oom", 0, 0)["s_relationship"] == 0.0

    def test_index_out_of_range(self, workspace, capsys):
        code, _, _ = run(["score", "--checkpoint", str(workspace / "sgm" / CHECKPOINT_NAME),
                          "--data", str(workspace / "data"), "--image", "8", "--caption", "0"], capsys)
        assert code == 1

    def test_dimension_mismatch(self, workspace, tmp_path, capsys):
        other = tmp_path / "d5"
        assert run(["synth", "--pairs", "4", "--d1", "5", "--out", str(other)], capsys)[0] == 0
        code, _, err = run(["eval", "--checkpoint", str(workspace / "sgm" / CHECKPOINT_NAME),
                            "--data", str(other)], capsys)
        assert code == 1 and "5" in err and "8" in err


class TestGradcheck:
    def test_passes_and_is_repeatable(self, capsys):
        argv = ["gradcheck", "--cases", "3", "--only", "matmul", "--only", "gru_cell"]
        code, out, _ = run(argv, capsys)
        assert code == 0 and "all passed" in out
        assert run(argv, capsys)[1] == out

    def test_strict_tolerance_fails(self, capsys):
        code, out, _ = run(["gradcheck", "--cases", "3", "--only", "tanh", "--tolerance", "1e-12"], capsys)
        assert code == 1 and "FAIL" in out


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sgm", "synth", "--pairs", "3", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / GRAPHS_NAME).exists()
