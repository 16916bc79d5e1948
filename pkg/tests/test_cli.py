import hashlib
import subprocess
import sys

import pytest

from graphstad.cli import main

SMALL = """\
world:
  n_runs: 2
  train_ls: 30
  test_ls: 20
arch:
  cnn_features: [2, 4, 4, 4]
  gnn_features: [4, 4]
  lstm_sizes: [6, 4]
  latent: 4
train:
  epochs: 2
  patience: 2
renorm:
  max_iters: 200
  patience: 50
"""


def _digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(directory).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _chain(root, cfg):
    base = ["--config", str(cfg)]
    d, r, m, i, s = (root / n for n in ("data", "renorm", "ae", "inj", "scores"))
    assert main(["gen-data", *base, "--out", str(d)]) == 0
    assert main(["train-renorm", *base, "--data", str(d), "--out", str(r)]) == 0
    assert main(["train-ae", *base, "--data", str(d), "--renorm", str(r), "--out", str(m)]) == 0
    assert main(["inject", *base, "--data", str(d), "--kind", "dead", "--out", str(i)]) == 0
    assert main(["score", *base, "--data", str(i), "--renorm", str(r), "--model", str(m), "--out", str(s)]) == 0
    assert main(["evaluate", *base, "--scores", str(s), "--truth", str(i / "ground_truth.csv"),
                 "--out", str(root / "eval")]) == 0
    assert main(["report", *base, "--data", str(i), "--renorm", str(r), "--scores", str(s),
                 "--truth", str(i / "ground_truth.csv"), "--out", str(root / "report")]) == 0
    return d


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    cfg = tmp_path_factory.mktemp("cfg") / "small.yaml"
    cfg.write_text(SMALL)
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    data = _chain(a, cfg)
    before = _digest(data)
    _chain(b, cfg)
    return a, b, before


def test_full_chain_outputs(chain):
    a, _, _ = chain
    for p in ("data/segmentation.csv", "renorm/summary.json", "ae/history.csv", "inj/ground_truth.csv",
              "scores/report.csv", "eval/eval.csv", "report/depth_totals.csv", "report/score_histogram.csv"):
        assert (a / p).is_file(), p
    header = (a / "eval/eval.csv").read_text().splitlines()[0]
    assert "fpr" in header and "anchor" in header


def test_rerun_byte_identical(chain):
    a, b, _ = chain
    for part in ("data", "renorm", "ae", "inj", "scores", "eval", "report"):
        assert _digest(a / part) == _digest(b / part), part


def test_inputs_not_mutated(chain):
    a, _, before = chain
    assert _digest(a / "data") == before


def test_evaluate_smoke(capsys):
    assert main(["evaluate"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split()[:2] == ["anchor", "precision"]
    assert len(out) == 4


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.split()[-1] in ("ok",) or "kinks=" in line for line in lines)
    assert not any("FAIL" in line for line in lines)


def test_error_line_and_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "graphstad.cli", "train-renorm", "--data", str(tmp_path / "nope"),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 2
    line = proc.stderr.strip().splitlines()[-1]
    assert line.startswith("graphstad: error stage=train-renorm kind=") and 'message="' in line


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  epoch: 2\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "kind=ConfigError" in capsys.readouterr().err
