import csv
import hashlib
import json

import pytest
import torch

from hypino.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK, main, resolve
from hypino.data import read_dataset
from hypino.hypernet import Hypernet, HypernetConfig, save_checkpoint

TINY_TRAIN = ["--batches", "2", "--batch-size", "2", "--phase1-batches", "1", "--n-interior", "32", "--resolution", "16", "--blocks", "2"]


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    torch.manual_seed(0)
    m = Hypernet(HypernetConfig(resolution=16, blocks=2, base_channels=16, embed_channels=8, head_hidden=32))
    p = tmp_path_factory.mktemp("ck") / "tiny.ckpt"
    save_checkpoint(p, m)
    return p


def sha(path):
    return hashlib.sha1(path.read_bytes()).hexdigest()


def test_gen_data_counts_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.hds", tmp_path / "b.hds"
    args = ["gen-data", "--count", "12", "--supervised-frac", "0.5", "--resolution", "16", "--seed", "3"]
    assert main(args + ["--out", str(a)]) == EXIT_OK
    assert "6 supervised, 6 unsupervised" in capsys.readouterr().out
    assert main(args + ["--out", str(b)]) == EXIT_OK
    assert sha(a) == sha(b)
    meta, recs = read_dataset(a)
    assert sum(r.supervised for r in recs) == 6
    assert meta["run_config"]["seed"] == 3


def test_gen_data_seed_changes_output(tmp_path):
    main(["gen-data", "--count", "4", "--resolution", "16", "--seed", "1", "--out", str(tmp_path / "a")])
    main(["gen-data", "--count", "4", "--resolution", "16", "--seed", "2", "--out", str(tmp_path / "b")])
    assert sha(tmp_path / "a") != sha(tmp_path / "b")


@pytest.mark.parametrize(
    "argv",
    [
        ["gen-data", "--count", "3"],  # no --out
        ["gen-data", "--count", "x", "--out", "o"],
        ["gen-data", "--workers", "2", "--out", "o"],
        ["gen-data", "--operator-family", "cubic", "--out", "o"],
        ["eval", "--out", "o", "--checkpoint", "c", "--benchmarks", "ZZ"],
        ["finetune", "--out", "o", "--init", "magic"],
        ["selfcheck", "--suites", "nope"],
        ["no-such-command"],
    ],
)
def test_config_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_CONFIG


def test_missing_input_exits_4(tmp_path):
    rc = main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path / "e")])
    assert rc == EXIT_IO


def test_unwritable_output_exits_4(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--count", "1", "--resolution", "16", "--out", str(blocker / "sub" / "d.hds")]) == EXIT_IO


def test_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\ncount = 7\nseed=5\n")
    env = {"HYPINO_COUNT": "9", "HYPINO_SEED": "8", "HYPINO_RESOLUTION": "32"}
    rc = resolve("gen-data", {"count": "3", "out": "x"}, str(cfg), env)
    assert rc.options["count"] == 3 and rc.sources["count"] == "flag"
    assert rc.seed == 5 and rc.sources["seed"] == "file"
    assert rc.options["resolution"] == 32 and rc.sources["resolution"] == "env"
    assert rc.options["supervised_frac"] == 0.5 and rc.sources["supervised_frac"] == "default"


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("colour = blue\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == EXIT_CONFIG


def test_train_writes_log_config_and_checkpoint(tmp_path):
    out = tmp_path / "run"
    assert main(["train", *TINY_TRAIN, "--out", str(out)]) == EXIT_OK
    rows = list(csv.reader((out / "train_log.csv").open()))
    assert rows[0] == ["batch", "phase", "lr", "J", "J_R", "J_D", "J_N", "J_S"]
    assert len(rows) == 3
    rc = json.loads((out / "run_config.json").read_text())
    assert rc["command"] == "train" and rc["options"]["batches"] == 2
    assert (out / "model.ckpt").exists()


def test_train_is_byte_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["train", *TINY_TRAIN, "--batches", "1", "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("train_log.csv", "model.ckpt"):
        assert sha(tmp_path / "a" / f) == sha(tmp_path / "b" / f)


def test_train_divergence_exits_3(tmp_path):
    args = ["train", *TINY_TRAIN, "--batches", "4", "--lr", "1e30", "--lr-min", "1e30", "--clip-norm", "0"]
    assert main(args + ["--out", str(tmp_path / "d")]) == EXIT_DIVERGED
    assert (tmp_path / "d" / "model.ckpt").exists()


def test_eval_rows(tiny_ckpt, tmp_path):
    out = tmp_path / "ev"
    rc = main(["eval", "--checkpoint", str(tiny_ckpt), "--benchmarks", "HZ,WV", "--rounds", "0,3,10", "--eval-nodes", "17", "--out", str(out)])
    assert rc == EXIT_OK
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + 6
    assert [l.split(",")[:2] for l in lines[1:4]] == [["HZ", "0"], ["HZ", "3"], ["HZ", "10"]]
    assert json.loads((out / "metrics.json").read_text())["relative_error"]["WV"][0] == 1.0


def test_eval_all_benchmarks(tiny_ckpt, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(tiny_ckpt), "--eval-nodes", "17", "--out", str(out)]) == EXIT_OK
    lines = (out / "metrics.csv").read_text().splitlines()
    assert {l.split(",")[0] for l in lines[1:]} == {"HT", "HZ", "HZ-G", "PS-C", "PS-L", "PS-G", "WV"}
    assert len(lines) == 8


@pytest.mark.parametrize("init", ["random", "checkpoint"])
def test_finetune_outputs(init, tiny_ckpt, tmp_path):
    out = tmp_path / "ft"
    spec = "random" if init == "random" else f"checkpoint:{tiny_ckpt}"
    args = ["finetune", "--benchmark", "HZ", "--init", spec, "--steps", "5", "--n-interior", "32", "--out", str(out)]
    assert main(args) == EXIT_OK
    rows = list(csv.reader((out / "convergence.csv").open()))
    assert rows[0] == ["step", "loss", "mse", "lr"] and len(rows) == 7
    assert (out / "theta.bin").stat().st_size > 5025 * 4


def test_selfcheck_passes_and_reports(tmp_path, capsys):
    report = tmp_path / "r.json"
    assert main(["selfcheck", "--scale", "0.05", "--out", str(report)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "5/5 suites passed" in out
    assert all(s["ok"] for s in json.loads(report.read_text())["suites"])


def test_selfcheck_fault_injection_fails(capsys):
    assert main(["selfcheck", "--inject-fault", "--suites", "symbolic,symbolic,mms", "--scale", "0.2"]) == 1
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert [l.split()[:2] for l in lines] == [["FAIL", "symbolic"], ["FAIL", "mms"]]
