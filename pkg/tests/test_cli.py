import re

import pytest

from cscon.cli import main
from cscon.training import read_results

TINY_CFG = """
[model]
depth = 1
dim = 16
heads = 2
n_patches = 8
patch_size = 8
[train]
epochs = 2
warmup_epochs = 1
batch_size = 8
checkpoint_every = 1
[data]
n_train_per_class = 2
n_test_per_class = 2
n_points = 64
classes = sphere, cube, plane, torus
"""

ERR = re.compile(r"^error: (usage|config|io|diverged): \S.*$")


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert main(["gen-data", "--config", str(root / "tiny.cfg"), "--out", str(root / "data")]) == 0
    args = ["pretrain", "--config", str(root / "tiny.cfg"), "--data", str(root / "data"), "--seed", "1"]
    assert main(args + ["--out", str(root / "a")]) == 0
    assert main(args + ["--out", str(root / "b")]) == 0
    return root


def single_error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and ERR.match(err[0]), err
    return err[0]


def test_run_directory_contents(run_dir):
    for d in ("a", "b"):
        names = {p.name for p in (run_dir / d).iterdir()}
        assert {"config.resolved", "trace.tsv", "final.cscon", "ckpt_epoch001.cscon"} <= names
    assert "seed = 1" in (run_dir / "a" / "config.resolved").read_text()


def test_pretrain_twice_gives_identical_traces(run_dir):
    assert (run_dir / "a" / "trace.tsv").read_bytes() == (run_dir / "b" / "trace.tsv").read_bytes()


@pytest.mark.parametrize("protocol", ["linear", "mlp3", "full"])
def test_probe_prints_accuracy_and_writes_row(run_dir, tmp_path, capsys, protocol):
    args = ["probe", "--checkpoint", str(run_dir / "a" / "final.cscon"), "--data", str(run_dir / "data")]
    rc = main(args + ["--protocol", protocol, "--seeds", "0", "--epochs", "2", "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert re.fullmatch(r"accuracy: \d\.\d{4} ± \d\.\d{4}\n", out)
    rows = read_results(tmp_path / "results.tsv")
    assert [(r.name, r.value) for r in rows] == [("probe", protocol)]


def test_fewshot(run_dir, tmp_path, capsys):
    rc = main(
        ["fewshot", "--checkpoint", str(run_dir / "a" / "final.cscon"), "--data", str(run_dir / "data"),
         "--way", "2", "--shot", "1", "--trials", "2", "--queries", "2", "--out", str(tmp_path)]
    )
    assert rc == 0 and capsys.readouterr().out.startswith("accuracy: ")
    assert read_results(tmp_path / "results.tsv")[0].value == "2way1shot"


def test_export_embeddings(run_dir, tmp_path):
    out = tmp_path / "emb.tsv"
    rc = main(["export-embeddings", "--checkpoint", str(run_dir / "a" / "final.cscon"), "--data", str(run_dir / "data"), "--out", str(out)])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 8 and len(lines[0].split("\t")) == 1 + 2 * 16


def test_ablate_tau_grid(run_dir, tmp_path, capsys):
    rc = main(
        ["ablate", "--sweep", "tau", "--config", str(run_dir / "tiny.cfg"), "--data", str(run_dir / "data"),
         "--out", str(tmp_path), "--seeds", "0", "--epochs", "2"]
    )
    assert rc == 0
    rows = read_results(tmp_path / "results.tsv")
    assert [float(r.value) for r in rows] == [0.05, 0.1, 0.5, 1.0, 2.0]
    assert all(r.name == "tau" for r in rows)
    assert (tmp_path / "config.resolved").exists()
    assert len(capsys.readouterr().out.splitlines()) == 5


def test_bad_config_value_exits_2_with_field(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("[model]\nmask_ratio = 1.2\n")
    assert main(["pretrain", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == 2
    assert "model.mask_ratio" in single_error_line(capsys)


def test_bad_flag_value_exits_2(tmp_path, capsys):
    assert main(["pretrain", "--out", str(tmp_path), "--tau", "-1"]) == 2
    assert "model.tau" in single_error_line(capsys)
    assert main(["ablate", "--sweep", "tau", "--values", "x", "--out", str(tmp_path)]) == 2
    single_error_line(capsys)


def test_unknown_flag_rejected(capsys):
    assert main(["probe", "--checkpoint", "x", "--data", "y", "--bogus"]) == 2
    assert single_error_line(capsys).startswith("error: usage:")


def test_missing_checkpoint_exits_3_with_path(run_dir, tmp_path, capsys):
    missing = tmp_path / "nope.cscon"
    assert main(["probe", "--checkpoint", str(missing), "--data", str(run_dir / "data")]) == 3
    assert str(missing) in single_error_line(capsys)


def test_missing_data_exits_3(run_dir, tmp_path, capsys):
    assert main(["probe", "--checkpoint", str(run_dir / "a" / "final.cscon"), "--data", str(tmp_path / "none")]) == 3
    assert str(tmp_path / "none") in single_error_line(capsys)


def test_corrupt_checkpoint_exits_3(run_dir, tmp_path, capsys):
    bad = tmp_path / "bad.cscon"
    bad.write_bytes(b"garbage")
    assert main(["export-embeddings", "--checkpoint", str(bad), "--data", str(run_dir / "data"), "--out", str(tmp_path / "e")]) == 3
    assert "bad.cscon" in single_error_line(capsys)
