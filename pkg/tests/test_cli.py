import csv
import logging

import numpy as np
import pytest

from conftest import DESK_CONFIG, write_config
from spacte import cli
from spacte.config import KEYS
from spacte.data import cifar10_bytes
from spacte.metrics import acr

BLOBS = DESK_CONFIG.read_text()


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_missing_sigma_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg", "[train]\nepochs = 1\n")
    code, _, err = run(capsys, "train", cfg)
    assert code == 2 and "noise.sigma" in err


def test_missing_file_exit_2(tmp_path, capsys):
    code, _, _ = run(capsys, "train", tmp_path / "nope.cfg")
    assert code == 2


def test_train_writes_artifacts_and_repeats(desk_runs):
    a, b = desk_runs
    assert a["checkpoint"].exists()
    assert a["summary"] == b["summary"]
    assert "epochs=20" in a["summary"]
    log = (a["checkpoint"].parents[1] / "train_log.tsv").read_text().splitlines()
    assert log[0].split("\t") == ["epoch", "lambda", "lr", "loss_h1", "loss_h2", "loss_h3", "cosine_loss"]
    assert len(log) == 21
    assert (a["checkpoint"].parent / "epoch_0010.ckpt").exists()


def test_certify_output(desk_runs, capsys):
    a, _ = desk_runs
    assert len(a["records"]) == 100
    assert a["rows"][0] == "idx\tlabel\tpredict\tradius\tcorrect"
    assert [r.idx for r in a["records"][:3]] == [0, 20, 40]
    assert (a["tsv"].with_suffix(".curve.csv")).exists()


def test_certify_alpha_one_exit_2(desk_runs, tmp_path, capsys):
    a, _ = desk_runs
    cfg = write_config(tmp_path / "c.cfg", BLOBS, certify__alpha=1, run__output_dir=tmp_path)
    code, _, err = run(capsys, "certify", cfg, a["checkpoint"])
    assert code == 2 and "certify.alpha" in err


def test_certify_architecture_mismatch_exit_2(desk_runs, tmp_path, capsys):
    a, _ = desk_runs
    cfg = write_config(tmp_path / "c.cfg", BLOBS, heads__num_heads=2, run__output_dir=tmp_path)
    code, _, err = run(capsys, "certify", cfg, a["checkpoint"])
    assert code == 2 and "architecture" in err


def test_certify_sigma_mismatch_warns(desk_runs, tmp_path, capsys, caplog):
    a, _ = desk_runs
    cfg = write_config(tmp_path / "c.cfg", BLOBS, noise__sigma=0.5, certify__n=50, certify__max_examples=2,
                       run__output_dir=tmp_path)
    with caplog.at_level(logging.WARNING, logger="spacte"):
        code, _, _ = run(capsys, "certify", cfg, a["checkpoint"])
    assert code == 0
    assert any("sigma" in r.message for r in caplog.records)


def test_stride_20_of_10000_gives_500_rows(desk_runs, tmp_path, capsys):
    a, _ = desk_runs
    cfg = write_config(tmp_path / "c.cfg", BLOBS, data__test_count=10_000, certify__n0=5, certify__n=20,
                       run__output_dir=tmp_path)
    code, out, _ = run(capsys, "certify", cfg, a["checkpoint"])
    assert code == 0 and "examples=500" in out
    lines = (tmp_path / "certify.tsv").read_text().splitlines()
    assert len(lines) == 501
    assert lines[-1].split("\t")[0] == "9980"


def test_analyze_gap_histogram(desk_runs, tmp_path, capsys):
    a, _ = desk_runs
    out_csv = tmp_path / "gap.csv"
    code, out, _ = run(capsys, "analyze", a["tsv"], a["checkpoint"], "--mode", "gap-histogram",
                       "--draws", 10_000, "--out", out_csv, "--index", 20)
    assert code == 0
    rows = list(csv.DictReader(out_csv.open()))
    assert len(rows) == 50
    assert sum(int(r["count"]) for r in rows) == 10_000


def test_analyze_easy_hard(desk_runs, tmp_path, capsys):
    a, _ = desk_runs
    out_csv = tmp_path / "eh.csv"
    code, _, _ = run(capsys, "analyze", a["tsv"], a["checkpoint"], "--mode", "easy-hard", "--threshold", 0,
                     "--out", out_csv)
    assert code == 0
    groups = {r["group"]: r for r in csv.DictReader(out_csv.open())}
    records = a["records"]
    # with threshold 0 every correct record is easy
    assert int(groups["easy"]["count"]) == sum(r.radius > 0 for r in records) >= sum(r.correct for r in records)
    assert int(groups["hard"]["count"]) == sum(r.radius == 0 and not r.correct for r in records)


def test_analyze_easy_loss_below_hard_at_median(desk_runs, tmp_path, capsys):
    a, _ = desk_runs
    median = float(np.median([r.radius for r in a["records"]]))
    out_csv = tmp_path / "eh.csv"
    code, _, _ = run(capsys, "analyze", a["tsv"], a["checkpoint"], "--mode", "easy-hard", "--threshold", median,
                     "--out", out_csv)
    assert code == 0
    groups = {r["group"]: r for r in csv.DictReader(out_csv.open())}
    assert float(groups["easy"]["mean_smoothed_loss"]) < float(groups["hard"]["mean_smoothed_loss"])


def test_analyze_errors(desk_runs, tmp_path, capsys):
    a, _ = desk_runs
    empty = tmp_path / "empty.tsv"
    empty.write_text("idx\tlabel\tpredict\tradius\tcorrect\ttime\n")
    assert run(capsys, "analyze", empty, a["checkpoint"], "--mode", "easy-hard")[0] == 2
    assert run(capsys, "analyze", a["tsv"], a["checkpoint"], "--mode", "bogus")[0] == 2


def test_count_reference(capsys):
    code, out, _ = run(capsys, "count", "--resnet110-reference")
    assert code == 0
    for n in ("1,730,714", "6,995,138", "8,653,570"):
        assert f"{n} parameters (matches {n})" in out


def test_count_mismatch_exit_1(capsys, monkeypatch):
    monkeypatch.setitem(cli.RESNET110_REFERENCE, "single", 1)
    code, out, _ = run(capsys, "count", "--resnet110-reference")
    assert code == 1 and "MISMATCH single: computed 1,730,714 expected 1" in out


def test_count_config(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg", "noise.sigma = 0.5\n")
    code, out, _ = run(capsys, "count", cfg, "--kv")
    assert code == 0 and "params_total_multihead=6995138" in out


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in KEYS:
        assert key.name in out


def test_print_defaults(capsys):
    code, out, _ = run(capsys, "print-defaults")
    assert code == 0 and "[certify]" in out and "n = 100000" in out
    assert run(capsys, "--print-defaults")[1] == out


def test_no_command_exit_2(capsys):
    assert run(capsys)[0] == 2


def test_cifar_pipeline(tmp_path, capsys):
    rng = np.random.default_rng(0)
    data = tmp_path / "cifar"
    data.mkdir()
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    for name in names:
        pixels = rng.integers(0, 256, size=(8, 3, 32, 32), dtype=np.uint8)
        (data / name).write_bytes(cifar10_bytes(pixels, rng.integers(0, 10, size=8)))
    cfg = write_config(tmp_path / "c.cfg", f"""
[model]
arch = desk_cnn
[heads]
num_heads = 2
[noise]
sigma = 0.5
[train]
epochs = 2
batch_size = 16
augment = true
[certify]
n0 = 5
n = 20
stride = 3
[data]
path = {data}
[run]
output_dir = {tmp_path / 'out'}
""")
    assert run(capsys, "train", cfg)[0] == 0
    ckpt = tmp_path / "out" / "checkpoints" / "final.ckpt"
    code, out, _ = run(capsys, "certify", cfg, ckpt)
    assert code == 0 and "examples=3" in out
    # analyze falls back to the config stored in the checkpoint
    code, _, _ = run(capsys, "analyze", tmp_path / "out" / "certify.tsv", ckpt, "--mode", "gap-histogram",
                     "--draws", 100)
    assert code == 0
    assert (tmp_path / "out" / "gap_histogram_0.csv").exists()


def test_runtime_failure_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    cfg = write_config(tmp_path / "c.cfg", BLOBS, run__output_dir=tmp_path)
    assert run(capsys, "certify", cfg, bad)[0] == 3
