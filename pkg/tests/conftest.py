import shutil
import sys
import time
from pathlib import Path

import pytest

from spacte import cli
from spacte.certify import read_records

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk_blobs.cfg"


def write_config(path: Path, text: str, **overrides) -> Path:
    lines = [text.rstrip()]
    for key, value in overrides.items():
        lines.append(f"{key.replace('__', '.')} = {value}")
    path.write_text("\n".join(lines) + "\n")
    return path


def desk_run(workdir: Path, workers: int, **overrides):
    """Train and certify the desk config into ``workdir``; TSV rows are returned without the time column."""
    start = time.perf_counter()
    workdir.mkdir(parents=True, exist_ok=True)
    cfg = write_config(workdir / "run.cfg", DESK_CONFIG.read_text(), run__output_dir=str(workdir / "out"),
                       **overrides)
    assert cli.main(["train", str(cfg)]) == 0
    ckpt = workdir / "out" / "checkpoints" / "final.ckpt"
    assert cli.main(["certify", str(cfg), str(ckpt), "--workers", str(workers)]) == 0
    tsv = workdir / "out" / "certify.tsv"
    rows = [line.rsplit("\t", 1)[0] for line in tsv.read_text().splitlines()]
    return {
        "config": cfg,
        "summary": (workdir / "out" / "summary.txt").read_text(),
        "rows": rows,
        "records": read_records(tsv),
        "checkpoint": ckpt,
        "tsv": tsv,
        "seconds": time.perf_counter() - start,
    }


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Two independent same-seed desk runs, certified with 1 and 4 workers."""
    base = tmp_path_factory.mktemp("desk")
    a = desk_run(base / "a", workers=1)
    b = desk_run(base / "b", workers=4)
    yield a, b
    shutil.rmtree(base, ignore_errors=True)


def pytest_terminal_summary(terminalreporter):
    module = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
