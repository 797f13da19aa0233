import os
import shutil
import time
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = sorted((ROOT / "configs").glob("*.ini"))

ACCEPTANCE = {}


def record(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def suite(tmp_path_factory):
    """Run every shipped config once; map stem -> (result, seconds)."""
    from cmaflab.experiment import run_experiment

    base = tmp_path_factory.mktemp("suite")
    out, total = {}, 0.0
    threads = min(4, os.cpu_count() or 1)
    for cfg in CONFIGS:
        t0 = time.perf_counter()
        res = run_experiment(cfg, base / cfg.stem, threads=threads)
        dt = time.perf_counter() - t0
        total += dt
        out[cfg.stem] = (res, dt)
    out["_total"] = total
    yield out
    shutil.rmtree(base, ignore_errors=True)
