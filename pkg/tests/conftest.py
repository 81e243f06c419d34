from __future__ import annotations

import numpy as np
import pytest

from dpflcert.data import partition_iid, synthesize_blobs


@pytest.fixture
def blobs():
    return synthesize_blobs(200, 5, 2, 3.0, seed=0)


@pytest.fixture
def federation(blobs):
    return blobs, partition_iid(blobs, 10, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, whatever the capture mode."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and rep.passed:
                continue
            number = nodeid.split("test_criterion_")[1].split("_")[0]
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((int(number), "PASS" if rep.passed else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for number, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}".rstrip())
