"""Shared fixtures and the per-criterion acceptance summary."""

import re

import pytest

from progattr.data import SyntheticConfig, generate_synthetic, preset, split_train_test
from progattr.training import TrainConfig, train_multilabel, train_progressive

CRITERIA = {
    1: "overall-accuracy arithmetic on reference table rows",
    2: "finite-difference gradient checks",
    3: "progressive schedule structure and freeze invariants",
    4: "shared-base bitwise equivalence",
    5: "missing-label utilisation",
    6: "learnability on noise-free synthetic data",
    7: "attribute-order robustness",
    8: "model size relationship and round trip",
    9: "inference counters and latency",
    10: "PR sweep equals brute force",
    11: "occlusion probe localisation",
}

_results: dict = {}
_ID = re.compile(r"test_acceptance\.py::test_c(\d+)_")


def pytest_runtest_logreport(report):
    m = _ID.search(report.nodeid)
    if not m or (report.when != "call" and report.passed):
        return
    n = int(m.group(1))
    entry = _results.setdefault(n, {"passed": True, "details": []})
    if report.failed or report.skipped:
        entry["passed"] = False
    for key, value in report.user_properties:
        if key == "detail" and report.when == "call":
            entry["details"].append(str(value))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in _results:
            continue
        entry = _results[n]
        status = "PASS" if entry["passed"] else "FAIL"
        detail = "; ".join(entry["details"])
        tr.write_line(f"criterion {n:2d} {status}  {CRITERIA[n]}" + (f"  [{detail}]" if detail else ""))


# trained models on the default synthetic task, shared across modules

DEFAULT_COUNT = 2000


@pytest.fixture(scope="session")
def default_task():
    cfg = SyntheticConfig(preset("jeans"), seed=0)
    ds, truth = generate_synthetic(cfg, DEFAULT_COUNT)
    train, test = split_train_test(ds, 0.8, 0)
    return cfg, ds, train, test


@pytest.fixture(scope="session")
def default_progressive(default_task):
    _, _, train, _ = default_task
    return train_progressive(train, TrainConfig(seed=0))


@pytest.fixture(scope="session")
def default_multilabel(default_task):
    _, _, train, _ = default_task
    return train_multilabel(train, TrainConfig(seed=0))
