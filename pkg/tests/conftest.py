from __future__ import annotations

from pathlib import Path

import pytest

from kgrag.graph_store import load_graph_json, load_triples_tsv
from kgrag.llm import ScriptedLLM

FIXTURES = Path(__file__).parent / "fixtures"

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "seen": False})
    if report.when == "call" or report.failed:
        entry["seen"] = True
        if report.failed:
            entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["passed"] and entry["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}")


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def jamaica_store():
    return load_triples_tsv(FIXTURES / "jamaica.tsv", FIXTURES / "jamaica_entities.tsv")


@pytest.fixture(scope="session")
def cwq_store():
    return load_triples_tsv(FIXTURES / "cwq.tsv", FIXTURES / "cwq_entities.tsv")


@pytest.fixture(scope="session")
def northwind_store():
    return load_graph_json(FIXTURES / "northwind.json")


@pytest.fixture
def cwq_llm():
    return ScriptedLLM.from_file(FIXTURES / "cwq_script.yaml")
