from __future__ import annotations

from pathlib import Path

import pytest

from cellbox.ir import parse_program
from cellbox.spec import parse_spec, resolve_units

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_text(name: str) -> str:
    return (FIXTURES / name).read_text(encoding="utf-8")


def load_pair(program_text: str, spec_text: str):
    p = parse_program(program_text)
    return p, resolve_units(parse_spec(spec_text), p)


@pytest.fixture
def vec_pass():
    return load_pair(fixture_text("vec_pass.mir"), fixture_text("vec_pass.spec"))


@pytest.fixture
def two_units():
    return load_pair(fixture_text("two_units.mir"), fixture_text("two_units.spec"))


# -- acceptance criteria summary ----------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    detail = getattr(item, "criterion_detail", "")
    if rep.failed:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else detail
    _CRITERIA[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        verdict, title, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} {verdict}: {title}" + (f" -- {detail}" if detail else ""))


@pytest.fixture
def detail(request):
    """Record a one-line measurement for the criterion summary."""

    def record(text: str) -> None:
        request.node.criterion_detail = text
        print(text)

    return record
