import pytest

from tsskd.data import SceneSpec, collate, generate


@pytest.fixture(scope="session")
def batch():
    return collate(generate(SceneSpec(), 2, seed=0))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
