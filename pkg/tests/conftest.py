import os
import sys

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA = os.path.join(ROOT, "data", "historical")

sys.path.insert(0, os.path.join(ROOT, "src"))


@pytest.fixture
def data_dir():
    return DATA


ACCEPTANCE = []


def record_criterion(number, passed, detail):
    ACCEPTANCE.append((number, bool(passed), detail))
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
