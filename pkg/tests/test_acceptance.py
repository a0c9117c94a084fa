"""Acceptance criteria 1-10, each at its stated threshold.

Prints one PASS/FAIL line per criterion. Run directly for just the lines:

    python3 tests/test_acceptance.py
"""
import sys

import pytest

from smemvqa import scenarios

_CACHE: dict = {}  # training runs shared between criteria 2, 3 and 9


def _line(number: int, result) -> str:
    return f"criterion {number:>2} {result.line()} ({result.seconds:.1f}s)"


@pytest.mark.parametrize("number, name", list(enumerate(scenarios.CRITERIA, start=1)))
def test_criterion(number, name, capsys):
    result = scenarios.run(name, _CACHE)
    with capsys.disabled():
        print("\n" + _line(number, result))
    assert result.passed, result.detail


if __name__ == "__main__":
    ok = True
    for number, name in enumerate(scenarios.CRITERIA, start=1):
        result = scenarios.run(name, _CACHE)
        ok &= result.passed
        print(_line(number, result), flush=True)
    sys.exit(0 if ok else 2)
