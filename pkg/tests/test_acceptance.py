"""Acceptance suite: every criterion at its stated tolerance, one PASS/FAIL line each.

Run under pytest (the lines appear in the terminal summary) or directly with
``python tests/test_acceptance.py``.
"""

import sys

import pytest

from iblab import acceptance

NUMBERS = [number for number, *_ in acceptance.CRITERIA]
_LINES = []


@pytest.fixture(scope="module")
def results():
    evaluated, _ = acceptance.evaluate()
    _LINES[:] = [r.line() for r in evaluated]
    for line in _LINES:
        print(line)
    return {r.number: r for r in evaluated}


def summary_lines():
    return list(_LINES)


@pytest.mark.parametrize("number", NUMBERS, ids=[f"criterion_{n:02d}" for n in NUMBERS])
def test_criterion(results, number):
    result = results[number]
    failed = [f"{c.name}: {c.value:.6g} (needs {c.relation} {c.tolerance:g})"
              for c in result.checks if c.passed is False]
    assert result.passed, "\n".join(failed) or "no active checks"


def main():
    evaluated, _ = acceptance.evaluate()
    for r in evaluated:
        print(r.line())
    passed = sum(r.passed for r in evaluated)
    print(f"{passed}/{len(evaluated)} criteria passed")
    return 0 if passed == len(evaluated) else 1


if __name__ == "__main__":
    sys.exit(main())
