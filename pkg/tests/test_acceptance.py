"""Acceptance criteria, one test each.

Every test prints a single PASS/FAIL line; the lines are repeated in the
terminal summary. Criteria 7, 8 and 10 train detectors and take minutes.
"""

import pytest

from snapfit.harness import acceptance

RESULTS = {}


def _check(n):
    r = acceptance.run_check(n)
    RESULTS[n] = r.line()
    print(r.line())
    assert r.passed, r.line()


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6, 9, 11])
def test_criterion(n):
    _check(n)


@pytest.mark.slow
@pytest.mark.parametrize("n", [7, 8, 10])
def test_criterion_trained(n):
    _check(n)
