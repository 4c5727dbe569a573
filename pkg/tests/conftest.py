import math

import numpy as np
import pytest


def binom_sigma(p, n):
  return math.sqrt(p * (1.0 - p) / n)


@pytest.fixture
def gen():
  return np.random.default_rng(20261018)


_ACCEPTANCE_LINES = []


class AcceptanceLog:
  """Collects one PASS/FAIL line per acceptance criterion."""

  def record(self, number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


@pytest.fixture
def acceptance():
  return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
  if not _ACCEPTANCE_LINES:
    return
  terminalreporter.section("acceptance criteria")
  for _, line in sorted(_ACCEPTANCE_LINES):
    terminalreporter.write_line(line)
