import sys
from collections import OrderedDict
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# criterion id -> list of (part, passed, detail)
_ACCEPTANCE = OrderedDict()


@pytest.fixture
def acceptance():
    """Record one part of an acceptance criterion for the terminal summary."""

    def record(criterion, part, passed, detail=""):
        _ACCEPTANCE.setdefault(criterion, []).append((part, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for criterion in sorted(_ACCEPTANCE, key=lambda c: (int("".join(filter(str.isdigit, c)) or 0), c)):
        parts = _ACCEPTANCE[criterion]
        ok = all(p for _, p, _ in parts)
        summary = "; ".join(f"{name}: {'pass' if p else 'FAIL'}{f' ({d})' if d else ''}" for name, p, d in parts)
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {criterion}  {summary}")
