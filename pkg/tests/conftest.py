import sys
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    @contextmanager
    def run(number: int, title: str):
        details: dict = {}
        t0 = time.perf_counter()
        try:
            yield details
        except BaseException as exc:
            line = f"[FAIL] criterion {number}: {title} ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
            lines.append(line)
            print(line)
            raise
        extra = ", ".join(f"{k}={v}" for k, v in details.items())
        line = f"[PASS] criterion {number}: {title} ({extra}{', ' if extra else ''}{time.perf_counter() - t0:.1f}s)"
        lines.append(line)
        print(line)

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
