import re

import numpy as np
import pytest

from aptforecast import data


def central_diff(fn, arrays, h=1e-4):
    """Numerical gradient of a scalar numpy function, one entry at a time."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = fn()
            a[i] = old - h
            down = fn()
            a[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


@pytest.fixture(scope="session")
def synth_hourly():
    return data.synthesize(140, "hourly", channels=2, seed=1)


@pytest.fixture
def write_series(tmp_path):
    def _write(lines, name="series.csv"):
        path = tmp_path / name
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path
    return _write


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Records one PASS/FAIL/SKIP line per acceptance criterion, then asserts."""

    def _record(number, title, ok, detail="", skip=False):
        status = "SKIP" if skip else ("PASS" if ok else "FAIL")
        line = f"[{status}] criterion {number}: {title}" + (f" | {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        if skip:
            pytest.skip(line)
        assert ok, line

    return _record


def _criterion_key(line):
    label = re.match(r".*?criterion (\d+)(\w*):", line)
    return int(label.group(1)), label.group(2)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_criterion_key):
            terminalreporter.write_line(line)
