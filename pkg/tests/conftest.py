import contextlib
import time

import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record a PASS/FAIL line for an acceptance criterion.

    Usage::

        with criterion(3, "labeling thresholds") as c:
            ...
            c.detail = "max error 0"
    """

    @contextlib.contextmanager
    def record(number, title, time_limit=None):
        class Outcome:
            detail = ""

        out = Outcome()
        start = time.perf_counter()
        ok = False
        try:
            yield out
            elapsed = time.perf_counter() - start
            if time_limit is not None:
                assert elapsed < time_limit, f"took {elapsed:.1f} s, limit {time_limit} s"
            ok = True
        except BaseException as exc:
            out.detail = f"{type(exc).__name__}: {exc}".splitlines()[0]
            raise
        finally:
            elapsed = time.perf_counter() - start
            line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {title} ({elapsed:.2f} s)"
            if out.detail:
                line += f" - {out.detail}"
            _CRITERIA[(number, title)] = line
            print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[key])
