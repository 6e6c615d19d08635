import contextlib
import time

CRITERIA = []


@contextlib.contextmanager
def criterion(number, title):
    """Record a pass/fail line for an acceptance criterion; failures still propagate."""
    start = time.perf_counter()
    notes = []
    try:
        yield notes
    except BaseException:
        CRITERIA.append((number, title, "FAIL", time.perf_counter() - start, notes))
        raise
    CRITERIA.append((number, title, "PASS", time.perf_counter() - start, notes))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, secs, notes in sorted(CRITERIA, key=lambda c: c[0]):
        detail = f" [{'; '.join(notes)}]" if notes else ""
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title} ({secs:.1f}s){detail}")
