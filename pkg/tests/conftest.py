import contextlib

import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as detail:`` records one acceptance line."""
    results = request.config.stash[_RESULTS]

    @contextlib.contextmanager
    def run(number: int, title: str):
        detail: dict = {}
        try:
            yield detail
        except BaseException as exc:
            results[number] = (False, title, detail, f"{type(exc).__name__}: {exc}".splitlines()[0])
            raise
        results[number] = (True, title, detail, "")

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, detail, err = results[n]
        info = ", ".join(f"{k}={v}" for k, v in detail.items())
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {title}"
        if info:
            line += f" [{info}]"
        if err:
            line += f" -- {err}"
        terminalreporter.write_line(line)
