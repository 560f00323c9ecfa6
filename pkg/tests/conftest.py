import pytest

_RESULTS: dict[str, tuple[bool, str]] = {}


class Recorder:
    def check(self, criterion: str, ok: bool, detail: str) -> None:
        _RESULTS[criterion] = (bool(ok), detail)
        assert ok, f"criterion {criterion}: {detail}"

    def skip(self, criterion: str, reason: str) -> None:
        _RESULTS[criterion] = (None, reason)
        pytest.skip(reason)


@pytest.fixture(scope="session")
def acceptance():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: int(k.split()[0])):
        ok, detail = _RESULTS[key]
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {key}: {detail}")
