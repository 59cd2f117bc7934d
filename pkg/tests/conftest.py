import pytest

VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request, capsys):
    """Record and print a one-line PASS/FAIL outcome for an acceptance criterion."""
    store = request.config.stash.setdefault(VERDICTS, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        store[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(VERDICTS, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for number in sorted(store):
            terminalreporter.write_line(store[number])
