import pytest

_VERDICTS: list[str] = []


class Verdicts:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def record(self, number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"{'PASS' if passed else 'FAIL'} [{number:2d}] {title}" + (f": {detail}" if detail else "")
        _VERDICTS.append(line)
        print(line)
        return passed


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
