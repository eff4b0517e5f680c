import pytest

_CRITERIA: dict[int, str] = {}


class CriterionRecorder:
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []
        _CRITERIA[number] = f"FAIL  C{number:<2} {title} (did not finish)"

    def note(self, text: str) -> None:
        self.details.append(text)

    def done(self, passed: bool) -> None:
        status = "PASS" if passed else "FAIL"
        detail = f" [{'; '.join(self.details)}]" if self.details else ""
        _CRITERIA[self.number] = f"{status}  C{self.number:<2} {self.title}{detail}"


@pytest.fixture
def criterion():
    return CriterionRecorder


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
