from pathlib import Path

import pytest

REPORT = Path(__file__).resolve().parent.parent / "acceptance_report.txt"

_lines = {}
_notes = []


class AcceptanceLog:
    def record(self, number, ok, detail=""):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        _lines[number] = line
        print(line)

    def note(self, text):
        _notes.append(text)
        print(text)


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_lines):
        terminalreporter.write_line(_lines[key])
    if len(_lines) < 10:
        return  # partial run; keep the last full report
    body = [_lines[k] for k in sorted(_lines)]
    if _notes:
        body += ["", "details:"] + _notes
    REPORT.write_text("\n".join(body) + "\n")
