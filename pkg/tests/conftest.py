import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    import helpers

    if not helpers.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(helpers.ACCEPTANCE):
        terminalreporter.write_line(f"[{n:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
