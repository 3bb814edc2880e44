import pytest

# (criterion number, title, passed, detail) appended by the acceptance tests
ACCEPTANCE = []


@pytest.fixture
def verdict():
    def record(number, title, passed, detail=""):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}  {detail}".rstrip()
        ACCEPTANCE.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
