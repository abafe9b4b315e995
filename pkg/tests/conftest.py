ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, name: str, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {criterion} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
