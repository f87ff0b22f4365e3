ACCEPTANCE = []


def record(number, name, ok, detail):
    """Note one acceptance outcome; the lines are printed again at the end of the session."""
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
    ACCEPTANCE.append(line)
    print("\n" + line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
