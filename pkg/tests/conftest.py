"""Collects acceptance verdicts and prints one line per criterion after the run."""

_VERDICTS = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    key = props["criterion"]
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        prev = _VERDICTS.get(key)
        ok = not failed and (prev is None or prev[0])
        _VERDICTS[key] = (ok, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS, key=lambda k: int(k.split()[0])):
        ok, detail = _VERDICTS[key]
        line = f"{'PASS' if ok else 'FAIL'}  criterion {key}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
