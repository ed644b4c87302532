_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance checks")


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance[report.nodeid.split("::")[-1]] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    from test_acceptance import LABELS

    terminalreporter.section("acceptance")
    for name, label in LABELS.items():
        outcome = _acceptance.get(name)
        if outcome is None:
            continue
        mark = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{mark}  {label}")
