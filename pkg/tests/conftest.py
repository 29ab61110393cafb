"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

_RESULTS = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            item.user_properties.append(("criterion", number))
            _RESULTS.setdefault(number, {"title": title, "outcomes": []})


def pytest_runtest_logreport(report):
    # a failing setup or teardown counts against the criterion as well as the call itself
    if report.when != "call" and report.outcome == "passed":
        return
    for key, value in report.user_properties:
        if key == "criterion":
            _RESULTS[value]["outcomes"].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        outcomes = entry["outcomes"]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {entry['title']}")
