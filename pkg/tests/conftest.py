import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(n, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    entry = _RESULTS.setdefault(n, {"title": title, "ok": True, "details": []})
    if rep.failed:
        entry["ok"] = False
    if rep.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        e = _RESULTS[n]
        tag = "PASS" if e["ok"] else "FAIL"
        detail = f" [{'; '.join(e['details'])}]" if e["details"] else ""
        terminalreporter.write_line(f"{tag} criterion {n}: {e['title']}{detail}")
