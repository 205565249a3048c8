import os
import time

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    num, title = marker.args
    entry = _RESULTS.setdefault(num, {"title": title, "ok": True, "seconds": 0.0, "detail": ""})
    if report.when == "call":
        entry["seconds"] += report.duration
        entry["detail"] = getattr(item, "criterion_detail", entry["detail"])
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False
        if report.when != "call":
            entry["detail"] = f"{report.when} failed"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_RESULTS):
        r = _RESULTS[num]
        status = "PASS" if r["ok"] else "FAIL"
        detail = f"  {r['detail']}" if r["detail"] else ""
        tr.write_line(f"criterion {num:>2} {status}  {r['title']} ({r['seconds']:.1f}s){detail}")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to the acceptance line."""

    def set_detail(text):
        request.node.criterion_detail = text

    return set_detail


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    from e2e_support import run_desk

    root = os.environ.get("OBJCOMPOSE_E2E_DIR")
    out = root if root else tmp_path_factory.mktemp("desk_run")
    t0 = time.perf_counter()
    res = run_desk(out)
    res.setdefault("wall_seconds", time.perf_counter() - t0)
    return res
