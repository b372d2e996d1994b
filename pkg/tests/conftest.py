import os

import pytest
from hypothesis import settings

from racer.dynamics import VehicleParams
from racer.track import circle_track, figure8_track, splits_track

# numba compiles on first call, so per-example deadlines are meaningless
settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def sim_params():
    return VehicleParams.preset("sim")


@pytest.fixture
def real_params():
    return VehicleParams.preset("real")


@pytest.fixture
def circle():
    return circle_track()


@pytest.fixture(params=["circle", "figure8", "splits"])
def any_track(request):
    return {"circle": circle_track, "figure8": figure8_track, "splits": splits_track}[request.param]()


# --------------------------------------------------------------------------
# Acceptance summary: one PASS/FAIL line per criterion

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props or report.skipped:
        return
    if report.when != "call" and report.passed:
        return
    entry = _criteria.setdefault(props["criterion"], {"title": props["title"], "ok": True, "notes": []})
    entry["ok"] &= report.passed
    if report.when == "call" and props.get("measured"):
        entry["notes"].append(props["measured"])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        c = _criteria[number]
        notes = "; ".join(c["notes"])
        line = f"criterion {number:>2} {'PASS' if c['ok'] else 'FAIL'}  {c['title']}"
        terminalreporter.write_line(line + (f"  [{notes}]" if notes else ""))


@pytest.fixture(autouse=True)
def _criterion_properties(request, record_property):
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        number, title = marker.args
        record_property("criterion", number)
        record_property("title", title)
