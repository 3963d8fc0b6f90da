import numpy as np
import pytest
from hypothesis import settings

from pflsim.data import SplitSpec, SynthSpec, generate_synthetic, split

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def small_synthetic(seed=0, regime="cross_device", **kw):
    spec = SynthSpec(**{"num_clients": 12, "examples_per_client": (20, 5), "feature_dim": 4, "num_classes": 3,
                        "seed": seed, **kw})
    ds = generate_synthetic(spec)
    return split(ds, SplitSpec(regime=regime, seed=seed))


@pytest.fixture
def device_ds():
    return small_synthetic()


@pytest.fixture
def silo_ds():
    return small_synthetic(regime="cross_silo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance criteria report -----------------------------------------------------------
# Tests marked ``criterion(n, title)`` are folded into one PASS/FAIL/SKIP line per criterion,
# printed after the run. A criterion fails if any of its tests fails and skips only if all skip.

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or (rep.when == "setup" and rep.skipped)):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "outcomes": [], "notes": []})
    if rep.skipped:
        entry["outcomes"].append("SKIP")
        reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
        entry["notes"].append(reason.removeprefix("Skipped: "))
    else:
        entry["outcomes"].append("FAIL" if rep.failed else "PASS")
        entry["notes"].extend(v for k, v in item.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        outs = entry["outcomes"]
        status = "FAIL" if "FAIL" in outs else ("SKIP" if all(o == "SKIP" for o in outs) else "PASS")
        line = f"criterion {number:>2}: {status}  {entry['title']}"
        notes = "; ".join(dict.fromkeys(entry["notes"]))
        terminalreporter.write_line(line + (f"  [{notes}]" if notes else ""))
