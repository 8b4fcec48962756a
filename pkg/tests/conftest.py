import pytest
import torch

from ralb.datagen import SHAPES, DatasetSplit, class_templates, generate_dataset
from ralb.encoders import EncoderConfig, new_model, snapshot
from ralb.harness import vocab_texts

torch.set_num_threads(1)

SPLIT = DatasetSplit(("circle", "square", "triangle"), ("star", "cross"))
TINY = EncoderConfig(d_embed=16, patch_dim=4, vision_hidden=32, text_dim=16, text_hidden=32)


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(96, SPLIT, seed=3)


@pytest.fixture(scope="session")
def tiny_state(small_data):
    """Untrained seeded model with a snapshot; cheap enough for per-test copies."""
    state = new_model(vocab_texts(small_data.captions), TINY, seed=1)
    return snapshot(state)


@pytest.fixture
def state(tiny_state):
    return tiny_state.copy()


@pytest.fixture(scope="session")
def templates():
    return class_templates(SPLIT.train_classes)


@pytest.fixture(scope="session")
def all_shape_templates():
    return class_templates(SHAPES)


# --- acceptance summary --------------------------------------------------------
# Tests marked ``criterion(n, title)`` are rolled up into one PASS/FAIL line per
# criterion at the end of the run; ``record_property("detail", ...)`` values are
# printed alongside.

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "status": [], "details": []})
    if hasattr(rep, "wasxfail"):
        entry["status"].append("xfail" if rep.skipped else "xpass")
    else:
        entry["status"].append(rep.outcome)
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        ok = all(s == "passed" for s in e["status"])
        note = "" if ok else " (known gap, see notes)" if "xfail" in e["status"] else ""
        tr.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {e['title']}{note}")
        for d in e["details"]:
            tr.write_line(f"      {d}")
