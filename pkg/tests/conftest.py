import numpy as np
import pytest
import torch

from pathlib import Path

from spgnet.model import NetworkPlan, build

torch.set_num_threads(1)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def tiny_plan(depths=(18,), channels=16, num_classes=4, **kw):
    return NetworkPlan.stacked(depths=list(depths), channels=channels, num_classes=num_classes,
                               width_multiplier="1/8", **kw)


def tiny_model(depths=(18,), seed=0, **kw):
    torch.manual_seed(seed)
    return build(tiny_plan(depths, **kw)).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# --- acceptance reporting ---------------------------------------------------

_criteria: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion implemented by a test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    number, title = marker.args
    _criteria[number] = (title, call.excinfo is None)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}")
