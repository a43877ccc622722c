import numpy as np
import pytest
from hypothesis import settings

from exitrack.config import RunConfig, replace

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def tiny_config(**sections) -> RunConfig:
    """Small but structurally complete model: 3 exits, 4 encoder layers."""
    base = dict(
        data=dict(seq_length=8, train_per_level=2, val_per_level=1, test_per_level=1),
        backbone=dict(depth=3, dim=16, heads=2, exit_layers=(1, 2, 3)),
        exits=dict(head_channels=(8, 4)),
        train=dict(epochs_stage1=1, epochs_stage2=1, pairs_per_epoch=16, batch_size=8),
    )
    for name, upd in sections.items():
        base.setdefault(name, {}).update(upd)
    return replace(RunConfig(), **base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.rsplit("test_criterion_", 1)[1]
    number, _, label = name.partition("_")
    detail = dict(report.user_properties).get("criterion", "")
    if not detail and report.failed:
        detail = str(report.longrepr).strip().splitlines()[-1][:200]
    _criteria.append((number, label.replace("_", " "), ("PASS" if report.passed else "FAIL") + f"  {detail}"))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, label, line in sorted(_criteria):
        terminalreporter.write_line(f"[{number}] {label}: {line}")
