import numpy as np
import pytest

from sharpcl.config import ARCHITECTURES, RunConfig
from sharpcl.data import LabeledDataset

TINY_ARCH = [
    {"kind": "conv", "out": 4, "kernel": 3, "stride": 1, "padding": 1, "pool": 2},
    {"kind": "conv", "out": 6, "kernel": 3, "stride": 1, "padding": 1, "pool": 2},
    {"kind": "linear", "out": 24},
    {"kind": "linear", "out": 24},
]


def synthetic(n_per_class: int, classes: int = 6, seed: int = 0) -> LabeledDataset:
    """Each class is a fixed random 8x8 template plus noise."""
    templates = np.random.default_rng(1234).random((classes, 1, 8, 8))
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    x = templates[labels] + 0.15 * rng.normal(size=(len(labels), 1, 8, 8))
    return LabeledDataset(np.clip(x, 0, 1).astype(np.float32), labels)


@pytest.fixture
def tiny_arch(monkeypatch):
    monkeypatch.setitem(ARCHITECTURES, "tiny", TINY_ARCH)
    return "tiny"


@pytest.fixture
def tiny_cfg(tiny_arch):
    return RunConfig(
        dataset="synthetic", architecture=tiny_arch, input_shape=(1, 8, 8), num_classes=6,
        episodes=[[0, 1], [2, 3], [4, 5]], phases=3, epochs_per_phase=1, batch_size=16,
        stm_budget_mb=24 * 6 * 4 / 1e6, probe_size=64, ltm_per_class=5, knn_neighbors=3,
        tau_min=0.6, reference_epochs=2,
    )


@pytest.fixture(scope="session")
def tiny_data():
    return synthetic(40, seed=0), synthetic(10, seed=1)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import REPORT

    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(REPORT):
        ok, detail = REPORT[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
