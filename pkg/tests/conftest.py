import numpy as np
import pytest

from stsam import model as m
from stsam import numerics as nx
from stsam.dataio import DatasetMeta


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_hp():
    return m.HyperParams(d=4, M=2, k=2, ff_dim=8, n_blocks=1, dropout_rate=0.0, n_regions=3, time_vocab=14)


@pytest.fixture
def tiny_meta():
    return DatasetMeta(n_regions=3, slots_per_day=2, interval_minutes=720)


def perturbed_params(hp, seed=0, scale=0.3):
    """Initialised parameters with biases and gains moved off their defaults."""
    params = m.init_params(hp, seed)
    g = np.random.default_rng(seed + 99)
    for p in params.values():
        p.data = p.data + scale * g.standard_normal(p.shape)
    return params


def random_batch(hp, rng, batch=4):
    n, k = hp.n_regions, hp.k
    return m.RegionBatch(
        history_in=rng.random((batch, n, k)),
        history_out=rng.random((batch, n, k)),
        time_index=rng.integers(0, 100, size=batch),
        target=rng.random((batch, n, 2)),
    )


def leaf(data, name=None):
    return nx.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


_ACCEPTANCE: dict = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
