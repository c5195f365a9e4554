import numpy as np
import pytest

from f2p.codec import ContinuousParam, DiscreteSlot, ParameterSchema
from f2p.synthfaces import generate_dataset, toy_schema
from f2p.trainer import pretrain_features


@pytest.fixture(scope="session")
def schema():
    return toy_schema()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_schema(option_counts, params_per_region=1, regions=("a", "b", "c")):
    """Small synthetic schema: one slot per entry of ``option_counts``, spread over regions."""
    params = [ContinuousParam(r, f"p{i}") for r in regions for i in range(params_per_region)]
    slots = [
        DiscreteSlot(regions[i % len(regions)], f"slot{i}", tuple((f"opt{i}_{j}", f"g{i}-{j}") for j in range(k)))
        for i, k in enumerate(option_counts)
    ]
    return ParameterSchema(regions, params, slots)


@pytest.fixture(scope="session")
def tiny_dataset(schema):
    return generate_dataset(schema, 48, master_seed=7, normalize=True)


@pytest.fixture(scope="session")
def tiny_eval(schema):
    return generate_dataset(schema, 24, master_seed=8, normalize=True)


@pytest.fixture(scope="session")
def uniform_2000(schema):
    """The training-seed corpus without scale normalization."""
    return generate_dataset(schema, 2000, master_seed=1)


@pytest.fixture(scope="session")
def tiny_features():
    return pretrain_features(n=64, sizes=(64, 32), epochs=1, seed=0)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    number, text = mark.args
    measured = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    _CRITERIA[number] = ("PASS" if call.excinfo is None else "FAIL", text, measured)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, text, measured = _CRITERIA[number]
        line = f"criterion {number:>2}: {status}  {text}"
        terminalreporter.write_line(line + (f"  [{measured}]" if measured else ""))
