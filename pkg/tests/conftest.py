import numpy as np
import pytest

from sqnet.io import model_from_bytes, model_to_bytes
from sqnet.nn import Dataset, build_model, synthesize_dataset, train_toy


def as_stored(model):
    """The model as it comes back from disk (float32-representable weights)."""
    return model_from_bytes(model_to_bytes(model))


def lenet_toy(seed=0, input_shape=(1, 12, 12), classes=4):
    return build_model([("conv2d", 4, 3), ("relu",), ("maxpool2x2",),
                        ("conv2d", 8, 3), ("relu",), ("maxpool2x2",), ("flatten",),
                        ("dense", 16), ("relu",), ("dense", classes)], input_shape, seed)


@pytest.fixture(scope="session")
def mlp_data():
    return synthesize_dataset(1, 200, 8, 4)


@pytest.fixture(scope="session")
def trained_mlp(mlp_data):
    model = build_model([("dense", 16), ("relu",), ("dense", 4)], (8,), seed=0)
    model, _ = train_toy(model, mlp_data, 100, 0.1, seed=0)
    return as_stored(model)


@pytest.fixture(scope="session")
def conv_split():
    ds = synthesize_dataset(3, 384, (1, 12, 12), 4)
    train = ds.subset(256)
    val = Dataset(ds.inputs[256:], ds.labels[256:], 4)
    return train, val


@pytest.fixture(scope="session")
def trained_conv(conv_split):
    train, _ = conv_split
    model, _ = train_toy(lenet_toy(0), train, 20, 0.05, seed=0, batch_size=32)
    return as_stored(model)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance_log(request):
    """Record one result line; ``passed=None`` marks a non-gating diagnostic."""
    log = request.config.stash[_ACCEPTANCE]

    def record(criterion, passed, detail):
        status = "INFO" if passed is None else "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {criterion}: {detail}"
        log.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
