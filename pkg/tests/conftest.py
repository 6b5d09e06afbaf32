import numpy as np
import pytest

from lcfl.data import ClientDataset
from lcfl.model import ModelSpec, init_params

KIND_SPECS = {
    "linear-regression": lambda d: ModelSpec("linear-regression", d),
    "softmax": lambda d: ModelSpec("softmax", d, 4),
    "mlp": lambda d: ModelSpec("mlp", d, 3, (5,)),
}


def random_dataset(spec: ModelSpec, n: int, rng, client_id: int = 0, true_cluster=None) -> ClientDataset:
    x = rng.standard_normal((n, spec.input_dim))
    if spec.is_classifier:
        y = rng.integers(0, spec.num_classes, n)
    else:
        y = x @ rng.standard_normal(spec.input_dim) + 0.1 * rng.standard_normal(n)
    return ClientDataset(x, y, client_id, true_cluster)


def random_instance(kind: str, rng, n: int = 30, dim: int = 3):
    spec = KIND_SPECS[kind](dim)
    return spec, init_params(spec, rng, scale=0.5), random_dataset(spec, n, rng)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance lines collected by test_acceptance.report and repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][1:].rstrip(":"))):
            terminalreporter.write_line(line)
