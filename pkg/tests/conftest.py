import numpy as np
import pytest

from filtershare import data
from filtershare.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_cifar_fixture_records(n=20, seed=99):
    """Deterministic labeled images for binary-format round trips."""
    gen = np.random.default_rng(seed)
    records = []
    for i in range(n):
        pixels = gen.integers(0, 256, size=(3, 32, 32), dtype=np.uint8)
        records.append(data.LabeledImage(Tensor(pixels / 255.0), int(i % 10)))
    return records


@pytest.fixture
def cifar_fixture_file(tmp_path):
    """A 20-record binary batch file in the standard record layout."""
    path = tmp_path / "fixture_batch.bin"
    data.write_batch_records(path, make_cifar_fixture_records())
    return path
