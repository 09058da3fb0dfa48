import numpy as np
import pytest
import torch

from mangastyle.dataset import ImageTriplet, save_triplet, write_manifest
from mangastyle.synthgen import generate_dataset

torch.set_num_threads(1)


def make_triplet(h=32, w=48, id="t0", seed=0):
    rng = np.random.default_rng(seed)
    return ImageTriplet(
        id=id,
        colorized=rng.integers(0, 256, (h, w, 3), dtype=np.uint8),
        screentone=(rng.random((h, w, 1)) > 0.5).astype(np.uint8) * 255,
        flat=rng.integers(0, 256, (h, w, 3), dtype=np.uint8),
    )


@pytest.fixture
def triplet_dir(tmp_path):
    ids = ["a", "b", "c"]
    for i, page in enumerate(ids):
        save_triplet(tmp_path, make_triplet(id=page, seed=i))
    write_manifest(tmp_path, ids)
    return tmp_path


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_dataset(6, 3, out, canvas=(32, 32))
    return out


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
