import time

import numpy as np
import pytest

from mpcflow import data, flowmodel
from mpcflow.harness import HEXAGON_LR

IMAGE_TRAIN = flowmodel.TrainConfig(batch_size=128, iterations=3000, lr=1e-3, seed=0,
                                    dataset="discs16", hidden=(512, 512))


HEX_TRAIN = flowmodel.TrainConfig(batch_size=256, iterations=5000, lr=HEXAGON_LR, seed=0)


@pytest.fixture(scope="session")
def hex_model():
    return flowmodel.train(data.hexagon_points, 2, HEX_TRAIN)


@pytest.fixture(scope="session")
def image_bundle():
    start = time.perf_counter()
    pool = data.sample_discs16(20000, seed=1).reshape(20000, -1)

    def sampler(rng, n):
        return pool[rng.integers(0, len(pool), n)]

    model, _ = flowmodel.train(sampler, pool.shape[1], IMAGE_TRAIN)
    return model, time.perf_counter() - start


@pytest.fixture(scope="session")
def image_model(image_bundle):
    return image_bundle[0]


@pytest.fixture(scope="session")
def image_train_seconds(image_bundle):
    return image_bundle[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp():
    return flowmodel.init_mlp(2, (8, 8), seed=3)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
