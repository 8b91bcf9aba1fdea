import numpy as np
import pytest
import torch

from vis2ir.codec import LatentCodec
from vis2ir.dataset import generate_dataset, load_split
from vis2ir.scene import GeneratorConfig
from vis2ir.training import TrainConfig, build_model


def small_codec(seed=0):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        codec = LatentCodec((64, 64), (8, 16, 16))
    return codec.freeze()


def small_train_config(root, **kw):
    base = dict(dataset_dirs=[(str(root), None)], epochs=1, batch_size=4, learning_rate=1e-3,
                base_channels=16, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "mixed"
    cfg = GeneratorConfig(seed=5, splits={"train": 12, "test": 4}, bands={"long": 1.0, "near": 1.0},
                          required_classes=("person",))
    generate_dataset(cfg, root)
    return root


@pytest.fixture(scope="session")
def tiny_samples(tiny_dataset):
    return load_split(tiny_dataset, "train")


@pytest.fixture
def codec():
    return small_codec()


@pytest.fixture
def tiny_model(tiny_dataset, codec):
    return build_model(small_train_config(tiny_dataset), codec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    acc = sys.modules.get("acceptance_support")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        passed, detail = acc.RESULTS[n]
        terminalreporter.write_line(f"acceptance criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
