import numpy as np
import pytest

from fsuda import numerics as nx


@pytest.fixture
def f64():
    with nx.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_EMBEDDING = dict(height=16, width=16, blocks=2, channels=8, pooled_blocks=1)


@pytest.fixture(scope="session")
def tiny_manifest():
    return dict(classes=24, samples=20, height=16, width=16, split_sizes=(16, 4, 4), seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_manifest):
    """A 24-class, 16x16 dataset small enough for fast training runs."""
    from fsuda.data import DatasetManifest, gen_synthetic, load_dataset

    path = tmp_path_factory.mktemp("data") / "tiny"
    gen_synthetic(path, DatasetManifest(**tiny_manifest))
    return load_dataset(path)


@pytest.fixture
def tiny_train_config():
    from fsuda.embedding import EmbeddingConfig
    from fsuda.episodic import TrainConfig

    def make(**kw):
        base = dict(episodes=5, n_query=5, lr=1e-3, embedding=EmbeddingConfig(**TINY_EMBEDDING))
        base.update(kw)
        return TrainConfig(**base)

    return make


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
