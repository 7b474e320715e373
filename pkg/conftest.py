import numpy as np
import pytest

from igap.graph_data import Graph
from igap.synthetic import SbmConfig, gen_from_config


def path_graph(n, n_features=1, labels=None, signals=None):
    edges = [(i, i + 1) for i in range(n - 1)]
    if signals is None:
        signals = np.arange(n * n_features, dtype=np.float64).reshape(n, n_features)
    return Graph(n, edges, signals, labels)


@pytest.fixture
def path3():
    return path_graph(3)


@pytest.fixture
def triangle():
    return Graph(3, [(0, 1), (0, 2), (1, 2)], np.ones((3, 1)))


@pytest.fixture
def small_sbm():
    """Two well-separated blocks of 10 nodes, 6 features."""
    return gen_from_config(SbmConfig(blocks=2, nodes_per_block=10, p_in=0.7, p_out=0.05, n_features=6,
                                     mean_scale=2.0, sigma=0.5), seed=3)


@pytest.fixture
def erdos_renyi():
    def build(n, p, seed, n_features=3):
        gen = np.random.default_rng(seed)
        iu, ju = np.triu_indices(n, k=1)
        keep = gen.random(iu.shape[0]) < p
        return Graph(n, np.stack([iu[keep], ju[keep]], axis=1), gen.standard_normal((n, n_features)))
    return build
