import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from fsmirl.graph import Graph

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_graph(n, edges, labels=None, d=3, C=None, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels)
    C = C if C is not None else (int(labels.max()) + 1 if n else 1)
    return Graph.from_edges(n, np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                            rng.normal(size=(n, d)), labels, C)


def sbm(n, C, p_in, p_out, seed, d=4):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, C, n)
    edges = [(u, v) for u in range(n) for v in range(u + 1, n)
             if rng.random() < (p_in if labels[u] == labels[v] else p_out)]
    return make_graph(n, edges, labels, d=d, C=C, seed=seed)


@st.composite
def graphs(draw, min_nodes=1, max_nodes=12, max_classes=3, d=2):
    n = draw(st.integers(min_nodes, max_nodes))
    C = draw(st.integers(1, max_classes))
    labels = draw(st.lists(st.integers(0, C - 1), min_size=n, max_size=n))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    mask = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    edges = [p for p, m in zip(pairs, mask) if m]
    seed = draw(st.integers(0, 2 ** 16))
    return make_graph(n, edges, labels, d=d, C=C, seed=seed)


@pytest.fixture
def path3():
    return make_graph(3, [(0, 1), (1, 2)], [0, 1, 0])
