import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # dense_reference import

from dgnnrec.hetgraph import build_graph
from dgnnrec.model import ModelParams
from dgnnrec.seeding import PARAM_INIT, rng_for


def random_small_graph(rng, max_users=6, max_items=8, max_relations=4):
    """Random typed graph with <= ~20 nodes; may contain isolated nodes."""
    I = int(rng.integers(2, max_users + 1))
    J = int(rng.integers(2, max_items + 1))
    R = int(rng.integers(1, max_relations + 1))
    ui = {(int(rng.integers(I)), int(rng.integers(J)))
          for _ in range(int(rng.integers(2, 2 * I + 2)))}
    uu = set()
    for _ in range(int(rng.integers(0, I + 2))):
        a, b = int(rng.integers(I)), int(rng.integers(I))
        if a != b:
            uu.add((a, b))
    ir = {(int(rng.integers(J)), int(rng.integers(R)))
          for _ in range(int(rng.integers(0, J + 2)))}
    return build_graph(sorted(ui), sorted(uu), sorted(ir), I, J, R)


def random_params(graph, dim, num_units, num_layers, seed=0):
    return ModelParams.init(graph.num_nodes, dim, num_units, num_layers,
                            rng_for(seed, PARAM_INIT, dim, num_units, num_layers))


@pytest.fixture
def tiny_graph():
    # 3 users, 4 items, 2 relation nodes; every node type connected.
    return build_graph(
        interactions=[(0, 1), (0, 2), (1, 0), (1, 3), (2, 2)],
        social=[(0, 1), (1, 2)],
        item_relations=[(0, 0), (1, 1), (2, 0), (3, 1)],
        num_users=3, num_items=4, num_relations=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
