import numpy as np
import pytest
from hypothesis import settings

from dfglsim.gcnmodel import Hyperparams, init_params
from dfglsim.graphdata import PartitionSpec, build_subgraphs, dirichlet_partition, generate_sbm, split_masks_per_worker
from dfglsim.fedworker import Worker

ACCEPTANCE_LINES: list[str] = []

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def small_graph():
    return generate_sbm(80, 4, 0.2, 0.03, 6, seed=3)


@pytest.fixture
def small_setup(small_graph):
    """Graph, owner map and workers for a 4-way split of an 80-node SBM."""
    owner = dirichlet_partition(small_graph, PartitionSpec(4, 1.0, seed=1, min_size=5))
    graph = split_masks_per_worker(small_graph, owner, 0.2, seed=2)
    subs = build_subgraphs(graph, owner)
    hp = Hyperparams(batch_size=8, hidden_dims=(5, 4))
    workers = [
        Worker(i, sg, graph, init_params(graph.d0, hp.hidden_dims, graph.num_classes, np.random.default_rng(10 + i)),
               hp, np.random.default_rng(100 + i))
        for i, sg in enumerate(subs)
    ]
    return graph, owner, workers


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
