import numpy as np
import pytest

from mgam.clustering import SubsetAssignment
from mgam.data import Dataset
from mgam.graph import build_co_membership
from mgam.model import ModelConfig, init_params


@pytest.fixture(scope="session")
def toy():
    """Fixed small problem: 2 overlapping groups of 4 users, 10 items,
    d=8, M=2, l=2, with a hand-set subset partition and a batch that
    contains same-group positives and negatives (so triplets exist)."""
    ds = Dataset(
        n_users=8, n_items=10, n_groups=2,
        user_items=[[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [5, 6], [6, 7], []],
        groups=[[0, 1, 2, 3], [3, 4, 5, 6]],
        group_pos=[[1, 3, 5], [2, 4, 7]],
        user_ids=[str(i) for i in range(8)],
        item_ids=[str(i) for i in range(10)],
        group_ids=["0", "1"],
    )
    assignments = [
        SubsetAssignment(group=0, subsets=[[0, 1], [2, 3]]),
        SubsetAssignment(group=1, subsets=[[3, 4, 5], [6]]),
    ]
    graph = build_co_membership(ds.groups)
    cfg = ModelConfig(embedding_dim=8, num_subsets=2, gcn_layers=2)
    params = init_params(cfg, ds.n_users, ds.n_items, ds.n_groups,
                         np.random.default_rng(12345))
    instances = [(0, 1, 1), (0, 8, 0), (0, 3, 1), (1, 2, 1), (1, 9, 0),
                 (1, 4, 1), (0, 6, 0)]
    return {
        "dataset": ds,
        "assignments": assignments,
        "graph": graph,
        "cfg": cfg,
        "params": params,
        "instances": instances,
        "batch": [(g, v) for g, v, _ in instances],
        "labels": np.array([y for _, _, y in instances], dtype=np.float64),
    }


def fresh_toy_params(toy, seed=12345):
    return init_params(toy["cfg"], toy["dataset"].n_users,
                       toy["dataset"].n_items, toy["dataset"].n_groups,
                       np.random.default_rng(seed))
