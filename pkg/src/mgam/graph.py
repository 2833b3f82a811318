"""Group co-membership graph and its degree-normalized adjacency.

Groups are nodes; an undirected edge connects two groups whenever they
share at least one member.  Unit self-loops are always added so that
every degree is positive and isolated groups still propagate their own
state.  Edges are unweighted (the shared-user count is ignored).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import UsageError


@dataclass
class GroupGraph:
    n: int
    adjacency: sparse.csr_array   # 0/1 symmetric, unit diagonal
    degree: np.ndarray            # row sums (self-loop included)
    normalized: sparse.csr_array  # entry (i,j) = A(i,j) / sqrt(d_i d_j)


def _normalize(adjacency: sparse.csr_array, degree: np.ndarray) -> sparse.csr_array:
    coo = adjacency.tocoo()
    inv_sqrt = 1.0 / np.sqrt(degree)
    vals = inv_sqrt[coo.row] * inv_sqrt[coo.col]
    # diagonal computed directly so N(i,i) == 1/d_i exactly
    diag = coo.row == coo.col
    vals[diag] = 1.0 / degree[coo.row[diag]]
    out = sparse.coo_array((vals, (coo.row, coo.col)), shape=adjacency.shape)
    return out.tocsr()


def _finish(adjacency: sparse.csr_array) -> GroupGraph:
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    return GroupGraph(n=adjacency.shape[0], adjacency=adjacency,
                      degree=degree, normalized=_normalize(adjacency, degree))


def build_co_membership(groups) -> GroupGraph:
    """Graph over groups with an edge per shared user, plus self-loops."""
    n = len(groups)
    by_user: dict = {}
    for g, members in enumerate(groups):
        for u in members:
            by_user.setdefault(u, []).append(g)
    rows, cols = list(range(n)), list(range(n))  # self-loops
    seen = set()
    for gs in by_user.values():
        for a_i in range(len(gs)):
            for b_i in range(a_i + 1, len(gs)):
                e = (gs[a_i], gs[b_i])
                if e not in seen:
                    seen.add(e)
                    rows.extend((e[0], e[1]))
                    cols.extend((e[1], e[0]))
    adj = sparse.coo_array((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    adj = adj.tocsr()
    adj.data = np.minimum(adj.data, 1.0)  # collapse accidental duplicates
    return _finish(adj)


def normalize_adjacency(graph: GroupGraph) -> sparse.csr_array:
    """Recompute the symmetric normalization of a graph's adjacency."""
    return _normalize(graph.adjacency, graph.degree)


def induce_batch_subgraph(graph: GroupGraph, batch_group_ids) -> GroupGraph:
    """Restrict the graph to the given nodes, recomputing degrees and
    normalization on the subgraph (self-loops are retained)."""
    ids = np.asarray(batch_group_ids, dtype=np.intp)
    if ids.size == 0:
        raise UsageError("batch subgraph needs at least one group")
    if len(np.unique(ids)) != ids.size:
        raise UsageError("batch group ids must be distinct")
    if ids.min() < 0 or ids.max() >= graph.n:
        raise UsageError(f"batch group id out of range [0, {graph.n})")
    sub = graph.adjacency[ids][:, ids].tocsr()
    return _finish(sub)


def expand_to_instances(subgraph: GroupGraph, positions) -> sparse.csr_array:
    """Normalized instance-level adjacency for a batch.

    `positions[i]` maps batch instance i to its group's node in
    `subgraph`.  Two instances are adjacent iff their groups are (a group
    is trivially adjacent to itself), and degrees are recomputed at the
    instance level, so duplicate groups in a batch raise each other's
    degrees.
    """
    pos = np.asarray(positions, dtype=np.intp)
    dense = subgraph.adjacency.toarray()
    inst = dense[np.ix_(pos, pos)]
    degree = inst.sum(axis=1)
    adj = sparse.csr_array(inst)
    return _normalize(adj, degree)


def dump_graph(graph: GroupGraph, group_ids, path) -> None:
    """Write one `group_id<TAB>group_id` line per undirected edge
    (self-loops omitted)."""
    coo = graph.adjacency.tocoo()
    with open(Path(path), "w", encoding="utf-8") as f:
        for i, j in sorted(zip(coo.row, coo.col)):
            if i < j:
                f.write(f"{group_ids[i]}\t{group_ids[j]}\n")
