"""Multi-granularity attention forward pass for group-item scoring.

Three granularity branches produce d-vectors for a (group, item) pair:

* subset branch: item-conditioned attention over the members of each
  preference subset, then a slotted attention across subsets (each slot
  has its own weights; missing slots are zero-padded),
* group branch: the same member attention over the whole group,
* superset branch: two graph-convolution streams over the group
  co-membership graph (a global stream seeded with the trainable group-id
  embedding and a batch stream seeded with the batch's subset-branch
  vectors), concatenated and projected back to d dimensions.

A row-wise self-attention over the stacked branch vectors fuses them;
the prediction layer scores the fused vector against the item embedding.
Any branch can be ablated; ablating the subset branch reseeds the batch
stream with the group-branch vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .errors import UsageError
from .graph import GroupGraph, expand_to_instances, induce_batch_subgraph

_SINGLETON_NORM = np.ones((1, 1))


@dataclass
class ModelConfig:
    embedding_dim: int = 32
    num_subsets: int = 3
    gcn_layers: int = 2
    init_scale: float | None = None  # default 1/sqrt(embedding_dim)

    def validate(self) -> None:
        if self.embedding_dim < 2 or self.embedding_dim % 2:
            raise UsageError("embedding_dim must be an even integer >= 2")
        if self.num_subsets < 1:
            raise UsageError("num_subsets must be >= 1")
        if self.gcn_layers < 1:
            raise UsageError("gcn_layers must be >= 1")

    def scale(self) -> float:
        return self.init_scale if self.init_scale is not None else 1.0 / np.sqrt(self.embedding_dim)


@dataclass
class AblationMask:
    use_subpe: bool = True
    use_gpe: bool = True
    use_suppe: bool = True

    @classmethod
    def from_disabled(cls, disabled) -> "AblationMask":
        disabled = set(disabled)
        unknown = disabled - {"subpe", "gpe", "suppe"}
        if unknown:
            raise UsageError(f"unknown granularity name(s): {sorted(unknown)}")
        return cls(use_subpe="subpe" not in disabled,
                   use_gpe="gpe" not in disabled,
                   use_suppe="suppe" not in disabled)

    def label(self) -> str:
        off = [n for n, on in (("subpe", self.use_subpe), ("gpe", self.use_gpe),
                               ("suppe", self.use_suppe)) if not on]
        return "mgam" if not off else "mgam-wo-" + "-".join(off)


@dataclass
class GroupForwardState:
    """Attention internals retained for one (group, item) forward."""
    group: int
    item: int
    subset_member_weights: list | None   # per subset: (m_i,) weights
    subset_weights: np.ndarray | None    # (m_eff,)
    gpe_member_weights: np.ndarray | None
    fusion_rows: list                    # active branch names, stack order
    fusion_attention: np.ndarray         # (r, r)
    score: float


def init_params(cfg: ModelConfig, n_users: int, n_items: int, n_groups: int,
                rng: np.random.Generator) -> dict:
    """Create all trainable tensors in a fixed, checkpoint-stable order.

    Weights are uniform(-s, s) with s = init_scale; biases start at zero.
    """
    cfg.validate()
    d, m, layers = cfg.embedding_dim, cfg.num_subsets, cfg.gcn_layers
    s = cfg.scale()

    def weight(shape):
        return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)

    def bias(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params: dict = {}
    params["user_emb"] = weight((n_users, d))
    params["item_emb"] = weight((n_items, d))
    params["group_emb"] = weight((n_groups, d))
    params["user_att_w"] = weight(())
    params["user_att_b"] = bias(())
    for i in range(1, m + 1):
        params[f"subpe_self_w_{i}"] = weight((d, d))
        if m > 1:
            params[f"subpe_other_w_{i}"] = weight(((m - 1) * d, d))
        params[f"subpe_bias_{i}"] = bias((d,))
    params["subpe_score_w"] = weight((d,))
    params["subpe_score_b"] = bias(())
    params["group_att_w"] = weight(())
    params["group_att_b"] = bias(())
    for k in range(1, layers + 1):
        params[f"gcn_global_w_{k}"] = weight((d, d))
    for k in range(1, layers + 1):
        params[f"gcn_batch_w_{k}"] = weight((d, d))
    params["suppe_proj_w"] = weight((2 * d, d))
    params["suppe_proj_b"] = bias((d,))
    params["predict_w"] = weight((3 * d,))
    params["predict_b"] = bias(())
    return params


# ---------------------------------------------------------------------------
# branch operations

def member_attention(member_vecs: Tensor, item_vec: Tensor,
                     weight: Tensor, bias: Tensor) -> tuple:
    """Item-conditioned softmax attention over member embedding rows.

    Scores are relu(weight * <e(u), e(v)> + bias); the output is the
    attention-weighted sum of the member embeddings.  Used for both the
    within-subset and the whole-group aggregation (different parameters).
    """
    if member_vecs.data.ndim != 2 or member_vecs.data.shape[0] == 0:
        raise UsageError("member attention needs a non-empty (m, d) matrix")
    dots = ad.matmul(member_vecs, item_vec)                 # (m,)
    scores = ad.relu(ad.add(ad.mul(weight, dots), bias))
    attn = ad.softmax(scores)
    return ad.matmul(attn, member_vecs), attn


def subset_attention(slot_embs, params: dict, m: int) -> tuple:
    """Slotted attention across subset embeddings.

    `slot_embs` holds the real slots in their canonical order; slots past
    m_effective are zero-padded so each slot's cross-weight keeps its
    (m-1)d input width.  Softmax runs over real slots only.
    """
    m_eff = len(slot_embs)
    if m_eff == 0:
        raise UsageError("subset attention needs at least one subset")
    if m_eff > m:
        raise UsageError(f"{m_eff} subsets exceed the configured maximum {m}")
    d = slot_embs[0].data.shape[0]
    zero = Tensor(np.zeros(d))
    padded = list(slot_embs) + [zero] * (m - m_eff)
    scores = []
    for i in range(m_eff):
        pre = ad.matmul(padded[i], params[f"subpe_self_w_{i + 1}"])
        if m > 1:
            others = ad.concat([padded[j] for j in range(m) if j != i])
            pre = ad.add(pre, ad.matmul(others, params[f"subpe_other_w_{i + 1}"]))
        pre = ad.add(pre, params[f"subpe_bias_{i + 1}"])
        a_i = ad.add(ad.dot(params["subpe_score_w"], ad.relu(pre)),
                     params["subpe_score_b"])
        scores.append(a_i)
    attn = ad.softmax(ad.stack(scores))
    return ad.matmul(attn, ad.stack(slot_embs)), attn


def superset_propagate(h0: Tensor, norm_adj, layer_weights) -> Tensor:
    """Stacked graph-convolution layers: h -> relu(norm_adj @ h @ W)."""
    h = h0
    for w in layer_weights:
        h = ad.relu(ad.matmul(ad.spmm(norm_adj, h), w))
    return h


def superset_embeddings(params: dict, cfg: ModelConfig, batch_groups,
                        h0_rows, graph: GroupGraph,
                        global_rows: Tensor | None = None) -> list:
    """Two-stream superset branch for a batch of instances.

    `batch_groups[i]` is instance i's group (duplicates allowed);
    `h0_rows[i]` seeds the batch stream for that instance.  Returns one
    (h_suppe (2d,), projected (d,)) pair per instance.  `global_rows`
    optionally supplies a precomputed global-stream table (evaluation
    caching); omitted, it is recomputed so gradients flow end to end.
    """
    layers = cfg.gcn_layers
    if global_rows is None:
        global_w = [params[f"gcn_global_w_{k}"] for k in range(1, layers + 1)]
        global_rows = superset_propagate(params["group_emb"], graph.normalized, global_w)
    if len(batch_groups) == 1:
        # a one-group induced subgraph is always the unit self-loop
        norm_inst = _SINGLETON_NORM
    else:
        uniq = sorted(set(int(g) for g in batch_groups))
        node_of = {g: i for i, g in enumerate(uniq)}
        sub = induce_batch_subgraph(graph, uniq)
        norm_inst = expand_to_instances(sub, [node_of[int(g)] for g in batch_groups])
    batch_w = [params[f"gcn_batch_w_{k}"] for k in range(1, layers + 1)]
    batch_rows = superset_propagate(ad.stack(list(h0_rows)), norm_inst, batch_w)
    out = []
    for i, g in enumerate(batch_groups):
        h_sup = ad.concat([ad.row(global_rows, int(g)), ad.row(batch_rows, i)])
        projected = ad.add(ad.matmul(h_sup, params["suppe_proj_w"]),
                           params["suppe_proj_b"])
        out.append((h_sup, projected))
    return out


def fuse(rows, d: int) -> tuple:
    """Row-wise self-attention over stacked branch vectors, mean-pooled.

    With a single row the softmax is a no-op and the input passes through.
    """
    rows = list(rows)
    if not rows:
        raise UsageError("fusion needs at least one active granularity")
    for r in rows:
        if r.data.shape != (d,):
            raise UsageError(f"fusion rows must be ({d},) vectors, got {r.data.shape}")
    h = ad.stack(rows)                                        # (r, d)
    attn = ad.softmax(ad.scale(ad.matmul(h, ad.transpose(h)), 1.0 / np.sqrt(d)), axis=-1)
    fused = ad.matmul(attn, h)                                # (r, d)
    return ad.tensor_mean(fused, axis=0), attn


def predict_logit(h_fusion: Tensor, item_vec: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pre-sigmoid score from [h, h*e(v), e(v)]."""
    if h_fusion.data.shape != item_vec.data.shape:
        raise UsageError(f"fusion/item dimension mismatch: "
                         f"{h_fusion.data.shape} vs {item_vec.data.shape}")
    feats = ad.concat([h_fusion, ad.mul(h_fusion, item_vec), item_vec])
    return ad.add(ad.dot(w, feats), b)


def compute_global_rows(params: dict, cfg: ModelConfig, graph: GroupGraph) -> Tensor:
    """Forward-only global-stream table, for reuse across evaluation calls."""
    with ad.no_grad():
        global_w = [params[f"gcn_global_w_{k}"] for k in range(1, cfg.gcn_layers + 1)]
        return superset_propagate(params["group_emb"], graph.normalized, global_w)


# ---------------------------------------------------------------------------
# batched forward

@dataclass
class ForwardResult:
    logits: Tensor                 # (n,)
    scores: Tensor                 # (n,), sigmoid(logits)
    states: list = field(default_factory=list)  # GroupForwardState when collected


def forward_batch(params: dict, cfg: ModelConfig, dataset: Dataset,
                  assignments, graph: GroupGraph, batch, *,
                  mask: AblationMask | None = None,
                  collect_state: bool = False,
                  global_rows: Tensor | None = None) -> ForwardResult:
    """Score a batch of (group, item) pairs.

    The batch-stream graph couples the instances that are scored
    together; evaluation therefore scores candidates in one-instance
    batches so that a score depends only on its own (group, item) pair.
    """
    mask = mask or AblationMask()
    if not (mask.use_subpe or mask.use_gpe or mask.use_suppe):
        raise UsageError("all three granularities are ablated; nothing to fuse")
    batch = [(int(g), int(v)) for g, v in batch]
    if not batch:
        raise UsageError("empty forward batch")
    need_gpe = mask.use_gpe or (mask.use_suppe and not mask.use_subpe)

    item_vecs, h_subpe, h_gpe = [], [], []
    subset_member_w, subset_w, gpe_w = [], [], []
    for g, v in batch:
        e_v = ad.row(params["item_emb"], v)
        item_vecs.append(e_v)
        if mask.use_subpe:
            slot_embs, mw = [], []
            for subset in assignments[g].subsets:
                u = ad.take(params["user_emb"], subset)
                h_s, attn = member_attention(u, e_v, params["user_att_w"],
                                             params["user_att_b"])
                slot_embs.append(h_s)
                mw.append(attn.data.copy() if collect_state else None)
            h_sub, s_attn = subset_attention(slot_embs, params, cfg.num_subsets)
            h_subpe.append(h_sub)
            subset_member_w.append(mw)
            subset_w.append(s_attn.data.copy() if collect_state else None)
        else:
            h_subpe.append(None)
            subset_member_w.append(None)
            subset_w.append(None)
        if need_gpe:
            u_all = ad.take(params["user_emb"], dataset.groups[g])
            h_g, g_attn = member_attention(u_all, e_v, params["group_att_w"],
                                           params["group_att_b"])
            h_gpe.append(h_g)
            gpe_w.append(g_attn.data.copy() if collect_state else None)
        else:
            h_gpe.append(None)
            gpe_w.append(None)

    suppe = None
    if mask.use_suppe:
        h0_rows = [h_subpe[i] if mask.use_subpe else h_gpe[i] for i in range(len(batch))]
        suppe = superset_embeddings(params, cfg, [g for g, _ in batch], h0_rows,
                                    graph, global_rows=global_rows)

    logits, fusion_attn, fusion_rows = [], [], []
    for i in range(len(batch)):
        rows, labels = [], []
        if mask.use_subpe:
            rows.append(h_subpe[i])
            labels.append("subpe")
        if mask.use_gpe:
            rows.append(h_gpe[i])
            labels.append("gpe")
        if mask.use_suppe:
            rows.append(suppe[i][1])
            labels.append("suppe")
        h_fus, attn = fuse(rows, cfg.embedding_dim)
        logits.append(predict_logit(h_fus, item_vecs[i],
                                    params["predict_w"], params["predict_b"]))
        fusion_attn.append(attn.data.copy() if collect_state else None)
        fusion_rows.append(labels)

    logits_t = ad.stack(logits)
    scores = ad.sigmoid(logits_t)
    states = []
    if collect_state:
        for i, (g, v) in enumerate(batch):
            states.append(GroupForwardState(
                group=g, item=v,
                subset_member_weights=subset_member_w[i],
                subset_weights=subset_w[i],
                gpe_member_weights=gpe_w[i],
                fusion_rows=fusion_rows[i],
                fusion_attention=fusion_attn[i],
                score=float(scores.data[i]),
            ))
    return ForwardResult(logits=logits_t, scores=scores, states=states)
