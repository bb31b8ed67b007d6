"""Relation-graph message passing shared by the model's six propagation heads.

Each layer aggregates, per relation graph, the mean over a node's neighbors
of the neighbor feature times a square weight matrix, scaled by a learned
edge-correlation score (and, for the heads that look at the current question,
a question-KC requirement score). A ReLU feed-forward projection follows
unless the head disables it, the three graph branches are summed, and a
residual connection applies whenever layer width is preserved.

The retrieval head keeps its weights non-negative (softmax-constrained
columns) and drops the feed-forward so that larger neighbor memories can
never reduce the aggregate.

Propagation never reaches beyond the layer count in hops, so the per-step
heads run on row subsets: seeded heads (gain/loss/progress) only compute the
rows inside the seeds' hop support, and retrieval only computes the examined
rows from their inward neighborhood. A `Plan` freezes those row sets; the
full-matrix path remains for the heads that need every row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .graphs import GRAPH_KINDS, KcRelationGraphs

OUTPUT_ACTIVATIONS = ("none", "relu", "neg_relu", "softplus")

GNN_NAMES = ("rtv", "gain", "loss", "prg", "lrn", "fgt")


@dataclass(frozen=True)
class GnnSpec:
    name: str
    dims: tuple[int, ...]
    use_feedforward: bool
    use_question_scores: bool
    nonneg_weights: bool
    output_activation: str

    def __post_init__(self):
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if len(self.dims) < 2:
            raise ValueError("at least one layer required")
        if self.nonneg_weights and self.use_feedforward:
            raise ValueError("non-negative heads drop the feed-forward")

    @property
    def layers(self) -> int:
        return len(self.dims) - 1


def make_specs(d_e: int, d_k: int, layers: int) -> dict[str, GnnSpec]:
    """The six propagation heads used by the three model stages."""
    mem_dims = tuple([d_k] * (layers + 1))
    kernel_dims = tuple([d_e] + [d_k] * layers)
    return {
        "rtv": GnnSpec("rtv", mem_dims, use_feedforward=False,
                       use_question_scores=True, nonneg_weights=True,
                       output_activation="none"),
        "gain": GnnSpec("gain", mem_dims, use_feedforward=True,
                        use_question_scores=True, nonneg_weights=False,
                        output_activation="relu"),
        "loss": GnnSpec("loss", mem_dims, use_feedforward=True,
                        use_question_scores=True, nonneg_weights=False,
                        output_activation="neg_relu"),
        "prg": GnnSpec("prg", mem_dims, use_feedforward=True,
                       use_question_scores=False, nonneg_weights=False,
                       output_activation="relu"),
        "lrn": GnnSpec("lrn", kernel_dims, use_feedforward=True,
                       use_question_scores=False, nonneg_weights=False,
                       output_activation="softplus"),
        "fgt": GnnSpec("fgt", kernel_dims, use_feedforward=True,
                       use_question_scores=False, nonneg_weights=False,
                       output_activation="softplus"),
    }


class GraphTensors:
    """Dense per-graph adjacency masks pre-scaled by 1/degree.

    Rows with no neighbors get a zero row, so an empty neighbor list simply
    contributes nothing instead of dividing by zero.
    """

    def __init__(self, graphs: KcRelationGraphs):
        self.graphs = graphs
        self.n_kcs = graphs.n_kcs
        self.mask_norm: dict[str, np.ndarray] = {}
        self.has_edges: dict[str, bool] = {}
        for which in GRAPH_KINDS:
            m = np.zeros((graphs.n_kcs, graphs.n_kcs))
            for i in range(graphs.n_kcs):
                nbrs = graphs.neighbors(which, i)
                if nbrs:
                    m[i, list(nbrs)] = 1.0 / len(nbrs)
            self.mask_norm[which] = m
            self.has_edges[which] = bool(m.any())

    def union_neighbors(self, nodes) -> set[int]:
        out: set[int] = set()
        for c in nodes:
            for which in GRAPH_KINDS:
                out.update(self.graphs.neighbors(which, c))
        return out


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def edge_correlation(store, ci: int, cj: int, which: str) -> float:
    """Learned correlation of two KCs on one graph, in (0, 1)."""
    k = store.value("emb.k")
    return float(_sigmoid(k[ci] @ store.value(f"cor.{which}") @ k[cj]))


def question_kc_score(store, q: int, c: int) -> float:
    """Learned requirement score of a question for a KC, in (0, 1)."""
    e_q = store.value("emb.q")[q]
    k_c = store.value("emb.k")[c]
    return float(_sigmoid(e_q @ store.value("req") @ k_c))


def hop_support(graphs: KcRelationGraphs, seeds, hops: int) -> set[int]:
    """KCs reachable from the seeds within `hops` steps over P, S and R."""
    frontier = set(seeds)
    support = set(seeds)
    for _ in range(hops):
        nxt = set()
        for c in frontier:
            for which in GRAPH_KINDS:
                nxt.update(graphs.neighbors(which, c))
        nxt -= support
        if not nxt:
            break
        support |= nxt
        frontier = nxt
    return support


class Plan:
    """Per-layer row sets for a restricted propagation, with frozen indices.

    `row_sets[l]` lists the KC rows materialized at layer l; `align[l-1]`
    maps layer l-1 features onto layer l rows for the residual: ("gather",
    idx) when the row set shrinks (inward plans), ("embed", idx) when it
    grows (outward plans, missing rows are exactly zero). `ix[l-1]` selects
    the (rows_l, rows_{l-1}) adjacency block.
    """

    __slots__ = ("row_sets", "row_arrays", "align", "ix")

    def __init__(self, row_sets: list[tuple[int, ...]]):
        self.row_sets = tuple(row_sets)
        self.row_arrays = tuple(np.asarray(r, dtype=np.int64) for r in row_sets)
        self.align = tuple(self._alignment(row_sets[l - 1], row_sets[l])
                           for l in range(1, len(row_sets)))
        self.ix = tuple(np.ix_(self.row_arrays[l], self.row_arrays[l - 1])
                        for l in range(1, len(row_sets)))

    @property
    def output_rows(self) -> tuple[int, ...]:
        return self.row_sets[-1]

    @staticmethod
    def _alignment(prev_rows, cur_rows):
        prev_pos = {c: i for i, c in enumerate(prev_rows)}
        if set(cur_rows) <= set(prev_rows):
            return ("gather", np.asarray([prev_pos[c] for c in cur_rows],
                                         dtype=np.int64))
        cur_pos = {c: i for i, c in enumerate(cur_rows)}
        if not set(prev_rows) <= set(cur_rows):
            raise ValueError("row sets must be nested between layers")
        return ("embed", np.asarray([cur_pos[c] for c in prev_rows],
                                    dtype=np.int64))


def plan_outward(gt: GraphTensors, seeds, layers: int) -> Plan:
    """Row sets for seeded propagation: layer l covers the l-hop support."""
    seeds = sorted(set(seeds))
    row_sets = [tuple(seeds)]
    cur = set(seeds)
    for _ in range(layers):
        cur = cur | gt.union_neighbors(cur)
        row_sets.append(tuple(sorted(cur)))
    return Plan(row_sets)


def plan_inward(gt: GraphTensors, targets, layers: int) -> Plan:
    """Row sets for reading specific output rows: expand neighborhoods down."""
    targets = sorted(set(targets))
    row_sets = [tuple(targets)]
    cur = set(targets)
    for _ in range(layers):
        cur = cur | gt.union_neighbors(cur)
        row_sets.append(tuple(sorted(cur)))
    row_sets.reverse()
    return Plan(row_sets)


def _apply_output_activation(spec: GnnSpec, out: E.Node) -> E.Node:
    if spec.output_activation == "relu":
        return E.relu(out)
    if spec.output_activation == "neg_relu":
        return E.neg(E.relu(out))
    if spec.output_activation == "softplus":
        return E.softplus(out)
    return out


def gnn_forward(spec: GnnSpec, x: E.Node, gt: GraphTensors,
                weights: dict[tuple[str, int], tuple[E.Node, E.Node | None]],
                agg_mats: dict[str, E.Node],
                alpha_row: E.Node | None = None) -> E.Node:
    """Run one head over all KC rows.

    `agg_mats[G]` is the degree-normalized, correlation-scaled adjacency for
    graph G (shared across layers and heads for one parameter state).
    `alpha_row` carries the per-KC question requirement scores and must be
    present exactly when the head uses them.
    """
    if spec.use_question_scores != (alpha_row is not None):
        raise ValueError(f"head {spec.name!r} "
                         f"{'requires' if spec.use_question_scores else 'rejects'} "
                         "question context")
    if x.value.shape != (gt.n_kcs, spec.dims[0]):
        raise ValueError(f"input shape {x.value.shape} does not match "
                         f"({gt.n_kcs}, {spec.dims[0]})")

    scaled = {}
    for which in GRAPH_KINDS:
        if not gt.has_edges[which]:
            continue
        agg = agg_mats[which]
        if alpha_row is not None:
            agg = E.mul(agg, alpha_row)  # scale neighbor columns
        scaled[which] = agg

    out = x
    for layer in range(1, len(spec.dims)):
        d_prev, d_cur = spec.dims[layer - 1], spec.dims[layer]
        fused: E.Node | None = None
        for which in scaled:
            w, o = weights[(which, layer)]
            branch = E.matmul(scaled[which], E.matmul(out, w))
            if spec.use_feedforward:
                branch = E.matmul(E.relu(branch), o)
            fused = branch if fused is None else E.add(fused, branch)
        if fused is None:
            zeros = np.zeros((gt.n_kcs, d_cur), dtype=out.value.dtype)
            fused = E.as_node(zeros)
        out = E.add(fused, out) if d_prev == d_cur else fused

    return _apply_output_activation(spec, out)


def gnn_forward_rows(spec: GnnSpec, x0: E.Node, plan: Plan, gt: GraphTensors,
                     weights: dict[tuple[str, int], tuple[E.Node, E.Node | None]],
                     agg_mats: dict[str, E.Node],
                     alpha_col: E.Node | None = None) -> E.Node:
    """Restricted propagation over a plan's row sets.

    `x0` holds the layer-0 features for `plan.row_sets[0]` (rows outside an
    outward plan's seed support are exactly zero and never materialized).
    `alpha_col` is the (n_kcs, 1) question requirement column. Returns the
    features of `plan.output_rows`.
    """
    if spec.use_question_scores != (alpha_col is not None):
        raise ValueError(f"head {spec.name!r} "
                         f"{'requires' if spec.use_question_scores else 'rejects'} "
                         "question context")
    if x0.value.shape != (len(plan.row_sets[0]), spec.dims[0]):
        raise ValueError("layer-0 features do not match the plan's row set")

    out = x0
    for layer in range(1, len(spec.dims)):
        d_prev, d_cur = spec.dims[layer - 1], spec.dims[layer]
        n_cur = len(plan.row_sets[layer])
        feats = out
        if alpha_col is not None:
            feats = E.mul(E.gather_rows(alpha_col, plan.row_arrays[layer - 1]),
                          feats)
        fused: E.Node | None = None
        for which in GRAPH_KINDS:
            if not gt.has_edges[which]:
                continue
            w, o = weights[(which, layer)]
            sub = E.gather_submatrix(agg_mats[which], plan.ix[layer - 1])
            branch = E.matmul(sub, E.matmul(feats, w))
            if spec.use_feedforward:
                branch = E.matmul(E.relu(branch), o)
            fused = branch if fused is None else E.add(fused, branch)
        if fused is None:
            fused = E.as_node(np.zeros((n_cur, d_cur), dtype=out.value.dtype))
        if d_prev == d_cur:
            mode, idx = plan.align[layer - 1]
            if mode == "gather":
                residual = E.gather_rows(out, idx)
            else:
                residual = E.scatter_rows(out, idx, n_cur)
            out = E.add(fused, residual)
        else:
            out = fused

    return _apply_output_activation(spec, out)
