"""Three-stage recurrent memory model over concept relation graphs.

Per student, a memory bank holds one vector per KC; a softmax-constrained
positive projection turns a memory row into a scalar mastery, so mastery is
strictly increasing in every memory coordinate. Each response is processed in
three stages:

1. Retrieval: neighbor memories are aggregated through the non-negative
   retrieval head, averaged over the question's KCs, projected to mastery and
   compared against a learned question difficulty to predict correctness.
2. Strengthening: an MLP turns (memory, question) into a seed feature per
   examined KC; the gain head (correct answers, output clamped non-negative)
   or the loss head (incorrect, clamped non-positive) propagates it to KCs
   within L hops and the result is added to the memory bank.
3. Learning/forgetting: for the KCs of the current and next question a gating
   MLP decides whether the student keeps studying them; selected KCs receive
   propagated progress through a saturating exponential kernel, while all
   other KCs decay back toward the initial memory with their own kernel.
   Kernel rates are generated per KC from the embeddings, so related KCs
   share similar learning and forgetting speeds.

Between-question gaps are measured in minutes and capped at 30 days so the
exponential kernels stay away from their degenerate limit for outlier gaps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .data import Response, ResponseSequence
from .gnn import (GnnSpec, GraphTensors, Plan, gnn_forward, gnn_forward_rows,
                  make_specs, plan_inward, plan_outward)
from .graphs import GRAPH_KINDS, KcRelationGraphs
from .metrics import EvalRecord

DT_CAP_MINUTES = 43200.0  # 30 days

MLP_HEADS = ("diff", "gain", "loss", "dcs", "prg")


@dataclass
class HyperParams:
    d_e: int = 128
    d_k: int = 16
    d_h: int = 128
    layers: int = 2
    lr: float = 5e-3
    l2: float = 1e-6
    eta: float = 0.6
    seed: int = 0
    batch_size: int = 32
    patience: int = 10
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("d_e", "d_k", "d_h", "layers", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.l2 < 0:
            raise ValueError("lr must be positive and l2 non-negative")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class TraceStep:
    examined: tuple[int, ...]
    pre: np.ndarray   # per-KC mastery before the strengthening update
    post: np.ndarray  # per-KC mastery after it
    step: int = 0
    timestamp: int = 0
    predicted: float = 0.0
    correct: int = 0


@dataclass
class MasteryTrace:
    student: int
    seq_index: int
    steps: list[TraceStep] = field(default_factory=list)


@dataclass
class SeqResult:
    preds: list[tuple[E.Node, int]]
    trace: MasteryTrace | None = None
    records: list[EvalRecord] | None = None
    reask: list[tuple[float, int]] | None = None


def _mlp_dims(head: str, hp: HyperParams) -> tuple[int, int]:
    if head == "diff":
        return 2 * hp.d_e, 1
    if head in ("gain", "loss"):
        return hp.d_k + 2 * hp.d_e, hp.d_k
    if head == "dcs":
        return hp.d_k + 4 * hp.d_e, 2
    if head == "prg":
        return hp.d_k + 4 * hp.d_e, hp.d_k
    raise ValueError(f"unknown MLP head {head!r}")


def init_parameters(hp: HyperParams, n_questions: int, n_kcs: int,
                    rng: np.random.Generator | None = None) -> E.ParameterStore:
    """Build the full parameter catalog.

    Dense weights draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start
    at zero; softmax-constrained raw weights start at zero (uniform mix); the
    initial memory starts at a small positive constant.
    """
    rng = rng or np.random.default_rng(hp.seed)
    store = E.ParameterStore(dtype=hp.dtype)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    store.add("emb.q", uniform((n_questions + 1, hp.d_e), hp.d_e))
    store.add("emb.k", uniform((n_kcs + 1, hp.d_e), hp.d_e))
    for which in GRAPH_KINDS:
        store.add(f"cor.{which}", uniform((hp.d_e, hp.d_e), hp.d_e))
    store.add("req", uniform((hp.d_e, hp.d_e), hp.d_e))

    for name, spec in make_specs(hp.d_e, hp.d_k, hp.layers).items():
        for layer in range(1, len(spec.dims)):
            d_prev, d_cur = spec.dims[layer - 1], spec.dims[layer]
            for which in GRAPH_KINDS:
                if spec.nonneg_weights:
                    store.add(f"gnn.{name}.W.{which}.{layer}",
                              np.zeros((d_prev, d_prev)))
                else:
                    store.add(f"gnn.{name}.W.{which}.{layer}",
                              uniform((d_prev, d_prev), d_prev))
                if spec.use_feedforward:
                    store.add(f"gnn.{name}.O.{which}.{layer}",
                              uniform((d_prev, d_cur), d_prev))

    for head in MLP_HEADS:
        d_in, d_out = _mlp_dims(head, hp)
        store.add(f"mlp.{head}.W1", uniform((d_in, hp.d_h), d_in))
        store.add(f"mlp.{head}.b1", np.zeros((1, hp.d_h)))
        store.add(f"mlp.{head}.W2", uniform((hp.d_h, d_out), hp.d_h))
        store.add(f"mlp.{head}.b2", np.zeros((1, d_out)))

    store.add("w_h", np.zeros((1, hp.d_k)))
    store.add("H0", np.full((n_kcs, hp.d_k), 0.1))
    return store


class BatchCache:
    """Per-parameter-state tape nodes shared across a batch.

    Edge correlations, constrained weights, kernel rate matrices and
    per-question embeddings/difficulties/requirement scores depend only on
    the parameters, so they are built once and reused by every sequence until
    the next optimizer step.
    """

    def __init__(self, model: "GrktModel", bound: dict[str, E.Node], mode: str):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.model = model
        self.bound = bound
        self.mode = mode
        hp = model.hp
        n_c = model.n_kcs

        self.k_active = E.gather_rows(bound["emb.k"], np.arange(n_c))
        self.w_h_col = E.transpose(E.softmax(bound["w_h"], axis=-1))
        self.h0 = bound["H0"]

        self.base_agg: dict[str, E.Node] = {}
        for which in GRAPH_KINDS:
            if not model.gt.has_edges[which]:
                continue
            beta = E.sigmoid(E.matmul(E.matmul(self.k_active, bound[f"cor.{which}"]),
                                      E.transpose(self.k_active)))
            mask = model.gt.mask_norm[which].astype(model.store.dtype)
            self.base_agg[which] = E.mul(E.as_node(mask), beta)

        self.weights: dict[str, dict] = {}
        for name, spec in model.specs.items():
            per = {}
            for layer in range(1, len(spec.dims)):
                for which in GRAPH_KINDS:
                    w = bound[f"gnn.{name}.W.{which}.{layer}"]
                    if spec.nonneg_weights:
                        w = E.softmax(w, axis=0)
                    o = bound.get(f"gnn.{name}.O.{which}.{layer}") \
                        if spec.use_feedforward else None
                    per[(which, layer)] = (w, o)
            self.weights[name] = per

        self.learn_rates = gnn_forward(model.specs["lrn"], self.k_active,
                                       model.gt, self.weights["lrn"],
                                       self.base_agg)
        self.forget_rates = gnn_forward(model.specs["fgt"], self.k_active,
                                        model.gt, self.weights["fgt"],
                                        self.base_agg)

        self._ebar: dict = {}
        self._diff: dict = {}
        self._alpha: dict = {}
        self._alpha_col: dict = {}
        self._plan_in: dict = {}
        self._plan_out: dict = {}

    def mlp(self, head: str, x: E.Node) -> E.Node:
        b = self.bound
        hidden = E.relu(E.add(E.matmul(x, b[f"mlp.{head}.W1"]),
                              b[f"mlp.{head}.b1"]))
        return E.add(E.matmul(hidden, b[f"mlp.{head}.W2"]), b[f"mlp.{head}.b2"])

    def e_bar(self, q: int, kcs: tuple[int, ...]) -> E.Node:
        key = (q, kcs)
        if key not in self._ebar:
            kc_rows = E.gather_rows(self.bound["emb.k"], list(kcs))
            kc_avg = E.scale(E.sum_axis(kc_rows, 0), 1.0 / len(kcs))
            e_q = E.gather_rows(self.bound["emb.q"], [q])
            self._ebar[key] = E.concat([kc_avg, e_q], axis=1)
        return self._ebar[key]

    def difficulty(self, q: int, kcs: tuple[int, ...]) -> E.Node:
        key = (q, kcs)
        if key not in self._diff:
            self._diff[key] = self.mlp("diff", self.e_bar(q, kcs))
        return self._diff[key]

    def alpha(self, q: int) -> E.Node:
        if q not in self._alpha:
            e_q = E.gather_rows(self.bound["emb.q"], [q])
            self._alpha[q] = E.sigmoid(
                E.matmul(E.matmul(e_q, self.bound["req"]),
                         E.transpose(self.k_active)))
        return self._alpha[q]

    def alpha_col(self, q: int) -> E.Node:
        if q not in self._alpha_col:
            self._alpha_col[q] = E.transpose(self.alpha(q))
        return self._alpha_col[q]

    def plan_in(self, kcs: tuple[int, ...]) -> Plan:
        if kcs not in self._plan_in:
            self._plan_in[kcs] = plan_inward(self.model.gt, kcs,
                                             self.model.hp.layers)
        return self._plan_in[kcs]

    def plan_out(self, kcs: tuple[int, ...]) -> Plan:
        if kcs not in self._plan_out:
            self._plan_out[kcs] = plan_outward(self.model.gt, kcs,
                                               self.model.hp.layers)
        return self._plan_out[kcs]


class GrktModel:
    """Graph-based knowledge tracing model bound to one graph set."""

    def __init__(self, hp: HyperParams, n_questions: int, n_kcs: int,
                 graphs: KcRelationGraphs,
                 store: E.ParameterStore | None = None):
        if graphs.n_kcs != n_kcs:
            raise ValueError("graph KC count does not match dataset")
        self.hp = hp
        self.n_questions = n_questions
        self.n_kcs = n_kcs
        self.graphs = graphs
        self.gt = GraphTensors(graphs)
        self.specs: dict[str, GnnSpec] = make_specs(hp.d_e, hp.d_k, hp.layers)
        self.store = store if store is not None \
            else init_parameters(hp, n_questions, n_kcs)

    def begin(self, mode: str = "eval") -> tuple[dict[str, E.Node], BatchCache]:
        bound = self.store.bind()
        return bound, BatchCache(self, bound, mode)

    # -- single stages ------------------------------------------------------

    def stage1_predict(self, H: E.Node, q: int, kcs: tuple[int, ...],
                       cache: BatchCache) -> tuple[E.Node, E.Node, E.Node]:
        """Retrieve memory for a question; returns (p_correct, row, mastery)."""
        if q < 0 or q >= self.n_questions:
            raise ValueError(f"unknown question id {q}")
        kcs = tuple(sorted(set(kcs)))
        plan = cache.plan_in(kcs)
        x0 = E.gather_rows(H, list(plan.row_sets[0]))
        rows = gnn_forward_rows(self.specs["rtv"], x0, plan, self.gt,
                                cache.weights["rtv"], cache.base_agg,
                                cache.alpha_col(q))
        h_agg = E.scale(E.sum_axis(rows, 0), 1.0 / len(kcs))
        mastery = E.matmul(h_agg, cache.w_h_col)
        a_hat = E.sigmoid(E.sub(mastery, cache.difficulty(q, kcs)))
        return a_hat, h_agg, mastery

    def stage2_strengthen(self, H: E.Node, q: int, kcs: tuple[int, ...],
                          a: int, cache: BatchCache) -> E.Node:
        """Apply the signed memory update for one response."""
        head = "gain" if a == 1 else "loss"
        kcs = tuple(sorted(set(kcs)))
        ebar = cache.e_bar(q, kcs)
        if len(kcs) > 1:
            ebar = E.tile_rows(ebar, len(kcs))
        feats = cache.mlp(head, E.concat([E.gather_rows(H, list(kcs)), ebar],
                                         axis=1))
        plan = cache.plan_out(kcs)
        update_rows = gnn_forward_rows(self.specs[head], feats, plan, self.gt,
                                       cache.weights[head], cache.base_agg,
                                       cache.alpha_col(q))
        update = E.scatter_rows(update_rows, list(plan.output_rows), self.n_kcs)
        return E.add(H, update)

    def stage3_learn_forget(self, H: E.Node, q_t: int, kcs_t: tuple[int, ...],
                            q_next: int, kcs_next: tuple[int, ...],
                            dt_seconds: float, counters: np.ndarray,
                            cache: BatchCache) -> E.Node:
        """Advance memory across the gap before the next question.

        Mutates `counters` in place (one increment per KC that actually
        received progress).
        """
        dt = min(max(dt_seconds, 0.0) / 60.0, DT_CAP_MINUTES)
        candidates = sorted(set(kcs_t) | set(kcs_next))
        ebar_t = cache.e_bar(q_t, kcs_t)
        ebar_n = cache.e_bar(q_next, kcs_next)

        k = len(candidates)
        if k > 1:
            ebar_t = E.tile_rows(ebar_t, k)
            ebar_n = E.tile_rows(ebar_n, k)
        x = E.concat([E.gather_rows(H, candidates), ebar_t, ebar_n], axis=1)
        pi = E.softmax(cache.mlp("dcs", x), axis=-1)
        decisions = pi.value.argmax(axis=1)  # hard gate; ties mean no learning
        learned_pos = np.flatnonzero(decisions == 1)
        E.log_gate(decisions.tobytes())

        new_H = H
        learned_mask = np.zeros(self.n_kcs, dtype=bool)
        if len(learned_pos):
            p_all = cache.mlp("prg", x)
            if cache.mode == "train":
                # soft multiplier so the decision head receives gradient
                p_all = E.mul(p_all, E.slice_cols(pi, 1, 2))
            seed = E.gather_rows(p_all, learned_pos)
            learned_idx = tuple(candidates[i] for i in learned_pos)
            plan = cache.plan_out(learned_idx)
            progress_rows = gnn_forward_rows(
                self.specs["prg"], seed, plan,
                self.gt, cache.weights["prg"], cache.base_agg)
            support = list(plan.output_rows)
            learned_mask[support] = (progress_rows.value != 0).any(axis=1)
            nvec = -(counters[support] + 1.0).reshape(-1, 1) * dt
            rates = E.gather_rows(cache.learn_rates, support)
            learn_fac = E.sub(1.0, E.clamped_exp(
                E.mul(E.as_node(nvec.astype(H.value.dtype)), rates)))
            gained = E.scatter_rows(E.mul(progress_rows, learn_fac),
                                    support, self.n_kcs)
            new_H = E.add(new_H, gained)
        E.log_gate(np.packbits(learned_mask).tobytes())

        nvec_all = -(counters + 1.0).reshape(-1, 1) * dt
        forget_rows = (~learned_mask).astype(H.value.dtype).reshape(-1, 1)
        forget_fac = E.sub(1.0, E.clamped_exp(
            E.mul(E.as_node(nvec_all.astype(H.value.dtype)),
                  cache.forget_rates)))
        decay = E.mul(E.mul(E.as_node(forget_rows), E.sub(H, cache.h0)),
                      forget_fac)
        new_H = E.sub(new_H, decay)

        counters[learned_mask] += 1
        return new_H

    # -- sequence-level API -------------------------------------------------

    def forward_sequence(self, seq: ResponseSequence, cache: BatchCache,
                         seq_index: int = 0, emit_trace: bool = False,
                         want_records: bool = False, want_reask: bool = False,
                         disable_stage3: bool = False) -> SeqResult:
        """Run the three-stage recurrence over one sequence's real steps."""
        H = cache.h0
        counters = np.zeros(self.n_kcs, dtype=np.int64)
        preds: list[tuple[E.Node, int]] = []
        trace = MasteryTrace(seq.student, seq_index) if emit_trace else None
        records: list[EvalRecord] | None = [] if want_records else None
        reask: list[tuple[float, int]] | None = [] if want_reask else None

        for t in range(seq.valid_len):
            r = seq.responses[t]
            a_hat, _, mastery = self.stage1_predict(H, r.question, r.kcs, cache)
            preds.append((a_hat, r.correct))
            if records is not None:
                records.append(EvalRecord(
                    score=a_hat.value.item(), label=r.correct,
                    question=r.question, mastery=mastery.value.item()))

            pre = self._mastery_vector(H, cache) if emit_trace else None
            H = self.stage2_strengthen(H, r.question, r.kcs, r.correct, cache)
            if trace is not None:
                trace.steps.append(TraceStep(
                    examined=r.kcs, pre=pre,
                    post=self._mastery_vector(H, cache),
                    step=t, timestamp=r.timestamp,
                    predicted=a_hat.value.item(), correct=r.correct))
            if reask is not None:
                again, _, _ = self.stage1_predict(H, r.question, r.kcs, cache)
                reask.append((again.value.item(), r.correct))

            if not disable_stage3 and t + 1 < seq.valid_len:
                nxt = seq.responses[t + 1]
                H = self.stage3_learn_forget(
                    H, r.question, r.kcs, nxt.question, nxt.kcs,
                    float(nxt.timestamp - r.timestamp), counters, cache)

        return SeqResult(preds=preds, trace=trace, records=records, reask=reask)

    def predict_next(self, history: list[Response], q_next: int,
                     kcs_next: tuple[int, ...], t_next: int,
                     cache: BatchCache, disable_stage3: bool = False) -> float:
        """Replay a history, bridge the final gap, and score a new question."""
        H = cache.h0
        counters = np.zeros(self.n_kcs, dtype=np.int64)
        for t, r in enumerate(history):
            H = self.stage2_strengthen(H, r.question, r.kcs, r.correct, cache)
            if disable_stage3:
                continue
            if t + 1 < len(history):
                nxt = history[t + 1]
                H = self.stage3_learn_forget(
                    H, r.question, r.kcs, nxt.question, nxt.kcs,
                    float(nxt.timestamp - r.timestamp), counters, cache)
            else:
                H = self.stage3_learn_forget(
                    H, r.question, r.kcs, q_next, kcs_next,
                    float(t_next - r.timestamp), counters, cache)
        a_hat, _, _ = self.stage1_predict(H, q_next, kcs_next, cache)
        return a_hat.value.item()

    def reask_scores(self, seq: ResponseSequence) -> list[tuple[float, int]]:
        """Counterfactual immediate re-ask of each answered question."""
        with E.no_grad():
            _, cache = self.begin("eval")
            result = self.forward_sequence(seq, cache, want_reask=True)
        return result.reask

    def mastery(self, H_value: np.ndarray, c: int) -> float:
        """Project one KC's memory row to its scalar mastery."""
        w = E.constrain_nonneg_vector(self.store.value("w_h")).ravel()
        return float(H_value[c] @ w)

    def _mastery_vector(self, H: E.Node, cache: BatchCache) -> np.ndarray:
        return (H.value @ cache.w_h_col.value).ravel().copy()

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        hyper = self.hp.to_dict()
        hyper["n_questions"] = self.n_questions
        hyper["n_kcs"] = self.n_kcs
        self.store.save(path, hyper, self.hp.seed)

    @classmethod
    def load(cls, path, graphs: KcRelationGraphs) -> "GrktModel":
        store, hyper, _ = E.ParameterStore.load(path)
        hp = HyperParams.from_dict(hyper)
        return cls(hp, hyper["n_questions"], hyper["n_kcs"], graphs, store=store)


def trace_rows(trace: MasteryTrace) -> list[dict]:
    """Flatten a trace to plot-ready rows, one per (step, KC)."""
    rows = []
    for step in trace.steps:
        for c in range(len(step.pre)):
            rows.append({
                "student": trace.student,
                "seq_index": trace.seq_index,
                "step": step.step,
                "timestamp": step.timestamp,
                "kc": c,
                "mastery_pre": float(step.pre[c]),
                "mastery_post": float(step.post[c]),
                "predicted": step.predicted,
                "correct": step.correct,
            })
    return rows
