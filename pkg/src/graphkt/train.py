"""Training loop, cross-validation protocol and ablation switches.

Batches are whole subsequences; the loss is the binary cross entropy over all
real (unmasked) steps in the batch. After each epoch the validation AUC is
computed; the best checkpoint is kept and training stops once validation has
failed to improve for `patience` consecutive epochs.

By default relation graphs are mined from each fold's training+validation
sequences only, so test responses never leak into the graph statistics;
`use_full_graphs` restores the comparability-oriented variant that mines from
the whole dataset.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from . import metrics
from .data import Dataset, FoldSplit, make_folds
from .graphs import GraphBuildConfig, KcRelationGraphs, build_graphs
from .model import GrktModel, HyperParams


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    max_epochs: int = 200
    disable_stage3: bool = False       # -LF
    drop_similarity: bool = False      # -SIM
    drop_prerequisite: bool = False    # -PRE
    drop_all_graphs: bool = False      # -SIM-PRE
    use_full_graphs: bool = False
    min_cooccurrence: int = 10

    @property
    def effective_drop_similarity(self) -> bool:
        return self.drop_similarity or self.drop_all_graphs

    @property
    def effective_drop_prerequisite(self) -> bool:
        return self.drop_prerequisite or self.drop_all_graphs


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_auc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("-inf")
    test_metrics: dict | None = None
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "train_losses": self.train_losses,
            "val_auc": self.val_auc,
            "val_acc": self.val_acc,
            "best_epoch": self.best_epoch,
            "best_val_auc": self.best_val_auc,
            "test_metrics": self.test_metrics,
            "wall_clock": self.wall_clock,
        }


def bce_loss(predictions) -> float:
    """Mean binary cross entropy over unmasked (score, label, mask) triples.

    Scores are clamped to [1e-7, 1 - 1e-7] before the log.
    """
    total = 0.0
    count = 0
    for score, label, mask in predictions:
        if not mask:
            continue
        p = min(max(score, 1e-7), 1.0 - 1e-7)
        total += -(np.log(p) if label == 1 else np.log(1.0 - p))
        count += 1
    if count == 0:
        raise ValueError("loss over an empty unmasked set is undefined")
    return total / count


def bce_loss_node(preds: list[tuple[E.Node, int]]) -> E.Node:
    """Tape-level BCE over one batch's (prediction node, label) pairs."""
    if not preds:
        raise ValueError("loss over an empty unmasked set is undefined")
    terms = []
    for p, label in preds:
        pc = E.clip(p, 1e-7, 1.0 - 1e-7)
        inner = pc if label == 1 else E.sub(1.0, pc)
        terms.append(E.neg(E.log(inner)))
    return E.scale(E.sum_all(E.add_n(terms)), 1.0 / len(terms))


def apply_ablation(graphs: KcRelationGraphs, cfg: TrainConfig) -> KcRelationGraphs:
    if cfg.effective_drop_similarity or cfg.effective_drop_prerequisite:
        return graphs.drop(similarity=cfg.effective_drop_similarity,
                           prerequisite=cfg.effective_drop_prerequisite)
    return graphs


def graphs_for_fold(ds: Dataset, fold: FoldSplit, cfg: TrainConfig) -> KcRelationGraphs:
    """Mine graphs from the fold's non-test sequences (or everything)."""
    if cfg.drop_all_graphs:
        return KcRelationGraphs.empty(ds.n_kcs)
    indices = None if cfg.use_full_graphs else list(fold.train) + list(fold.val)
    mined = build_graphs(ds, GraphBuildConfig(eta=cfg.hp.eta,
                                              min_cooccurrence=cfg.min_cooccurrence),
                         sequence_indices=indices)
    return apply_ablation(mined, cfg)


def _predictions(model: GrktModel, ds: Dataset, indices,
                 cfg: TrainConfig) -> list[tuple[float, int]]:
    pairs = []
    with E.no_grad():
        _, cache = model.begin("eval")
        for idx in indices:
            res = model.forward_sequence(ds.sequences[idx], cache,
                                         disable_stage3=cfg.disable_stage3)
            pairs.extend((p.value.item(), a) for p, a in res.preds)
    return pairs


def evaluate(model: GrktModel, ds: Dataset, indices,
             cfg: TrainConfig) -> metrics.ReasonabilityReport:
    """All five metrics over the given sequences."""
    records = []
    traces = []
    reask_pairs = []
    with E.no_grad():
        _, cache = model.begin("eval")
        for idx in indices:
            res = model.forward_sequence(
                ds.sequences[idx], cache, seq_index=idx, emit_trace=True,
                want_records=True, want_reask=True,
                disable_stage3=cfg.disable_stage3)
            records.extend(res.records)
            traces.append(res.trace)
            reask_pairs.extend(res.reask)
    pairs = [(r.score, r.label) for r in records]
    return metrics.ReasonabilityReport(
        auc=metrics.auc(pairs),
        acc=metrics.accuracy(pairs),
        consistency=metrics.consistency(traces),
        gaucm=metrics.gaucm(records),
        repetition=metrics.accuracy(reask_pairs),
    )


def train_fold(ds: Dataset, fold: FoldSplit, cfg: TrainConfig,
               graphs: KcRelationGraphs | None = None,
               compute_test_metrics: bool = True) -> tuple[GrktModel, TrainReport]:
    """Train on one fold with early stopping; returns the best checkpoint."""
    start = time.time()
    if graphs is None:
        graphs = graphs_for_fold(ds, fold, cfg)
    else:
        graphs = apply_ablation(graphs, cfg)

    hp = cfg.hp
    model = GrktModel(hp, ds.n_questions, ds.n_kcs, graphs)
    rng = np.random.default_rng(hp.seed)
    report = TrainReport()

    best_snapshot = model.store.snapshot()
    stale = 0
    train_idx = np.array(fold.train)

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        n_steps = 0
        for b, lo in enumerate(range(0, len(order), hp.batch_size)):
            batch = train_idx[order[lo:lo + hp.batch_size]]
            _, cache = model.begin("train")
            preds = []
            for idx in batch:
                res = model.forward_sequence(ds.sequences[idx], cache,
                                             disable_stage3=cfg.disable_stage3)
                preds.extend(res.preds)
            loss = bce_loss_node(preds)
            loss_val = loss.value.item()
            if not np.isfinite(loss_val):
                raise TrainingDiverged(epoch, b)
            model.store.zero_grad()
            model.store.backward(loss)
            model.store.adam_step(hp.lr, l2=hp.l2)
            epoch_loss += loss_val * len(preds)
            n_steps += len(preds)
        report.train_losses.append(epoch_loss / max(n_steps, 1))

        val_pairs = _predictions(model, ds, fold.val, cfg)
        try:
            val_auc = metrics.auc(val_pairs)
        except (metrics.UndefinedMetric, ValueError):
            val_auc = 0.5  # degenerate validation set: no early-stop signal
        report.val_auc.append(val_auc)
        report.val_acc.append(metrics.accuracy(val_pairs) if val_pairs else 0.0)

        if val_auc > report.best_val_auc:
            report.best_val_auc = val_auc
            report.best_epoch = epoch
            best_snapshot = model.store.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.hp.patience:
                break

    model.store.restore(best_snapshot)
    if compute_test_metrics:
        report.test_metrics = evaluate(model, ds, fold.test, cfg).to_dict()
    report.wall_clock = time.time() - start
    return model, report


@dataclass
class CrossValReport:
    fold_reports: list[TrainReport]
    mean: dict[str, float]
    std: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "folds": [r.to_dict() for r in self.fold_reports],
        }


def cross_validate(ds: Dataset, cfg: TrainConfig, k: int = 5,
                   graphs: KcRelationGraphs | None = None,
                   val_frac: float = 0.1) -> CrossValReport:
    """k-fold protocol; aggregates each test metric's mean and std."""
    folds = make_folds(ds, k=k, val_frac=val_frac, seed=cfg.hp.seed)
    reports = []
    for fold in folds:
        _, report = train_fold(ds, fold, cfg, graphs=graphs)
        reports.append(report)
    keys = reports[0].test_metrics.keys()
    mean = {k_: float(np.mean([r.test_metrics[k_] for r in reports])) for k_ in keys}
    std = {k_: float(np.std([r.test_metrics[k_] for r in reports])) for k_ in keys}
    return CrossValReport(fold_reports=reports, mean=mean, std=std)
