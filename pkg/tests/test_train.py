"""Loss contract, early stopping, ablations and the fold protocol."""

import math

import numpy as np
import pytest

from graphkt import engine as E
from graphkt.data import Response, make_folds, preprocess
from graphkt.graphs import KcRelationGraphs
from graphkt.model import GrktModel, HyperParams
from graphkt.train import (TrainConfig, TrainingDiverged, apply_ablation,
                           bce_loss, bce_loss_node, cross_validate, evaluate,
                           graphs_for_fold, train_fold)
from tests.conftest import make_dataset


# -- bce loss -----------------------------------------------------------------


def test_bce_half_everywhere_is_ln2():
    preds = [(0.5, 1, True), (0.5, 0, True), (0.5, 1, True)]
    assert abs(bce_loss(preds) - math.log(2.0)) < 1e-12


def test_bce_perfect_predictions_hit_clamp():
    preds = [(1.0, 1, True), (0.0, 0, True)]
    want = -math.log(1.0 - 1e-7)
    assert abs(bce_loss(preds) - want) < 1e-12


def test_bce_ignores_masked_steps():
    base = [(0.8, 1, True), (0.4, 0, True)]
    noisy = base + [(0.123, 1, False), (float("nan"), 0, False)]
    assert bce_loss(base) == bce_loss(noisy)


def test_bce_empty_unmasked_errors():
    with pytest.raises(ValueError):
        bce_loss([(0.5, 1, False)])
    with pytest.raises(ValueError):
        bce_loss_node([])


def test_bce_node_matches_float_path():
    rng = np.random.default_rng(0)
    scores = rng.uniform(0.01, 0.99, size=20)
    labels = rng.integers(0, 2, size=20)
    preds_node = [(E.as_node(np.array([[s]])), int(a))
                  for s, a in zip(scores, labels)]
    preds_flt = [(float(s), int(a), True) for s, a in zip(scores, labels)]
    assert abs(bce_loss_node(preds_node).value.item()
               - bce_loss(preds_flt)) < 1e-12


# -- tiny training setups -------------------------------------------------------


def tiny_dataset(n_students=12, length=8, n_questions=4, n_kcs=3, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for s in range(n_students):
        skill = rng.random() < 0.5
        for i in range(length):
            q = int(rng.integers(n_questions))
            correct = int(rng.random() < (0.8 if skill else 0.2))
            rows.append((s, q, (q % n_kcs,), correct, 100 + 60 * i))
    ds = make_dataset(rows, n_questions=n_questions, n_kcs=n_kcs)
    return preprocess(ds, seq_len=length, min_len=2)


def tiny_config(**kw):
    hp = HyperParams(d_e=3, d_k=3, d_h=4, layers=1, lr=1e-2, l2=1e-6,
                     eta=0.6, seed=0, batch_size=4, patience=kw.pop("patience", 2))
    return TrainConfig(hp=hp, max_epochs=kw.pop("max_epochs", 3),
                       min_cooccurrence=kw.pop("min_cooccurrence", 2), **kw)


def test_train_fold_runs_and_reports():
    ds = tiny_dataset()
    fold = make_folds(ds, k=3, val_frac=0.2, seed=0)[0]
    model, report = train_fold(ds, fold, tiny_config())
    assert len(report.train_losses) == len(report.val_auc)
    assert report.best_epoch >= 0
    assert report.best_val_auc == max(report.val_auc)
    assert set(report.test_metrics) == {"auc", "acc", "consistency",
                                        "gaucm", "repetition"}
    assert report.test_metrics["consistency"] == 1.0


def test_patience_zero_stops_at_first_non_improving():
    ds = tiny_dataset()
    fold = make_folds(ds, k=3, val_frac=0.2, seed=0)[0]
    cfg = tiny_config(patience=0, max_epochs=50)
    _, report = train_fold(ds, fold, cfg, compute_test_metrics=False)
    # ran until the first epoch whose validation AUC failed to improve
    aucs = report.val_auc
    assert len(aucs) < 50
    assert aucs[-1] <= max(aucs[:-1])
    for i in range(1, len(aucs) - 1):
        assert aucs[i] > max(aucs[:i])  # every interior epoch improved


def test_early_stop_returns_best_checkpoint():
    ds = tiny_dataset(seed=3)
    fold = make_folds(ds, k=3, val_frac=0.2, seed=1)[0]
    cfg = tiny_config(patience=1, max_epochs=20)
    model, report = train_fold(ds, fold, cfg, compute_test_metrics=False)
    # the returned parameters reproduce the best recorded validation AUC
    from graphkt import metrics
    from graphkt.train import _predictions
    pairs = _predictions(model, ds, fold.val, cfg)
    assert abs(metrics.auc(pairs) - report.best_val_auc) < 1e-12


def test_loss_decreases_on_learnable_data():
    ds = tiny_dataset(n_students=30, length=10, seed=5)
    fold = make_folds(ds, k=3, val_frac=0.1, seed=0)[0]
    cfg = tiny_config(max_epochs=6, patience=6)
    _, report = train_fold(ds, fold, cfg, compute_test_metrics=False)
    assert report.train_losses[5] < report.train_losses[0]


def test_training_deterministic_same_seed():
    ds = tiny_dataset()
    fold = make_folds(ds, k=3, val_frac=0.2, seed=0)[0]
    m1, r1 = train_fold(ds, fold, tiny_config())
    m2, r2 = train_fold(ds, fold, tiny_config())
    assert r1.train_losses == r2.train_losses
    assert r1.test_metrics == r2.test_metrics
    for name in m1.store.names():
        assert np.array_equal(m1.store.value(name), m2.store.value(name))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the blow-up overflows
def test_divergence_raises_with_location():
    ds = tiny_dataset()
    fold = make_folds(ds, k=3, val_frac=0.2, seed=0)[0]
    cfg = tiny_config()
    cfg.hp.lr = 1e9  # guaranteed blow-up
    with pytest.raises(TrainingDiverged) as err:
        train_fold(ds, fold, cfg)
    assert err.value.epoch >= 0 and err.value.batch >= 0


# -- masking ---------------------------------------------------------------------


def test_padded_steps_never_affect_loss():
    ds = tiny_dataset(n_students=6, length=7)
    # pad to length 10: three sentinel responses per sequence
    ds = preprocess(ds, seq_len=10, min_len=2)
    fold = make_folds(ds, k=2, val_frac=0.2, seed=0)[0]
    cfg = tiny_config(max_epochs=1)
    graphs = graphs_for_fold(ds, fold, cfg)
    model = GrktModel(cfg.hp, ds.n_questions, ds.n_kcs, graphs)

    def loss_of(dataset):
        _, cache = model.begin("train")
        preds = []
        for idx in fold.train:
            preds.extend(model.forward_sequence(dataset.sequences[idx],
                                                cache).preds)
        return bce_loss_node(preds).value.item()

    base = loss_of(ds)
    # corrupt every padded slot
    for seq in ds.sequences:
        for t in range(seq.valid_len, len(seq.responses)):
            seq.responses[t] = Response(ds.padding_question(),
                                        (ds.padding_kc(),), 1, 999999999)
    assert loss_of(ds) == base


# -- ablations ---------------------------------------------------------------------


def test_ablation_flags_drop_graphs():
    g = KcRelationGraphs(4, {(0, 1): 0.9}, {(2, 3): 0.8})
    sim_only = apply_ablation(g, tiny_config(drop_prerequisite=True))
    assert sim_only.edge_count("P") == 0 and sim_only.edge_count("S") == 0
    assert sim_only.edge_count("R") == 2
    pre_only = apply_ablation(g, tiny_config(drop_similarity=True))
    assert pre_only.edge_count("P") == 1 and pre_only.edge_count("R") == 0
    none = apply_ablation(g, tiny_config(drop_all_graphs=True))
    assert all(none.edge_count(k) == 0 for k in ("P", "S", "R"))


def test_drop_all_graphs_collapses_support():
    ds = tiny_dataset()
    fold = make_folds(ds, k=3, val_frac=0.2, seed=0)[0]
    cfg = tiny_config(drop_all_graphs=True)
    graphs = graphs_for_fold(ds, fold, cfg)
    model = GrktModel(cfg.hp, ds.n_questions, ds.n_kcs, graphs)
    _, cache = model.begin("eval")
    H = cache.h0
    new_H = model.stage2_strengthen(H, 0, (1,), 1, cache)
    changed = {c for c in range(ds.n_kcs)
               if not np.array_equal(new_H.value[c], H.value[c])}
    assert changed <= {1}


def test_stage3_disabled_makes_timestamps_irrelevant():
    ds = tiny_dataset(n_students=8, length=6, seed=9)
    fold = make_folds(ds, k=2, val_frac=0.2, seed=0)[0]
    cfg = tiny_config(disable_stage3=True, max_epochs=2)
    _, report = train_fold(ds, fold, cfg, compute_test_metrics=False)

    # strictly monotone timestamp reparameterization: t -> 3t^2 + 5
    warped_rows = []
    for seq in ds.sequences:
        for r in seq.real():
            warped_rows.append((seq.student, r.question, r.kcs, r.correct,
                                3 * r.timestamp * r.timestamp + 5))
    warped = preprocess(make_dataset(warped_rows, n_questions=ds.n_questions,
                                     n_kcs=ds.n_kcs),
                        seq_len=ds.seq_len, min_len=2)
    _, report2 = train_fold(warped, fold, cfg, compute_test_metrics=False)
    assert report.train_losses == report2.train_losses
    assert report.val_auc == report2.val_auc


# -- evaluation and cross-validation --------------------------------------------


def test_evaluate_full_metric_set():
    ds = tiny_dataset()
    fold = make_folds(ds, k=3, val_frac=0.2, seed=0)[0]
    cfg = tiny_config()
    graphs = graphs_for_fold(ds, fold, cfg)
    model = GrktModel(cfg.hp, ds.n_questions, ds.n_kcs, graphs)
    report = evaluate(model, ds, fold.test, cfg)
    for value in report.to_dict().values():
        assert 0.0 <= value <= 1.0
    assert report.consistency == 1.0


def test_cross_validate_aggregates():
    ds = tiny_dataset(n_students=10)
    cv = cross_validate(ds, tiny_config(max_epochs=1), k=2, val_frac=0.2)
    assert len(cv.fold_reports) == 2
    for key in ("auc", "acc", "consistency"):
        assert key in cv.mean and key in cv.std
    vals = [r.test_metrics["auc"] for r in cv.fold_reports]
    assert abs(cv.mean["auc"] - np.mean(vals)) < 1e-12


def test_cross_validate_deterministic():
    ds = tiny_dataset(n_students=10)
    a = cross_validate(ds, tiny_config(max_epochs=1), k=2, val_frac=0.2)
    b = cross_validate(ds, tiny_config(max_epochs=1), k=2, val_frac=0.2)
    assert a.mean == b.mean and a.std == b.std


def test_graphs_for_fold_uses_training_split_only():
    # the test split carries the only discordant pairs; leakage-safe mining
    # must not see them
    rows = []
    for s in range(6):
        rows.append((s, 0, (0,), 1, 100))
        rows.append((s, 1, (1,), 1, 200))
    for s in range(6, 9):
        rows.append((s, 0, (0,), 1, 100))
        rows.append((s, 1, (1,), 0, 200))
    ds = preprocess(make_dataset(rows, n_questions=2, n_kcs=2),
                    seq_len=2, min_len=1)
    fold = type("F", (), {})()
    fold.train = tuple(range(6))
    fold.val = ()
    fold.test = tuple(range(6, 9))
    cfg = tiny_config(min_cooccurrence=1)
    leak_free = graphs_for_fold(ds, fold, cfg)
    assert leak_free.edge_count("P") == 0
    cfg_full = tiny_config(min_cooccurrence=1, use_full_graphs=True)
    with_test = graphs_for_fold(ds, fold, cfg_full)
    assert with_test.edge_count("P") == 1
