import csv
import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stagnn.graph import Rag, build_supergraph
from stagnn.nn import GraphClassifier, ModelConfig, load_checkpoint
from stagnn.training import (
    DEFAULT_VOTING_TABLE, METRICS_HEADER, NO_CHANGE, NumericError, TrainConfig, TrainState, accuracy_from_predictions,
    adam_step, early_stop, ensemble_vote, evaluate, load_voting_table, metrics_csv, plateau_schedule, split_dataset,
    split_sizes, train, train_ensemble,
)

from conftest import random_graph


# ---------------------------------------------------------------- splits


def test_split_sizes_examples():
    assert split_sizes(100) == (70, 15, 15)
    assert split_sizes(10) == (7, 1, 2)
    assert split_sizes(0) == (0, 0, 0)


@pytest.mark.parametrize("n", [10, 100, 37])
def test_split_is_disjoint_and_complete(n):
    tr, va, te = split_dataset(list(range(n)), seed=3)
    assert (len(tr), len(va), len(te)) == split_sizes(n)
    assert sorted(tr + va + te) == list(range(n))


def test_split_is_deterministic_under_seed():
    items = list(range(50))
    labels = [i % 3 for i in items]
    assert split_dataset(items, 7, labels) == split_dataset(items, 7, labels)
    assert split_dataset(items, 7, labels) != split_dataset(items, 8, labels)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(3, 200))
def test_split_stratification_property(seed, k, n):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, n)
    parts = split_dataset(list(range(n)), seed % 1000, labels)
    sizes = split_sizes(n)
    assert [len(p) for p in parts] == list(sizes)
    assert sorted(sum(parts, [])) == list(range(n))
    for c in np.unique(labels):
        share = (labels == c).sum() / n
        for p, size in zip(parts, sizes):
            count = (labels[p] == c).sum() if p else 0
            assert abs(count - share * size) < 1 + 1e-9


def test_split_rejects_mismatched_labels():
    with pytest.raises(ValueError):
        split_dataset([1, 2, 3], 0, labels=[0, 1])


# ---------------------------------------------------------------- optimiser


def _state(params, lr=1e-3):
    return TrainState.fresh(params, lr)


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    s = _state(p)
    adam_step(p, {"w": np.zeros(2)}, s)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert s.step == 1


def test_adam_first_step_by_hand():
    # After one step the bias-corrected moments are g and g**2 exactly.
    g = np.array([0.5, -3.0, 1e-3])
    p = {"w": np.zeros(3)}
    adam_step(p, {"w": g}, _state(p, lr=0.01))
    np.testing.assert_allclose(p["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_constant_gradient_tends_to_sign_steps():
    g = np.array([2.0, -0.25])
    p = {"w": np.zeros(2)}
    s = _state(p, lr=1e-3)
    for _ in range(500):
        before = p["w"].copy()
        adam_step(p, {"w": g}, s)
    np.testing.assert_allclose(p["w"] - before, -1e-3 * np.sign(g), rtol=1e-6)
    np.testing.assert_allclose(p["w"], -0.5 * np.sign(g), rtol=1e-6)


# ---------------------------------------------------------------- schedules


def _run_plateau(losses):
    s = _state({}, lr=1e-3)
    lrs = []
    for v in losses:
        plateau_schedule(s, v)
        lrs.append(s.lr)
    return lrs


def test_plateau_improving_keeps_lr():
    assert set(_run_plateau(np.linspace(1, 0.1, 60))) == {1e-3}


def test_plateau_flat_epochs_shrink_lr():
    lrs = _run_plateau([1.0] * 41)
    # The first epoch sets the best loss; 20 more flat epochs trigger one cut.
    assert lrs[19] == 1e-3 and lrs[20] == pytest.approx(1e-4)
    assert lrs[40] == pytest.approx(1e-5)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_plateau_respects_floor():
    lrs = _run_plateau([1.0] * 200)
    assert min(lrs) == pytest.approx(1e-6)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=120))
def test_lr_never_increases(losses):
    lrs = _run_plateau(losses)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_early_stop_counter_resets_on_improvement():
    s = _state({})
    assert not early_stop(s, 1.0, epoch=0)
    for e in range(199):
        assert not early_stop(s, 1.0, epoch=e + 1)
    assert s.stop_wait == 199
    assert not early_stop(s, 0.9, epoch=200)
    assert s.stop_wait == 0 and s.best_epoch == 200


def test_early_stop_after_patience_keeps_best_weights():
    s = _state({})
    params = {"w": np.array([1.0])}
    early_stop(s, 0.5, params, epoch=0)
    params["w"][:] = 7.0
    stops = [early_stop(s, 0.6, params, epoch=e) for e in range(1, 201)]
    assert stops[-1] and not any(stops[:-1])
    np.testing.assert_array_equal(s.best_params["w"], [1.0])


def test_early_stop_never_fires_on_decreasing_losses():
    s = _state({})
    assert not any(early_stop(s, 1.0 / (e + 1), epoch=e) for e in range(1000))


def test_train_config_validation():
    for bad in ({"split": (0.5, 0.5, 0.5)}, {"plateau_patience": 0}, {"early_stop_patience": 0}, {"lr0": 0},
                {"lr_factor": 1.5}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---------------------------------------------------------------- evaluation


def test_accuracy_examples():
    y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    perfect = accuracy_from_predictions(y, y, 4)
    assert perfect.accuracy == 1.0
    np.testing.assert_array_equal(perfect.confusion, np.diag([2, 2, 2, 2]))
    assert accuracy_from_predictions(y, np.zeros(8), 4).accuracy == 0.25
    # Fixture: 7 of the 10 predictions are right (positions 2, 5 and 9 are wrong).
    truth = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0])
    pred = np.array([0, 1, 1, 0, 1, 0, 0, 1, 2, 2])
    res = accuracy_from_predictions(truth, pred, 3)
    assert res.accuracy == pytest.approx(0.7)
    np.testing.assert_array_equal(res.confusion, [[3, 0, 1], [0, 3, 0], [1, 1, 1]])
    with pytest.raises(ValueError):
        accuracy_from_predictions([], [], 2)


# ---------------------------------------------------------------- training loop


def _toy_dataset(n=40, seed=0):
    """Two classes told apart by node brightness; graph shapes are random."""
    rng = np.random.default_rng(seed)
    graphs, labels = [], []
    for i in range(n):
        g = random_graph(rng, 4, 8)
        y = i % 2
        feats = g.features.copy()
        feats[:, 0] = 0.8 if y else 0.2
        graphs.append(Rag(feats, g.edges))
        labels.append(y)
    return graphs, np.array(labels)


def _toy_cfg():
    return ModelConfig(in_dim=3, hidden_dims=(8, 8), mlp_dims=(8,), n_classes=2)


def test_toy_separable_reaches_full_val_accuracy(tmp_path):
    graphs, labels = _toy_dataset()
    tcfg = TrainConfig(lr0=1e-2, max_epochs=30, batch_size=8, seed=1)
    res = train(_toy_cfg(), graphs, labels, tcfg, metrics_path=tmp_path / "m.csv", checkpoint_path=tmp_path / "c.json")
    assert max(r["val_acc"] for r in res.history) == 1.0
    assert res.test.accuracy == 1.0
    rows = list(csv.reader(io.StringIO((tmp_path / "m.csv").read_text())))
    assert tuple(rows[0]) == METRICS_HEADER and len(rows) == len(res.history) + 1
    model, extra = load_checkpoint(tmp_path / "c.json")
    assert extra["test_accuracy"] == 1.0
    assert evaluate(tmp_path / "c.json", graphs, labels).accuracy == evaluate(res.model, graphs, labels).accuracy


def test_deterministic_runs_are_bit_identical():
    graphs, labels = _toy_dataset(30, seed=2)
    tcfg = TrainConfig(max_epochs=4, batch_size=8, seed=5, deterministic=True)
    a = train(_toy_cfg(), graphs, labels, tcfg)
    b = train(_toy_cfg(), graphs, labels, tcfg)
    assert metrics_csv(a.history) == metrics_csv(b.history)
    for k in a.model.params:
        np.testing.assert_array_equal(a.model.params[k], b.model.params[k])


def test_training_restores_minimum_validation_loss_weights():
    graphs, labels = _toy_dataset(30, seed=3)
    res = train(_toy_cfg(), graphs, labels, TrainConfig(max_epochs=6, batch_size=8, lr0=0.05))
    best = min(res.history, key=lambda r: r["val_loss"])
    assert res.best_epoch == best["epoch"]
    _, va, _ = res.splits
    val = evaluate(res.model, [graphs[i] for i in va], labels[va])
    assert val.loss == pytest.approx(best["val_loss"], rel=1e-6)


def test_early_stopping_triggers_in_loop():
    graphs, labels = _toy_dataset(20, seed=4)
    res = train(_toy_cfg(), graphs, labels, TrainConfig(max_epochs=100, early_stop_patience=3, lr0=0.3))
    assert res.stopped_early
    assert len(res.history) == res.best_epoch + 3


def test_train_errors():
    graphs, labels = _toy_dataset(10)
    with pytest.raises(ValueError):
        train(_toy_cfg(), [], [])
    with pytest.raises(ValueError):
        train(_toy_cfg(), graphs, labels[:5])
    with pytest.raises(ValueError):
        train(_toy_cfg(), graphs, labels + 5)


def test_nan_loss_aborts_with_diagnostic():
    graphs, labels = _toy_dataset(10)
    bad = [Rag(np.full_like(g.features, np.nan), g.edges) for g in graphs]
    with pytest.raises(NumericError, match="non-finite loss"):
        train(_toy_cfg(), bad, labels, TrainConfig(max_epochs=1))


# ---------------------------------------------------------------- voting


def test_vote_examples():
    assert ensemble_vote(["barren", "built-up"]) == "construction"
    assert ensemble_vote(["crop", "crop"]) == NO_CHANGE
    # Only the end points count, so a crop -> barren -> built-up sequence reads
    # as a single construction even though two transitions happened.
    assert ensemble_vote(["crop", "barren", "built-up"]) == "construction"


def test_vote_errors_and_custom_table(tmp_path):
    with pytest.raises(KeyError):
        ensemble_vote(["barren", "water"])
    with pytest.raises(ValueError):
        ensemble_vote(["barren"])
    path = tmp_path / "table.csv"
    path.write_text("from,to,transition\ncrop,barren,harvesting\n")
    table = load_voting_table(path)
    assert ensemble_vote(["crop", "barren"], table) == "harvesting"
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        load_voting_table(tmp_path / "bad.csv")


def test_default_table_covers_every_ordered_pair():
    covers = ["barren", "built-up", "crop"]
    for a in covers:
        for b in covers:
            if a != b:
                assert (a, b) in DEFAULT_VOTING_TABLE


def test_train_ensemble_end_to_end():
    rng = np.random.default_rng(6)
    frame_classes = ["barren", "built-up", "crop"]
    transitions = ["construction", "cultivation", "de-cultivation", "destruction", NO_CHANGE]
    shade = {0: 0.1, 1: 0.5, 2: 0.9}
    pairs = [(0, 1), (0, 2), (2, 0), (1, 0), (1, 1)]
    sgs, frame_labels = [], []
    for i in range(60):
        a, b = pairs[i % 5]
        rags = []
        for c in (a, b):
            g = random_graph(rng, 4, 7)
            f = g.features.copy()
            f[:, 0] = shade[c]
            rags.append(Rag(f, g.edges))
        sgs.append(build_supergraph(rags))
        frame_labels.append([a, b])
    cfg = ModelConfig(in_dim=3, hidden_dims=(8, 8), mlp_dims=(8,), n_classes=3)
    ens = train_ensemble(cfg, sgs, frame_labels, frame_classes, transitions,
                         TrainConfig(lr0=1e-2, max_epochs=40, batch_size=8))
    assert len(ens.models) == 2 and all(isinstance(m, GraphClassifier) for m in ens.models)
    fp = ens.frame_predictions(sgs)
    assert (fp == np.array(frame_labels)).mean() > 0.9
    expected = [transitions.index(ensemble_vote([frame_classes[c] for c in p])) for p in frame_labels]
    assert (ens.predict(sgs) == np.array(expected)).mean() > 0.8
