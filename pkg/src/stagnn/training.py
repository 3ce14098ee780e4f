"""Training loop: Adam, reduce-on-plateau, early stopping, splits, metrics and voting."""
from __future__ import annotations

import csv
import io
import math
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import networkx as nx
import numpy as np
from threadpoolctl import threadpool_limits

from .graph import Graph, GraphBatch, SuperGraph
from .nn import GraphClassifier, ModelConfig, load_checkpoint, save_checkpoint

METRICS_HEADER = ("epoch", "train_loss", "val_loss", "val_acc", "lr")


class NumericError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    plateau_patience: int = 20
    lr_factor: float = 0.1
    lr_min: float = 1e-6
    early_stop_patience: int = 200
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    batch_size: int = 64
    seed: int = 0
    max_epochs: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    deterministic: bool = False
    threads: int | None = None
    time_budget: float | None = None

    def __post_init__(self):
        self.split = tuple(float(s) for s in self.split)
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split must be three non-negative fractions summing to 1, got {self.split}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be positive")
        if self.lr0 <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("lr0, batch_size and max_epochs must be positive")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")


@dataclass
class TrainState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float
    step: int = 0
    plateau_best: float = math.inf
    plateau_wait: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = -1
    stop_wait: int = 0
    best_params: dict[str, np.ndarray] | None = None

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], lr: float) -> "TrainState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            lr=lr,
        )


# ---------------------------------------------------------------- splits


def split_sizes(n: int, fractions=(0.70, 0.15, 0.15)) -> tuple[int, int, int]:
    """Train and validation take the floor of their share; test takes the rest."""
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


def _controlled_rounding(counts: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    """Integer class x split table with floor/ceil cells and exact margins."""
    n = counts.sum()
    share = np.outer(counts, sizes) / max(n, 1)
    table = np.floor(share + 1e-9).astype(np.int64)
    row_need = counts - table.sum(axis=1)
    col_need = np.asarray(sizes) - table.sum(axis=0)
    g = nx.DiGraph()
    for k, r in enumerate(row_need):
        g.add_edge("s", ("c", k), capacity=int(r))
        for j in range(len(sizes)):
            if share[k, j] - table[k, j] > 1e-9:
                g.add_edge(("c", k), ("p", j), capacity=1)
    for j, c in enumerate(col_need):
        g.add_edge(("p", j), "t", capacity=int(c))
    value, flow = nx.maximum_flow(g, "s", "t")
    if value != row_need.sum():
        raise RuntimeError("stratified rounding failed")
    for k in range(len(counts)):
        for j, f in flow.get(("c", k), {}).items():
            table[k, j[1]] += f
    return table


def split_dataset(items: Sequence, seed: int = 0, labels: Sequence | None = None,
                  fractions=(0.70, 0.15, 0.15)) -> tuple[list, list, list]:
    """Disjoint seeded train/validation/test split, stratified when ``labels`` is given.

    Each class contributes the floor or ceiling of its proportional share to
    every split, so per-class counts stay within one item of the global mix.
    """
    n = len(items)
    sizes = split_sizes(n, fractions)
    rng = np.random.default_rng(seed)
    if labels is None:
        order = rng.permutation(n)
        parts = np.split(order, np.cumsum(sizes)[:-1])
    else:
        labels = np.asarray(labels)
        if len(labels) != n:
            raise ValueError("labels and items differ in length")
        classes, inverse = np.unique(labels, return_inverse=True)
        table = _controlled_rounding(np.bincount(inverse, minlength=len(classes)), sizes)
        parts = [[] for _ in sizes]
        for k in range(len(classes)):
            members = rng.permutation(np.flatnonzero(inverse == k))
            for j, chunk in enumerate(np.split(members, np.cumsum(table[k])[:-1])):
                parts[j].extend(chunk.tolist())
        parts = [rng.permutation(np.array(p, dtype=np.int64)) for p in parts]
    return tuple([items[i] for i in p] for p in parts)


# ---------------------------------------------------------------- optimiser and schedules


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: TrainState,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params


def plateau_schedule(state: TrainState, val_loss: float, patience: int = 20, factor: float = 0.1,
                     lr_min: float = 1e-6) -> TrainState:
    """Shrink the learning rate after ``patience`` epochs without a new best loss."""
    if val_loss < state.plateau_best:
        state.plateau_best = val_loss
        state.plateau_wait = 0
        return state
    state.plateau_wait += 1
    if state.plateau_wait >= patience:
        state.lr = max(state.lr * factor, lr_min)
        state.plateau_wait = 0
    return state


def early_stop(state: TrainState, val_loss: float, params: dict[str, np.ndarray] | None = None,
               patience: int = 200, epoch: int = -1) -> bool:
    """Track the best checkpoint; return True once ``patience`` epochs pass without improvement."""
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.best_epoch = epoch
        state.stop_wait = 0
        if params is not None:
            state.best_params = {k: v.copy() for k, v in params.items()}
        return False
    state.stop_wait += 1
    return state.stop_wait >= patience


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    loss: float = math.nan


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def accuracy_from_predictions(y_true, y_pred, n_classes: int) -> EvalResult:
    y_true = np.asarray(y_true)
    if len(y_true) == 0:
        raise ValueError("cannot evaluate an empty split")
    cm = confusion_matrix(y_true, y_pred, n_classes)
    return EvalResult(float(np.trace(cm) / cm.sum()), cm)


def _batches(graphs: Sequence[Graph], size: int, dtype) -> list[GraphBatch]:
    return [GraphBatch(list(graphs[i:i + size]), dtype=dtype) for i in range(0, len(graphs), size)]


def _loss_and_acc(model: GraphClassifier, batches: Sequence[GraphBatch], labels: np.ndarray):
    total, correct, k = 0.0, 0, 0
    preds = []
    for b in batches:
        y = labels[k:k + b.n_graphs]
        logits = model.logits(b).data.astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total += -logp[np.arange(len(y)), y].sum()
        p = logits.argmax(axis=1)
        preds.append(p)
        correct += int((p == y).sum())
        k += b.n_graphs
    n = max(k, 1)
    return float(total / n), correct / n, np.concatenate(preds) if preds else np.zeros(0, np.int64)


def evaluate(model, graphs: Sequence[Graph], labels, batch_size: int = 256) -> EvalResult:
    """Accuracy, confusion matrix and mean loss of a model or checkpoint path on a split."""
    if not isinstance(model, GraphClassifier):
        model, _ = load_checkpoint(model)
    labels = np.asarray(labels, dtype=np.int64)
    if len(graphs) == 0:
        raise ValueError("cannot evaluate an empty split")
    loss, _, pred = _loss_and_acc(model, _batches(graphs, batch_size, model.dtype), labels)
    res = accuracy_from_predictions(labels, pred, model.cfg.n_classes)
    res.loss = float(loss)
    return res


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: GraphClassifier
    history: list[dict]
    test: EvalResult | None
    best_epoch: int
    stopped_early: bool
    splits: tuple[np.ndarray, np.ndarray, np.ndarray] = field(repr=False, default=None)


def _format_row(row: dict) -> list[str]:
    return [str(row["epoch"])] + [repr(float(row[k])) for k in METRICS_HEADER[1:]]


def metrics_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for row in history:
        w.writerow(_format_row(row))
    return buf.getvalue()


def train(cfg: ModelConfig, graphs: Sequence[Graph], labels, tcfg: TrainConfig | None = None, *,
          splits: tuple[Sequence[int], Sequence[int], Sequence[int]] | None = None,
          metrics_path=None, checkpoint_path=None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Fit a graph classifier and report test accuracy once, on the held-out split.

    ``splits`` may hold explicit (train, val, test) index arrays; otherwise a
    stratified split is drawn from ``tcfg.seed``. The metrics CSV is rewritten
    after every epoch so an interrupted run still leaves a usable log.
    """
    tcfg = tcfg or TrainConfig()
    labels = np.asarray(labels, dtype=np.int64)
    if len(graphs) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(labels) != len(graphs):
        raise ValueError(f"{len(graphs)} graphs but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= cfg.n_classes:
        raise ValueError(f"labels must lie in [0, {cfg.n_classes})")

    if tcfg.deterministic or tcfg.threads:
        limits = threadpool_limits(limits=1 if tcfg.deterministic else tcfg.threads)
    else:
        limits = nullcontext()
    with limits:
        return _train(cfg, graphs, labels, tcfg, splits, metrics_path, checkpoint_path, log)


def _train(cfg, graphs, labels, tcfg, splits, metrics_path, checkpoint_path, log) -> TrainResult:
    idx = np.arange(len(graphs))
    if splits is None:
        tr, va, te = (np.asarray(s, dtype=np.int64) for s in split_dataset(idx, tcfg.seed, labels, tcfg.split))
    else:
        tr, va, te = (np.asarray(s, dtype=np.int64) for s in splits)
    if len(tr) == 0:
        raise ValueError("training split is empty")

    model = GraphClassifier(cfg, seed=tcfg.seed, dtype=np.float32)
    rng = np.random.default_rng(tcfg.seed)
    state = TrainState.fresh(model.params, tcfg.lr0)
    val_batches = _batches([graphs[i] for i in va], 256, model.dtype) if len(va) else []
    history: list[dict] = []
    stopped = False
    t0 = time.perf_counter()

    for epoch in range(1, tcfg.max_epochs + 1):
        order = tr[rng.permutation(len(tr))]
        total, seen = 0.0, 0
        for s in range(0, len(order), tcfg.batch_size):
            chunk = order[s:s + tcfg.batch_size]
            batch = GraphBatch([graphs[i] for i in chunk], dtype=model.dtype)
            loss, grads, _ = model.loss_and_grads(batch, labels[chunk])
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise NumericError(
                    f"non-finite loss {loss} at epoch {epoch}, step {state.step + 1} (lr {state.lr:g})"
                )
            adam_step(model.params, grads, state, tcfg.beta1, tcfg.beta2, tcfg.eps)
            total += loss * len(chunk)
            seen += len(chunk)
        train_loss = total / seen

        if val_batches:
            val_loss, val_acc, _ = _loss_and_acc(model, val_batches, labels[va])
        else:
            val_loss, val_acc = train_loss, math.nan
        history.append(dict(epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_acc=val_acc, lr=state.lr))
        if log:
            log(f"epoch {epoch:4d}  train {train_loss:.4f}  val {val_loss:.4f}  acc {val_acc:.4f}  lr {state.lr:.1e}")

        stop = early_stop(state, val_loss, model.params, tcfg.early_stop_patience, epoch)
        plateau_schedule(state, val_loss, tcfg.plateau_patience, tcfg.lr_factor, tcfg.lr_min)
        if metrics_path is not None:
            Path(metrics_path).write_text(metrics_csv(history))
        if stop:
            stopped = True
            break
        if tcfg.time_budget is not None and time.perf_counter() - t0 > tcfg.time_budget:
            break

    if state.best_params is not None:
        model.params = state.best_params
    if metrics_path is not None:
        Path(metrics_path).write_text(metrics_csv(history))
    test = evaluate(model, [graphs[i] for i in te], labels[te]) if len(te) else None
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, extra={
            "best_epoch": state.best_epoch,
            "test_accuracy": None if test is None else test.accuracy,
        })
    return TrainResult(model, history, test, state.best_epoch, stopped, (tr, va, te))


# ---------------------------------------------------------------- voting ensemble

NO_CHANGE = "no-change"

DEFAULT_VOTING_TABLE: dict[tuple[str, str], str] = {
    ("barren", "built-up"): "construction",
    ("crop", "built-up"): "construction",
    ("built-up", "barren"): "destruction",
    ("built-up", "crop"): "destruction",
    ("barren", "crop"): "cultivation",
    ("crop", "barren"): "de-cultivation",
}


def load_voting_table(path) -> dict[tuple[str, str], str]:
    """Read a ``from,to,transition`` CSV into a voting table."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != {"from", "to", "transition"}:
        raise ValueError(f"{path}: expected columns from,to,transition")
    return {(r["from"].strip(), r["to"].strip()): r["transition"].strip() for r in rows}


def ensemble_vote(frame_classes: Sequence[str], table: dict[tuple[str, str], str] | None = None) -> str:
    """Transition implied by the first and last per-frame land-use classes.

    Intermediate frames are ignored, so a sequence with two transitions is
    resolved by its end points only.
    """
    if len(frame_classes) < 2:
        raise ValueError("voting needs at least two frames")
    table = DEFAULT_VOTING_TABLE if table is None else table
    first, last = frame_classes[0], frame_classes[-1]
    if first == last:
        return NO_CHANGE
    try:
        return table[(first, last)]
    except KeyError:
        raise KeyError(f"no transition defined for {first!r} -> {last!r}") from None


@dataclass
class Ensemble:
    """One spatial classifier per time step plus the voting table."""

    models: list[GraphClassifier]
    frame_classes: list[str]
    transitions: list[str]
    table: dict[tuple[str, str], str]

    def frame_predictions(self, sgs: Sequence[SuperGraph]) -> np.ndarray:
        """Per-frame class ids, ``n_samples x T``."""
        cols = [m.predict(GraphBatch([sg.frame(t) for sg in sgs], dtype=m.dtype)) for t, m in enumerate(self.models)]
        return np.stack(cols, axis=1)

    def predict(self, sgs: Sequence[SuperGraph]) -> np.ndarray:
        fp = self.frame_predictions(sgs)
        index = {c: i for i, c in enumerate(self.transitions)}
        return np.array(
            [index[ensemble_vote([self.frame_classes[c] for c in row], self.table)] for row in fp],
            dtype=np.int64,
        )


def train_ensemble(cfg: ModelConfig, sgs: Sequence[SuperGraph], frame_labels, frame_classes: Sequence[str],
                   transitions: Sequence[str], tcfg: TrainConfig | None = None, *,
                   splits=None, table=None, log=None) -> Ensemble:
    """Train ``T`` spatial models, model ``t`` on frame ``t`` of every training sample."""
    frame_labels = np.asarray(frame_labels, dtype=np.int64)
    T = frame_labels.shape[1]
    models = []
    for t in range(T):
        frames = [sg.frame(t) for sg in sgs]
        res = train(cfg, frames, frame_labels[:, t], tcfg, splits=splits, log=log)
        models.append(res.model)
    return Ensemble(models, list(frame_classes), list(transitions), dict(table or DEFAULT_VOTING_TABLE))
