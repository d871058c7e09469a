"""Fine-tuning loop, test-set evaluation and prediction benchmarking."""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import tensorflow as tf

from .augment import augment_batch
from .errors import DivergedLoss, EmptySplit, InvalidSpec
from .metrics import predict_labels
from .model import ModelHandle, predict, save_model

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    checkpoint_policy: str = "best_val_accuracy"
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidSpec("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidSpec("batch_size must be >= 1")
        if self.checkpoint_policy != "best_val_accuracy":
            raise InvalidSpec(f"unsupported checkpoint policy {self.checkpoint_policy!r}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise InvalidSpec("early_stop_patience must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    @property
    def best_epoch(self) -> int | None:
        """Epoch (1-based) with the highest val accuracy, earliest on ties."""
        if not self.records:
            return None
        return max(self.records, key=lambda r: (r.val_acc, -r.epoch)).epoch

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_FIELDS)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in HISTORY_FIELDS[1:]])

    @classmethod
    def from_csv(cls, path) -> "TrainingHistory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([EpochRecord(int(r["epoch"]), *(float(r[k]) for k in HISTORY_FIELDS[1:])) for r in rows])


@dataclass
class PredictionSet:
    indices: np.ndarray
    y_true: np.ndarray
    y_prob: np.ndarray
    y_pred: np.ndarray
    wall_seconds: float

    def __post_init__(self):
        n = len(self.y_true)
        if not (len(self.y_pred) == n == len(self.y_prob) == len(self.indices)):
            raise ValueError("prediction set columns have different lengths")

    def to_csv(self, path) -> None:
        k = self.y_prob.shape[1] if self.y_prob.ndim == 2 else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "true", "pred"] + [f"p{j}" for j in range(k)])
            for i, t, p, row in zip(self.indices, self.y_true, self.y_pred, self.y_prob):
                w.writerow([int(i), int(t), int(p)] + [repr(float(v)) for v in row])


def read_predictions_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Read ``index,true,pred`` or ``index,true,p0..pK`` files.

    Returns ``(y_true, y_pred, y_prob)``; ``y_prob`` is None without p-columns.
    When both are present, ``pred`` must agree with the argmax of the p-columns.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        rows = list(reader)
    if "true" not in cols:
        raise ValueError(f"{path}: missing 'true' column")
    pcols = sorted((c for c in cols if c.startswith("p") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    y_true = np.array([int(r["true"]) for r in rows], dtype=np.int64)
    y_prob = np.array([[float(r[c]) for c in pcols] for r in rows]) if pcols else None
    if "pred" in cols:
        y_pred = np.array([int(r["pred"]) for r in rows], dtype=np.int64)
        if y_prob is not None and len(rows) and not np.array_equal(predict_labels(y_prob), y_pred):
            raise ValueError(f"{path}: 'pred' column disagrees with probability argmax")
    elif y_prob is not None:
        y_pred = predict_labels(y_prob) if len(rows) else np.zeros(0, dtype=np.int64)
    else:
        raise ValueError(f"{path}: need a 'pred' column or p0..pK columns")
    return y_true, y_pred, y_prob


def _epoch_order(indices: Sequence[int], seed: int, epoch: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(epoch), 0x5EED])))
    return np.asarray(indices)[rng.permutation(len(indices))]


def _eval_inputs(handle: ModelHandle, cache, indices) -> np.ndarray:
    return augment_batch(cache.images(indices), handle.augmentation, training=False)


def _make_train_step(handle: ModelHandle):
    model = handle.model
    optimizer = model.optimizer
    loss_fn = handle.loss_fn
    shape = (None,) + tuple(handle.backbone.input_shape)

    @tf.function(input_signature=[tf.TensorSpec(shape, tf.float32), tf.TensorSpec((None,), tf.int64)])
    def step(x, y):
        with tf.GradientTape() as tape:
            prob = model(x, training=True)
            loss = loss_fn(y, prob)
        grads = tape.gradient(loss, model.trainable_variables)
        optimizer.apply(grads, model.trainable_variables)
        return loss, prob, tf.linalg.global_norm(grads)

    return step


def _dump_divergence(handle, run_dir: Path, history: TrainingHistory, epoch: int, batch: int) -> Path:
    dump = run_dir / "diverged"
    dump.mkdir(parents=True, exist_ok=True)
    save_model(handle, dump / "state.ckpt")
    (dump / "state.json").write_text(json.dumps(
        {"epoch": epoch, "batch": batch, "history": [asdict(r) for r in history.records]}, indent=1))
    return dump


def train(handle: ModelHandle, split, cache, cfg: TrainConfig, run_dir,
          on_epoch_end: Callable[[EpochRecord], bool | None] | None = None) -> tuple[TrainingHistory, Path]:
    """Fine-tune ``handle`` in place; returns the history and best checkpoint path.

    ``on_epoch_end`` is called with each epoch's record; returning True stops
    training after that epoch.
    """
    if not handle.compiled:
        raise ValueError("model must be compiled before training")
    if not split.train:
        raise EmptySplit("training split is empty")
    if not split.val:
        raise EmptySplit("validation split is empty")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run_dir / "best.ckpt"

    step = _make_train_step(handle)
    loss_fn = handle.loss_fn
    val_idx = list(split.val)
    val_x = _eval_inputs(handle, cache, val_idx)
    val_y = cache.labels(val_idx)

    history = TrainingHistory()
    best_acc, stale = -math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = _epoch_order(split.train, cfg.seed, epoch)
        loss_sum, correct, seen = 0.0, 0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = augment_batch(cache.images(idx), handle.augmentation, training=True,
                              seed=cfg.seed, epoch=epoch, sample_indices=idx)
            y = cache.labels(idx).astype(np.int64)
            loss, prob, gnorm = step(tf.constant(x), tf.constant(y))
            loss, prob = float(loss), np.asarray(prob)
            # the loss clips probabilities and pooling can swallow NaN, so check the gradients too
            if not (math.isfinite(loss) and math.isfinite(float(gnorm)) and np.isfinite(prob).all()):
                dump = _dump_divergence(handle, run_dir, history, epoch, b)
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}, batch {b}",
                                   epoch=epoch, batch=b, dump_path=dump)
            loss_sum += loss * len(idx)
            correct += int((np.argmax(prob, axis=1) == y).sum())
            seen += len(idx)

        val_prob = predict(handle, val_x, cfg.batch_size)
        val_loss = float(loss_fn(val_y, val_prob))
        if not math.isfinite(val_loss):
            dump = _dump_divergence(handle, run_dir, history, epoch, -1)
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}", epoch=epoch, dump_path=dump)
        val_acc = float((predict_labels(val_prob) == val_y).mean())
        rec = EpochRecord(epoch, loss_sum / seen, correct / seen, val_loss, val_acc)
        history.records.append(rec)
        log.info("epoch %d/%d loss %.4f acc %.4f val_loss %.4f val_acc %.4f (%.1fs)", epoch, cfg.epochs,
                 rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc, time.perf_counter() - t0)

        if val_acc > best_acc:
            best_acc, stale = val_acc, 0
            save_model(handle, ckpt)
        else:
            stale += 1
            if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
                log.info("early stop after %d epochs without improvement", stale)
                break
        if on_epoch_end is not None and on_epoch_end(rec):
            break

    history.to_csv(run_dir / "history.csv")
    return history, ckpt


def evaluate(handle: ModelHandle, indices: Sequence[int], cache, batch_size: int = 32) -> PredictionSet:
    """Inference on ``indices``; the clock covers only the predict loop."""
    indices = list(indices)
    if not indices:
        raise EmptySplit("evaluation split is empty")
    x = _eval_inputs(handle, cache, indices)
    y_true = cache.labels(indices).astype(np.int64)
    t0 = time.perf_counter()
    prob = predict(handle, x, batch_size)
    wall = time.perf_counter() - t0
    return PredictionSet(np.asarray(indices), y_true, prob, predict_labels(prob), wall)


def benchmark_predict(handle: ModelHandle, indices: Sequence[int], cache, repeats: int = 3,
                      batch_size: int = 32) -> dict:
    """Time ``repeats`` full prediction passes over already-loaded inputs."""
    if repeats < 1:
        raise InvalidSpec("repeats must be >= 1")
    indices = list(indices)
    x = _eval_inputs(handle, cache, indices) if indices else np.zeros((0,) + tuple(handle.backbone.input_shape),
                                                                       dtype=np.float32)
    samples, outputs = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = predict(handle, x, batch_size)
        samples.append(time.perf_counter() - t0)
        outputs.append(out)
    identical = all(np.array_equal(outputs[0], o) for o in outputs[1:])
    return {
        "n_images": len(indices),
        "repeats": repeats,
        "samples": samples,
        "min": min(samples),
        "median": statistics.median(samples),
        "mean": statistics.fmean(samples),
        "max": max(samples),
        "outputs_identical": identical,
        "n_predictions": int(len(outputs[0])),
    }
