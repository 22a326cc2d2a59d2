"""Weighted loss, optimizer, schedule, early stopping, per-fold training and
cross-fold ensembling.

One caveat is deliberate: in leave-one-out runs the held-out patient doubles
as the fold's validation set for early stopping and as its test set, which
biases the per-fold model selection optimistically.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import corpus, imageops
from .corpus import Fold, PreprocessConfig, SplitPlan
from .errors import (
    ConfigurationError,
    DegenerateClassError,
    LabelError,
    ShapeError,
)
from .ingest import Manifest, SampleRecord
from .metrics import PredictionRecord
from .net import (
    NetConfig,
    ParameterSet,
    build_model,
    calibrate_running_stats,
    forward,
    gradients,
    load_checkpoint,
    save_checkpoint,
    softmax,
)


@dataclass
class ClassWeightVector:
    """Inverse-frequency class weights: total / (num_classes * count_i)."""

    total_samples: int
    num_classes: int
    class_counts: list[int]
    weights: list[float]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


def class_weights(class_counts: Sequence[int]) -> ClassWeightVector:
    counts = [int(c) for c in class_counts]
    zero = [i for i, c in enumerate(counts) if c < 1]
    if zero:
        raise DegenerateClassError(
            f"classes {zero} have zero samples; weight formula divides by the count"
        )
    total = sum(counts)
    k = len(counts)
    weights = [total / (k * c) for c in counts]
    return ClassWeightVector(
        total_samples=total, num_classes=k, class_counts=counts, weights=weights
    )


def weighted_cross_entropy(
    logits: np.ndarray, labels: Sequence[int], weights: ClassWeightVector | Sequence[float]
) -> float:
    """Weighted-mean cross entropy: sum_n w_yn * CE_n / sum_n w_yn."""
    from .net.model import _weighted_ce

    w = weights.as_array() if isinstance(weights, ClassWeightVector) else np.asarray(weights)
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N×C, got {logits.shape}")
    if len(w) != logits.shape[1]:
        raise LabelError(f"{len(w)} weights for {logits.shape[1]} classes")
    loss, _ = _weighted_ce(logits, labels, w)
    return loss


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 1
    max_epochs: int = 40
    early_stop_patience: int = 10
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.early_stop_patience < 1:
            raise ConfigurationError(
                f"early_stop_patience must be >= 1, got {self.early_stop_patience}"
            )
        if self.max_epochs < 2:
            raise ConfigurationError(f"max_epochs must be >= 2, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_epochs < 1:
            raise ConfigurationError(f"warmup_epochs must be >= 1, got {self.warmup_epochs}")

    @classmethod
    def from_json_file(cls, path: str | Path) -> "TrainConfig":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "warmup_epochs": self.warmup_epochs,
            "max_epochs": self.max_epochs,
            "early_stop_patience": self.early_stop_patience,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }


def lr_at(global_step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Per-step schedule: linear warmup over the first epoch(s), then cosine
    annealing to zero over the remaining steps."""
    if steps_per_epoch < 1:
        raise ConfigurationError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    base = config.learning_rate
    warmup_steps = config.warmup_epochs * steps_per_epoch
    total_steps = config.max_epochs * steps_per_epoch
    if global_step < warmup_steps:
        return base * (global_step + 1) / warmup_steps
    t = (global_step - warmup_steps) / (total_steps - warmup_steps)
    t = min(max(t, 0.0), 1.0)
    return 0.5 * base * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamWState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One decoupled-weight-decay update of the given parameters.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta).
    Per-name arithmetic only, so the result is independent of iteration order.
    """
    if set(params) != set(grads):
        raise ShapeError(
            f"gradient names do not match parameters: {sorted(set(params) ^ set(grads))[:5]}"
        )
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    new_params: dict[str, np.ndarray] = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter {theta.shape}")
        g = g.astype(np.float32, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(theta, dtype=np.float32)
            v = np.zeros_like(theta, dtype=np.float32)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bias1
        v_hat = v / bias2
        new_params[name] = (
            theta - lr * (m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * theta)
        ).astype(np.float32)
    return new_params, state


class EarlyStopTracker:
    """Best-so-far tracking with strict improvement and patience in epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1
        self.stale_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch value; returns True when this value is a new best."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.stale_epochs = 0
            return True
        self.stale_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale_epochs >= self.patience


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_accuracy: float
    lr: float


@dataclass
class FoldResult:
    fold_id: int
    best_checkpoint: str
    best_val_accuracy: float
    epoch_of_best: int
    epochs: list[EpochLog]

    def to_json_dict(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "best_checkpoint": self.best_checkpoint,
            "best_val_accuracy": self.best_val_accuracy,
            "epoch_of_best": self.epoch_of_best,
            "epochs": [
                {
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "val_accuracy": e.val_accuracy,
                    "lr": e.lr,
                }
                for e in self.epochs
            ],
        }


def write_epoch_csv(result: FoldResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_accuracy", "lr"])
        for e in result.epochs:
            writer.writerow([e.epoch, f"{e.train_loss:.8f}", f"{e.val_accuracy:.8f}", f"{e.lr:.10f}"])


class FoldData:
    """Per-fold image access with an in-memory decoded-image cache."""

    def __init__(
        self,
        manifest: Manifest,
        fold: Fold,
        data_root: str | Path,
        classes: Sequence[str],
        preprocess: PreprocessConfig,
    ):
        train_ids = set(fold.train_patient_ids)
        test_ids = set(fold.test_patient_ids)
        self.train_records = [r for r in manifest.records if r.patient_id in train_ids]
        self.test_records = [r for r in manifest.records if r.patient_id in test_ids]
        self.data_root = Path(data_root)
        self.classes = tuple(classes)
        self.class_index = {c: i for i, c in enumerate(self.classes)}
        self.preprocess = preprocess
        self._raw: dict[str, np.ndarray] = {}
        for r in self.train_records + self.test_records:
            if r.label not in self.class_index:
                raise LabelError(f"{r.sample_id}: label {r.label!r} not in {self.classes}")

    def raw_image(self, record: SampleRecord) -> np.ndarray:
        img = self._raw.get(record.sample_id)
        if img is None:
            img = imageops.load_image(self.data_root / record.path)
            self._raw[record.sample_id] = img
        return img

    def train_batch(self, records: Sequence[SampleRecord], rng: np.random.Generator):
        xs = [corpus.train_transform(self.raw_image(r), self.preprocess, rng) for r in records]
        ys = np.asarray([self.class_index[r.label] for r in records], dtype=np.int64)
        return np.stack(xs), ys

    def eval_arrays(self, records: Sequence[SampleRecord]):
        xs = [corpus.eval_transform(self.raw_image(r), self.preprocess) for r in records]
        ys = np.asarray([self.class_index[r.label] for r in records], dtype=np.int64)
        return np.stack(xs), ys


def _eval_accuracy(
    params: ParameterSet, config: NetConfig, x: np.ndarray, y: np.ndarray, batch_size: int
) -> float:
    correct = 0
    for i in range(0, len(x), batch_size):
        logits = forward(params, x[i : i + batch_size], config)
        correct += int((logits.argmax(axis=1) == y[i : i + batch_size]).sum())
    return correct / len(x)


def train_fold(
    fold_id: int,
    manifest: Manifest,
    plan: SplitPlan,
    net_config: NetConfig,
    train_config: TrainConfig,
    data_root: str | Path,
    out_dir: str | Path,
    classes: Sequence[str] | None = None,
    preprocess: PreprocessConfig | None = None,
) -> FoldResult:
    """Train one fold to its early-stopped best checkpoint.

    The checkpoint is rewritten whenever validation accuracy strictly exceeds
    the previous best; training stops after ``early_stop_patience`` epochs
    without improvement or at ``max_epochs``. Deterministic given the fold,
    corpus and seeds.
    """
    fold = plan.fold(fold_id)
    classes = tuple(classes) if classes is not None else corpus.FIVE_CLASSES
    preprocess = preprocess or PreprocessConfig()
    if net_config.num_classes != len(classes):
        raise ConfigurationError(
            f"net has {net_config.num_classes} classes, task has {len(classes)}"
        )
    data = FoldData(manifest, fold, data_root, classes, preprocess)
    if not data.train_records:
        raise ConfigurationError(f"fold {fold_id} has an empty training set")
    if not data.test_records:
        raise ConfigurationError(f"fold {fold_id} has an empty validation set")

    counts = [0] * len(classes)
    for r in data.train_records:
        counts[data.class_index[r.label]] += 1
    weights = class_weights(counts).as_array()

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / f"fold{fold_id:03d}.best.ckpt"

    rng = np.random.default_rng([train_config.seed % 2**64, fold_id])
    params = build_model(net_config, seed=int(rng.integers(2**63)))
    n_train = len(data.train_records)
    calib_x, _ = data.eval_arrays(data.train_records[: min(n_train, 32)])
    calibrate_running_stats(params, calib_x, net_config)
    opt_state = AdamWState()
    tracker = EarlyStopTracker(train_config.early_stop_patience)
    steps_per_epoch = math.ceil(n_train / train_config.batch_size)
    val_x, val_y = data.eval_arrays(data.test_records)

    logs: list[EpochLog] = []
    global_step = 0
    lr = 0.0
    for epoch in range(train_config.max_epochs):
        order = rng.permutation(n_train)
        loss_sum = 0.0
        for start in range(0, n_train, train_config.batch_size):
            batch_records = [data.train_records[i] for i in order[start : start + train_config.batch_size]]
            x, y = data.train_batch(batch_records, rng)
            loss, grads = gradients(
                params, x, y, weights, net_config, update_running_stats=True
            )
            lr = lr_at(global_step, steps_per_epoch, train_config)
            trainable = {n: params[n] for n in params.trainable_names()}
            grad_sub = {n: grads[n] for n in trainable}
            updated, opt_state = adamw_step(trainable, grad_sub, opt_state, lr, train_config)
            for name, arr in updated.items():
                params[name] = arr
            global_step += 1
            loss_sum += loss * len(batch_records)
        val_acc = _eval_accuracy(params, net_config, val_x, val_y, train_config.batch_size)
        logs.append(EpochLog(epoch, loss_sum / n_train, val_acc, lr))
        if tracker.update(epoch, val_acc):
            save_checkpoint(params, net_config, ckpt_path)
        if tracker.should_stop:
            break

    result = FoldResult(
        fold_id=fold_id,
        best_checkpoint=str(ckpt_path),
        best_val_accuracy=tracker.best,
        epoch_of_best=tracker.best_epoch,
        epochs=logs,
    )
    (out_dir / f"fold{fold_id:03d}.result.json").write_text(
        json.dumps(result.to_json_dict(), indent=2) + "\n", encoding="utf-8"
    )
    write_epoch_csv(result, out_dir / f"fold{fold_id:03d}.epochs.csv")
    return result


def predict_records(
    params: ParameterSet,
    net_config: NetConfig,
    records: Sequence[SampleRecord],
    data: FoldData,
    fold_id: int,
    batch_size: int = 16,
) -> list[PredictionRecord]:
    """Per-image softmax probabilities for the given records."""
    x, _ = data.eval_arrays(records)
    probs = []
    for i in range(0, len(x), batch_size):
        probs.append(softmax(forward(params, x[i : i + batch_size], net_config)))
    probs = np.concatenate(probs) if probs else np.zeros((0, net_config.num_classes))
    return [
        PredictionRecord(
            sample_id=r.sample_id,
            patient_id=r.patient_id,
            fold_id=fold_id,
            true_label=r.label,
            probabilities=[float(p) for p in probs[i]],
            gestational_age_days=r.gestational_age_days,
        )
        for i, r in enumerate(records)
    ]


def ensemble_predict(models, image: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the per-model softmax probabilities for one image.

    ``models`` holds checkpoint paths or already-loaded (params, config)
    pairs; all must agree on the class count.
    """
    if not models:
        raise ConfigurationError("ensemble needs at least one model")
    loaded = []
    for m in models:
        if isinstance(m, (str, Path)):
            loaded.append(load_checkpoint(m))
        else:
            loaded.append(m)
    num_classes = {cfg.num_classes for _, cfg in loaded}
    if len(num_classes) != 1:
        raise ConfigurationError(f"models disagree on num_classes: {sorted(num_classes)}")
    if image.ndim != 3:
        raise ShapeError(f"expected a single C×H×W image, got {image.shape}")
    acc = np.zeros(num_classes.pop(), dtype=np.float64)
    for params, cfg in loaded:
        logits = forward(params, image[None], cfg)
        acc += softmax(logits)[0]
    return acc / len(loaded)
