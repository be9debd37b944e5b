"""Loss, Adam with value clipping, data partitioning and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError, StratificationError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
FINAL_FOLD = "final"


def cce_loss(probabilities: np.ndarray, one_hot: np.ndarray) -> float:
    """Mean categorical cross-entropy; probabilities are floored at 1e-12."""
    if probabilities.shape != one_hot.shape or probabilities.ndim != 2:
        raise ShapeError(
            f"probabilities {probabilities.shape} and labels {one_hot.shape} must be equal (N, K)"
        )
    p = np.maximum(probabilities.astype(np.float64), PROB_FLOOR)
    return float(-(one_hot * np.log(p)).sum(axis=1).mean())


def one_hot(labels: np.ndarray, num_classes: int = 2, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def clip_elementwise(gradient: np.ndarray, clip_value: float) -> np.ndarray:
    if clip_value <= 0:
        raise ValueError(f"clip_value must be positive, got {clip_value}")
    return np.clip(gradient, -clip_value, clip_value)


class Adam:
    """Adam with bias correction; gradients are value-clipped first when
    ``clip_value`` is set."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 epsilon: float = 1e-7, clip_value: float | None = 1.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.clip_value = clip_value
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        for name, p in params.items():
            if grads[name].shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {grads[name].shape}, expected {p.shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if self.clip_value is not None:
                g = clip_elementwise(g, self.clip_value)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)


# --------------------------------------------------------------------------
# partitioning
# --------------------------------------------------------------------------

def _class_members(indices, labels, classes):
    labels = np.asarray(labels)
    members = []
    for c in classes:
        idx = indices[labels[indices] == c]
        if idx.size == 0:
            raise StratificationError(f"class {c} has no samples; cannot stratify")
        members.append(idx)
    return members


def train_test_split(n: int, ratio: float, labels, seed: int,
                     classes=(0, 1)) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split of ``range(n)``; returns sorted (train, test) indices."""
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    if len(labels) != n:
        raise ShapeError(f"{len(labels)} labels for {n} samples")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for idx in _class_members(np.arange(n), labels, classes):
        idx = rng.permutation(idx)
        cut = math.floor(ratio * idx.size + 0.5)
        train.append(idx[:cut])
        test.append(idx[cut:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


@dataclass
class FoldPlan:
    folds: list[np.ndarray]

    @property
    def k(self) -> int:
        return len(self.folds)

    def training_indices(self, fold: int) -> np.ndarray:
        return np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != fold]))


def kfold_partition(indices, k: int, labels, seed: int, classes=(0, 1)) -> FoldPlan:
    """Stratified k-fold plan: per-class members are shuffled, laid end to end
    and dealt round-robin, so every fold and every class is balanced within 1."""
    indices = np.asarray(indices)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > indices.size:
        raise ValueError(f"cannot make {k} folds from {indices.size} samples")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(m) for m in _class_members(indices, labels, classes)])
    return FoldPlan([np.sort(order[i::k]) for i in range(k)])


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    folds: int = 10
    split_ratio: float = 0.8
    seed: int = 0
    learning_rate: float = 1e-4
    clip_value: float = 1.0
    cross_validate: bool = True

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if not 0 < self.split_ratio < 1:
            raise ConfigError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.clip_value <= 0:
            raise ConfigError(f"clip_value must be positive, got {self.clip_value}")
        return self


@dataclass
class EpochRecord:
    fold: int | str
    epoch: int
    mean_train_loss: float
    val_accuracy: float | None
    train_accuracy: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    train_indices: np.ndarray | None = None
    test_indices: np.ndarray | None = None
    test_accuracy: float | None = None

    HEADER = "fold,epoch,mean_train_loss,val_accuracy,train_accuracy"

    def final(self) -> list[EpochRecord]:
        return [r for r in self.records if r.fold == FINAL_FOLD]

    def to_csv(self) -> str:
        lines = [self.HEADER]
        for r in self.records:
            val = "" if r.val_accuracy is None else f"{r.val_accuracy:.6f}"
            lines.append(f"{r.fold},{r.epoch},{r.mean_train_loss:.9g},{val},{r.train_accuracy:.6f}")
        return "\n".join(lines) + "\n"


def _epoch_rng(seed: int, fold_key: int, epoch: int) -> np.random.Generator:
    # counter-based stream keyed on (seed, fold, epoch)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, fold_key, epoch])))


def predict_proba(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Infer-mode probabilities, evaluated in chunks."""
    out = [model.forward(images[i:i + batch_size], "infer") for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, model.config.num_classes), model.dtype)
    return np.concatenate(out)


def accuracy_on(model, images, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    return float((predict_proba(model, images).argmax(axis=1) == labels).mean())


def _train_run(model, images, labels, train_idx, val_idx, cfg: TrainConfig, fold, fold_key, log_out):
    opt = Adam(cfg.learning_rate, clip_value=cfg.clip_value)
    k = model.config.num_classes
    for epoch in range(1, cfg.epochs + 1):
        order = _epoch_rng(cfg.seed, fold_key, epoch).permutation(train_idx)
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, order.size, cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            y = labels[batch]
            with np.errstate(over="ignore", invalid="ignore"):
                # overflow surfaces as a non-finite loss, reported below
                probs = model.forward(images[batch], "train")
                loss = cce_loss(probs, one_hot(y, k))
            if not math.isfinite(loss):
                raise DivergenceError(fold, epoch, b, loss)
            grads = model.backprop(probs, one_hot(y, k, model.dtype))
            opt.step(model.parameters(), grads)
            loss_sum += loss * batch.size
            correct += int((probs.argmax(axis=1) == y).sum())
        val_acc = accuracy_on(model, images[val_idx], labels[val_idx]) if val_idx is not None else None
        rec = EpochRecord(fold, epoch, loss_sum / order.size, val_acc, correct / order.size)
        log_out.records.append(rec)
        log.info("fold %s epoch %d loss %.5f train_acc %.4f val_acc %s", fold, epoch,
                 rec.mean_train_loss, rec.train_accuracy,
                 "-" if val_acc is None else f"{val_acc:.4f}")


def fit(model, dataset, config: TrainConfig) -> TrainingLog:
    """Split, optionally cross-validate, then train ``model`` on the full
    training split and score it once on the held-out test split.

    Each CV fold trains a fresh copy of ``model`` (same config and seed);
    ``model`` itself is the final retrained network.
    """
    config.validate()
    images, labels = dataset.images, dataset.labels
    if len(labels) == 0:
        raise ValueError("cannot train on an empty dataset")
    train_idx, test_idx = train_test_split(len(labels), config.split_ratio, labels, config.seed)
    out = TrainingLog(train_indices=train_idx, test_indices=test_idx)
    if config.cross_validate:
        plan = kfold_partition(train_idx, config.folds, labels, config.seed)
        for f in range(plan.k):
            _train_run(model.fresh(), images, labels, plan.training_indices(f), plan.folds[f],
                       config, f, f, out)
    _train_run(model, images, labels, train_idx, None, config, FINAL_FOLD, config.folds, out)
    out.test_accuracy = accuracy_on(model, images[test_idx], labels[test_idx])
    return out
