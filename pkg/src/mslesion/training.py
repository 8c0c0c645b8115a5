"""Mini-batch ADADELTA training with early stopping on validation loss."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .network import backward, first_trainable_index, forward, forward_features
from .optim import AdadeltaState, adadelta_step
from .patches import resample_negatives, split_validation


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 400
    patience: int = 50
    batch_size: int = 128
    validation_fraction: float = 0.25
    negative_resample_period: int = 10
    rho: float = 0.95
    eps: float = 1e-6
    seed: int = 0
    # "infer": frozen batch-norm layers use running statistics, which lets
    # the frozen prefix be evaluated once per patch. "train": they use batch
    # statistics (their running statistics still never change).
    frozen_bn: str = "infer"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError(f"patience must lie in [0, max_epochs], got {self.patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must be in (0, 1), got {self.validation_fraction}")
        if self.negative_resample_period < 0:
            raise ValueError("negative_resample_period must be >= 0")
        if self.frozen_bn not in ("infer", "train"):
            raise ValueError(f"frozen_bn must be 'infer' or 'train', got {self.frozen_bn!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    stopped_early: bool = False

    @property
    def val_losses(self):
        return [e.val_loss for e in self.epochs]

    @property
    def train_losses(self):
        return [e.train_loss for e in self.epochs]

    def to_dict(self):
        return {"best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss,
                "stopped_early": self.stopped_early, "epochs": [asdict(e) for e in self.epochs]}


def _group(model, name):
    layer = name.split(".", 1)[0]
    return next(spec.group for spec in model.layers if spec.name == layer)


def train_step(model, state, x, labels, rng, start=0, frozen_bn="infer"):
    """One forward/backward/update on a batch of integer ``labels``; returns the batch loss.

    ``x`` is the input of layer ``start`` (patches when ``start`` is 0).
    """
    out, caches, updates = forward(model, x, "train", rng, start=start, frozen_bn=frozen_bn)
    loss, grad = ops.softmax_crossentropy(out, ops.one_hot(labels, dtype=out.dtype))
    grads = backward(model, caches, grad, start=start)
    adadelta_step(state, model.params, grads)
    for name, value in updates.items():
        if model.trainable[_group(model, name)]:
            model.params[name][...] = value
    return loss


def evaluate_loss(model, x, labels, start=0, chunk=256):
    """Mean inference-mode cross-entropy and accuracy of layer-``start`` inputs."""
    total, correct = 0.0, 0
    for s in range(0, len(labels), chunk):
        out, _, _ = forward(model, x[s:s + chunk], "infer", start=start)
        loss, _ = ops.softmax_crossentropy(out, ops.one_hot(labels[s:s + chunk], dtype=out.dtype))
        total += loss * len(out)
        correct += int((out.argmax(1) == labels[s:s + chunk]).sum())
    n = max(len(labels), 1)
    return total / n, correct / n


def _snapshot(model):
    return {k: v.copy() for k, v in model.params.items()
            if model.trainable[_group(model, k)]}


def train(model, dataset, config=TrainConfig(), feature_lookup=None, log=None):
    """Train ``model`` in place on ``dataset`` and return ``(model, history)``.

    The returned weights are those of the epoch with the lowest validation
    loss. Layers before the first trainable group are evaluated once per
    patch and cached, since frozen layers are deterministic in this regime.
    ``feature_lookup(case_index, centers)`` may supply stored activations
    instead; its ``layer`` attribute names the layer whose input it returns.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if len(np.unique(dataset.labels)) < 2:
        raise ValueError("dataset holds a single class")
    if dataset.is_val is None:
        dataset = split_validation(dataset, config.validation_fraction, config.seed)
    if not dataset.is_val.any() or dataset.is_val.all():
        raise ValueError("validation split leaves no training or no validation patches")

    start = first_trainable_index(model) if config.frozen_bn == "infer" else 0
    if start >= len(model.layers):
        raise ValueError("model has no trainable group")

    layer = getattr(feature_lookup, "layer", None)
    use_lookup = feature_lookup is not None and layer is not None and 0 < layer <= start

    def features(idx):
        if use_lookup:
            f = feature_lookup(dataset.case_index[idx], dataset.centers[idx])
            if start > layer:
                f, _, _ = forward(model, f, "infer", start=layer, stop=start)
            return f
        return forward_features(model, dataset.patches[idx].astype(model.dtype, copy=False), start)

    feats = features(np.arange(len(dataset)))
    labels = dataset.labels.astype(np.intp)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    state = AdadeltaState(config.rho, config.eps)
    history = TrainHistory()
    best = _snapshot(model)

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        resampled = resample_negatives(dataset, epoch=epoch, period=config.negative_resample_period)
        if resampled is not dataset:
            changed = np.flatnonzero((dataset.labels == 0) & ~dataset.is_val)
            dataset = resampled
            feats[changed] = features(changed)
        train_idx = np.flatnonzero(~dataset.is_val)
        order = rng.permutation(train_idx)
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            b = np.sort(order[s:s + config.batch_size])
            total += train_step(model, state, feats[b], labels[b], rng, start, config.frozen_bn) * len(b)
        val = np.flatnonzero(dataset.is_val)
        val_loss, val_acc = evaluate_loss(model, feats[val], labels[val], start)
        history.epochs.append(EpochRecord(epoch, total / len(order), val_loss, val_acc,
                                          time.perf_counter() - t0))
        if log is not None:
            log(history.epochs[-1])
        if val_loss < history.best_val_loss:
            history.best_val_loss, history.best_epoch = val_loss, epoch
            best = _snapshot(model)
        if epoch - history.best_epoch >= config.patience:
            history.stopped_early = epoch + 1 < config.max_epochs
            break
    for name, value in best.items():
        model.params[name][...] = value
    return model, history
