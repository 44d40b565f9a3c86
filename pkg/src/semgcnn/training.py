"""Mini-batch SGD with L2 weight decay and a step learning-rate schedule."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import blas

from .nn.layers import cross_entropy

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.001
    n_minibatches: int = 50
    epochs: int = 20
    # StepLR semantics: lr is multiplied by lr_gamma every lr_step_size epochs
    lr_step_size: int = 19
    lr_gamma: float = 0.1
    # gradient-side coefficient, i.e. twice the L2 penalty factor
    weight_decay: float = 0.1
    decay_all_params: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.n_minibatches < 1:
            raise ValueError(f"n_minibatches must be >= 1, got {self.n_minibatches}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_step_size < 1:
            raise ValueError("lr_step_size must be >= 1")

    def lr_at(self, epoch):
        """Learning rate used during ``epoch`` (1-based)."""
        return self.lr * self.lr_gamma ** ((epoch - 1) // self.lr_step_size)

    def to_dict(self):
        return asdict(self)


@dataclass
class LearningCurve:
    epoch: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)

    def __len__(self):
        return len(self.epoch)

    def append(self, epoch, lr, train_loss, val_loss=float("nan"), val_acc=float("nan")):
        self.epoch.append(epoch)
        self.lr.append(lr)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.val_acc.append(val_acc)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for row in zip(self.epoch, self.train_loss, self.val_loss, self.val_acc):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def minibatch_partition(n_items, n_batches=50, seed=0, epoch=1):
    """Randomly split ``range(n_items)`` into ``n_batches`` near-equal parts.

    The permutation is a pure function of ``(seed, epoch)``; the first
    ``n_items % n_batches`` batches hold one extra item.
    """
    if n_items < n_batches:
        raise ValueError(f"cannot split {n_items} items into {n_batches} mini-batches")
    perm = np.random.default_rng([seed, epoch]).permutation(n_items)
    return np.array_split(perm, n_batches)


_AXPY = {np.dtype(np.float32): blas.saxpy, np.dtype(np.float64): blas.daxpy}


def sgd_step(params, grads=None, lr=0.001, weight_decay=0.0, decay_mask=None):
    """In-place ``w <- w - lr * (g + weight_decay * w)`` for every tensor.

    ``params`` is a list of ParamTensor (grads taken from them) or of arrays
    paired with ``grads``. Evaluated as ``w * (1 - lr*wd) - lr*g`` so each
    tensor is swept twice rather than three times.
    """
    if grads is None:
        values = [p.value for p in params]
        grads = [p.grad for p in params]
    else:
        values = list(params)
    if decay_mask is None:
        decay_mask = [True] * len(values)
    for i, (w, g) in enumerate(zip(values, grads)):
        if w.shape != g.shape:
            raise ValueError(f"parameter shape {w.shape} != gradient shape {g.shape}")
        if not np.isfinite(np.sum(g)):
            raise TrainingDivergedError(f"non-finite gradient in parameter tensor #{i} (shape {g.shape})")
    for w, g, decay in zip(values, grads, decay_mask):
        shrink = 1.0 - lr * weight_decay if decay else 1.0
        axpy = _AXPY.get(w.dtype)
        if axpy is not None and g.dtype == w.dtype and w.flags.c_contiguous and g.flags.c_contiguous:
            if shrink != 1.0:
                np.multiply(w, w.dtype.type(shrink), out=w)
            axpy(g.reshape(-1), w.reshape(-1), a=-lr)
        else:
            w *= shrink
            w -= lr * g


def l2_penalty(network, weight_decay):
    """``(weight_decay / 2) * sum ||w||^2`` over all learnable parameters."""
    total = 0.0
    for p in network.parameters():
        v = p.value.astype(np.float64, copy=False)
        total += float(np.dot(v.reshape(-1), v.reshape(-1)))
    return 0.5 * weight_decay * total


def regularized_loss(network, x, y, weight_decay):
    """Objective ``L0 + (weight_decay/2) * sum ||w||^2`` evaluated in eval mode."""
    l0 = evaluate(network, x, y)[0]
    return l0 + l2_penalty(network, weight_decay)


def evaluate(network, x, y, batch_size=512):
    """Eval-mode mean loss and accuracy; never touches parameters or BN state."""
    if len(x) == 0:
        return float("nan"), float("nan")
    total_loss = 0.0
    correct = 0
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        yb = y[start:start + batch_size]
        logits = network.forward(xb, train=False)
        loss, _ = cross_entropy(logits, yb)
        total_loss += loss * len(xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    network.clear_caches()
    return total_loss / len(x), correct / len(x)


def train(network, x_train, y_train, x_val=None, y_val=None, config: TrainConfig | None = None,
          on_batch=None):
    """Fit ``network`` in place for exactly ``config.epochs`` epochs.

    ``x_*`` are network-layout arrays ``(N, C, L)``. Returns the network and
    its LearningCurve. ``on_batch(epoch, batch_indices)`` is an optional
    observer hook.
    """
    config = config or TrainConfig()
    dtype = np.dtype(config.dtype)
    if network.dtype != dtype:
        network.astype(dtype)
    x_train = np.ascontiguousarray(x_train, dtype=dtype)
    y_train = np.asarray(y_train, dtype=np.int64)
    n = len(x_train)
    if n == 0:
        raise ValueError("empty training set")
    if n < config.n_minibatches:
        raise ValueError(f"{n} training windows cannot fill {config.n_minibatches} mini-batches")
    if x_val is not None:
        x_val = np.ascontiguousarray(x_val, dtype=dtype)
        y_val = np.asarray(y_val, dtype=np.int64)

    network.set_dropout_rng(np.random.default_rng([config.seed, 0xD0]))
    params = network.parameters()
    names = [name for name, _ in network.named_params()]
    decay_mask = [config.decay_all_params or name.endswith("weight") for name in names]
    curve = LearningCurve()
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        batch_losses = []
        for b, idx in enumerate(minibatch_partition(n, config.n_minibatches, config.seed, epoch)):
            if on_batch is not None:
                on_batch(epoch, idx)
            logits = network.forward(x_train[idx], train=True)
            loss, g = cross_entropy(logits, y_train[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b + 1}")
            network.backward(g)
            try:
                sgd_step(params, lr=lr, weight_decay=config.weight_decay, decay_mask=decay_mask)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, batch {b + 1}: {exc}") from None
            batch_losses.append(loss)
        network.clear_caches()
        train_loss = float(np.mean(batch_losses))
        if x_val is not None and len(x_val):
            val_loss, val_acc = evaluate(network, x_val, y_val)
        else:
            val_loss, val_acc = float("nan"), float("nan")
        curve.append(epoch, lr, train_loss, val_loss, val_acc)
        logger.debug("epoch %d lr=%g train_loss=%.4f val_loss=%.4f val_acc=%.4f",
                     epoch, lr, train_loss, val_loss, val_acc)
    return network, curve
