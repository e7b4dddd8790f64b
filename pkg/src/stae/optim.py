"""Adam and the mini-batch training loop with validation early stopping."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import VideoVolume, loss_and_grads


@dataclass
class TrainSettings:
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 10
    validation_fraction: float = 0.1
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")


class Adam:
    """Adam with bias-corrected moment estimates.

    Moments are keyed by parameter name and created lazily on the first step.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """Update ``params`` (a name -> array dict) in place."""
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                raise FloatingPointError(f"{name}: {bad} non-finite gradient entries at step {self.t + 1}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state):
    """Functional wrapper around :meth:`Adam.step`; returns ``(params, state)``."""
    state.step(params, grads)
    return params, state


class EarlyStopping:
    """Stop once the best validation loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch, loss):
        """Record one epoch; returns True when this epoch is a new best."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = np.inf
    stopped_early: bool = False
    initial_train_loss: float = np.nan
    initial_val_loss: float = np.nan


def _stack(volumes):
    if isinstance(volumes, np.ndarray):
        return np.asarray(volumes, dtype=np.float64)
    return np.stack([v.frames if isinstance(v, VideoVolume) else np.asarray(v) for v in volumes]).astype(np.float64)


def split_validation(volumes, fraction):
    """Deterministic split: the last ``ceil(fraction * n)`` volumes validate."""
    n = len(volumes)
    n_val = int(np.ceil(fraction * n))
    if n - n_val < 1 or n_val < 1:
        raise ValueError(f"cannot split {n} volumes into non-empty train/validation sets")
    return volumes[: n - n_val], volumes[n - n_val :]


def evaluate_loss(model, x, batch_size=64):
    """Mean per-element squared reconstruction error over ``x``."""
    total = 0.0
    for lo in range(0, len(x), batch_size):
        xb = x[lo : lo + batch_size]
        d = model.forward(xb) - xb
        total += float(np.sum(d * d))
    return total / x.size


def train(model, volumes, settings=None, val_volumes=None, on_improve=None, log=None):
    """Fit ``model`` in place and return a :class:`TrainResult`.

    Gradients are averaged over each mini-batch.  When ``val_volumes`` is not
    given the validation set is carved from the tail of ``volumes``.  On exit
    the model holds the parameters of the best validation epoch.
    ``on_improve(epoch, model)`` is called whenever validation improves.
    """
    settings = settings or TrainSettings()
    x = _stack(volumes)
    if len(x) == 0:
        raise ValueError("no training volumes")
    if val_volumes is None:
        x, xv = split_validation(x, settings.validation_fraction)
    else:
        xv = _stack(val_volumes)
        if len(xv) == 0:
            raise ValueError("no validation volumes")

    batch = settings.batch_size
    if batch > len(x):
        warnings.warn(f"batch_size {batch} exceeds the {len(x)} training volumes; using full batches")
        batch = len(x)

    rng = np.random.default_rng(settings.seed)
    opt = Adam(settings.learning_rate, settings.beta1, settings.beta2, settings.eps)
    stopper = EarlyStopping(settings.patience)
    result = TrainResult(model=model)
    result.initial_train_loss = evaluate_loss(model, x, batch)
    result.initial_val_loss = evaluate_loss(model, xv, batch)
    best = {k: v.copy() for k, v in model.params.items()}

    for epoch in range(1, settings.max_epochs + 1):
        order = rng.permutation(len(x))
        total = 0.0
        for lo in range(0, len(x), batch):
            idx = order[lo : lo + batch]
            loss, grads = loss_and_grads(model, x[idx])
            opt.step(model.params, grads)
            total += loss * len(idx)
        val = evaluate_loss(model, xv, batch)
        rec = EpochRecord(epoch, total / len(x), val)
        result.history.append(rec)
        if log:
            log(rec)
        if stopper.update(epoch, val):
            best = {k: v.copy() for k, v in model.params.items()}
            if on_improve:
                on_improve(epoch, model)
        if stopper.should_stop:
            result.stopped_early = True
            break

    for k, v in best.items():
        model.params[k][...] = v
    result.best_epoch = stopper.best_epoch
    result.best_val_loss = stopper.best
    return result


def write_history(path, history):
    with open(path, "w", newline="\n") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for r in history:
            fh.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r}\n")
