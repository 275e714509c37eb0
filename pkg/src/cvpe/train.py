"""Loss, gradients, finite-difference verification, Adam, and the train loop.

Everything runs in float64.  The loop is fully deterministic given the seed:
the complete shuffled window schedule is drawn up front, and its digest is
exposed so paired runs can prove they saw identical batches.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError, Tensor, as_tensor, no_grad, sub, tmean
from .model import ModelParams, forecast_batch

GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_SAMPLES = 16
_SHUFFLE_STREAM = 100


class TrainingDiverged(ArithmeticError):
    """Raised when a training loss stops being finite."""

    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


def mse_loss(pred, target) -> Tensor:
    """Mean squared error over every element, as a scalar graph node."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return tmean(diff * diff)


def backward(loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss for each parameter, in parameter order.

    Parameters the loss never touched get zero gradients.  Non-finite
    gradients abort with the offending parameter named.
    """
    for p in params:
        p.grad = None
    loss.backward()
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {p.name}", stage="backward")
        grads.append(g)
    return grads


def make_windows(
    values: np.ndarray, context: int, horizon: int, stride: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Cut a (channels, T) segment into supervised pairs.

    Returns windows (W, channels, context) and targets (W, channels,
    horizon) where window i starts at time ``i * stride``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected (channels, time) values, got {values.shape}")
    if context < 1 or horizon < 1 or stride < 1:
        raise ValueError("context, horizon and stride must be positive")
    total = context + horizon
    n_windows = (values.shape[1] - total) // stride + 1
    if n_windows < 1:
        raise ValueError(
            f"segment of {values.shape[1]} steps too short for context {context} "
            f"plus horizon {horizon}"
        )
    starts = stride * np.arange(n_windows)
    windows = np.stack([values[:, s : s + context] for s in starts])
    targets = np.stack([values[:, s + context : s + total] for s in starts])
    return windows, targets


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    n_checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max(e.max_rel_err for e in self.entries)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def grad_check(
    params: ModelParams,
    windows: np.ndarray,
    targets: np.ndarray,
    tolerance: float = 1e-4,
    step: float = GRAD_CHECK_STEP,
    samples_per_tensor: int = GRAD_CHECK_SAMPLES,
    seed: int = 0,
    corrupt: str | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    For each parameter tensor a random sample of coordinates (all of them
    for small tensors) is perturbed by ``step`` in both directions and the
    quotient is compared to the recorded gradient via
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.  ``corrupt`` flips the
    sign of one named tensor's gradients, for exercising the failure path.
    """
    leaves = params.parameters()
    loss = mse_loss(forecast_batch(windows, params), targets)
    grads = backward(loss, leaves)
    if corrupt is not None:
        names = [p.name for p in leaves]
        if corrupt not in names:
            raise ValueError(f"no parameter named {corrupt!r}")
        idx = names.index(corrupt)
        grads[idx] = -grads[idx]

    def loss_at() -> float:
        with no_grad():
            return mse_loss(forecast_batch(windows, params), targets).item()

    rng = np.random.default_rng(seed)
    entries = []
    for p, g in zip(leaves, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        if flat.size <= samples_per_tensor:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=samples_per_tensor, replace=False)
        worst = 0.0
        for c in coords:
            original = flat[c]
            flat[c] = original + step
            hi = loss_at()
            flat[c] = original - step
            lo = loss_at()
            flat[c] = original
            fd = (hi - lo) / (2.0 * step)
            ad = gflat[c]
            rel = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
            worst = max(worst, rel)
        entries.append(GradCheckEntry(p.name, worst, len(coords)))
    return GradCheckReport(entries, tolerance)


@dataclass
class AdamState:
    """First/second moment accumulators mirroring the parameter list."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    step_count: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def init(
        cls,
        params: list[Tensor],
        lr: float = 1e-2,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        return cls(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            step_count=0,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray]):
    """One bias-corrected Adam update, in place."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("parameter, gradient and accumulator counts must match")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} mismatches {p.name} {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings for one training run."""

    epochs: int
    batch_size: int = 8
    lr: float = 1e-2
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("need at least one epoch")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.lr < 0:
            raise ValueError("learning rate cannot be negative")
        if self.patience < 1:
            raise ValueError("patience must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float


@dataclass
class TrainResult:
    """Outcome of a run: history, best epoch, and the schedule digest."""

    history: list[EpochRecord]
    best_epoch: int
    best_val_mse: float
    stopped_early: bool
    window_order_digest: str


def plan_schedule(n_windows: int, epochs: int, seed: int) -> np.ndarray:
    """Shuffled window indices for every epoch, drawn up front: (epochs, W)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _SHUFFLE_STREAM]))
    return np.stack([rng.permutation(n_windows) for _ in range(epochs)])


def schedule_digest(schedule: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(schedule, dtype=np.int64).tobytes()).hexdigest()


def evaluate_mse(params: ModelParams, windows: np.ndarray, targets: np.ndarray,
                 batch_size: int = 64) -> float:
    """Mean squared error over a window set, without touching the graph."""
    total = 0.0
    with no_grad():
        for lo in range(0, windows.shape[0], batch_size):
            chunk = slice(lo, lo + batch_size)
            pred = forecast_batch(windows[chunk], params).data
            total += float(np.sum((pred - targets[chunk]) ** 2))
    return total / float(np.prod(targets.shape))


def train_loop(
    params: ModelParams,
    train_windows: np.ndarray,
    train_targets: np.ndarray,
    val_windows: np.ndarray,
    val_targets: np.ndarray,
    cfg: TrainConfig,
) -> TrainResult:
    """Mini-batch Adam with early stopping on validation MSE.

    The best-validation parameters are restored before returning, so the
    caller always ends up with the selected model, not the last one.  The
    full shuffled schedule is planned ahead of training; its digest is
    independent of where early stopping lands.
    """
    if train_windows.shape[0] < 1 or val_windows.shape[0] < 1:
        raise ValueError("training and validation window sets must be non-empty")
    leaves = params.parameters()
    state = AdamState.init(leaves, lr=cfg.lr)
    schedule = plan_schedule(train_windows.shape[0], cfg.epochs, cfg.seed)
    digest = schedule_digest(schedule)

    history: list[EpochRecord] = []
    best_val = np.inf
    best_epoch = -1
    best_snapshot: list[np.ndarray] | None = None
    since_best = 0
    stopped_early = False
    for epoch in range(cfg.epochs):
        order = schedule[epoch]
        sq_sum = 0.0
        for b, lo in enumerate(range(0, order.size, cfg.batch_size)):
            sel = order[lo : lo + cfg.batch_size]
            loss = mse_loss(forecast_batch(train_windows[sel], params), train_targets[sel])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b)
            grads = backward(loss, leaves)
            adam_step(state, leaves, grads)
            sq_sum += value * sel.size * np.prod(train_targets.shape[1:])
        train_mse = float(sq_sum / np.prod(train_targets.shape))
        val_mse = evaluate_mse(params, val_windows, val_targets)
        if not np.isfinite(val_mse):
            raise TrainingDiverged(epoch, -1)
        history.append(EpochRecord(epoch, train_mse, val_mse))
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_snapshot = [p.data.copy() for p in leaves]
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                stopped_early = True
                break
    if best_snapshot is not None:
        for p, data in zip(leaves, best_snapshot):
            p.data = data
    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_mse=float(best_val),
        stopped_early=stopped_early,
        window_order_digest=digest,
    )
