"""Loss, decoupled-weight-decay optimizer, training loop, gradient checking.

Training is a deterministic function of (dataset, config, seed): batch order
comes from one seeded generator, the optimizer walks parameters in module
order, and every numeric op is fixed-order. History metrics are reported in
physical units (m/s) so they are comparable across normalizations.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import FeatureStats, stack_sequences
from .errors import ConfigError, TrainingDiverged
from .nn import Module, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

HORIZONS = (30, 60, 90)


def mse_loss(pred: Tensor, target, turbine_mask=None) -> Tensor:
    """Mean squared error over valid turbine entries; differentiable.

    Gradient w.r.t. pred is 2 (pred - target) / n over the valid entries.
    """
    target = target if isinstance(target, Tensor) else Tensor(target)
    diff = T.sub(pred, target)
    if turbine_mask is not None:
        mask = np.broadcast_to(turbine_mask, pred.shape).astype(pred.dtype)
        n = float(mask.sum())
        if n == 0:
            raise ConfigError("mse_loss: mask excludes every entry")
        return T.mul(T.tsum(T.mul(T.mul(diff, diff), mask)), 1.0 / n)
    return T.tmean(T.mul(diff, diff))


def mse_metric(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2))


def mae_metric(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(pred, np.float64) - np.asarray(target, np.float64))))


class AdamW:
    """Adam with decoupled weight decay.

    theta <- theta - lr*wd*theta - lr * m_hat / (sqrt(v_hat) + eps); with
    wd=0 this is exactly bias-corrected Adam, with lr=0 it is the identity.
    """

    def __init__(self, params, lr=4e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ConfigError(f"gradient shape {g.shape} != parameter {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= self.lr * update


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 4e-3
    weight_decay: float = 1e-4
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    horizon_minutes: int = 60
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.horizon_minutes not in HORIZONS:
            raise ConfigError(
                f"horizon_minutes must be one of {HORIZONS}, got {self.horizon_minutes}"
            )

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = set(doc) - known
        if bad:
            raise ConfigError(f"unknown train config keys: {sorted(bad)}")
        return cls(**doc)


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    train_mae: float
    val_mse: float
    val_mae: float
    wall_seconds: float


@dataclass
class History:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = float("nan")
    stopped_early: bool = False

    def metric_matrix(self) -> np.ndarray:
        """Deterministic columns only (wall_seconds excluded by design)."""
        return np.array(
            [[r.epoch, r.train_mse, r.train_mae, r.val_mse, r.val_mae]
             for r in self.records],
            dtype=np.float64,
        )

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "train_mse", "train_mae", "val_mse", "val_mae", "wall_seconds"]
            )
            for r in self.records:
                writer.writerow(
                    [r.epoch, repr(r.train_mse), repr(r.train_mae), repr(r.val_mse),
                     repr(r.val_mae), f"{r.wall_seconds:.3f}"]
                )


def _evaluate_split(model, sequences, stats: FeatureStats, mask, batch_size):
    se = ae = 0.0
    n = 0
    with T.no_grad():
        for lo in range(0, len(sequences), batch_size):
            chunk = sequences[lo:lo + batch_size]
            x, y = stack_sequences(chunk)
            pred = model.forward_arrays(stats.apply_features(x, mask)).data
            pred_phys = stats.denormalize_prediction(pred).astype(np.float64)
            se += float(((pred_phys - y) ** 2).sum())
            ae += float(np.abs(pred_phys - y).sum())
            n += y.size
    return se / n, ae / n


def train(model, train_sequences, val_sequences, config: TrainConfig,
          stats: FeatureStats, checkpoint_path=None, history_path=None) -> History:
    """Mini-batch training with early stopping on validation MSE.

    The best-validation parameter state is restored into the model at the
    end (and written to ``checkpoint_path`` if given). Divergence aborts
    with the offending epoch and batch in the message.
    """
    if not train_sequences:
        raise ConfigError("empty training dataset")
    rng = np.random.default_rng(config.seed)
    mask = model.layout.valid_mask()
    optimizer = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = History()
    best_state = None
    epochs_since_best = 0
    steps_done = 0
    n = len(train_sequences)

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        model.train()
        perm = rng.permutation(n)
        se = ae = 0.0
        seen = 0
        for batch_idx, lo in enumerate(range(0, n, config.batch_size)):
            batch = [train_sequences[i] for i in perm[lo:lo + config.batch_size]]
            x_raw, y_raw = stack_sequences(batch)
            x = stats.apply_features(x_raw, mask)
            y = stats.normalize_target(y_raw)
            pred = model.forward_arrays(x)
            loss = mse_loss(pred, y)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {batch_idx}"
                )
            T.backward(loss)
            optimizer.step()
            optimizer.zero_grad()
            pred_phys = stats.denormalize_prediction(pred.data).astype(np.float64)
            se += float(((pred_phys - y_raw) ** 2).sum())
            ae += float(np.abs(pred_phys - y_raw).sum())
            seen += y_raw.size
            steps_done += 1
            if config.max_steps is not None and steps_done >= config.max_steps:
                break
        train_mse, train_mae = se / seen, ae / seen

        if val_sequences:
            model.eval()
            val_mse, val_mae = _evaluate_split(model, val_sequences, stats, mask,
                                               config.batch_size)
        else:
            val_mse = val_mae = float("nan")
        history.records.append(
            EpochRecord(epoch, train_mse, train_mae, val_mse, val_mae,
                        time.perf_counter() - t0)
        )
        log.info("epoch %d train_mse %.5f val_mse %.5f", epoch, train_mse, val_mse)

        if val_sequences:
            if best_state is None or val_mse < history.best_val_mse:
                history.best_val_mse = val_mse
                history.best_epoch = epoch
                best_state = model.snapshot()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= config.patience:
                    history.stopped_early = True
                    break
        if config.max_steps is not None and steps_done >= config.max_steps:
            break

    if best_state is not None:
        model.load_state_arrays(best_state)
    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    if history_path is not None:
        history.to_csv(history_path)
    return history


# ----------------------------------------------------------------------
# finite-difference gradient verification
# ----------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    n_coordinates: int
    worst_param: str
    h: float

    def passed(self, threshold=1e-3) -> bool:
        return self.max_rel_err < threshold


def _loss_np(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def gradient_check(model: Module, x: np.ndarray, y: np.ndarray,
                   param_fraction=0.01, h=1e-4, seed=0) -> GradCheckReport:
    """Central finite differences in double precision on a sampled fraction
    of each parameter's coordinates, against the reverse-mode gradients of
    the MSE loss. The model is put in eval mode (batchnorm uses its running
    stats) so the loss is a fixed function of the parameters.

    Per-coordinate relative error uses ``|fd - g| / max(|fd|, |g|, 1e-4)``:
    below the 1e-4 floor, central differences cannot certify agreement
    beyond their own h^2 discretization error, so tiny gradients are
    compared absolutely. Coordinates whose error exceeds half the reporting
    threshold are re-estimated at h/32: a ReLU kink straddled at scale h
    almost surely clears the smaller step, while a genuine backward bug
    disagrees at every step size.

    When the model exposes ``segment_functions``, activations are cached at
    segment boundaries and only segments downstream of the perturbed
    parameter are re-evaluated; the cached prefix does not depend on that
    parameter, so the check is exact, just cheaper.
    """
    was_training = model.training
    orig_dtype = next(iter(model.parameters())).dtype if model.parameters() else np.float32
    model.eval()
    model.to_dtype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    y64 = np.asarray(y, dtype=np.float64)
    fwd = getattr(model, "forward_arrays", model)

    pred = fwd(x64 if hasattr(model, "forward_arrays") else Tensor(x64))
    loss = mse_loss(pred, y64)
    T.backward(loss)

    segmented = hasattr(model, "segment_functions")
    if segmented:
        seg_fns = model.segment_functions()
        caches = [x64]
        with T.no_grad():
            cur = Tensor(x64)
            for fn in seg_fns:
                cur = fn(cur)
                caches.append(cur.data)

        def loss_from_segment(k):
            with T.no_grad():
                cur = Tensor(caches[k])
                for fn in seg_fns[k:]:
                    cur = fn(cur)
            return _loss_np(cur.data, y64)

    else:
        def loss_from_segment(k):
            with T.no_grad():
                return _loss_np(fwd(Tensor(x64)).data, y64)

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    worst = ""
    n_checked = 0
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        size = p.data.size
        n_pick = max(1, int(round(size * param_fraction)))
        picks = rng.choice(size, size=min(n_pick, size), replace=False)
        seg = model.segment_of_param(name) if segmented else 0
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)

        def central(idx, step):
            orig = flat[idx]
            flat[idx] = orig + step
            lp = loss_from_segment(seg)
            flat[idx] = orig - step
            lm = loss_from_segment(seg)
            flat[idx] = orig
            return (lp - lm) / (2.0 * step)

        for idx in picks:
            g = float(gflat[idx])
            fd = central(idx, h)
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-4)
            if rel > 5e-4:
                fd2 = central(idx, h / 32.0)
                rel = min(rel, abs(fd2 - g) / max(abs(fd2), abs(g), 1e-4))
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{idx}]"

    model.zero_grad()
    model.to_dtype(orig_dtype)
    if was_training:
        model.train()
    return GradCheckReport(max_rel_err=max_rel, n_coordinates=n_checked,
                           worst_param=worst, h=h)
