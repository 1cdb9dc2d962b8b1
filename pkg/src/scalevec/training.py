"""Adam training loop, schedule and evaluation metrics."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from scalevec.autograd import Tape
from scalevec.data import Fold, Split
from scalevec.errors import ConfigError, DivergenceError, NumericError
from scalevec.models import Network, joint_loss

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64, "32": np.float32, "64": np.float64}


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr: float = 1e-3
    decay_epoch: int = 40  # lr multiplied by decay_factor from this (1-based) epoch on
    decay_factor: float = 0.5
    lam: float = 1.0
    seed: int = 0
    precision: str = "float32"
    deterministic: bool = True
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    limit_train: Optional[int] = None
    eval_batch: int = 256

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("loss weight lambda must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.limit_train is not None and self.limit_train < 1:
            raise ConfigError("limit_train must be positive")
        self.betas = tuple(self.betas)

    @property
    def dtype(self):
        return np.dtype(PRECISIONS[self.precision])

    def lr_at(self, epoch):
        """Learning rate for 1-based ``epoch``."""
        return self.lr * (self.decay_factor if epoch >= self.decay_epoch else 1.0)

    def as_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads[p]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype, copy=False)


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_error: float
    best_state: dict = field(repr=False)


def predict(model: Network, images, batch_size=256):
    """Logits and scale predictions for ``(n, 28, 28)`` images, without recording."""
    logits, scales = [], []
    for a in range(0, len(images), batch_size):
        x = np.asarray(images[a:a + batch_size], dtype=model.dtype)
        lg, sc = model(x)
        logits.append(lg.data)
        scales.append(sc.data)
    if not logits:
        return np.zeros((0, model.cfg.n_classes)), np.zeros(0)
    return np.concatenate(logits), np.concatenate(scales)


def metrics(logits, scale_pred, labels, scales):
    n = len(labels)
    wrong = int(np.sum(np.argmax(logits, axis=1) != np.asarray(labels)))
    diff = np.asarray(scale_pred, np.float64) - np.asarray(scales, np.float64)
    return {
        "classification_error_pct": 100.0 * wrong / n if n else float("nan"),
        "scale_rmse": float(np.sqrt(np.mean(diff * diff))) if n else float("nan"),
        "n": n,
    }


def evaluate(model: Network, records: Split, batch_size=256):
    """``{classification_error_pct, scale_rmse, n}`` over a split."""
    logits, sc = predict(model, records.images, batch_size)
    return metrics(logits, sc, records.labels, records.scales)


def train(model: Network, fold: Fold, cfg: TrainConfig,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Mini-batch Adam on ``fold.train``; keeps the best-validation-error parameters.

    The model ends holding the best snapshot. Raises DivergenceError when
    the loss (or any intermediate value) stops being finite.
    """
    if model.dtype != cfg.dtype:
        raise ConfigError(f"model is {model.dtype}, config asks for {cfg.dtype}")
    train_split = fold.train if cfg.limit_train is None else fold.train.head(cfg.limit_train)
    n = len(train_split)
    if n == 0:
        raise ConfigError("empty training split")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.betas, cfg.eps)
    params = model.parameters()
    history = []
    best = (math.inf, 0, model.state())
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for step, a in enumerate(range(0, n, cfg.batch_size)):
            idx = order[a:a + cfg.batch_size]
            x = train_split.images[idx].astype(cfg.dtype, copy=False)
            try:
                with Tape() as tape:
                    logits, sc = model(x)
                    loss = joint_loss(logits, train_split.labels[idx], sc, train_split.scales[idx], cfg.lam)
                grads = tape.backward(loss, params)
            except NumericError as e:
                raise DivergenceError(f"non-finite values at epoch {epoch}, step {step}: {e}") from e
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss is {value} at epoch {epoch}, step {step}")
            opt.step(grads, lr)
            total += value * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "train_loss": total / seen}
        if len(fold.val):
            m = evaluate(model, fold.val, cfg.eval_batch)
            row["val_error_pct"] = m["classification_error_pct"]
            row["val_scale_rmse"] = m["scale_rmse"]
        else:
            row["val_error_pct"] = row["val_scale_rmse"] = float("nan")
        row["wall_seconds"] = time.perf_counter() - t0
        history.append(row)
        log.info("epoch %d loss %.4f val err %.2f%% rmse %.4f (%.1fs)", epoch, row["train_loss"],
                 row["val_error_pct"], row["val_scale_rmse"], row["wall_seconds"])
        err = row["val_error_pct"]
        if not math.isnan(err) and err < best[0] or best[1] == 0:
            best = (err, epoch, model.state())
        if on_epoch is not None:
            on_epoch(row)
    model.load_state(best[2])
    return TrainResult(history, best[1], best[0], best[2])
