"""Bag-at-a-time training, accuracy and resumable checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .bags import TRANSFORMS, Bag, SourceImage, TilingSpec, augment, tile
from .checkpoint import load_model, save_model
from .errors import ContractError, TrainingError
from .model import POOLING_MODES, AmilModel, forward_bag

logger = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "train_acc", "val_acc", "seconds")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 20
    seed: int = 0
    pooling_mode: str = "attention"
    augmentation_enabled: bool = False
    optimizer: str = "adam"
    weight_decay: float = 0.0
    tiling: TilingSpec = field(default_factory=TilingSpec)
    hidden: int = 128

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.pooling_mode not in POOLING_MODES:
            raise ContractError(f"pooling_mode must be one of {POOLING_MODES}, got {self.pooling_mode!r}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class Metrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    seconds: float = 0.0


# ----------------------------------------------------------------------------
# optimizers


class SGD:
    name = "sgd"

    def __init__(self, params: Sequence[T.Tensor], lr: float = 0.001, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            p.data -= p.data.dtype.type(lr) * g

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        pass


class Adam:
    """Adam with bias correction (β₁=0.9, β₂=0.999, ε=1e-8 by default)."""

    name = "adam"

    def __init__(self, params, lr=0.001, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.array([self.t], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m{i}"] = m
            state[f"v{i}"] = v
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["step"][0])
        for i, p in enumerate(self.params):
            self.m[i] = np.array(state[f"m{i}"], dtype=p.data.dtype).reshape(p.shape)
            self.v[i] = np.array(state[f"v{i}"], dtype=p.data.dtype).reshape(p.shape)


def make_optimizer(name: str, model: AmilModel, lr: float, weight_decay: float = 0.0):
    if name == "adam":
        return Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    if name == "sgd":
        return SGD(model.parameters(), lr=lr, weight_decay=weight_decay)
    raise ContractError(f"unknown optimizer {name!r}")


# ----------------------------------------------------------------------------
# steps and evaluation


def _grad_norms(model: AmilModel) -> dict[str, float]:
    return {n: float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0 for n, p in model.named_parameters()}


def _step(model: AmilModel, bag, label: int, optimizer, lr: float | None) -> tuple[float, float]:
    if len(getattr(bag, "patches", bag)) == 0:
        raise ContractError("train_step on an empty bag")
    model.zero_grad()
    prob, _ = forward_bag(bag, model)
    loss = T.bce_loss(prob, label)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} (probability {float(prob.data)}); grad norms unavailable")
    T.backward(loss)
    norms = _grad_norms(model)
    if not all(math.isfinite(v) for v in norms.values()):
        raise TrainingError(f"non-finite gradient at loss {value}; grad norms {norms}")
    optimizer.step(lr)
    return value, float(prob.data)


def train_step(model: AmilModel, bag, label: int, optimizer, lr: float | None = None) -> float:
    """One forward/backward/update on a single bag; returns the pre-update loss."""
    return _step(model, bag, label, optimizer, lr)[0]


def predict(model: AmilModel, bags: Sequence) -> np.ndarray:
    with T.no_grad():
        return np.array([float(forward_bag(b, model)[0].data) for b in bags])


def evaluate(model: AmilModel, bags: Sequence[Bag], labels: Sequence[int] | None = None) -> float:
    """Fraction of bags whose ``probability > 0.5`` agrees with the label."""
    if len(bags) == 0:
        raise ContractError("evaluate needs at least one bag")
    labels = [b.label for b in bags] if labels is None else list(labels)
    preds = predict(model, bags) > 0.5
    return float(np.mean(preds.astype(int) == np.asarray(labels)))


# ----------------------------------------------------------------------------
# fitting


def _as_bag(item, tiling: TilingSpec, dtype, transform: str = "identity") -> Bag:
    if isinstance(item, SourceImage):
        if transform != "identity":
            item = augment(item, transform)
        return tile(item, tiling, dtype=dtype)
    if transform != "identity":
        raise ContractError("augmentation needs SourceImage inputs, not pre-tiled bags")
    return item


def write_metrics_csv(path, metrics: Sequence[Metrics], include_time: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for m in metrics:
            writer.writerow([m.epoch, repr(m.train_loss), repr(m.train_acc), repr(m.val_acc),
                             repr(m.seconds) if include_time else "0"])


def read_metrics_csv(path) -> list[Metrics]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [Metrics(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]), float(r["val_acc"]),
                    float(r["seconds"])) for r in rows]


def save_training_state(stem, model: AmilModel, optimizer, epoch: int, best: tuple[float, float],
                        meta: dict | None = None) -> None:
    extra = {f"optim.{k}": v for k, v in optimizer.state_dict().items()}
    save_model(stem, model, extra=extra, meta={
        **(meta or {}),
        "optimizer": optimizer.name, "epoch": epoch, "best_val_acc": repr(best[0]), "best_val_loss": repr(-best[1]),
    })


def _val_scores(model: AmilModel, bags: Sequence[Bag], labels: Sequence[int]) -> tuple[float, float]:
    probs = predict(model, bags)
    y = np.asarray(labels, dtype=np.float64)
    acc = float(np.mean((probs > 0.5).astype(int) == y))
    q = np.clip(probs, T.BCE_EPS, 1 - T.BCE_EPS)
    loss = float(np.mean(-(y * np.log(q) + (1 - y) * np.log1p(-q))))
    return acc, loss


def fit(
    train_items: Sequence,
    val_items: Sequence,
    config: TrainConfig,
    model: AmilModel | None = None,
    checkpoint_dir=None,
    resume: bool = False,
    stop_after: int | None = None,
    record_time: bool = True,
    on_epoch: Callable[[Metrics], None] | None = None,
) -> tuple[AmilModel, list[Metrics]]:
    """Train for ``config.epochs`` passes; returns the best-validation model and per-epoch metrics.

    "Best" is highest validation accuracy, ties going to lower validation loss.

    ``train_items`` are :class:`SourceImage` (tiled every epoch, augmented when
    enabled) or pre-tiled :class:`Bag`.  Shuffling and augmentation for epoch
    ``e`` are drawn from ``default_rng([seed, e])``, so a run resumed from
    ``checkpoint_dir`` (``last.*``, ``best.*`` and ``metrics.csv``) follows the
    uninterrupted trajectory exactly.  ``stop_after`` ends the run early after
    that many total epochs.  With ``record_time=False`` the ``seconds`` column
    of ``metrics.csv`` is written as 0 so the file is reproducible byte for byte.
    """
    if len(train_items) == 0 or len(val_items) == 0:
        raise ContractError("fit needs non-empty training and validation sets")
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    best = (-1.0, -math.inf)  # (val accuracy, -val loss), compared lexicographically
    best_model = None
    metrics: list[Metrics] = []
    if resume:
        if ckpt is None or not (ckpt / "last.manifest").exists():
            raise ContractError(f"nothing to resume in {checkpoint_dir}")
        model, extra, meta = load_model(ckpt / "last")
        optimizer = make_optimizer(meta.get("optimizer", config.optimizer), model, config.learning_rate,
                                   config.weight_decay)
        optimizer.load_state_dict({k[len("optim."):]: v for k, v in extra.items() if k.startswith("optim.")})
        start_epoch = int(meta["epoch"])
        best = (float(meta["best_val_acc"]), -float(meta["best_val_loss"]))
        best_model = load_model(ckpt / "best")[0]
        metrics = read_metrics_csv(ckpt / "metrics.csv")[:start_epoch]
    else:
        if model is None:
            model = AmilModel.init(
                np.random.default_rng(np.random.SeedSequence([config.seed, 0xA317])),
                pooling_mode=config.pooling_mode,
                patch_size=config.tiling.patch_size,
                hidden=config.hidden,
            )
        optimizer = make_optimizer(config.optimizer, model, config.learning_rate, config.weight_decay)

    dtype = model.dtype
    val_bags = [_as_bag(v, config.tiling, dtype) for v in val_items]
    val_labels = [b.label for b in val_bags]
    pretiled = None if config.augmentation_enabled else [_as_bag(t, config.tiling, dtype) for t in train_items]
    last_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)

    for epoch in range(start_epoch, last_epoch):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_items))
        transforms = rng.integers(0, len(TRANSFORMS), size=len(train_items))
        losses, hits = [], 0
        for idx in order:
            if pretiled is not None:
                bag = pretiled[idx]
            else:
                bag = _as_bag(train_items[idx], config.tiling, dtype, TRANSFORMS[transforms[idx]])
            loss, prob = _step(model, bag, bag.label, optimizer, None)
            losses.append(loss)
            hits += int((prob > 0.5) == bool(bag.label))
        val_acc, val_loss = _val_scores(model, val_bags, val_labels)
        m = Metrics(epoch + 1, float(np.mean(losses)), hits / len(order), val_acc, time.perf_counter() - t0)
        metrics.append(m)
        improved = (val_acc, -val_loss) > best
        if improved:
            best = (val_acc, -val_loss)
            best_model = model.copy()
        logger.info("epoch %d loss %.4f train_acc %.3f val_acc %.3f (%.1fs)",
                    m.epoch, m.train_loss, m.train_acc, m.val_acc, m.seconds)
        if ckpt is not None:
            tiling_meta = {"stride": config.tiling.stride}
            save_training_state(ckpt / "last", model, optimizer, epoch + 1, best, tiling_meta)
            if improved:
                save_model(ckpt / "best", best_model, meta={**tiling_meta, "epoch": epoch + 1})
            write_metrics_csv(ckpt / "metrics.csv", metrics, include_time=record_time)
        if on_epoch is not None:
            on_epoch(m)

    return (best_model if best_model is not None else model), metrics
