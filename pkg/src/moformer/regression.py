"""Supervised fine-tuning of either encoder with an MLP regression head."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .encoders import Encoder
from .errors import NanLoss, TooFewRecords
from .rng import stream

log = logging.getLogger(__name__)

HEAD_WIDTHS = (512, 256, 128, 64)


def split_sizes(n: int, fractions: Sequence[float], remainder: str = "drop") -> list[int]:
    """Floor of each fraction times ``n``.

    ``remainder="drop"`` leaves the leftover records out (how the published
    split counts come about); ``"train"`` gives them to the first split.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {list(fractions)}")
    sizes = [int(math.floor(n * f + 1e-9)) for f in fractions]
    if remainder == "train":
        sizes[0] += n - sum(sizes)
    elif remainder != "drop":
        raise ValueError(f"unknown remainder policy {remainder!r}")
    return sizes


def split_dataset(
    ids: Sequence[str],
    fractions: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
    remainder: str = "drop",
) -> tuple[list[str], ...]:
    """Seeded shuffle, then contiguous partition into ``len(fractions)`` splits."""
    if len(ids) < len(fractions):
        raise TooFewRecords(f"need at least {len(fractions)} records to split, got {len(ids)}")
    sizes = split_sizes(len(ids), fractions, remainder)
    order = stream(seed, "split").permutation(len(ids))
    shuffled = [ids[k] for k in order]
    out, start = [], 0
    for size in sizes:
        out.append(shuffled[start : start + size])
        start += size
    return tuple(out)


# --- head -------------------------------------------------------------------


def init_head(d_in: int, rng: np.random.Generator, widths: Sequence[int] = HEAD_WIDTHS) -> dict[str, Tensor]:
    dims = [d_in, *widths, 1]
    params = {}
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / math.sqrt(a)
        params[f"head.{k}.w"] = ad.parameter(rng.uniform(-bound, bound, (a, b)), f"head.{k}.w")
        params[f"head.{k}.b"] = ad.parameter(np.zeros(b), f"head.{k}.b")
    return params


def head_forward(params: dict[str, Tensor], x: Tensor) -> Tensor:
    n = len(params) // 2
    for k in range(n):
        x = ad.matmul(x, params[f"head.{k}.w"]) + params[f"head.{k}.b"]
        if k < n - 1:
            x = ad.relu(x)
    return x.reshape(x.shape[:-1])


@dataclass
class Standardizer:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, y: np.ndarray) -> "Standardizer":
        std = float(np.std(y))
        return cls(float(np.mean(y)), std if std > 0 else 1.0)

    def transform(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


@dataclass
class Regressor:
    """Encoder plus head; predictions come back in original target units."""

    encoder: Encoder
    head: dict[str, Tensor]
    scaler: Standardizer = field(default_factory=Standardizer)

    @property
    def params(self) -> dict[str, Tensor]:
        return {**{f"encoder.{k}": v for k, v in self.encoder.params.items()}, **self.head}

    def forward(self, items: list) -> Tensor:
        return head_forward(self.head, self.encoder.embed(items))

    def predict(self, items: list, batch_size: int = 64) -> np.ndarray:
        out = [self.forward(items[k : k + batch_size]).data for k in range(0, len(items), batch_size)]
        return self.scaler.inverse(np.concatenate(out)) if out else np.zeros(0)


# --- training ---------------------------------------------------------------


@dataclass
class TrainPlan:
    encoder: str = "moformer"
    init: str | None = None
    lr_encoder: float = 5e-5
    lr_head: float = 0.01
    batch_size: int = 64
    epochs: int = 200
    weight_decay: float = 1e-6
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    remainder: str = "drop"
    train_subset: int | None = None
    seed: int = 0
    standardize: bool = True
    track_train_mae: bool = False


@dataclass
class LabeledRecord:
    id: str
    item: object  # TokenSequence or CrystalGraph
    target: float


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_mae: float
    test_mae_at_best: float
    train_mae: float | None = None


@dataclass
class FinetuneResult:
    model: Regressor
    best_epoch: int
    val_mae: float
    test_mae: float
    history: list[EpochLog]
    splits: dict[str, list[str]]


def mae(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true, float), np.asarray(y_pred, float)
    return float(np.mean(np.abs(y_pred - y_true))) if len(y_true) else float("nan")


def _split_records(records: list[LabeledRecord], plan: TrainPlan):
    by_id = {r.id: r for r in records}
    if len(by_id) != len(records):
        raise TooFewRecords("record ids must be unique")
    train, val, test = split_dataset([r.id for r in records], plan.fractions, plan.seed, plan.remainder)
    if plan.train_subset is not None:
        if plan.train_subset > len(train):
            raise TooFewRecords(
                f"train subset {plan.train_subset} exceeds the {len(train)}-record training split"
            )
        pick = stream(plan.seed, "subset").permutation(len(train))[: plan.train_subset]
        train = [train[k] for k in sorted(pick)]
    if not train:
        raise TooFewRecords("training split is empty")
    return [by_id[i] for i in train], [by_id[i] for i in val], [by_id[i] for i in test]


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        v.data = snap[k]


def finetune(plan: TrainPlan, encoder: Encoder, records: list[LabeledRecord], epoch_callback=None) -> FinetuneResult:
    """Train encoder + head, keep the epoch with the lowest validation MAE.

    With an empty validation split, selection falls back to training MAE.
    """
    train, val, test = _split_records(records, plan)
    log.info("split sizes train=%d val=%d test=%d", len(train), len(val), len(test))
    y_train = np.array([r.target for r in train])
    scaler = Standardizer.fit(y_train) if plan.standardize else Standardizer()
    head = init_head(encoder.out_dim, stream(plan.seed, "init.head"))
    model = Regressor(encoder, head, scaler)
    enc_params = {f"encoder.{k}": v for k, v in encoder.params.items()}
    opt = Adam([(enc_params, plan.lr_encoder), (head, plan.lr_head)], weight_decay=plan.weight_decay)
    params = model.params
    shuffle = stream(plan.seed, "shuffle")

    def evaluate_split(rs):
        if not rs:
            return float("nan")
        return mae([r.target for r in rs], model.predict([r.item for r in rs], plan.batch_size))

    best = (math.inf, -1, float("nan"), _snapshot(params))
    history: list[EpochLog] = []
    for epoch in range(plan.epochs):
        order = shuffle.permutation(len(train))
        losses = []
        for start in range(0, len(order), plan.batch_size):
            batch = [train[k] for k in order[start : start + plan.batch_size]]
            target = scaler.transform([r.target for r in batch])
            with Tape():
                pred = model.forward([r.item for r in batch])
                loss = ad.mean((pred - target) ** 2)
            if not math.isfinite(loss.item()):
                raise NanLoss(
                    f"non-finite loss at epoch {epoch}; batch ids={[r.id for r in batch]}, "
                    f"predictions={pred.data.tolist()}"
                )
            grads = ad.backward(loss, params)
            opt.step(grads)
            losses.append(loss.item())
        val_mae = evaluate_split(val) if val else evaluate_split(train)
        if val_mae < best[0] or best[1] < 0:
            best = (val_mae, epoch, evaluate_split(test), _snapshot(params))
        entry = EpochLog(epoch, float(np.mean(losses)), val_mae, best[2])
        if plan.track_train_mae:
            entry.train_mae = evaluate_split(train)
        history.append(entry)
        if epoch_callback is not None:
            epoch_callback(entry)
    _restore(params, best[3])
    splits = {"train": [r.id for r in train], "val": [r.id for r in val], "test": [r.id for r in test]}
    return FinetuneResult(model, best[1], best[0], best[2], history, splits)


def evaluate(model: Regressor, records: list[LabeledRecord], batch_size: int = 64):
    """MAE in original units plus ``(id, y, y_hat)`` rows."""
    preds = model.predict([r.item for r in records], batch_size)
    rows = [(r.id, r.target, float(p)) for r, p in zip(records, preds)]
    return mae([r.target for r in records], preds), rows


def write_metrics(history: list[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_mae", "test_mae_at_best"])
        for h in history:
            w.writerow([h.epoch, repr(h.train_loss), repr(h.val_mae), repr(h.test_mae_at_best)])


def write_predictions(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "y", "y_hat"])
        for rid, y, yhat in rows:
            w.writerow([rid, repr(float(y)), repr(float(yhat))])
