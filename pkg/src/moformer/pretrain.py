"""Cross-modal Barlow Twins pretraining of the CGCNN and MOFormer encoders.

Branch A is the structure (CGCNN) encoder, branch B the text (MOFormer)
encoder; each is followed by its own projector MLP.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .encoders import GraphEncoder, TextEncoder
from .errors import DegenerateColumn, NanLoss
from .regression import split_dataset
from .rng import stream

log = logging.getLogger(__name__)

LAMBDA = 0.0051


def cross_correlation(z_a, z_b, centered: bool = False) -> Tensor:
    """``C_ij = Σ_b za[b,i] zb[b,j] / (‖za[:,i]‖ ‖zb[:,j]‖)``.

    ``centered=True`` subtracts column means first, which gives the
    batch-normalized correlation of the original Barlow Twins recipe.
    """
    z_a, z_b = ad._as_tensor(z_a), ad._as_tensor(z_b)
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise ValueError(f"embedding shapes differ: {z_a.shape} vs {z_b.shape}")
    if z_a.shape[0] < 2:
        raise ValueError("cross-correlation needs a batch of at least 2")
    if centered:
        z_a = z_a - ad.mean(z_a, axis=0, keepdims=True)
        z_b = z_b - ad.mean(z_b, axis=0, keepdims=True)
    norm_a = ad.sqrt(ad.tsum(z_a * z_a, axis=0))
    norm_b = ad.sqrt(ad.tsum(z_b * z_b, axis=0))
    if min(norm_a.data.min(), norm_b.data.min()) < 1e-12:
        raise DegenerateColumn("an embedding column has (near) zero norm; embeddings collapsed")
    d = z_a.shape[1]
    denom = norm_a.reshape(d, 1) * norm_b.reshape(1, d)
    return ad.matmul(z_a.T, z_b) / denom


@dataclass
class BarlowTerms:
    loss: Tensor
    diag_term: float
    offdiag_term: float


def barlow_twins_terms(c, lam: float = LAMBDA) -> BarlowTerms:
    c = ad._as_tensor(c)
    d = c.shape[0]
    idx = np.arange(d)
    on = ad.tsum((1.0 - c[idx, idx]) ** 2)
    off = ad.tsum(c * c * (1.0 - np.eye(d)))
    return BarlowTerms(on + lam * off, on.item(), off.item())


def barlow_twins_loss(c, lam: float = LAMBDA) -> Tensor:
    """``Σ_i (1 - C_ii)² + λ Σ_{i≠j} C_ij²``."""
    return barlow_twins_terms(c, lam).loss


def init_projector(d_in: int, d_out: int, rng: np.random.Generator, prefix: str) -> dict[str, Tensor]:
    b1, b2 = 1 / math.sqrt(d_in), 1 / math.sqrt(d_out)
    return {
        f"{prefix}.w1": ad.parameter(rng.uniform(-b1, b1, (d_in, d_out)), f"{prefix}.w1"),
        f"{prefix}.b1": ad.parameter(np.zeros(d_out), f"{prefix}.b1"),
        f"{prefix}.w2": ad.parameter(rng.uniform(-b2, b2, (d_out, d_out)), f"{prefix}.w2"),
        f"{prefix}.b2": ad.parameter(np.zeros(d_out), f"{prefix}.b2"),
    }


def project(params: dict[str, Tensor], prefix: str, x) -> Tensor:
    h = ad.relu(ad.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return ad.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


@dataclass
class PretrainSettings:
    batch_size: int = 32
    lr: float = 1e-5
    epochs: int = 15
    fractions: tuple[float, float] = (0.95, 0.05)
    weight_decay: float = 0.0
    lam: float = LAMBDA
    projector_dim: int = 512
    centered: bool = False
    max_steps: int | None = None
    seed: int = 0


class PretrainModel:
    """Both encoders plus their projectors, trained against each other."""

    def __init__(self, graph: GraphEncoder, text: TextEncoder, settings: PretrainSettings):
        self.graph = graph
        self.text = text
        self.settings = settings
        rng = stream(settings.seed, "init.projector")
        d = settings.projector_dim
        self.projectors = {
            **init_projector(graph.out_dim, d, rng, "proj_graph"),
            **init_projector(text.out_dim, d, rng, "proj_text"),
        }

    @property
    def params(self) -> dict[str, Tensor]:
        return {
            **{f"graph.{k}": v for k, v in self.graph.params.items()},
            **{f"text.{k}": v for k, v in self.text.params.items()},
            **self.projectors,
        }

    def correlation(self, graphs: list, seqs: list) -> Tensor:
        z_a = project(self.projectors, "proj_graph", self.graph.embed(graphs))
        z_b = project(self.projectors, "proj_text", self.text.embed(seqs))
        return cross_correlation(z_a, z_b, self.settings.centered)

    def loss(self, graphs: list, seqs: list) -> BarlowTerms:
        return barlow_twins_terms(self.correlation(graphs, seqs), self.settings.lam)

    def make_optimizer(self) -> Adam:
        return Adam([(self.params, self.settings.lr)], weight_decay=self.settings.weight_decay)


@dataclass
class StepLog:
    step: int
    loss: float
    diag_term: float
    offdiag_term: float


def pretrain_step(model: PretrainModel, batch: list[tuple], opt: Adam) -> StepLog:
    """One optimizer step on a batch of ``(TokenSequence, CrystalGraph)`` pairs."""
    seqs = [b[0] for b in batch]
    graphs = [b[1] for b in batch]
    params = model.params
    with Tape():
        terms = model.loss(graphs, seqs)
    if not math.isfinite(terms.loss.item()):
        raise NanLoss(f"non-finite pretraining loss at step {opt.state.t + 1}")
    opt.step(ad.backward(terms.loss, params))
    return StepLog(opt.state.t, terms.loss.item(), terms.diag_term, terms.offdiag_term)


@dataclass
class PretrainResult:
    steps: list[StepLog]
    val_losses: list[float]


def pretrain(model: PretrainModel, pairs: dict[str, tuple], step_callback=None) -> PretrainResult:
    """Run epochs over ``pairs`` (id -> (seq, graph)); stops early at ``max_steps``."""
    s = model.settings
    ids = sorted(pairs)
    train, val = split_dataset(ids, s.fractions, s.seed, remainder="train")
    log.info("pretraining on %d pairs, %d held out", len(train), len(val))
    opt = model.make_optimizer()
    shuffle = stream(s.seed, "shuffle")
    steps: list[StepLog] = []
    val_losses: list[float] = []
    for epoch in range(s.epochs):
        order = shuffle.permutation(len(train))
        for start in range(0, len(order), s.batch_size):
            chunk = [pairs[train[k]] for k in order[start : start + s.batch_size]]
            if len(chunk) < 2:
                continue
            entry = pretrain_step(model, chunk, opt)
            steps.append(entry)
            if step_callback is not None:
                step_callback(entry)
            if s.max_steps is not None and len(steps) >= s.max_steps:
                return PretrainResult(steps, val_losses)
        if len(val) >= 2:
            batch = [pairs[i] for i in val]
            val_losses.append(model.loss([b[1] for b in batch], [b[0] for b in batch]).loss.item())
            log.info("epoch %d validation loss %.6f", epoch, val_losses[-1])
    return PretrainResult(steps, val_losses)


def write_loss_csv(steps: list[StepLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "diag_term", "offdiag_term"])
        for s in steps:
            w.writerow([s.step, repr(s.loss), repr(s.diag_term), repr(s.offdiag_term)])
