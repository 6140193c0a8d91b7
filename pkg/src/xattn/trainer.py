"""Mini-batch training with negative mining and plateau early stopping."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingTable, negative_attribute
from .errors import EmptyDataset, NonFiniteLoss, NotEnoughRois
from .io import atomic_write_text
from .model import GraphParams, ModelParams, Negatives, RoiSet, batch_loss, update_running_stats
from .optim import AdamState, adam_step
from .text import AttributeSet, AttributeVocabulary, load_vocabulary

log = logging.getLogger(__name__)


@dataclass
class Sample:
    image_id: str
    roi_set: RoiSet
    attrs: AttributeSet
    attr_embeds: np.ndarray          # (M, dim), vocabulary order
    target: np.ndarray               # (22,) binary
    neg_embeds: np.ndarray | None = None

    def __post_init__(self):
        self.attr_embeds = np.asarray(self.attr_embeds, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if len(self.attrs) < 1 or self.attr_embeds.shape[0] != len(self.attrs):
            raise ValueError(f"{self.image_id}: need >= 1 attribute with one embedding row each")
        if set(np.flatnonzero(self.target).tolist()) != set(self.attrs.present):
            raise ValueError(f"{self.image_id}: target does not match attribute set")


@dataclass
class EarlyStop:
    window: int = 10
    min_rel_improvement: float = 1e-3


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 10
    max_epochs: int = 185
    max_steps: int | None = None
    early_stop: EarlyStop = field(default_factory=EarlyStop)
    seed: int = 0
    split: tuple[float, float, float] = (0.90, 0.05, 0.05)
    neg_rois: int | None = None  # None: lower half of the ROIs by detector score

    def __post_init__(self):
        self.split = tuple(self.split)
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {self.split}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_total: float
    train_trip: float
    train_bce: float
    val_total: float


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[EpochStats]
    best_epoch: int
    steps: int
    adam: AdamState | None = None
    stopped_early: bool = False


def make_negative_rois(roi_set: RoiSet, k: int) -> np.ndarray:
    """Indices of the ``k`` lowest-scoring ROIs, ascending by score then index."""
    n = len(roi_set)
    if k < 1 or k > n:
        raise NotEnoughRois(f"{roi_set.image_id}: asked for {k} negative ROIs out of {n}")
    order = np.lexsort((np.arange(n), roi_set.scores))
    return order[:k]


def default_negative_count(n: int) -> int:
    return max(1, math.ceil(n / 2))


def make_negative_attributes(sample: Sample, table: EmbeddingTable,
                             vocab: AttributeVocabulary | None = None) -> np.ndarray:
    """(M, dim) embeddings of each attribute's nearest neighbour word."""
    vocab = vocab or load_vocabulary()
    return np.stack([table.vector(negative_attribute(w, table)) for w in sample.attrs.words(vocab)])


def split_dataset(samples: Sequence[Sample], fractions=(0.9, 0.05, 0.05), seed: int = 0):
    """Seeded shuffle into (train, val, test) lists."""
    perm = np.random.default_rng(seed).permutation(len(samples))
    n = len(samples)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if fractions[1] > 0 and n_val == 0 and n_train > 1:
        n_val, n_train = 1, n_train - 1
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple([samples[i] for i in p] for p in parts)


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i:i + size] for i in range(0, len(order), size)]
    # a trailing batch of one would make batch-norm degenerate
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _negatives(samples: Sequence[Sample], cfg: TrainConfig, table: EmbeddingTable | None) -> list[Negatives]:
    out = []
    for s in samples:
        k = cfg.neg_rois or default_negative_count(len(s.roi_set))
        emb = s.neg_embeds
        if emb is None:
            if table is None:
                raise ValueError(f"{s.image_id}: no negative embeddings and no table to derive them")
            emb = make_negative_attributes(s, table)
        out.append(Negatives(make_negative_rois(s.roi_set, k), emb))
    return out


def evaluate_loss(samples: Sequence[Sample], negs: Sequence[Negatives], params: ModelParams,
                  batch_size: int = 10) -> float:
    """Mean inference-mode total loss (running batch-norm statistics)."""
    if not samples:
        return float("nan")
    totals, weights = [], []
    for idx in _batches(np.arange(len(samples)), batch_size):
        bundle = batch_loss([samples[i] for i in idx], [negs[i] for i in idx], params, mode="infer")
        totals.append(bundle.total)
        weights.append(len(idx))
    return float(np.average(totals, weights=weights))


def _plateau(history: list[float], stop: EarlyStop) -> bool:
    if len(history) <= stop.window:
        return False
    ref = min(history[:-stop.window])
    recent = min(history[-stop.window:])
    return recent > ref - stop.min_rel_improvement * abs(ref)


def train(dataset: Sequence[Sample], cfg: TrainConfig, params_init: ModelParams,
          table: EmbeddingTable | None = None, val: Sequence[Sample] | None = None,
          on_epoch=None) -> TrainResult:
    """Minimize triplet + BCE loss with Adam; returns the best-validation parameters.

    Without an explicit ``val`` set the dataset is split by ``cfg.split``
    and the test share is left out.
    """
    if not dataset:
        raise EmptyDataset("no training samples")
    if val is None:
        train_set, val_set, _ = split_dataset(dataset, cfg.split, cfg.seed)
    else:
        train_set, val_set = list(dataset), list(val)
    if not train_set:
        raise EmptyDataset("split left no training samples")
    train_negs = _negatives(train_set, cfg, table)
    val_negs = _negatives(val_set, cfg, table)

    params = params_init.copy()
    adam = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    trace: list[EpochStats] = []
    history: list[float] = []
    best_val, best_epoch, best = math.inf, 0, params.copy()
    steps, stopped = 0, False

    for epoch in range(1, cfg.max_epochs + 1):
        sums = np.zeros(3)
        seen = 0
        for idx in _batches(rng.permutation(len(train_set)), cfg.batch_size):
            graph = GraphParams.trainable(params)
            stats: list = []
            bundle = batch_loss([train_set[i] for i in idx], [train_negs[i] for i in idx],
                                graph, mode="train", stats=stats)
            if not math.isfinite(bundle.total):
                raise NonFiniteLoss(steps, bundle.total)
            bundle.node.backward()
            adam_step(params.tensors, graph.grads(), adam)
            update_running_stats(params, stats)
            sums += len(idx) * np.array([bundle.total, bundle.trip, bundle.bce])
            seen += len(idx)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        train_total, train_trip, train_bce = sums / seen
        val_total = evaluate_loss(val_set, val_negs, params, cfg.batch_size) if val_set else train_total
        trace.append(EpochStats(epoch, float(train_total), float(train_trip), float(train_bce), float(val_total)))
        log.info("epoch %d train %.5f (trip %.5f bce %.5f) val %.5f",
                 epoch, train_total, train_trip, train_bce, val_total)
        if on_epoch is not None:
            on_epoch(trace[-1])
        if val_total < best_val:
            best_val, best_epoch, best = val_total, epoch, params.copy()
        history.append(val_total)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        if _plateau(history, cfg.early_stop):
            stopped = True
            break
    return TrainResult(best, trace, best_epoch, steps, adam, stopped)


def trace_csv(trace: Sequence[EpochStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_total", "train_trip", "train_bce", "val_total"])
    for row in trace:
        w.writerow([row.epoch, *(repr(float(x)) for x in
                                 (row.train_total, row.train_trip, row.train_bce, row.val_total))])
    return buf.getvalue()


def write_trace(path: str | Path, trace: Sequence[EpochStats]) -> None:
    atomic_write_text(path, trace_csv(trace))
