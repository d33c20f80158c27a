"""SGD training: polynomial learning-rate decay, momentum with folded weight decay,
5-crop translation augmentation, balanced pair sampling and hard negative mining."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import ReidDataset, translate
from .model import PPMN, Views
from .params import ParamStore

MAX_SHIFT = (8, 4)


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss became {loss} at iteration {iteration}")
        self.iteration = iteration


def lr_at(i: int, max_iter: int, base_lr: float, power: float = 0.5) -> float:
    """Polynomial decay ``base_lr * (1 - i / max_iter) ** power``."""
    if i < 0 or i > max_iter:
        raise ValueError(f"iteration {i} outside [0, {max_iter}]")
    if i == max_iter:
        return 0.0
    return base_lr * (1.0 - i / max_iter) ** power


def sgd_step(store: ParamStore, lr: float, cfg: TrainConfig, grads: dict[str, np.ndarray] | None = None) -> None:
    """v <- momentum * v + (grad + weight_decay * theta); theta <- theta - lr * v.

    Frozen parameters are skipped entirely.  ``grads`` defaults to each
    parameter's accumulated ``grad`` buffer.
    """
    for p in store.trainable():
        if grads is None:
            g = p.grad
        elif p.name in grads:
            g = grads[p.name]
        else:
            raise KeyError(f"no gradient supplied for trainable parameter {p.name}")
        v = store.velocity.get(p.name)
        if v is None:
            v = store.velocity[p.name] = np.zeros_like(p.data)
        v *= cfg.momentum
        v += g + cfg.weight_decay * p.data
        p.data -= lr * v


def augment(img: np.ndarray, rng: np.random.Generator, n: int = 5, max_shift=MAX_SHIFT) -> list[np.ndarray]:
    """``n`` copies translated by integer offsets drawn uniformly from [-8,8] x [-4,4]."""
    sy, sx = max_shift
    out = []
    for _ in range(n):
        dy = int(rng.integers(-sy, sy + 1))
        dx = int(rng.integers(-sx, sx + 1))
        out.append(translate(img, dy, dx))
    return out


class PairSampler:
    """Draws probe-first (view A, view B) pairs from a pool of (augmented) images."""

    def __init__(self, dataset: ReidDataset, rng: np.random.Generator, channels, *,
                 augment_images: bool = True, n_crops: int = 5):
        self.rng = rng
        self.ids = dataset.identities
        if len(self.ids) < 2:
            raise ValueError("training needs at least 2 identities")
        images = []
        self.index: dict[tuple[int, str], list[int]] = {}
        for ident in self.ids:
            for view in ("A", "B"):
                recs = dataset.images(ident, view)
                if not recs:
                    raise ValueError(f"identity {ident} has no view-{view} image")
                slots = []
                for rec in recs:
                    crops = augment(rec.load(), rng, n_crops) if augment_images else [rec.load()]
                    for crop in crops:
                        slots.append(len(images))
                        images.append(crop)
                self.index[(ident, view)] = slots
        self.pool = Views.from_images(np.stack(images), channels)

    def _pick(self, ident: int, view: str) -> int:
        slots = self.index[(ident, view)]
        return slots[int(self.rng.integers(len(slots)))]

    def positive(self) -> tuple[int, int]:
        ident = self.ids[int(self.rng.integers(len(self.ids)))]
        return self._pick(ident, "A"), self._pick(ident, "B")

    def negative(self) -> tuple[int, int]:
        i = int(self.rng.integers(len(self.ids)))
        j = int(self.rng.integers(len(self.ids) - 1))
        if j >= i:
            j += 1
        return self._pick(self.ids[i], "A"), self._pick(self.ids[j], "B")

    def batch(self, n_pos: int, n_neg: int, hard: list[tuple[int, int]] | None = None,
              hard_mix: float = 0.0):
        pairs = [self.positive() for _ in range(n_pos)]
        n_hard = int(round(hard_mix * n_neg)) if hard else 0
        for _ in range(n_hard):
            pairs.append(hard[int(self.rng.integers(len(hard)))])
        pairs += [self.negative() for _ in range(n_neg - n_hard)]
        a = np.array([p[0] for p in pairs])
        b = np.array([p[1] for p in pairs])
        labels = np.array([1] * n_pos + [0] * n_neg)
        return self.pool.take(a), self.pool.take(b), labels


def mine_hard_negatives(model: PPMN, sampler: PairSampler, pool_size: int, n_select: int):
    """Score ``pool_size`` random negatives and keep the ``n_select`` most same-looking.

    Returns (pairs, selected scores, pool scores); ties keep pool order.
    """
    if n_select > pool_size:
        raise ValueError(f"cannot select {n_select} hard negatives from a pool of {pool_size}")
    pairs = [sampler.negative() for _ in range(pool_size)]
    scores = np.empty(pool_size)
    chunk = 64
    for start in range(0, pool_size, chunk):
        part = pairs[start:start + chunk]
        a = sampler.pool.take(np.array([p[0] for p in part]))
        b = sampler.pool.take(np.array([p[1] for p in part]))
        scores[start:start + len(part)] = model.forward(a, b).p
    order = np.argsort(-scores, kind="stable")[:n_select]
    return [pairs[k] for k in order], scores[order], scores


@dataclass
class TrainResult:
    trace: list[tuple[int, float, float]] = field(default_factory=list)
    mined_scores: np.ndarray | None = None
    pool_scores: np.ndarray | None = None

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "lr", "loss"])
            for it, lr, loss in self.trace:
                w.writerow([it, repr(lr), repr(loss)])


def _run(model, sampler, cfg, result, n_iter, base_lr, offset, hard=None):
    n_pos = cfg.n_positives
    n_neg = cfg.batch_size - n_pos
    for i in range(n_iter):
        a, b, labels = sampler.batch(n_pos, n_neg, hard, cfg.hnm_mix)
        loss = model.loss_and_grads(a, b, labels)
        if not math.isfinite(loss):
            raise TrainingDiverged(offset + i, loss)
        lr = lr_at(i, n_iter, base_lr, cfg.p_decay)
        sgd_step(model.store, lr, cfg)
        result.trace.append((offset + i, lr, loss))


def train(model: PPMN, dataset: ReidDataset, cfg: TrainConfig, sampler: PairSampler | None = None) -> TrainResult:
    """Train in place for ``cfg.max_iter`` iterations, then optionally one
    hard-negative mining round followed by ``cfg.hnm_iters`` retraining steps."""
    rng = np.random.default_rng(cfg.seed)
    if sampler is None:
        sampler = PairSampler(dataset, rng, model.channels, augment_images=cfg.augment, n_crops=cfg.n_crops)
    result = TrainResult()
    _run(model, sampler, cfg, result, cfg.max_iter, cfg.base_lr, 0)
    if cfg.hnm:
        pool = cfg.hnm_pool_factor * cfg.batch_size
        n_select = max(1, int(round(cfg.hnm_top_fraction * pool)))
        hard, selected, scores = mine_hard_negatives(model, sampler, pool, n_select)
        result.mined_scores, result.pool_scores = selected, scores
        _run(model, sampler, cfg, result, cfg.hnm_iters, cfg.base_lr * cfg.hnm_lr_scale,
             cfg.max_iter, hard)
    return result

