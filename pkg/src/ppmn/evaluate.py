"""Single-shot CMC evaluation and repeated random-split trials."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import ReidDataset
from .model import PPMN, Views


@dataclass
class CmcCurve:
    rates: np.ndarray
    trials: int = 1

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=np.float64)

    def rank(self, k: int) -> float:
        return float(self.rates[k - 1])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("rank,rate\n")
            for k, r in enumerate(self.rates, 1):
                fh.write(f"{k},{float(r)!r}\n")

    @classmethod
    def from_csv(cls, path) -> "CmcCurve":
        rows = Path(path).read_text().splitlines()[1:]
        return cls(np.array([float(r.split(",")[1]) for r in rows if r]))


def true_ranks(scores: np.ndarray, probe_ids: Sequence[int], gallery_ids: Sequence[int]) -> np.ndarray:
    """1-based rank of each probe's true match; higher score ranks first, ties by gallery index."""
    scores = np.asarray(scores, dtype=np.float64)
    gallery_ids = list(gallery_ids)
    lookup = {g: k for k, g in enumerate(gallery_ids)}
    if len(lookup) != len(gallery_ids):
        raise ValueError("single-shot gallery must hold exactly one image per identity")
    ranks = np.empty(len(probe_ids), dtype=np.int64)
    for i, pid in enumerate(probe_ids):
        if pid not in lookup:
            raise ValueError(f"probe identity {pid} is absent from the gallery")
        order = np.argsort(-scores[i], kind="stable")
        ranks[i] = int(np.nonzero(order == lookup[pid])[0][0]) + 1
    return ranks


def cmc_from_scores(scores, probe_ids, gallery_ids) -> CmcCurve:
    ranks = true_ranks(scores, probe_ids, gallery_ids)
    g = len(gallery_ids)
    rates = np.array([(ranks <= k).mean() for k in range(1, g + 1)])
    return CmcCurve(rates)


def cmc(model: PPMN, probes: np.ndarray, gallery: np.ndarray, probe_ids, gallery_ids) -> CmcCurve:
    """Score every probe (view A) against every gallery image (view B), probe first."""
    scores = model.score_matrix(Views.from_images(probes, model.channels),
                                Views.from_images(gallery, model.channels))
    return cmc_from_scores(scores, probe_ids, gallery_ids)


def evaluate_dataset(model: PPMN, test: ReidDataset) -> CmcCurve:
    ids, probes, gallery = test.probe_gallery()
    return cmc(model, probes, gallery, ids, ids)


def mean_curve(curves: Sequence[CmcCurve]) -> CmcCurve:
    if not curves:
        raise ValueError("no curves to average")
    lengths = {len(c.rates) for c in curves}
    if len(lengths) != 1:
        raise ValueError(f"curves have different gallery sizes {sorted(lengths)}")
    return CmcCurve(np.mean([c.rates for c in curves], axis=0), trials=len(curves))


@dataclass
class TrialResult:
    mean: CmcCurve
    curves: list[CmcCurve] = field(default_factory=list)

    def write(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for t, c in enumerate(self.curves):
            p = directory / f"trial_{t}.csv"
            c.to_csv(p)
            paths.append(p)
        p = directory / "mean.csv"
        self.mean.to_csv(p)
        paths.append(p)
        return paths


def run_trials(scorer_factory: Callable[[ReidDataset, int], Callable], dataset: ReidDataset,
               n_train: int, trials: int = 10, seed: int = 0) -> TrialResult:
    """Re-split per trial, build a scorer on the training part, average test CMC curves.

    ``scorer_factory(train_set, trial_seed)`` returns ``f(probes, gallery) -> score matrix``
    (for a model this trains a fresh network; it may also just wrap a fixed checkpoint).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    curves = []
    for t in range(trials):
        trial_seed = seed + t
        train_set, test_set = dataset.split(n_train, trial_seed)
        scorer = scorer_factory(train_set, trial_seed)
        ids, probes, gallery = test_set.probe_gallery()
        curves.append(cmc_from_scores(scorer(probes, gallery), ids, ids))
    return TrialResult(mean_curve(curves), curves)


def model_scorer(model: PPMN) -> Callable:
    def score(probes, gallery):
        return model.score_matrix(Views.from_images(probes, model.channels),
                                  Views.from_images(gallery, model.channels))
    return score


def gnuplot_script(csv_paths: Sequence[Path], out_png: str = "cmc.png") -> str:
    plots = ", ".join(f"'{p}' using 1:2 with linespoints title '{Path(p).stem}'" for p in csv_paths)
    return (
        "set datafile separator ','\n"
        "set key bottom right\n"
        "set xlabel 'rank'\nset ylabel 'matching rate'\nset yrange [0:1]\n"
        f"set terminal pngcairo\nset output '{out_png}'\n"
        f"plot {plots}\n"
    )
