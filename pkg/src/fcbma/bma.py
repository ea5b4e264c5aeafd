"""Posterior model weights from BIC, averaged predictions, level co-clustering."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset
from .glm import FittedModel
from .search import SearchResult, top_k


class EnsembleError(ValueError):
    pass


def posterior_weights(bics: Sequence[float]) -> np.ndarray:
    """Flat-prior posterior probabilities exp(-BIC/2), normalised.

    Non-finite BICs (rejected fits) get weight zero.
    """
    b = np.asarray(bics, dtype=float)
    if b.size == 0:
        raise EnsembleError("no BIC values given")
    ok = np.isfinite(b)
    if not ok.any():
        raise EnsembleError("no finite BIC values")
    w = np.zeros_like(b)
    w[ok] = np.exp(-(b[ok] - b[ok].min()) / 2.0)
    return w / w.sum()


@dataclass(frozen=True)
class Ensemble:
    models: tuple[FittedModel, ...]
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.models) == 0 or w.shape != (len(self.models),):
            raise EnsembleError("an ensemble needs one weight per model and at least one model")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise EnsembleError("weights must be non-negative and sum to one")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "models", tuple(self.models))

    @classmethod
    def from_models(cls, models: Iterable[FittedModel]) -> "Ensemble":
        ranked = sorted(models, key=lambda m: (m.bic, m.scheme.graycode()))
        ranked = [m for m in ranked if math.isfinite(m.bic)]
        if not ranked:
            raise EnsembleError("no fitted models with finite BIC")
        return cls(tuple(ranked), posterior_weights([m.bic for m in ranked]))

    @classmethod
    def from_result(cls, result: SearchResult | Iterable[FittedModel], k: int | None = None,
                    mass: float | None = 0.999, window: float | None = None) -> "Ensemble":
        """Top models of a search, weights renormalised over the kept set."""
        return cls.from_models(top_k(result, k=k, mass=mass, window=window))

    def __len__(self) -> int:
        return len(self.models)

    @property
    def best(self) -> FittedModel:
        return self.models[0]

    def predict(self, newdata: Dataset) -> np.ndarray:
        return averaged_prediction(self, newdata)

    def average_coefficients(self):
        raise EnsembleError(
            "coefficients are not comparable across collapsing schemes (each scheme has its own "
            "blocks and reference level); average predictions with averaged_prediction instead"
        )


def averaged_prediction(ensemble: Ensemble, newdata: Dataset) -> np.ndarray:
    out = np.zeros(newdata.n_rows)
    for w, m in zip(ensemble.weights, ensemble.models):
        if w > 0:
            out += w * m.predict(newdata)
    return out


def _check_factor(ensemble: Ensemble, factor: str) -> None:
    for m in ensemble.models:
        if factor not in m.scheme.factors:
            raise EnsembleError(f"factor {factor!r} is not part of every ensemble member")


@dataclass(frozen=True)
class SimilarityMatrix:
    factor: str
    levels: tuple[str, ...]
    matrix: np.ndarray

    def reorder(self, order: Sequence[str]) -> "SimilarityMatrix":
        if sorted(order) != sorted(self.levels):
            raise EnsembleError("order must be a permutation of the factor's levels")
        idx = [self.levels.index(x) for x in order]
        return SimilarityMatrix(self.factor, tuple(order), self.matrix[np.ix_(idx, idx)])

    def records(self) -> list[dict]:
        return [
            {"factor": self.factor, "level_a": a, "level_b": b, "probability": float(self.matrix[i, j])}
            for i, a in enumerate(self.levels)
            for j, b in enumerate(self.levels)
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", *self.levels])
            for lev, row in zip(self.levels, self.matrix):
                w.writerow([lev, *(f"{v:.10g}" for v in row)])


def level_effects(model: FittedModel, factor: str) -> np.ndarray:
    """Per-level linear-predictor contribution of ``factor`` in one model."""
    p = model.scheme[factor]
    coefs = model.coefficients
    return np.array([coefs.get((factor, c), 0.0) for c in p.codes])


def coclustering(ensemble: Ensemble, factor: str,
                 order: Sequence[str] | FittedModel | None = None) -> SimilarityMatrix:
    """Posterior probability that each pair of levels shares a block.

    ``order`` is a list of level names, or a model whose level effects for
    ``factor`` sort the levels (ascending).
    """
    _check_factor(ensemble, factor)
    levels = ensemble.models[0].levels[factor]
    L = len(levels)
    mat = np.zeros((L, L))
    for w, m in zip(ensemble.weights, ensemble.models):
        codes = np.asarray(m.scheme[factor].codes)
        mat += w * (codes[:, None] == codes[None, :])
    mat = np.clip((mat + mat.T) / 2.0, 0.0, 1.0)
    np.fill_diagonal(mat, 1.0)
    sim = SimilarityMatrix(factor, tuple(levels), mat)
    if isinstance(order, FittedModel):
        eff = level_effects(order, factor)
        order = [levels[i] for i in np.argsort(eff, kind="stable")]
    return sim.reorder(order) if order is not None else sim


def averaged_occurrence(ensemble: Ensemble, factor: str) -> float:
    """Posterior probability that ``factor`` keeps at least two blocks."""
    _check_factor(ensemble, factor)
    return float(sum(w for w, m in zip(ensemble.weights, ensemble.models) if m.scheme[factor].n_blocks >= 2))
