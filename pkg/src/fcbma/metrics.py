"""Out-of-sample comparison of uncollapsed, best-collapsed and averaged models."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .bma import Ensemble
from .data import Dataset
from .glm import ModelTemplate, Problem
from .search import (Evaluator, GAConfig, SAConfig, SearchError, exhaustive_search, ga_search,
                     sa_search)

log = logging.getLogger(__name__)

METRICS = ("gini", "ccc", "wasserstein", "ks", "ks_p", "kl", "rmse")


class MetricError(ValueError):
    pass


def _vec(x, name="input") -> np.ndarray:
    a = np.asarray(x, dtype=float).ravel()
    if a.size == 0:
        raise MetricError(f"{name} is empty")
    return a


def _pair(a, b, min_len=1):
    a, b = _vec(a, "actual"), _vec(b, "predicted")
    if a.shape != b.shape:
        raise MetricError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < min_len:
        raise MetricError(f"need at least {min_len} values")
    return a, b


def _weights(w, n):
    if w is None:
        return np.ones(n)
    w = np.asarray(w, dtype=float).ravel()
    if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
        raise MetricError("weights must be non-negative, non-zero and match the data length")
    return w


def split(data: Dataset, fraction: float = 0.8, seed=0) -> tuple[Dataset, Dataset]:
    if not 0 < fraction < 1:
        raise MetricError("fraction must lie in (0, 1)")
    n = data.n_rows
    n_train = int(round(fraction * n))
    if n_train < 1 or n - n_train < 1:
        raise MetricError(f"cannot split {n} rows at fraction {fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    return data.take(np.sort(perm[:n_train])), data.take(np.sort(perm[n_train:]))


def gini(actual, predicted, weights=None) -> float:
    """Ordered-Lorenz Gini: twice the area between the line of equality and the
    curve of accumulated actuals when rows are ranked by prediction.

    Tied predictions are pooled, which equals averaging over their orderings.
    """
    a, p = _pair(actual, predicted, 2)
    w = _weights(weights, a.size)
    loss = w * a
    total = loss.sum()
    if total == 0:
        raise MetricError("total actual loss is zero")
    # pool ties: each distinct prediction is one segment of the curve
    uniq, inv = np.unique(p, return_inverse=True)
    seg_w = np.bincount(inv, weights=w, minlength=uniq.size)
    seg_l = np.bincount(inv, weights=loss, minlength=uniq.size)
    x = np.concatenate([[0.0], np.cumsum(seg_w) / w.sum()])
    y = np.concatenate([[0.0], np.cumsum(seg_l) / total])
    area = np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0)
    return float(1.0 - 2.0 * area)


def ccc(x, y, weights=None) -> float:
    x, y = _pair(x, y, 2)
    w = _weights(weights, x.size)
    w = w / w.sum()
    mx, my = w @ x, w @ y
    vx, vy = w @ (x - mx) ** 2, w @ (y - my) ** 2
    cov = w @ ((x - mx) * (y - my))
    denom = vx + vy + (mx - my) ** 2
    if vx == 0 and vy == 0:
        raise MetricError("both inputs are constant")
    return float(2.0 * cov / denom)


def _ecdf_pair(x, y, wx=None, wy=None):
    x, y = _vec(x, "x"), _vec(y, "y")
    wx, wy = _weights(wx, x.size), _weights(wy, y.size)
    grid = np.unique(np.concatenate([x, y]))
    ox, oy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    cx = np.concatenate([[0.0], np.cumsum(wx[ox])]) / wx.sum()
    cy = np.concatenate([[0.0], np.cumsum(wy[oy])]) / wy.sum()
    fx = cx[np.searchsorted(x[ox], grid, side="right")]
    fy = cy[np.searchsorted(y[oy], grid, side="right")]
    return grid, fx, fy


def wasserstein1(x, y, wx=None, wy=None) -> float:
    """Integral of |F_x - F_y| over the real line."""
    grid, fx, fy = _ecdf_pair(x, y, wx, wy)
    return float(np.sum(np.abs(fx - fy)[:-1] * np.diff(grid)))


def kolmogorov_sf(lam: float) -> float:
    """P(K > lam) for the limiting Kolmogorov distribution."""
    return float(special.kolmogorov(lam))


def ks_test(x, y, wx=None, wy=None) -> tuple[float, float]:
    """Two-sample statistic sup|F_x - F_y| with the asymptotic p-value.

    With weights the effective sample sizes (sum w)^2 / sum w^2 enter the
    p-value in place of the counts.
    """
    grid, fx, fy = _ecdf_pair(x, y, wx, wy)
    d = float(np.max(np.abs(fx - fy)))
    n = _eff_n(wx, np.size(x))
    m = _eff_n(wy, np.size(y))
    en = n * m / (n + m)
    return d, kolmogorov_sf(math.sqrt(en) * d)


def _eff_n(w, n):
    if w is None:
        return float(n)
    w = np.asarray(w, dtype=float)
    return float(w.sum() ** 2 / np.sum(w * w))


def kl_divergence(p_sample, q_sample, bins: int = 100, smoothing: float = 0.5,
                  wp=None, wq=None) -> float:
    """KL(P || Q) between two samples binned on a shared equal-width grid
    spanning the pooled range, with ``smoothing`` added to every bin count."""
    p, q = _vec(p_sample, "p_sample"), _vec(q_sample, "q_sample")
    if bins < 2:
        raise MetricError("bins must be at least 2")
    lo, hi = min(p.min(), q.min()), max(p.max(), q.max())
    if lo == hi:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    cp = np.histogram(p, edges, weights=_weights(wp, p.size))[0] + smoothing
    cq = np.histogram(q, edges, weights=_weights(wq, q.size))[0] + smoothing
    cp, cq = cp / cp.sum(), cq / cq.sum()
    return float(max(0.0, np.sum(cp * np.log(cp / cq))))


def rmse(actual, predicted, weights=None) -> float:
    a, p = _pair(actual, predicted)
    w = _weights(weights, a.size)
    return float(math.sqrt(np.sum(w * (a - p) ** 2) / w.sum()))


def all_metrics(actual, predicted, weights=None, bins: int = 100, smoothing: float = 0.5) -> dict[str, float]:
    ks, ks_p = ks_test(actual, predicted, weights, weights)
    return {
        "gini": gini(actual, predicted, weights),
        "ccc": ccc(actual, predicted, weights),
        "wasserstein": wasserstein1(actual, predicted, weights, weights),
        "ks": ks,
        "ks_p": ks_p,
        "kl": kl_divergence(actual, predicted, bins, smoothing, weights, weights),
        "rmse": rmse(actual, predicted, weights),
    }


# -- repeated-split evaluation ---------------------------------------------


@dataclass(frozen=True)
class Method:
    """``kind`` is ``no-fc``, ``fc-only`` or ``fc-bma``; ``k`` caps the ensemble."""

    kind: str
    k: int | None = None
    mass: float | None = None

    @classmethod
    def parse(cls, text: str) -> "Method":
        t = text.strip().lower().replace("_", "-")
        if t in ("no-fc", "nofc"):
            return cls("no-fc")
        if t in ("fc-only", "fc"):
            return cls("fc-only")
        if t.startswith("fc-bma"):
            rest = t[len("fc-bma"):].strip("()")
            if not rest:
                return cls("fc-bma", mass=0.999)
            return cls("fc-bma", k=int(rest))
        raise MetricError(f"unknown method {text!r}; use no-FC, FC-only or FC-BMA(k)")

    @property
    def label(self) -> str:
        if self.kind == "no-fc":
            return "no-FC"
        if self.kind == "fc-only":
            return "FC-only"
        return f"FC-BMA({self.k})" if self.k else "FC-BMA"


@dataclass
class EvalReport:
    means: dict[str, dict[str, float]]
    reps: int
    requested_reps: int
    fraction: float
    seed: int
    metrics: tuple[str, ...] = METRICS
    per_rep: list[dict] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", *self.metrics, "reps", "fraction", "seed"])
            for method, vals in self.means.items():
                w.writerow([method, *(f"{vals[m]:.10g}" for m in self.metrics), self.reps, self.fraction, self.seed])


SearchFn = Callable[[Evaluator], object]


def default_search(method: str = "exhaustive", sa: SAConfig | None = None, ga: GAConfig | None = None,
                   collapse: Sequence[str] | None = None) -> SearchFn:
    def run(ev: Evaluator):
        spaces = ev.problem.spaces(collapse)
        if method == "exhaustive":
            return exhaustive_search(ev, spaces)
        if method == "sa":
            return sa_search(ev, spaces, sa or SAConfig())
        if method == "ga":
            return ga_search(ev, spaces, ga or GAConfig())
        raise MetricError(f"unknown search method {method!r}")
    return run


def _targets(test: Dataset, template: ModelTemplate):
    """Observed values and row weights that predictions are compared against."""
    y = test.column(template.response)
    w = test.column(template.weight) if template.weight else None
    return y, w


def evaluate(
    data: Dataset,
    template: ModelTemplate,
    methods: Sequence[str | Method] = ("no-FC", "FC-only", "FC-BMA(5)"),
    reps: int = 50,
    fraction: float = 0.8,
    seed: int = 0,
    search: SearchFn | None = None,
    bins: int = 100,
    smoothing: float = 0.5,
    metrics: Sequence[str] = METRICS,
) -> EvalReport:
    """Average each method's test metrics over ``reps`` random splits.

    Frequency models are scored on expected counts against observed counts;
    severity models against observed mean amounts, weighted by the template's
    weight column when it has one.
    """
    methods = [m if isinstance(m, Method) else Method.parse(m) for m in methods]
    if not methods:
        raise MetricError("no methods requested")
    if reps < 1:
        raise MetricError("reps must be at least 1")
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise MetricError(f"unknown metrics {unknown}")
    search = search or default_search()
    sums = {m.label: dict.fromkeys(metrics, 0.0) for m in methods}
    done, per_rep = 0, []
    for r in range(reps):
        rep_seed = np.random.SeedSequence([seed, r]).generate_state(1)[0]
        train, test = split(data, fraction, int(rep_seed))
        try:
            problem = Problem(train, template)
            ev = Evaluator(problem)
            result = search(ev)
            y, w = _targets(test, template)
            preds = {}
            for m in methods:
                if m.kind == "no-fc":
                    model = ev(problem.identity_scheme())
                    if not math.isfinite(model.bic):
                        raise SearchError("the uncollapsed model could not be fitted")
                    preds[m.label] = model.predict(test)
                elif m.kind == "fc-only":
                    preds[m.label] = result.best.predict(test)
                else:
                    ens = Ensemble.from_result(result, k=m.k, mass=m.mass)
                    preds[m.label] = ens.predict(test)
            row = {label: all_metrics(y, p, w, bins, smoothing) for label, p in preds.items()}
        except (SearchError, ValueError, ArithmeticError) as exc:
            log.warning("repetition %d skipped: %s", r, exc)
            continue
        if any(not math.isfinite(vals[k]) for vals in row.values() for k in metrics):
            log.warning("repetition %d skipped: non-finite metric values", r)
            continue
        for label, vals in row.items():
            for k in metrics:
                sums[label][k] += vals[k]
        per_rep.append({"rep": r, "seed": int(rep_seed), **{f"{l}:{k}": v[k] for l, v in row.items() for k in metrics}})
        done += 1
    if done == 0:
        raise MetricError("every repetition failed")
    means = {label: {k: v / done for k, v in vals.items()} for label, vals in sums.items()}
    return EvalReport(means, done, reps, fraction, seed, tuple(metrics), per_rep)
