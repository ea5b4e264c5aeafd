"""Poisson and Gamma GLMs with log link, fitted by IRLS on collapsed factors.

Every covariate in a template is a categorical factor, so the likelihood only
depends on the data through per-cell sufficient statistics. ``Problem``
compresses the rows once into those cells; each fit then merges cells that a
collapsing scheme maps to the same block combination and runs IRLS on the
result. The log-likelihood, deviance and Pearson statistic are reconstructed
exactly at row level, so reported values do not depend on the compression.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, special

from .data import Dataset, DataError
from .partition import ConstraintSet, Partition, PartitionSpace
from .scheme import CollapsingScheme

FAMILIES = ("poisson", "gamma")
DISPERSION_METHODS = ("profile", "deviance", "pearson")
INTERCEPT = ("(Intercept)", 0)


class GLMError(ValueError):
    pass


class RankDeficiencyError(GLMError):
    """Design is singular after collapsing, or the MLE does not exist."""

    def __init__(self, message: str, factor: str | None = None):
        super().__init__(message)
        self.factor = factor


@dataclass(frozen=True)
class ModelTemplate:
    """Everything about a model that stays fixed while partitions vary.

    ``exposure`` is a raw exposure column entering as ``log(exposure)``;
    ``offset`` is an additional column already on the linear-predictor scale.
    ``weight`` holds prior weights, e.g. claim counts for a severity model.
    ``dispersion`` selects how the Gamma dispersion enters the likelihood:
    ``"profile"`` maximises the likelihood over it, ``"deviance"`` uses
    deviance / total weight, ``"pearson"`` uses the Pearson estimate.
    """

    family: str
    response: str
    factors: tuple[str, ...]
    exposure: str | None = None
    offset: str | None = None
    weight: str | None = None
    constraints: Mapping[str, ConstraintSet] = field(default_factory=dict)
    dispersion: str = "profile"
    link: str = "log"
    max_iter: int = 50
    tol: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "constraints", dict(self.constraints))
        if self.family not in FAMILIES:
            raise GLMError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.link != "log":
            raise GLMError("only the log link is supported")
        if self.dispersion not in DISPERSION_METHODS:
            raise GLMError(f"dispersion must be one of {DISPERSION_METHODS}")
        unknown = set(self.constraints) - set(self.factors)
        if unknown:
            raise GLMError(f"constraints given for non-template factors {sorted(unknown)}")

    def level_counts(self, data: Dataset) -> dict[str, int]:
        return {f: len(data.levels[f]) for f in self.factors}

    def spaces(self, data: Dataset, collapse: Sequence[str] | None = None) -> dict[str, PartitionSpace]:
        """Partition spaces per factor; factors outside ``collapse`` stay at identity."""
        collapse = self.factors if collapse is None else tuple(collapse)
        out = {}
        for f in self.factors:
            n = len(data.levels[f])
            if f in collapse:
                out[f] = PartitionSpace(n, self.constraints.get(f, ConstraintSet()))
            else:
                out[f] = PartitionSpace(n, candidates=(Partition.identity(n),))
        return out

    def identity_scheme(self, data: Dataset) -> CollapsingScheme:
        return CollapsingScheme.identity(self.level_counts(data))


@dataclass(frozen=True)
class Design:
    matrix: np.ndarray
    columns: tuple[tuple[str, int], ...]

    def n_columns(self, factor: str) -> int:
        return sum(1 for f, _ in self.columns if f == factor)


def _scheme_blocks(scheme: CollapsingScheme, levels: Mapping[str, tuple[str, ...]]) -> dict[str, np.ndarray]:
    out = {}
    for f, p in scheme:
        if f not in levels:
            raise GLMError(f"scheme factor {f!r} not in data")
        if p.n != len(levels[f]):
            raise GLMError(
                f"partition of {f!r} has {p.n} levels but the factor has {len(levels[f])}"
            )
        out[f] = np.asarray(p.codes, dtype=np.int64)
    return out


def _dummy_matrix(blocks: Mapping[str, np.ndarray], scheme: CollapsingScheme, n: int):
    columns = [INTERCEPT]
    for f, p in scheme:
        columns.extend((f, b) for b in range(2, p.n_blocks + 1))
    X = np.zeros((n, len(columns)))
    X[:, 0] = 1.0
    rows = np.arange(n)
    start = 1
    for f, p in scheme:
        k = p.n_blocks
        if k > 1:
            b = blocks[f]
            hit = b >= 2
            X[rows[hit], start + b[hit] - 2] = 1.0
        start += k - 1
    return X, tuple(columns)


def apply_scheme(data: Dataset, scheme: CollapsingScheme) -> Design:
    """Reference-coded design for ``data`` with levels recoded into blocks.

    Block 1 (the block holding the first level) is the reference; a factor
    collapsed to a single block contributes no columns.
    """
    parts = _scheme_blocks(scheme, data.levels)
    blocks = {f: parts[f][data.factors[f]] for f in scheme.factors}
    X, cols = _dummy_matrix(blocks, scheme, data.n_rows)
    return Design(X, cols)


@dataclass(frozen=True, eq=False)
class FittedModel:
    scheme: CollapsingScheme
    family: str
    coef: np.ndarray
    columns: tuple[tuple[str, int], ...]
    log_likelihood: float
    deviance: float
    dispersion: float
    pearson_dispersion: float
    bic: float
    p: int
    n_obs: int
    converged: bool
    iterations: int
    levels: Mapping[str, tuple[str, ...]]
    exposure: str | None = None
    offset: str | None = None

    @property
    def coefficients(self) -> dict[tuple[str, int], float]:
        return dict(zip(self.columns, self.coef.tolist()))

    @property
    def aic(self) -> float:
        return -2.0 * self.log_likelihood + 2.0 * self.p

    def linear_predictor(self, newdata: Dataset) -> np.ndarray:
        eta = np.full(newdata.n_rows, self.coef[0])
        start = 1
        for f, part in self.scheme:
            k = part.n_blocks
            if f not in newdata.factors:
                raise DataError(f"factor {f!r} missing from new data")
            codes = newdata.level_codes(f, self.levels[f])
            effects = np.concatenate([[0.0], self.coef[start:start + k - 1]])
            eta += effects[np.asarray(part.codes)[codes] - 1]
            start += k - 1
        if self.exposure is not None:
            eta += np.log(newdata.column(self.exposure))
        if self.offset is not None:
            eta += newdata.column(self.offset)
        return eta

    def predict(self, newdata: Dataset) -> np.ndarray:
        """Expected response per row, ``exp(linear predictor + offset)``."""
        return np.exp(self.linear_predictor(newdata))

    def coefficient_table(self) -> list[dict]:
        """One record per coefficient, blocks named by their original levels."""
        rows = []
        for (f, b), value in zip(self.columns, self.coef):
            if f == INTERCEPT[0]:
                members = ""
            else:
                lev = self.levels[f]
                members = ",".join(lev[i] for i in self.scheme[f].blocks()[b - 1])
            rows.append({"factor": f, "block": b, "levels": members, "estimate": float(value)})
        return rows


def rejected_model(scheme: CollapsingScheme, family: str, levels, n_obs: int) -> FittedModel:
    """Placeholder for a scheme that cannot be fitted; ranks last in any search."""
    return FittedModel(
        scheme=scheme, family=family, coef=np.array([np.nan]), columns=(INTERCEPT,),
        log_likelihood=-math.inf, deviance=math.inf, dispersion=math.nan,
        pearson_dispersion=math.nan, bic=math.inf, p=0, n_obs=n_obs,
        converged=False, iterations=0, levels=levels,
    )


def poisson_loglik(y: np.ndarray, mu: np.ndarray, w: np.ndarray | None = None) -> float:
    """Full Poisson log-likelihood, prior weights multiplying each term."""
    y = np.asarray(y, float)
    mu = np.asarray(mu, float)
    terms = special.xlogy(y, mu) - mu - special.gammaln(y + 1.0)
    return float(np.sum(terms if w is None else w * terms))


def gamma_loglik(y: np.ndarray, mu: np.ndarray, dispersion: float, w: np.ndarray | None = None) -> float:
    """Full Gamma log-likelihood with shape 1/dispersion and mean ``mu``."""
    y = np.asarray(y, float)
    mu = np.asarray(mu, float)
    nu = 1.0 / dispersion
    terms = nu * np.log(nu * y / mu) - nu * y / mu - np.log(y) - special.gammaln(nu)
    return float(np.sum(terms if w is None else w * terms))


def profile_gamma_shape(deviance: float, total_weight: float) -> float:
    """Shape maximising the Gamma likelihood: solves log(v) - digamma(v) = D / 2W."""
    target = deviance / (2.0 * total_weight)
    if not target > 0:
        raise GLMError("zero deviance: gamma dispersion is not identifiable")

    def g(v):
        return math.log(v) - special.digamma(v) - target

    # log(v) - digamma(v) is decreasing, ~1/v near 0 and ~1/(2v) at infinity
    lo, hi = 0.25 / target, 1.0 / target + 1.0
    while g(lo) < 0:
        lo /= 2.0
    while g(hi) > 0:
        hi *= 2.0
    return optimize.brentq(g, lo, hi, xtol=1e-12, rtol=1e-10, maxiter=200)


class Problem:
    """A dataset and a template prepared for repeated fitting.

    Build once, then call :meth:`fit` for any number of collapsing schemes.
    Instances are read-only after construction and safe to share between
    threads.
    """

    def __init__(self, data: Dataset, template: ModelTemplate):
        self.template = template
        missing = [c for c in (template.response, template.exposure, template.offset, template.weight, *template.factors)
                   if c is not None and c not in data]
        if missing:
            raise DataError(f"missing column(s): {', '.join(missing)}")
        self.levels = {f: data.levels[f] for f in template.factors}
        y = np.asarray(data.column(template.response), float)
        w = np.ones(data.n_rows) if template.weight is None else np.asarray(data.column(template.weight), float)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DataError("prior weights must be finite and non-negative")
        offset = np.zeros(data.n_rows)
        if template.exposure is not None:
            e = np.asarray(data.column(template.exposure), float)
            if np.any(e <= 0):
                raise DataError(f"exposure {template.exposure!r} must be positive")
            offset += np.log(e)
        if template.offset is not None:
            offset += data.column(template.offset)
        keep = w > 0
        y, w, offset = y[keep], w[keep], offset[keep]
        self.n_obs = int(keep.sum())
        if self.n_obs == 0:
            raise DataError("no rows with positive weight")
        if template.family == "poisson":
            if np.any(y < 0) or np.any(y != np.round(y)):
                raise DataError("poisson response must be non-negative integers")
        elif np.any(y <= 0):
            raise DataError("gamma response must be strictly positive")

        codes = np.column_stack([data.factors[f][keep] for f in template.factors]) if template.factors \
            else np.zeros((self.n_obs, 0), dtype=np.int64)
        cells, inv = np.unique(codes, axis=0, return_inverse=True)
        inv = inv.ravel()
        self.cell_codes = {f: cells[:, j] for j, f in enumerate(template.factors)}
        m = len(cells)

        def tot(values):
            return np.bincount(inv, weights=values, minlength=m)

        self.W = tot(w)
        if template.family == "poisson":
            eo = np.exp(offset)
            self.Y = tot(w * y)
            self.E = tot(w * eo)
            self.R = tot(w * y * y / eo)
            self.const = float(np.sum(w * y * offset) - np.sum(w * special.gammaln(y + 1.0)))
            self.loglik_saturated = poisson_loglik(y, y, w)
        else:
            if np.any(offset != 0):
                # offsets would make the mean vary inside a cell
                raise GLMError("offsets are not supported for the gamma family")
            self.S = tot(w * y)
            self.L = tot(w * np.log(y))
            self.Q = tot(w * y * y)
            self.L_total = float(np.sum(w * np.log(y)))
            self.W_total = float(np.sum(w))

    # -- fitting -------------------------------------------------------------

    def spaces(self, collapse: Sequence[str] | None = None) -> dict[str, PartitionSpace]:
        out = {}
        for f in self.template.factors:
            n = len(self.levels[f])
            if collapse is None or f in collapse:
                out[f] = PartitionSpace(n, self.template.constraints.get(f, ConstraintSet()))
            else:
                out[f] = PartitionSpace(n, candidates=(Partition.identity(n),))
        return out

    def identity_scheme(self) -> CollapsingScheme:
        return CollapsingScheme.identity({f: len(v) for f, v in self.levels.items()})

    def _group(self, scheme: CollapsingScheme):
        if scheme.factors != self.template.factors:
            raise GLMError(f"scheme factors {scheme.factors} do not match template {self.template.factors}")
        parts = _scheme_blocks(scheme, self.levels)
        key = np.zeros(len(self.W), dtype=np.int64)
        radix = 1
        for f, p in scheme:
            key += (parts[f][self.cell_codes[f]] - 1) * radix
            radix *= p.n_blocks
        if radix < 2**62:
            uniq, inv = np.unique(key, return_inverse=True)
            g = len(uniq)
            blocks = {}
            rem = uniq.copy()
            for f, p in scheme:
                blocks[f] = rem % p.n_blocks + 1
                rem //= p.n_blocks
        else:
            stacked = np.column_stack([parts[f][self.cell_codes[f]] for f in scheme.factors])
            uniq, inv = np.unique(stacked, axis=0, return_inverse=True)
            g = len(uniq)
            blocks = {f: uniq[:, j] for j, f in enumerate(scheme.factors)}
        return blocks, inv.ravel(), g

    def fit(self, scheme: CollapsingScheme) -> FittedModel:
        t = self.template
        blocks, inv, g = self._group(scheme)
        X, columns = _dummy_matrix(blocks, scheme, g)

        def tot(v):
            return np.bincount(inv, weights=v, minlength=g)

        W = tot(self.W)
        if t.family == "poisson":
            Y, E, R = tot(self.Y), tot(self.E), tot(self.R)
            for f, p in scheme:
                if p.n_blocks > 1:
                    per_block = np.bincount(blocks[f] - 1, weights=Y, minlength=p.n_blocks)
                    if np.any(per_block == 0):
                        b = int(np.flatnonzero(per_block == 0)[0]) + 1
                        raise RankDeficiencyError(
                            f"block {b} of factor {f!r} has no events; the estimate diverges", f)
        else:
            S, L, Q = tot(self.S), tot(self.L), tot(self.Q)
            ybar = S / W

        self._check_rank(X, columns)

        if t.family == "poisson":
            def deviance(eta):
                lam = np.exp(eta)
                ll = float(np.dot(Y, eta) - np.dot(E, lam)) + self.const
                return 2.0 * (self.loglik_saturated - ll)
            mu0 = Y + 0.1
            eta = np.log(mu0 / E)
        else:
            def deviance(eta):
                mu = np.exp(eta)
                return float(2.0 * np.sum(-L + W * eta + S / mu - W))
            eta = np.log(ybar)

        beta = None
        dev_old = deviance(eta) if t.family == "gamma" else math.inf
        converged = False
        it = 0
        for it in range(1, t.max_iter + 1):
            if t.family == "poisson":
                mu = E * np.exp(eta)
                wt = mu
                z = eta + (Y - mu) / mu
            else:
                mu = np.exp(eta)
                wt = W
                z = eta + (ybar - mu) / mu
            XtW = X.T * wt
            new = np.linalg.solve(XtW @ X, XtW @ z)
            eta_new = X @ new
            dev = deviance(eta_new)
            if beta is not None:
                halvings = 0
                while (not np.isfinite(dev) or dev > dev_old * (1 + 1e-12)) and halvings < 30:
                    new = 0.5 * (new + beta)
                    eta_new = X @ new
                    dev = deviance(eta_new)
                    halvings += 1
            step = math.inf if beta is None else float(np.max(np.abs(new - beta)))
            beta, eta = new, eta_new
            if not np.isfinite(dev):
                break
            # the step test keeps iterating past the deviance test until the
            # coefficients themselves have settled (score equations to ~1e-10)
            if abs(dev - dev_old) / (abs(dev) + 0.1) < t.tol and step < 1e-10 * (1 + np.max(np.abs(beta))):
                converged = True
                break
            dev_old = dev

        p_coef = X.shape[1]
        if not converged:
            model = rejected_model(scheme, t.family, self.levels, self.n_obs)
            return FittedModel(**{**model.__dict__, "iterations": it})

        if t.family == "poisson":
            lam = np.exp(eta)
            loglik = float(np.dot(Y, eta) - np.dot(E, lam)) + self.const
            pearson = float(np.sum(R / lam - 2.0 * Y + lam * E))
            dispersion = 1.0
            p = p_coef
        else:
            mu = np.exp(eta)
            pearson = float(np.sum(Q / mu**2 - 2.0 * S / mu + W))
            if t.dispersion == "profile":
                nu = profile_gamma_shape(dev, self.W_total)
            elif t.dispersion == "deviance":
                nu = self.W_total / dev
            else:
                nu = (self.n_obs - p_coef) / pearson
            dispersion = 1.0 / nu
            A = -dev / 2.0 - self.W_total
            loglik = float(self.W_total * (nu * math.log(nu) - special.gammaln(nu)) + nu * A - self.L_total)
            p = p_coef + 1
        dof = self.n_obs - p_coef
        return FittedModel(
            scheme=scheme,
            family=t.family,
            coef=beta,
            columns=columns,
            log_likelihood=loglik,
            deviance=float(dev),
            dispersion=float(dispersion),
            pearson_dispersion=pearson / dof if dof > 0 else math.nan,
            bic=-2.0 * loglik + p * math.log(self.n_obs),
            p=p,
            n_obs=self.n_obs,
            converged=True,
            iterations=it,
            levels=self.levels,
            exposure=t.exposure,
            offset=t.offset,
        )

    @staticmethod
    def _check_rank(X: np.ndarray, columns) -> None:
        empty = np.flatnonzero(~X.any(axis=0))
        if empty.size:
            f, b = columns[empty[0]]
            raise RankDeficiencyError(f"block {b} of factor {f!r} has no observations", f)
        if X.shape[1] > X.shape[0] or np.linalg.matrix_rank(X) < X.shape[1]:
            # find the first factor whose columns break full rank
            seen = [0]
            for j in range(1, X.shape[1]):
                if np.linalg.matrix_rank(X[:, seen + [j]]) < len(seen) + 1:
                    raise RankDeficiencyError(
                        f"design is rank deficient at factor {columns[j][0]!r}", columns[j][0])
                seen.append(j)
            raise RankDeficiencyError("design is rank deficient")


def fit(data: Dataset, template: ModelTemplate, scheme: CollapsingScheme | None = None) -> FittedModel:
    """Fit ``template`` to ``data`` under ``scheme`` (identity when omitted)."""
    problem = Problem(data, template)
    return problem.fit(scheme if scheme is not None else problem.identity_scheme())


def predict(model: FittedModel, newdata: Dataset) -> np.ndarray:
    return model.predict(newdata)
