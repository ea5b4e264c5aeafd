"""Declarative run configuration (YAML) and its validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import yaml

from .glm import DISPERSION_METHODS, FAMILIES, ModelTemplate
from .partition import ConstraintSet
from .search import GAConfig, SAConfig


class ConfigError(ValueError):
    pass


SEARCH_METHODS = ("exhaustive", "sa", "ga", "auto")


@dataclass(frozen=True)
class FactorConfig:
    name: str
    levels: tuple[str, ...] | None = None
    collapse: bool = True
    must_link: tuple[tuple[str, str], ...] = ()
    cannot_link: tuple[tuple[str, str], ...] = ()
    consecutive: bool = False

    def constraint_set(self, levels: tuple[str, ...]) -> ConstraintSet:
        index = {lev: i for i, lev in enumerate(levels)}

        def resolve(pairs, what):
            out = []
            for a, b in pairs:
                for x in (a, b):
                    if x not in index:
                        raise ConfigError(f"{what} level {x!r} of factor {self.name!r} is not in its vocabulary")
                out.append((index[a], index[b]))
            return out

        return ConstraintSet(resolve(self.must_link, "must_link"), resolve(self.cannot_link, "cannot_link"),
                             self.consecutive)


@dataclass(frozen=True)
class SearchConfig:
    method: str = "auto"
    ceiling: int = 10**6
    sa: SAConfig = SAConfig()
    ga: GAConfig = GAConfig()


@dataclass(frozen=True)
class StageConfig:
    """One search over a subset of factors; its ``keep`` best distinct
    partitions per factor feed the final recombination search."""

    factors: tuple[str, ...]
    method: str = "auto"
    keep: int = 5


@dataclass(frozen=True)
class EnsembleConfig:
    k: int | None = 1000
    mass: float | None = 0.999
    window: float | None = None


@dataclass(frozen=True)
class EvaluationConfig:
    reps: int = 50
    fraction: float = 0.8
    methods: tuple[str, ...] = ("no-FC", "FC-only", "FC-BMA(5)")
    bins: int = 100
    smoothing: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    input: str
    family: str
    response: str
    factors: tuple[FactorConfig, ...]
    exposure: str | None = None
    offset: str | None = None
    weight: str | None = None
    severity_from: tuple[str, str] | None = None
    delimiter: str = ","
    dispersion: str = "profile"
    search: SearchConfig = SearchConfig()
    stages: tuple[StageConfig, ...] = ()
    ensemble: EnsembleConfig = EnsembleConfig()
    evaluation: EvaluationConfig | None = None
    scoring: str | None = None
    coefficient_models: int = 5
    output_dir: str = "fcbma-out"
    seed: int = 0
    threads: int = 1
    base_dir: str = "."

    @property
    def factor_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors)

    @property
    def collapsed(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors if f.collapse)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def template(self, levels: dict[str, tuple[str, ...]]) -> ModelTemplate:
        constraints = {f.name: f.constraint_set(levels[f.name]) for f in self.factors if f.collapse}
        return ModelTemplate(
            family=self.family, response=self.response, factors=self.factor_names,
            exposure=self.exposure, offset=self.offset, weight=self.weight,
            constraints=constraints, dispersion=self.dispersion,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()


# -- parsing ----------------------------------------------------------------


def _take(d: dict, cls, where: str) -> dict:
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise ConfigError(f"unknown key(s) {extra} in {where}")
    return d


def _pairs(raw, where) -> tuple[tuple[str, str], ...]:
    out = []
    for item in raw or ():
        if isinstance(item, str):
            item = item.split(",")
        if len(item) != 2:
            raise ConfigError(f"{where}: pairs need exactly two level names, got {item!r}")
        out.append((str(item[0]).strip(), str(item[1]).strip()))
    return tuple(out)


def _factor(name: str, raw: dict | None) -> FactorConfig:
    raw = dict(raw or {})
    _take(raw, FactorConfig, f"factor {name!r}")
    levels = raw.get("levels")
    return FactorConfig(
        name=name,
        levels=tuple(str(x) for x in levels) if levels is not None else None,
        collapse=bool(raw.get("collapse", True)),
        must_link=_pairs(raw.get("must_link"), f"factor {name!r} must_link"),
        cannot_link=_pairs(raw.get("cannot_link"), f"factor {name!r} cannot_link"),
        consecutive=bool(raw.get("consecutive", False)),
    )


def _sub(cls, raw, where):
    raw = dict(raw or {})
    _take(raw, cls, where)
    if "rng_seed" in raw:
        raise ConfigError(f"{where}: random streams derive from the top-level seed; remove rng_seed")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(raw: dict[str, Any], base_dir: str | Path = ".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    raw = dict(raw)
    _take(raw, RunConfig, "configuration")
    for key in ("input", "family", "response", "factors"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    if raw["family"] not in FAMILIES:
        raise ConfigError(f"family must be one of {FAMILIES}")
    if raw.get("dispersion", "profile") not in DISPERSION_METHODS:
        raise ConfigError(f"dispersion must be one of {DISPERSION_METHODS}")
    facs = raw["factors"]
    if isinstance(facs, list):
        facs = {str(x): None for x in facs}
    if not isinstance(facs, dict) or not facs:
        raise ConfigError("factors must be a non-empty mapping")
    factors = tuple(_factor(str(k), v) for k, v in facs.items())

    s = dict(raw.get("search") or {})
    _take(s, SearchConfig, "search")
    search = SearchConfig(
        method=s.get("method", "auto"),
        ceiling=int(s.get("ceiling", 10**6)),
        sa=_sub(SAConfig, s.get("sa"), "search.sa"),
        ga=_sub(GAConfig, s.get("ga"), "search.ga"),
    )
    if search.method not in SEARCH_METHODS:
        raise ConfigError(f"search.method must be one of {SEARCH_METHODS}")

    stages = []
    for i, st in enumerate(raw.get("stages") or ()):
        st = dict(st)
        _take(st, StageConfig, f"stages[{i}]")
        stage = StageConfig(tuple(str(x) for x in st.get("factors", ())), st.get("method", "auto"),
                            int(st.get("keep", 5)))
        if not stage.factors:
            raise ConfigError(f"stages[{i}] lists no factors")
        if stage.method not in SEARCH_METHODS:
            raise ConfigError(f"stages[{i}].method must be one of {SEARCH_METHODS}")
        if stage.keep < 1:
            raise ConfigError(f"stages[{i}].keep must be at least 1")
        unknown = [f for f in stage.factors if f not in {x.name for x in factors}]
        if unknown:
            raise ConfigError(f"stages[{i}] names unknown factors {unknown}")
        stages.append(stage)

    ens = _sub(EnsembleConfig, raw.get("ensemble"), "ensemble")
    ev = raw.get("evaluation")
    evaluation = None
    if ev is not None:
        ev = dict(ev)
        if "methods" in ev:
            ev["methods"] = tuple(ev["methods"])
        evaluation = _sub(EvaluationConfig, ev, "evaluation")

    sev = raw.get("severity_from")
    if sev is not None:
        if len(sev) != 2:
            raise ConfigError("severity_from must name [amount, count]")
        sev = (str(sev[0]), str(sev[1]))

    return RunConfig(
        input=str(raw["input"]), family=raw["family"], response=str(raw["response"]),
        factors=factors, exposure=raw.get("exposure"), offset=raw.get("offset"), weight=raw.get("weight"),
        severity_from=sev, delimiter=raw.get("delimiter", ","), dispersion=raw.get("dispersion", "profile"),
        search=search, stages=tuple(stages), ensemble=ens, evaluation=evaluation,
        scoring=raw.get("scoring"), coefficient_models=int(raw.get("coefficient_models", 5)),
        output_dir=str(raw.get("output_dir", "fcbma-out")), seed=int(raw.get("seed", 0)),
        threads=int(raw.get("threads", 1)), base_dir=str(base_dir),
    )


def load_config(path: str | Path, **overrides) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return parse_config(raw, path.parent)
