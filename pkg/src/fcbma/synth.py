"""Synthetic claim portfolios with a known collapsing structure."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd
import yaml

from .data import Dataset
from .partition import Partition, PartitionError, PartitionSpace


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthFactor:
    name: str
    levels: tuple[str, ...]
    partition: Partition | None = None
    frequency_effects: tuple[float, ...] | None = None
    severity_effects: tuple[float, ...] | None = None


@dataclass(frozen=True)
class SynthSpec:
    """Generator parameters.

    Block effects are on the log scale with block 1 at zero; when a factor's
    partition or effects are omitted they are drawn from the seed (effects
    ``signal * N(0, 1)``, a zero ``signal`` giving a factor with no effect).
    ``layout`` is ``policy`` (one row per policy) or ``grouped`` (rows are
    cells of the factor grid with summed exposure, counts and amounts).
    """

    factors: tuple[SynthFactor, ...]
    n_rows: int = 50_000
    layout: str = "policy"
    frequency_intercept: float = -2.0
    severity_intercept: float = 7.0
    severity_shape: float = 2.0
    exposure_range: tuple[float, float] = (0.5, 1.5)
    signal: float = 0.5

    def __post_init__(self):
        if not self.factors:
            raise SynthError("at least one factor is required")
        if self.n_rows < 1:
            raise SynthError("n_rows must be positive")
        if self.layout not in ("policy", "grouped"):
            raise SynthError("layout must be 'policy' or 'grouped'")
        if self.severity_shape <= 0:
            raise SynthError("severity_shape must be positive")
        lo, hi = self.exposure_range
        if not 0 < lo <= hi:
            raise SynthError("exposure_range must satisfy 0 < low <= high")
        for f in self.factors:
            if len(f.levels) < 1:
                raise SynthError(f"factor {f.name!r} needs at least one level")
            if f.partition is not None and f.partition.n != len(f.levels):
                raise SynthError(f"partition of {f.name!r} does not match its {len(f.levels)} levels")
            k = f.partition.n_blocks if f.partition is not None else None
            for eff in (f.frequency_effects, f.severity_effects):
                if eff is not None and k is not None and len(eff) != k:
                    raise SynthError(f"factor {f.name!r} needs {k} block effects, got {len(eff)}")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SynthSpec":
        raw = dict(raw)
        facs = []
        for name, fr in (raw.pop("factors", None) or {}).items():
            fr = dict(fr or {})
            levels = fr.get("levels")
            if isinstance(levels, int):
                if levels < 1:
                    raise SynthError(f"factor {name!r} needs at least one level")
                levels = [str(i + 1) for i in range(levels)]
            if not levels:
                raise SynthError(f"factor {name!r} has no levels")
            levels = tuple(str(x) for x in levels)
            part = fr.get("partition")
            if part is not None:
                part = _parse_partition(str(part), levels, name)
            fe, se = fr.get("frequency_effects"), fr.get("severity_effects")
            facs.append(SynthFactor(str(name), levels, part,
                                    tuple(map(float, fe)) if fe is not None else None,
                                    tuple(map(float, se)) if se is not None else None))
        if "exposure_range" in raw:
            raw["exposure_range"] = tuple(map(float, raw["exposure_range"]))
        try:
            return cls(factors=tuple(facs), **raw)
        except TypeError as exc:
            raise SynthError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))


def _parse_partition(text: str, levels: tuple[str, ...], name: str) -> Partition:
    """Level names first, then 1-based positions such as ``(1)(23)(45)``."""
    try:
        return Partition.parse(text, levels)
    except PartitionError as exc:
        try:
            p = Partition.parse(text)
        except PartitionError:
            raise SynthError(f"factor {name!r}: {exc}") from None
        if p.n != len(levels):
            raise SynthError(f"factor {name!r}: {exc}") from None
        return p


def _effects(given, k, signal, rng):
    if given is not None:
        return np.asarray(given, dtype=float)
    e = signal * rng.standard_normal(k)
    e[0] = 0.0
    return e


def simulate(spec: SynthSpec, seed: int = 0) -> tuple[Dataset, dict]:
    """Draw a portfolio and return it with its ground truth."""
    rng = np.random.default_rng(seed)
    n = spec.n_rows
    truth: dict[str, Any] = {"seed": seed, "factors": {}}
    eta_f = np.full(n, spec.frequency_intercept)
    eta_s = np.full(n, spec.severity_intercept)
    codes = {}
    for f in spec.factors:
        part = f.partition or PartitionSpace(len(f.levels)).random(rng)
        fe = _effects(f.frequency_effects, part.n_blocks, spec.signal, rng)
        se = _effects(f.severity_effects, part.n_blocks, spec.signal, rng)
        c = rng.integers(len(f.levels), size=n)
        block = np.asarray(part.codes)[c] - 1
        eta_f += fe[block]
        eta_s += se[block]
        codes[f.name] = c
        truth["factors"][f.name] = {
            "levels": list(f.levels),
            "partition": part.set_notation(f.levels),
            "graycode": part.graycode(),
            "frequency_effects": fe.tolist(),
            "severity_effects": se.tolist(),
        }
    exposure = rng.uniform(*spec.exposure_range, size=n)
    claims = rng.poisson(exposure * np.exp(eta_f))
    mean_sev = np.exp(eta_s)
    shape = spec.severity_shape
    payments = np.zeros(n)
    pos = claims > 0
    # a sum of c iid Gamma(shape, mean/shape) claims is Gamma(c*shape, mean/shape)
    payments[pos] = rng.gamma(shape * claims[pos], mean_sev[pos] / shape)
    levels = {f.name: f.levels for f in spec.factors}
    numeric = {"Exposure": exposure, "Claims": claims.astype(float), "Payments": payments}
    data = Dataset(numeric, codes, levels)
    if spec.layout == "grouped":
        data = _group(data, [f.name for f in spec.factors])
    truth.update({
        "layout": spec.layout, "n_rows": data.n_rows,
        "frequency_intercept": spec.frequency_intercept,
        "severity_intercept": spec.severity_intercept,
        "severity_shape": spec.severity_shape,
    })
    return data, truth


def _group(data: Dataset, factors: list[str]) -> Dataset:
    df = pd.DataFrame({f: data.factors[f] for f in factors})
    for k, v in data.numeric.items():
        df[k] = v
    g = df.groupby(factors, sort=True, as_index=False).sum()
    return Dataset({k: g[k].to_numpy() for k in data.numeric}, {f: g[f].to_numpy() for f in factors},
                   dict(data.levels))


def write(spec: SynthSpec, seed: int, output_dir: str | Path, name: str = "synth") -> tuple[Path, Path]:
    """Write ``<name>.csv`` and the ground-truth sidecar ``<name>_truth.json``."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, truth = simulate(spec, seed)
    csv_path, truth_path = out / f"{name}.csv", out / f"{name}_truth.json"
    data.to_frame().to_csv(csv_path, index=False, float_format="%.10g", lineterminator="\n")
    truth_path.write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, truth_path
