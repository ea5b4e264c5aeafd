"""Immutable tabular container and delimited-text ingestion."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Raised for missing columns, unparseable values or invalid rows."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Columns by name: categorical factors as level codes, numerics as floats.

    ``factors[name]`` holds 0-based integer codes into ``levels[name]``.
    """

    numeric: Mapping[str, np.ndarray]
    factors: Mapping[str, np.ndarray]
    levels: Mapping[str, tuple[str, ...]]
    n_rows: int = field(init=False)

    def __post_init__(self):
        lengths = {len(v) for v in self.numeric.values()} | {len(v) for v in self.factors.values()}
        if len(lengths) > 1:
            raise DataError(f"columns have unequal lengths {sorted(lengths)}")
        object.__setattr__(self, "n_rows", lengths.pop() if lengths else 0)
        object.__setattr__(self, "numeric", {k: _frozen(np.asarray(v, dtype=float)) for k, v in self.numeric.items()})
        object.__setattr__(self, "factors", {k: _frozen(np.asarray(v, dtype=np.int64)) for k, v in self.factors.items()})
        object.__setattr__(self, "levels", {k: tuple(str(x) for x in v) for k, v in self.levels.items()})
        for name, codes in self.factors.items():
            if name not in self.levels:
                raise DataError(f"factor {name!r} has no level vocabulary")
            if len(codes) and (codes.min() < 0 or codes.max() >= len(self.levels[name])):
                raise DataError(f"factor {name!r} has codes outside its vocabulary")

    @property
    def columns(self) -> list[str]:
        return list(self.factors) + list(self.numeric)

    def __contains__(self, name: str) -> bool:
        return name in self.factors or name in self.numeric

    def __len__(self) -> int:
        return self.n_rows

    def column(self, name: str) -> np.ndarray:
        if name in self.numeric:
            return self.numeric[name]
        if name in self.factors:
            return self.factors[name]
        raise DataError(f"column {name!r} not in dataset")

    def take(self, rows: Sequence[int] | np.ndarray) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            {k: v[rows] for k, v in self.numeric.items()},
            {k: v[rows] for k, v in self.factors.items()},
            dict(self.levels),
        )

    def with_numeric(self, **cols: np.ndarray) -> "Dataset":
        numeric = dict(self.numeric)
        numeric.update(cols)
        return Dataset(numeric, dict(self.factors), dict(self.levels))

    def level_codes(self, factor: str, vocabulary: Sequence[str]) -> np.ndarray:
        """Codes of ``factor`` re-expressed against another vocabulary.

        Raises when the data uses a level the vocabulary does not know.
        """
        own = self.levels[factor]
        if tuple(vocabulary) == own:
            return self.factors[factor]
        index = {lev: i for i, lev in enumerate(vocabulary)}
        used = np.unique(self.factors[factor])
        mapping = np.empty(len(own), dtype=np.int64)
        for code in used:
            lev = own[code]
            if lev not in index:
                raise DataError(f"unseen level {lev!r} for factor {factor!r}")
            mapping[code] = index[lev]
        return mapping[self.factors[factor]]

    def to_frame(self) -> pd.DataFrame:
        out = {k: pd.Categorical.from_codes(v, self.levels[k]) for k, v in self.factors.items()}
        out.update(self.numeric)
        return pd.DataFrame(out)

    @classmethod
    def from_frame(
        cls,
        df: pd.DataFrame,
        factors: Sequence[str],
        numeric: Sequence[str] = (),
        vocabularies: Mapping[str, Sequence[str]] | None = None,
    ) -> "Dataset":
        vocabularies = vocabularies or {}
        missing = [c for c in [*factors, *numeric] if c not in df.columns]
        if missing:
            raise DataError(f"missing column(s): {', '.join(missing)}")
        fac, levs = {}, {}
        for name in factors:
            raw = df[name]
            if raw.isna().any():
                row = int(np.flatnonzero(raw.isna().to_numpy())[0]) + 1
                raise DataError(f"missing value in factor {name!r} at data row {row}")
            values = raw.astype(str).str.strip().to_numpy()
            if name in vocabularies:
                vocab = tuple(str(v) for v in vocabularies[name])
            else:
                vocab = tuple(pd.unique(values))
            index = {lev: i for i, lev in enumerate(vocab)}
            codes = np.empty(len(values), dtype=np.int64)
            for r, v in enumerate(values):
                try:
                    codes[r] = index[v]
                except KeyError:
                    raise DataError(
                        f"level {v!r} of factor {name!r} at data row {r + 1} is not in the vocabulary"
                    ) from None
            fac[name], levs[name] = codes, vocab
        num = {}
        for name in numeric:
            values = pd.to_numeric(df[name], errors="coerce")
            bad = values.isna().to_numpy()
            if bad.any():
                row = int(np.flatnonzero(bad)[0]) + 1
                raise DataError(f"unparseable or missing number in {name!r} at data row {row}")
            num[name] = values.to_numpy(dtype=float)
        return cls(num, fac, levs)


def read_table(path: str | Path, delimiter: str = ",") -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file {path} does not exist")
    return pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=True, encoding="utf-8")


@dataclass(frozen=True)
class ColumnRoles:
    """Which columns play which part when a file is ingested.

    ``severity_from`` names a (total_amount, count) pair; when set, the
    ingested dataset gains ``severity_name`` = amount / count and rows with a
    zero count are dropped.
    """

    factors: tuple[str, ...]
    numeric: tuple[str, ...] = ()
    exposure: str | None = None
    vocabularies: Mapping[str, Sequence[str]] = field(default_factory=dict)
    severity_from: tuple[str, str] | None = None
    severity_name: str = "Severity"
    delimiter: str = ","


def ingest(path: str | Path, roles: ColumnRoles) -> Dataset:
    """Read a delimited file with a header row into a validated Dataset."""
    df = read_table(path, roles.delimiter)
    numeric = list(dict.fromkeys([*roles.numeric, *([roles.exposure] if roles.exposure else []),
                                  *(roles.severity_from or ())]))
    data = Dataset.from_frame(df, roles.factors, numeric, roles.vocabularies)
    if roles.exposure:
        e = data.numeric[roles.exposure]
        bad = np.flatnonzero(e < 0)
        if bad.size:
            raise DataError(f"negative exposure in {roles.exposure!r} at data row {bad[0] + 1}")
    if roles.severity_from:
        data = derive_severity(data, *roles.severity_from, name=roles.severity_name)
    return data


def derive_severity(data: Dataset, amount: str, count: str, name: str = "Severity") -> Dataset:
    """Average amount per claim, keeping only rows with at least one claim."""
    cnt = data.column(count)
    if np.any(cnt < 0):
        raise DataError(f"negative counts in {count!r}")
    keep = np.flatnonzero(cnt > 0)
    sub = data.take(keep)
    return sub.with_numeric(**{name: sub.column(amount) / sub.column(count)})

