from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

from .partition import Partition, PartitionError


@dataclass(frozen=True)
class CollapsingScheme:
    """One partition per collapsible factor, in a fixed factor order.

    Hashable and canonical, so it doubles as the key of the fit cache.
    """

    items: tuple[tuple[str, Partition], ...]

    def __post_init__(self):
        names = [n for n, _ in self.items]
        if len(set(names)) != len(names):
            raise PartitionError(f"duplicate factor in scheme: {names}")

    @classmethod
    def of(cls, mapping: Mapping[str, Partition] | Sequence[tuple[str, Partition]]) -> "CollapsingScheme":
        pairs = mapping.items() if isinstance(mapping, Mapping) else mapping
        return cls(tuple((str(k), v) for k, v in pairs))

    @classmethod
    def identity(cls, level_counts: Mapping[str, int]) -> "CollapsingScheme":
        return cls.of({f: Partition.identity(n) for f, n in level_counts.items()})

    @property
    def factors(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.items)

    @property
    def partitions(self) -> dict[str, Partition]:
        return dict(self.items)

    def __getitem__(self, factor: str) -> Partition:
        for n, p in self.items:
            if n == factor:
                return p
        raise KeyError(factor)

    def __iter__(self) -> Iterator[tuple[str, Partition]]:
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def replace(self, factor: str, p: Partition) -> "CollapsingScheme":
        if factor not in self.factors:
            raise KeyError(factor)
        return CollapsingScheme(tuple((n, p if n == factor else q) for n, q in self.items))

    def graycode(self) -> str:
        """Concatenated graycodes, ``||``-separated in factor order."""
        return "||".join(p.graycode() for _, p in self.items)

    def describe(self, levels: Mapping[str, Sequence[str]] | None = None) -> dict[str, str]:
        out = {}
        for n, p in self.items:
            labels = levels.get(n) if levels else None
            out[n] = p.set_notation(labels)
        return out

    def __str__(self) -> str:
        return " ".join(f"{n}={p.set_notation()}" for n, p in self.items)
