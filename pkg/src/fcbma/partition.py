"""Set partitions of factor levels encoded as restricted growth strings.

A partition of ``n`` levels is stored as a tuple of block indices, one per
level, in canonical restricted-growth form: the first level is in block 1 and
every later level is either in a block already seen or opens the next one.
``(1)(23)(45)`` is therefore stored as ``(1, 2, 2, 3, 3)``.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator, Sequence

import numpy as np


class PartitionError(ValueError):
    """Invalid partition input or infeasible constraint set."""


def _canonical_codes(raw: Iterable[int]) -> tuple[int, ...]:
    relabel: dict[int, int] = {}
    return tuple(relabel.setdefault(c, len(relabel) + 1) for c in raw)


def canonicalize(raw_codes: Iterable[int]) -> "Partition":
    """Renumber blocks 1, 2, 3, ... by order of first occurrence."""
    codes = _canonical_codes(int(c) for c in raw_codes)
    if not codes:
        raise PartitionError("cannot canonicalize an empty code sequence")
    return Partition._trusted(codes)


@dataclass(frozen=True, order=True)
class Partition:
    codes: tuple[int, ...]

    def __post_init__(self):
        codes = tuple(int(c) for c in self.codes)
        object.__setattr__(self, "codes", codes)
        if not codes:
            raise PartitionError("a partition needs at least one level")
        top = 0
        for i, c in enumerate(codes):
            if c < 1 or c > top + 1:
                raise PartitionError(
                    f"codes {codes} are not a restricted growth string (position {i + 1})"
                )
            top = max(top, c)

    @property
    def n(self) -> int:
        return len(self.codes)

    @property
    def n_blocks(self) -> int:
        return max(self.codes)

    def blocks(self) -> list[tuple[int, ...]]:
        """Blocks as tuples of 0-based level indices, ordered by smallest member."""
        out: list[list[int]] = [[] for _ in range(self.n_blocks)]
        for i, c in enumerate(self.codes):
            out[c - 1].append(i)
        return [tuple(b) for b in out]

    def same_block(self, i: int, j: int) -> bool:
        return self.codes[i] == self.codes[j]

    # text forms -----------------------------------------------------------

    def graycode(self) -> str:
        """``"12233"``; comma separated once a block index reaches 10."""
        if self.n_blocks < 10:
            return "".join(str(c) for c in self.codes)
        return ",".join(str(c) for c in self.codes)

    def set_notation(self, labels: Sequence[str] | None = None, compact: bool = False) -> str:
        """``"(1)(2,3)(4,5)"`` with 1-based level numbers or the given labels.

        ``compact=True`` drops the commas (``"(1)(23)(45)"``), which is only
        unambiguous for fewer than ten levels.
        """
        if labels is not None and len(labels) != self.n:
            raise PartitionError(f"expected {self.n} labels, got {len(labels)}")
        sep = "" if compact and labels is None and self.n < 10 else ","
        parts = []
        for block in self.blocks():
            names = [str(labels[i]) if labels is not None else str(i + 1) for i in block]
            parts.append("(" + sep.join(names) + ")")
        return "".join(parts)

    def __str__(self) -> str:
        return self.set_notation()

    @classmethod
    def from_graycode(cls, text: str) -> "Partition":
        text = text.strip()
        if not text:
            raise PartitionError("empty graycode")
        if "," in text:
            raw = [int(t) for t in text.split(",")]
        else:
            if not text.isdigit():
                raise PartitionError(f"bad graycode {text!r}")
            raw = [int(ch) for ch in text]
        return cls(tuple(raw))

    @classmethod
    def from_sets(cls, text: str, labels: Sequence[str] | None = None) -> "Partition":
        """Parse ``"(1)(23)(45)"``, ``"(1,8)(2)"`` or label-based set notation."""
        groups = re.findall(r"\(([^()]*)\)", text)
        if not groups or re.sub(r"\([^()]*\)", "", text).strip():
            raise PartitionError(f"bad set notation {text!r}")
        lookup = {str(lab): i for i, lab in enumerate(labels)} if labels is not None else None
        # compact "(23)" only when no group uses commas; otherwise "(10)" is one level
        compact = not any("," in g for g in groups)
        members: list[list[int]] = []
        for g in groups:
            if lookup is not None:
                items = [s.strip() for s in g.split(",")]
                try:
                    members.append([lookup[s] for s in items])
                except KeyError as exc:
                    raise PartitionError(f"unknown level {exc.args[0]!r} in {text!r}") from None
            else:
                items = list(g.replace(" ", "")) if compact else g.split(",")
                try:
                    members.append([int(s) - 1 for s in items])
                except ValueError:
                    raise PartitionError(f"bad set notation {text!r}") from None
        flat = sorted(itertools.chain.from_iterable(members))
        n = len(labels) if labels is not None else len(flat)
        if flat != list(range(n)):
            raise PartitionError(f"set notation {text!r} does not cover levels 1..{n} exactly once")
        raw = [0] * n
        for b, group in enumerate(members, start=1):
            for i in group:
                raw[i] = b
        return canonicalize(raw)

    @classmethod
    def parse(cls, text: str, labels: Sequence[str] | None = None) -> "Partition":
        """Accept either the graycode or the set-of-sets form."""
        text = text.strip()
        if text.startswith("("):
            return cls.from_sets(text, labels)
        if not re.fullmatch(r"\d+(,\d+)*", text):
            raise PartitionError(f"bad graycode {text!r}")
        raw = text.split(",") if "," in text else list(text)
        return canonicalize(int(t) for t in raw)

    @classmethod
    def _trusted(cls, codes: tuple[int, ...]) -> "Partition":
        # skips validation; only for codes already in canonical form
        p = object.__new__(cls)
        object.__setattr__(p, "codes", codes)
        return p

    @classmethod
    def identity(cls, n: int) -> "Partition":
        return cls(tuple(range(1, n + 1)))

    @classmethod
    def trivial(cls, n: int) -> "Partition":
        return cls((1,) * n)


# -- counting ---------------------------------------------------------------


@lru_cache(maxsize=None)
def _bell_row(n: int) -> tuple[int, ...]:
    if n == 0:
        return (1,)
    prev = _bell_row(n - 1)
    row = [prev[-1]]
    for x in prev:
        row.append(row[-1] + x)
    return tuple(row)


def bell(n: int) -> int:
    """Bell number B_n by the Aitken (Peirce) triangle, exact for any n."""
    if n < 0:
        raise PartitionError(f"Bell number undefined for n={n}")
    return _bell_row(n)[0]


@lru_cache(maxsize=None)
def _completions(remaining: int, top: int) -> int:
    # Number of ways to extend an RGS whose current maximum block is `top`.
    if remaining == 0:
        return 1
    return top * _completions(remaining - 1, top) + _completions(remaining - 1, top + 1)


# -- constraints ------------------------------------------------------------


def _components(n: int, pairs: Iterable[tuple[int, int]]) -> list[int]:
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return [find(i) for i in range(n)]


def _norm_pairs(pairs: Iterable[Sequence[int]], n: int | None, what: str) -> frozenset:
    out = set()
    for pair in pairs:
        a, b = (int(x) for x in pair)
        if a == b:
            raise PartitionError(f"{what} pair ({a}, {b}) links a level to itself")
        if min(a, b) < 0 or (n is not None and max(a, b) >= n):
            raise PartitionError(f"{what} pair ({a}, {b}) out of range for {n} levels")
        out.add((min(a, b), max(a, b)))
    return frozenset(out)


@dataclass(frozen=True)
class ConstraintSet:
    """Pairwise and ordinal restrictions on admissible partitions.

    Pairs hold 0-based level indices. ``consecutive_only`` restricts blocks to
    runs of adjacent levels.
    """

    must_link: frozenset = frozenset()
    cannot_link: frozenset = frozenset()
    consecutive_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "must_link", _norm_pairs(self.must_link, None, "must_link"))
        object.__setattr__(self, "cannot_link", _norm_pairs(self.cannot_link, None, "cannot_link"))

    @classmethod
    def from_one_based(cls, must_link=(), cannot_link=(), consecutive_only=False) -> "ConstraintSet":
        return cls(
            frozenset((a - 1, b - 1) for a, b in must_link),
            frozenset((a - 1, b - 1) for a, b in cannot_link),
            consecutive_only,
        )

    @property
    def empty(self) -> bool:
        return not (self.must_link or self.cannot_link or self.consecutive_only)

    def admits(self, p: Partition) -> bool:
        c = p.codes
        if any(c[a] != c[b] for a, b in self.must_link):
            return False
        if any(c[a] == c[b] for a, b in self.cannot_link):
            return False
        if self.consecutive_only and any(c[i + 1] - c[i] not in (0, 1) for i in range(len(c) - 1)):
            return False
        return True


_NEIGHBOR_MEMO = 200_000


@dataclass(frozen=True)
class PartitionSpace:
    """Admissible partitions of ``n`` levels under a constraint set.

    ``candidates`` optionally pins the space to an explicit list, which is how
    a staged search feeds a shortlist of partitions into a recombination step.
    """

    n: int
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    candidates: tuple[Partition, ...] | None = None
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.n < 1:
            raise PartitionError("a factor needs at least one level")
        cs = self.constraints
        for a, b in cs.must_link | cs.cannot_link:
            if b >= self.n:
                raise PartitionError(f"constraint pair ({a + 1}, {b + 1}) exceeds {self.n} levels")
        comp = _components(self.n, cs.must_link)
        for a, b in cs.cannot_link:
            if comp[a] == comp[b]:
                raise PartitionError(
                    f"levels {a + 1} and {b + 1} are both must-linked and cannot-linked"
                )
        if cs.consecutive_only:
            span = self._consecutive_forced_gaps()
            for a, b in cs.cannot_link:
                if all(span[g] for g in range(a, b)):
                    raise PartitionError(
                        f"levels {a + 1} and {b + 1} are forced into one run by must_link"
                    )
        if self.candidates is not None:
            cands = tuple(sorted(set(self.candidates)))
            if not cands:
                raise PartitionError("candidate list is empty")
            for p in cands:
                if p.n != self.n or not cs.admits(p):
                    raise PartitionError(f"candidate {p} is not admissible")
            object.__setattr__(self, "candidates", cands)

    def _consecutive_forced_gaps(self, extra: Iterable[tuple[int, int]] = ()) -> list[bool]:
        # gap g sits between level g and g+1; True means the two must share a run
        forced = [False] * max(self.n - 1, 0)
        for a, b in itertools.chain(self.constraints.must_link, extra):
            for g in range(a, b):
                forced[g] = True
        return forced

    # contraction to super-levels -------------------------------------------

    @property
    def groups(self) -> tuple[tuple[int, ...], ...]:
        """Must-link components ordered by smallest member."""
        if "groups" not in self._cache:
            comp = _components(self.n, self.constraints.must_link)
            order: dict[int, list[int]] = {}
            for i, r in enumerate(comp):
                order.setdefault(r, []).append(i)
            self._cache["groups"] = tuple(tuple(v) for v in order.values())
        return self._cache["groups"]

    def expand(self, super_codes: Sequence[int]) -> Partition:
        raw = [0] * self.n
        for g, code in zip(self.groups, super_codes):
            for i in g:
                raw[i] = code
        return canonicalize(raw)

    def contract(self, p: Partition) -> tuple[int, ...]:
        return tuple(p.codes[g[0]] for g in self.groups)

    def admits(self, p: Partition) -> bool:
        if p.n != self.n or not self.constraints.admits(p):
            return False
        return self.candidates is None or p in self._candidate_set

    @property
    def _candidate_set(self) -> frozenset:
        if "cset" not in self._cache:
            self._cache["cset"] = frozenset(self.candidates or ())
        return self._cache["cset"]

    @property
    def size(self) -> int:
        if "size" not in self._cache:
            self._cache["size"] = count_constrained(self)
        return self._cache["size"]

    def __iter__(self) -> Iterator[Partition]:
        return enumerate_partitions(self)

    def neighbors(self, p: Partition) -> set[Partition]:
        return constrained_neighbors(self, p)

    def neighbor_list(self, p: Partition) -> tuple[Partition, ...]:
        """Sorted neighbours, memoised (bounded) since searches revisit states."""
        memo = self._cache.setdefault("neighbors", {})
        hit = memo.get(p)
        if hit is None:
            if len(memo) >= _NEIGHBOR_MEMO:
                memo.clear()
            hit = memo[p] = tuple(sorted(constrained_neighbors(self, p)))
        return hit

    def random(self, rng: np.random.Generator | int | None) -> Partition:
        return random_partition(self, rng)


# -- enumeration ------------------------------------------------------------


def enumerate_partitions(space: PartitionSpace | int) -> Iterator[Partition]:
    """Every admissible partition once, in lexicographic RGS order.

    ``0`` yields the single (empty) partition of the empty set.
    """
    if isinstance(space, int):
        if space == 0:
            yield Partition._trusted(())
            return
        space = PartitionSpace(space)
    if space.candidates is not None:
        yield from space.candidates
        return
    cs = space.constraints
    groups = space.groups
    gid = {i: k for k, g in enumerate(groups) for i in g}
    # cannot-link pairs between super-levels, keyed by the later super-level
    forbid: dict[int, list[int]] = {}
    for a, b in cs.cannot_link:
        ga, gb = sorted((gid[a], gid[b]))
        forbid.setdefault(gb, []).append(ga)
    m = len(groups)
    codes = [0] * m
    if cs.consecutive_only:
        # super-level codes must be non-decreasing in level order for runs
        yield from _enum_consecutive(space)
        return

    def rec(k: int, top: int) -> Iterator[tuple[int, ...]]:
        if k == m:
            yield tuple(codes)
            return
        bad = {codes[j] for j in forbid.get(k, ())}
        for c in range(1, top + 2):
            if c in bad:
                continue
            codes[k] = c
            yield from rec(k + 1, max(top, c))

    if m == space.n:
        # no merged super-levels: the codes are already a restricted growth string
        for sc in rec(0, 0):
            yield Partition._trusted(sc)
    else:
        for sc in rec(0, 0):
            yield space.expand(sc)


def _enum_consecutive(space: PartitionSpace) -> Iterator[Partition]:
    n = space.n
    forced = space._consecutive_forced_gaps()
    cannot = list(space.constraints.cannot_link)
    codes = [1] * n

    def rec(i: int) -> Iterator[tuple[int, ...]]:
        if i == n:
            yield tuple(codes)
            return
        options = (0,) if forced[i - 1] else (0, 1)
        for step in options:
            codes[i] = codes[i - 1] + step
            if any(b == i and codes[a] == codes[b] for a, b in cannot):
                continue
            yield from rec(i + 1)

    for c in rec(1):
        yield Partition(c)


def count_constrained(space: PartitionSpace | int) -> int:
    """Exact number of admissible partitions.

    Must-links contract levels to super-levels; cannot-links are handled by
    inclusion-exclusion over subsets of the forbidden pairs, each subset
    counted as if its pairs were must-linked instead.
    """
    if isinstance(space, int):
        return bell(space)
    if space.candidates is not None:
        return len(space.candidates)
    cs = space.constraints
    cannot = sorted(cs.cannot_link)
    if len(cannot) > 20:
        return sum(1 for _ in enumerate_partitions(space))
    total = 0
    for r in range(len(cannot) + 1):
        for subset in itertools.combinations(cannot, r):
            if cs.consecutive_only:
                forced = space._consecutive_forced_gaps(subset)
                term = 2 ** sum(1 for f in forced if not f)
            else:
                comp = _components(space.n, itertools.chain(cs.must_link, subset))
                term = bell(len(set(comp)))
            total += -term if r % 2 else term
    return total


# -- moves ------------------------------------------------------------------


def move(p: Partition, level: int, block: int) -> Partition:
    """Move 0-based ``level`` into ``block`` (``n_blocks + 1`` opens a new one)."""
    if not 1 <= block <= p.n_blocks + 1:
        raise PartitionError(f"block {block} out of range")
    raw = list(p.codes)
    raw[level] = block
    return canonicalize(raw)


def _move_neighbors(codes: Sequence[int]) -> set[tuple[int, ...]]:
    top = max(codes)
    counts: dict[int, int] = {}
    for c in codes:
        counts[c] = counts.get(c, 0) + 1
    out = set()
    for i, ci in enumerate(codes):
        targets = [b for b in range(1, top + 1) if b != ci]
        if counts[ci] > 1:
            targets.append(top + 1)
        for b in targets:
            raw = list(codes)
            raw[i] = b
            out.add(_canonical_codes(raw))
    return out


def neighbors(p: Partition) -> set[Partition]:
    """Partitions reachable by moving one level to another or a new block."""
    return {Partition._trusted(c) for c in _move_neighbors(p.codes)}


def constrained_neighbors(space: PartitionSpace, p: Partition) -> set[Partition]:
    """One-move neighbours inside ``space``.

    Moves act on must-link components so that linked levels travel together.
    A candidate-restricted space has no move structure; every other candidate
    counts as a neighbour.
    """
    if space.candidates is not None:
        return {q for q in space.candidates if q != p}
    if space.constraints.empty:
        return neighbors(p)
    sup = _canonical_codes(space.contract(p))
    out = set()
    for sc in _move_neighbors(sup):
        q = space.expand(sc)
        if q != p and space.constraints.admits(q):
            out.add(q)
    return out


# -- sampling ---------------------------------------------------------------


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _uniform_rgs(m: int, rng: np.random.Generator) -> tuple[int, ...]:
    codes = []
    top = 0
    for k in range(m):
        remaining = m - k - 1
        stay = top * _completions(remaining, top)
        total = stay + _completions(remaining, top + 1)
        # exact integer draw; totals can exceed 2**63 for large m
        u = int(rng.integers(0, 2**62)) * total // 2**62
        if u < stay:
            codes.append(1 + u // _completions(remaining, top))
        else:
            top += 1
            codes.append(top)
    return tuple(codes)


def random_partition(space: PartitionSpace | int, rng=None, max_tries: int = 1000) -> Partition:
    """Draw an admissible partition, uniformly unless rejection keeps failing.

    Uniform over the contracted (must-link) space, with rejection for
    cannot-links; after ``max_tries`` rejections it falls back to a greedy
    sequential assignment that is always admissible.
    """
    if isinstance(space, int):
        space = PartitionSpace(space)
    rng = _as_rng(rng)
    if space.candidates is not None:
        return space.candidates[int(rng.integers(len(space.candidates)))]
    cs = space.constraints
    if cs.consecutive_only:
        forced = space._consecutive_forced_gaps()
        for _ in range(max_tries):
            codes = [1]
            for g in range(space.n - 1):
                codes.append(codes[-1] + (0 if forced[g] else int(rng.integers(2))))
            p = Partition(tuple(codes))
            if cs.admits(p):
                return p
        return _greedy_consecutive(space)
    m = len(space.groups)
    for _ in range(max_tries):
        p = space.expand(_uniform_rgs(m, rng))
        if cs.admits(p):
            return p
    return _greedy(space, rng)


def _greedy(space: PartitionSpace, rng: np.random.Generator) -> Partition:
    groups = space.groups
    gid = {i: k for k, g in enumerate(groups) for i in g}
    clash: dict[int, set[int]] = {}
    for a, b in space.constraints.cannot_link:
        clash.setdefault(gid[a], set()).add(gid[b])
        clash.setdefault(gid[b], set()).add(gid[a])
    codes: list[int] = []
    for k in range(len(groups)):
        bad = {codes[j] for j in clash.get(k, ()) if j < k}
        top = max(codes, default=0)
        options = [c for c in range(1, top + 2) if c not in bad]
        codes.append(options[int(rng.integers(len(options)))])
    return space.expand(codes)


def _greedy_consecutive(space: PartitionSpace) -> Partition:
    # open a new run whenever a gap is free; cannot-links are then satisfied
    forced = space._consecutive_forced_gaps()
    codes = [1]
    for g in range(space.n - 1):
        codes.append(codes[-1] + (0 if forced[g] else 1))
    return Partition(tuple(codes))


def repair(space: PartitionSpace, raw_codes: Sequence[int]) -> Partition | None:
    """Project arbitrary block codes onto ``space``; ``None`` if that fails.

    Must-linked levels are merged into the block of their first member, a
    cannot-link violation sends the later level's component to a new block,
    and in ordinal mode every change of code along the level order opens a
    new run.
    """
    raw = list(raw_codes)
    if len(raw) != space.n:
        return None
    cs = space.constraints
    for g in space.groups:
        for i in g[1:]:
            raw[i] = raw[g[0]]
    if cs.consecutive_only:
        forced = space._consecutive_forced_gaps()
        codes = [1]
        for i in range(1, space.n):
            same = raw[i] == raw[i - 1] or forced[i - 1]
            codes.append(codes[-1] + (0 if same else 1))
        raw = codes
    else:
        gid = {i: k for k, g in enumerate(space.groups) for i in g}
        fresh = max(raw) + 1
        for a, b in sorted(cs.cannot_link):
            if raw[a] == raw[b]:
                for i in space.groups[gid[b]]:
                    raw[i] = fresh
                fresh += 1
    p = canonicalize(raw)
    return p if space.admits(p) else None


def log10_space_size(spaces: Iterable[PartitionSpace]) -> float:
    """log10 of the product of space sizes (sizes can be astronomically large)."""
    return sum(math.log10(s.size) for s in spaces)
