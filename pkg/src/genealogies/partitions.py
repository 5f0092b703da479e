"""Partitions and semi-partitions of [n], kernels and limit rates.

Two kernel families are provided with exact probabilities and samplers:
the paintbox kernels driven by a point of the simplex, and the urn kernels
driven by integer family sizes (sampling without replacement).  Semi
partition kernels keep only the colored samples; a lone colored sample
forms a singleton block, and urn families of size one count as dust.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, List, Sequence, Union

import numpy as np

from .measures import IntegerMassPartition, LimitMeasure, MassPartition

MAX_EXACT_N = 12
MAX_EXACT_COLORS = 12


def _canonical_blocks(blocks: Iterable[Iterable[int]]) -> tuple:
    bs = [tuple(sorted(set(b))) for b in blocks]
    if any(not b for b in bs):
        raise ValueError("blocks must be non-empty")
    bs.sort(key=lambda b: b[0])
    return tuple(bs)


@dataclass(frozen=True)
class Partition:
    """A partition of {0,..,n-1}, blocks ordered by least element."""

    n: int
    blocks: tuple

    def __init__(self, n: int, blocks: Iterable[Iterable[int]]):
        bs = _canonical_blocks(blocks)
        elems = [i for b in bs for i in b]
        if sorted(elems) != list(range(n)):
            raise ValueError("blocks must partition the ground set")
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "blocks", bs)

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(n, [[i] for i in range(n)])

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def block_index(self, i: int) -> int:
        for k, b in enumerate(self.blocks):
            if i in b:
                return k
        raise KeyError(i)

    def index_map(self) -> np.ndarray:
        """pi(i) = index of i's block in canonical order."""
        out = np.empty(self.n, dtype=int)
        for k, b in enumerate(self.blocks):
            for i in b:
                out[i] = k
        return out

    def is_single_doubleton(self) -> bool:
        sizes = sorted(len(b) for b in self.blocks)
        return self.n >= 2 and sizes == [1] * (self.n - 2) + [2]

    def to_jsonable(self) -> list:
        return [list(b) for b in self.blocks]


@dataclass(frozen=True)
class SemiPartition:
    """Disjoint non-empty blocks of {0,..,n-1}, union possibly proper."""

    n: int
    blocks: tuple

    def __init__(self, n: int, blocks: Iterable[Iterable[int]]):
        bs = _canonical_blocks(blocks) if blocks else ()
        elems = [i for b in bs for i in b]
        if len(elems) != len(set(elems)):
            raise ValueError("blocks must be disjoint")
        if any(i < 0 or i >= n for i in elems):
            raise ValueError("element outside the ground set")
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "blocks", bs)

    @classmethod
    def empty(cls, n: int) -> "SemiPartition":
        return cls(n, [])

    @property
    def support(self) -> frozenset:
        return frozenset(i for b in self.blocks for i in b)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def to_jsonable(self) -> list:
        return [list(b) for b in self.blocks]


def enumerate_partitions(n: int) -> List[Partition]:
    """All partitions of [n] in restricted-growth order."""
    out = []

    def grow(i, blocks):
        if i == n:
            out.append(Partition(n, [list(b) for b in blocks]))
            return
        for b in blocks:
            b.append(i)
            grow(i + 1, blocks)
            b.pop()
        blocks.append([i])
        grow(i + 1, blocks)
        blocks.pop()

    grow(0, [])
    return out


def enumerate_semipartitions(n: int) -> List[SemiPartition]:
    """All semi-partitions of [n]: a subset as support plus a partition
    of the support."""
    out = [SemiPartition.empty(n)]
    for mask in range(1, 1 << n):
        support = [i for i in range(n) if mask >> i & 1]

        def grow(i, blocks):
            if i == len(support):
                out.append(SemiPartition(n, [list(b) for b in blocks]))
                return
            for b in blocks:
                b.append(support[i])
                grow(i + 1, blocks)
                b.pop()
            blocks.append([support[i]])
            grow(i + 1, blocks)
            blocks.pop()

        grow(0, [])
    return out


def restrict(p: Union[Partition, SemiPartition], n: int):
    """Intersect every block with [n] and drop empties."""
    if n > p.n:
        raise ValueError("cannot restrict to a larger ground set")
    blocks = [[i for i in b if i < n] for b in p.blocks]
    blocks = [b for b in blocks if b]
    if isinstance(p, Partition):
        return Partition(n, blocks)
    return SemiPartition(n, blocks)


# ---------------------------------------------------------------------------
# Samplers


def sample_uniform_partition_with_sizes(sizes: IntegerMassPartition,
                                        rng: np.random.Generator) -> Partition:
    """Uniform partition of [N] with the prescribed block sizes."""
    N = sizes.population_size
    labels = rng.permutation(N)
    blocks = []
    pos = 0
    for k in sizes.counts:
        blocks.append(labels[pos:pos + k].tolist())
        pos += k
    return Partition(N, blocks)


def _paintbox_colors(x: MassPartition, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Color index per sample; -1 means dust."""
    w = np.array([float(v) for v in x.weights])
    edges = np.concatenate([np.cumsum(w), [1.0]]) if w.size else np.ones(1)
    u = rng.random(n)
    idx = np.searchsorted(edges, u, side="right")
    idx[idx >= w.size] = -1
    return idx


def _blocks_from_colors(colors: Sequence[int], keep_dust_singletons: bool):
    groups = {}
    for i, c in enumerate(colors):
        groups.setdefault(c, []).append(i)
    blocks = [members for c, members in groups.items() if c != -1]
    if keep_dust_singletons:
        blocks += [[i] for i in groups.get(-1, [])]
    return blocks


def sample_paintbox_partition(x: MassPartition, n: int,
                              rng: np.random.Generator) -> Partition:
    colors = _paintbox_colors(x, n, rng)
    blocks = _blocks_from_colors(colors, keep_dust_singletons=True)
    return Partition(n, blocks)


def sample_paintbox_semipartition(x: MassPartition, n: int,
                                  rng: np.random.Generator) -> SemiPartition:
    colors = _paintbox_colors(x, n, rng)
    blocks = _blocks_from_colors(colors, keep_dust_singletons=False)
    return SemiPartition(n, blocks)


def _urn_colors(sizes: IntegerMassPartition, n: int,
                rng: np.random.Generator) -> np.ndarray:
    """Family index per draw, sampling balls without replacement."""
    N = sizes.population_size
    balls = np.repeat(np.arange(len(sizes.counts)), sizes.counts)
    picks = rng.choice(N, size=n, replace=False)
    return balls[picks]


def sample_urn_partition(sizes: IntegerMassPartition, n: int,
                         rng: np.random.Generator) -> Partition:
    fam = _urn_colors(sizes, n, rng)
    groups = {}
    for i, c in enumerate(fam):
        groups.setdefault(int(c), []).append(i)
    return Partition(n, list(groups.values()))


def sample_urn_semipartition(sizes: IntegerMassPartition, n: int,
                             rng: np.random.Generator) -> SemiPartition:
    fam = _urn_colors(sizes, n, rng)
    big = {k for k, s in enumerate(sizes.counts) if s >= 2}
    groups = {}
    for i, c in enumerate(fam):
        if int(c) in big:
            groups.setdefault(int(c), []).append(i)
    return SemiPartition(n, list(groups.values()))


# ---------------------------------------------------------------------------
# Exact kernel probabilities


def _check_exact_limits(n: int, num_colors: int):
    if n > MAX_EXACT_N:
        raise ValueError(f"exact kernels limited to n <= {MAX_EXACT_N}")
    if num_colors > MAX_EXACT_COLORS:
        raise ValueError(
            f"exact kernels limited to {MAX_EXACT_COLORS} colors")


def _injective_color_sum(block_sizes: Sequence[int], weights,
                         optional: Sequence[bool], dust) -> Number:
    """Sum over color assignments of prod(weight(color)^size), blocks
    assigned injectively; blocks flagged optional may take dust instead."""
    m = len(weights)
    zero = Fraction(0) if isinstance(dust, Fraction) else 0.0
    dp = {0: zero + 1}
    for size, opt in zip(block_sizes, optional):
        nxt = {}
        for mask, val in dp.items():
            if opt:
                nxt[mask] = nxt.get(mask, zero) + val * dust
            for c in range(m):
                if mask >> c & 1:
                    continue
                contrib = val * weights[c] ** size
                key = mask | 1 << c
                nxt[key] = nxt.get(key, zero) + contrib
        dp = nxt
    return sum(dp.values(), zero)


Number = Union[float, Fraction]


def paintbox_partition_prob(x: MassPartition, pi: Partition) -> Number:
    """Probability that the paintbox driven by x produces pi.

    Non-singleton blocks must land in distinct colors; singleton blocks are
    either a lone colored sample or dust.
    """
    _check_exact_limits(pi.n, len(x.weights))
    exact = all(isinstance(w, Fraction) for w in x.weights)
    dust = 1 - x.l1 if exact else 1.0 - float(x.l1)
    weights = list(x.weights) if exact else [float(w) for w in x.weights]
    sizes = [len(b) for b in pi.blocks]
    optional = [s == 1 for s in sizes]
    return _injective_color_sum(sizes, weights, optional, dust)


def paintbox_semipartition_prob(x: MassPartition,
                                sigma: SemiPartition) -> Number:
    """Probability that the colored classes of the paintbox equal sigma."""
    _check_exact_limits(sigma.n, len(x.weights))
    exact = all(isinstance(w, Fraction) for w in x.weights)
    dust = 1 - x.l1 if exact else 1.0 - float(x.l1)
    weights = list(x.weights) if exact else [float(w) for w in x.weights]
    sizes = [len(b) for b in sigma.blocks]
    n_dust = sigma.n - sum(sizes)
    colored = _injective_color_sum(sizes, weights,
                                   [False] * len(sizes), dust)
    return colored * dust ** n_dust


def _falling(a: int, k: int) -> int:
    out = 1
    for i in range(k):
        out *= a - i
    return out


def _urn_block_assignment_sum(block_sizes: Sequence[int],
                              family_classes: Sequence[tuple]) -> int:
    """Sum over injective block->family maps of prod (family size falling
    block size), families grouped into (size, multiplicity) classes."""
    b = len(block_sizes)
    dp = {0: 1}
    for fam_size, mult in family_classes:
        nxt = {}
        for mask, val in dp.items():
            free = [i for i in range(b) if not mask >> i & 1]

            def assign(pos, used, weight, cur_mask):
                key = cur_mask
                nxt[key] = nxt.get(key, 0) + val * weight * _falling(mult,
                                                                    used)
                if used == mult:
                    return
                for idx in range(pos, len(free)):
                    i = free[idx]
                    w = _falling(fam_size, block_sizes[i])
                    if w == 0:
                        continue
                    assign(idx + 1, used + 1, weight * w,
                           cur_mask | 1 << i)

            assign(0, 0, 1, mask)
        dp = nxt
    full = (1 << b) - 1
    return dp.get(full, 0)


def _size_classes(counts: Sequence[int], min_size: int = 1):
    classes = {}
    for s in counts:
        if s >= min_size:
            classes[s] = classes.get(s, 0) + 1
    return sorted(classes.items())


def urn_partition_prob(x: IntegerMassPartition, n: int,
                       pi: Partition) -> Fraction:
    """Probability that n draws without replacement from families x induce
    the partition pi (same family = same block)."""
    if n > x.population_size:
        raise ValueError("cannot draw more balls than the population")
    if n > 10:
        raise ValueError("exact urn enumeration limited to n <= 10")
    if pi.n != n:
        raise ValueError("partition size mismatch")
    sizes = [len(b) for b in pi.blocks]
    total = _urn_block_assignment_sum(sizes, _size_classes(x.counts))
    return Fraction(total, _falling(x.population_size, n))


def urn_semipartition_prob(x: IntegerMassPartition, n: int,
                           sigma: SemiPartition) -> Fraction:
    """Probability for the recolored urn (size-1 families are dust) that
    the sampled colored classes equal sigma."""
    if n > x.population_size:
        raise ValueError("cannot draw more balls than the population")
    if n > 10:
        raise ValueError("exact urn enumeration limited to n <= 10")
    if sigma.n != n:
        raise ValueError("semi-partition size mismatch")
    sizes = [len(b) for b in sigma.blocks]
    dust_balls = sum(s for s in x.counts if s == 1)
    n_dust = n - sum(sizes)
    colored = _urn_block_assignment_sum(sizes, _size_classes(x.counts, 2))
    total = colored * _falling(dust_balls, n_dust)
    return Fraction(total, _falling(x.population_size, n))


# ---------------------------------------------------------------------------
# Transformations on (marked) distance matrices


def apply_partition(pi: Partition, rho):
    """rho'(i,j) = rho(pi(i), pi(j)) with pi(i) the least element of the
    block of i, matching the representative choice of the semi-partition
    action."""
    from .trees import DistanceMatrix
    d = rho.d if isinstance(rho, DistanceMatrix) else np.asarray(rho, float)
    if d.shape[0] != pi.n:
        raise ValueError("size mismatch")
    reps = np.empty(pi.n, dtype=int)
    for b in pi.blocks:
        for i in b:
            reps[i] = b[0]
    out = d[np.ix_(reps, reps)].copy()
    np.fill_diagonal(out, 0.0)
    return DistanceMatrix(out, check=False)


def apply_semipartition(sigma: SemiPartition, rv):
    """Semi-partition action on a marked distance matrix.

    Members of a block map to its least element and reset their mark; the
    mark of the representative is folded into the distance part.
    """
    from .trees import MarkedDistanceMatrix
    r, v = rv.r, rv.v
    n = rv.n
    if n != sigma.n:
        raise ValueError("size mismatch")
    rep = np.arange(n)
    in_union = np.zeros(n, dtype=bool)
    for b in sigma.blocks:
        for i in b:
            rep[i] = b[0]
            in_union[i] = True
    vrep = v[rep]
    new_v = np.where(in_union, 0.0, vrep)
    shift = np.where(in_union, vrep, 0.0)
    new_r = r[np.ix_(rep, rep)] + shift[:, None] + shift[None, :]
    np.fill_diagonal(new_r, 0.0)
    return MarkedDistanceMatrix(new_r, new_v, check=False)


# ---------------------------------------------------------------------------
# Limit rates


@dataclass(frozen=True)
class RateTable:
    """Nonnegative jump rates indexed by partitions or semi-partitions."""

    n: int
    entries: dict

    def __getitem__(self, key):
        return self.entries[key]

    def get(self, key, default=0.0):
        return self.entries.get(key, default)

    def total(self):
        return sum(self.entries.values())


def limit_rates_partitions(xi: LimitMeasure, n: int) -> RateTable:
    """Jump rates of the limiting partition process on n lineages."""
    if n > 10:
        raise ValueError("rate tables limited to n <= 10")
    entries = {}
    for pi in enumerate_partitions(n):
        if pi.num_blocks == n:
            continue
        rate = Fraction(0)
        for w, x in xi.atoms:
            rate += w * paintbox_partition_prob(x, pi) / x.l2_squared
        if pi.is_single_doubleton():
            rate += xi.kingman_weight
        if rate > 0:
            entries[pi] = rate
    return RateTable(n, entries)


def limit_rates_semipartitions(xi: LimitMeasure, n: int) -> RateTable:
    """Jump rates of the limiting semi-partition kernel on n lineages.

    Computed over the atomic part only; a positive Kingman weight does not
    contribute (the table then refers to the atomic part alone).
    """
    if n > 10:
        raise ValueError("rate tables limited to n <= 10")
    entries = {}
    for sigma in enumerate_semipartitions(n):
        if sigma.num_blocks == 0:
            continue
        rate = Fraction(0)
        for w, x in xi.atoms:
            rate += w * paintbox_semipartition_prob(x, sigma) / x.l2_squared
        if rate > 0:
            entries[sigma] = rate
    return RateTable(n, entries)
