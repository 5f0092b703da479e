"""Forward simulation of the Cannings genealogy chain.

The chain state stores distances in units of the pairwise coalescence
probability c_N (one generation adds 2 units of distance, marks grow by 1
unit).  Working in these units keeps the per-step identities used by the
step-coupling certificates bitwise exact.  Real-unit matrices are obtained
by multiplying with c_N.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .measures import (IntegerMassPartition, ReproductionLaw, example5_law,
                       pairwise_coalescence_probability,
                       singleton_escape_probability)
from .partitions import Partition, sample_uniform_partition_with_sizes
from .trees import (DistanceMatrix, MarkedDistanceMatrix, TreeState,
                    first_ultrametric_violation, upsilon, validate)

__all__ = [
    "ChainState", "init", "step", "run", "one_generation_units",
    "backward_external_branch", "backward_pair_distance", "example5_law",
    "SnapshotObserver", "ReferenceChain", "generations_for_time",
]


def generations_for_time(law: ReproductionLaw, N: int, t: float) -> int:
    """Number of generations matching rescaled time t: floor(t / c_N)."""
    c = pairwise_coalescence_probability(law, N)
    return int(np.floor(t / float(c)))


@dataclass(frozen=True)
class ChainState:
    """One generation of the Cannings chain on N labeled individuals."""

    N: int
    law: ReproductionLaw
    c_N: float
    k: int
    rho_units: np.ndarray
    r_units: Optional[np.ndarray]
    v_units: Optional[np.ndarray]
    last_partition: Optional[Partition]
    last_parents: Optional[np.ndarray]
    rng: np.random.Generator

    @property
    def track_marked(self) -> bool:
        return self.v_units is not None

    @property
    def rho(self) -> DistanceMatrix:
        return DistanceMatrix(self.c_N * self.rho_units, check=False)

    @property
    def marked(self) -> Optional[MarkedDistanceMatrix]:
        if not self.track_marked:
            return None
        return MarkedDistanceMatrix(self.c_N * self.r_units,
                                    self.c_N * self.v_units, check=False)

    @property
    def external_decomposition_units(self) -> MarkedDistanceMatrix:
        """beta of the current distance matrix, in c_N units."""
        rho = DistanceMatrix(self.rho_units, check=False)
        from .trees import beta
        return beta(rho)

    def tree_state(self) -> TreeState:
        return TreeState(self.rho)


def init(N: int, law: ReproductionLaw,
         initial: Union[DistanceMatrix, MarkedDistanceMatrix, TreeState,
                        None] = None,
         track_marked: bool = False,
         seed: Union[int, np.random.SeedSequence, None] = None,
         rng: Optional[np.random.Generator] = None) -> ChainState:
    """Generation-0 state.

    A TreeState initial is embedded as a uniformly relabeled copy; a plain
    matrix is taken as-is.  With track_marked and a plain initial, marks
    start from the external-branch decomposition; a marked initial also
    fixes the distance matrix through alpha.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    c = float(pairwise_coalescence_probability(law, N))
    if initial is None:
        rho_u = np.zeros((N, N))
        r_u, v_u = (np.zeros((N, N)), np.zeros(N)) if track_marked else (None,
                                                                         None)
        return ChainState(N, law, c, 0, rho_u, r_u, v_u, None, None, rng)

    if isinstance(initial, TreeState):
        if initial.n != N:
            raise ValueError("tree state size must equal N")
        perm = rng.permutation(N)
        initial = initial.matrix.restrict(perm)

    problem = validate(initial)
    if problem is not None:
        raise ValueError(f"invalid initial matrix: {problem}")

    if isinstance(initial, MarkedDistanceMatrix):
        if initial.n != N:
            raise ValueError("initial matrix size must equal N")
        r_u = initial.r / c
        v_u = initial.v / c
        rho_u = r_u + v_u[:, None] + v_u[None, :]
        np.fill_diagonal(rho_u, 0.0)
        if not track_marked:
            r_u = v_u = None
        return ChainState(N, law, c, 0, rho_u, r_u, v_u, None, None, rng)

    if initial.n != N:
        raise ValueError("initial matrix size must equal N")
    rho_u = initial.d / c
    if track_marked:
        v_u = upsilon(DistanceMatrix(rho_u, check=False))
        r_u = rho_u - v_u[:, None] - v_u[None, :]
        np.fill_diagonal(r_u, 0.0)
    else:
        r_u = v_u = None
    return ChainState(N, law, c, 0, rho_u, r_u, v_u, None, None, rng)


def one_generation_units(rho_units: np.ndarray, counts: IntegerMassPartition,
                         rng: np.random.Generator):
    """Apply one reproduction event to a distance matrix in c_N units.

    Returns (new matrix, parent label per child, child-in-big-family mask).
    """
    N = rho_units.shape[0]
    sizes = np.array(counts.counts)
    family_of = np.repeat(np.arange(sizes.size), sizes)
    children = rng.permutation(N)
    parents_of_family = rng.choice(N, size=sizes.size, replace=False)
    parent_of = np.empty(N, dtype=np.intp)
    parent_of[children] = parents_of_family[family_of]
    in_big = np.zeros(N, dtype=bool)
    in_big[children] = sizes[family_of] >= 2
    new = rho_units[np.ix_(parent_of, parent_of)] + 2.0
    np.fill_diagonal(new, 0.0)
    return new, parent_of, in_big


def step(state: ChainState, debug: bool = False) -> ChainState:
    """Advance the chain by one generation."""
    rng = state.rng
    counts = state.law.sample(state.N, rng)
    sizes = np.array(counts.counts)
    family_of = np.repeat(np.arange(sizes.size), sizes)
    children = rng.permutation(state.N)
    parents_of_family = rng.choice(state.N, size=sizes.size, replace=False)
    parent_of = np.empty(state.N, dtype=np.intp)
    parent_of[children] = parents_of_family[family_of]
    in_big = np.zeros(state.N, dtype=bool)
    in_big[children] = sizes[family_of] >= 2

    rho_new = state.rho_units[np.ix_(parent_of, parent_of)] + 2.0
    np.fill_diagonal(rho_new, 0.0)

    r_new = v_new = None
    if state.track_marked:
        v_new = np.where(in_big, 1.0, state.v_units[parent_of] + 1.0)
        r_new = rho_new - v_new[:, None] - v_new[None, :]
        np.fill_diagonal(r_new, 0.0)

    blocks = [[] for _ in range(sizes.size)]
    for child, fam in zip(children.tolist(), family_of.tolist()):
        blocks[fam].append(child)
    partition = Partition(state.N, blocks)

    new_state = ChainState(state.N, state.law, state.c_N, state.k + 1,
                           rho_new, r_new, v_new, partition, parent_of, rng)
    if debug:
        problem = validate(DistanceMatrix(rho_new, check=False))
        if problem is None and new_state.track_marked:
            problem = validate(MarkedDistanceMatrix(r_new, v_new,
                                                    check=False))
        if problem is not None:
            raise AssertionError(f"invariant broken at generation "
                                 f"{new_state.k}: {problem}")
    return new_state


class SnapshotObserver:
    """Collects state snapshots at chosen generation indices."""

    def __init__(self, indices):
        self.indices = set(int(i) for i in indices)
        self.snapshots = {}

    def observe(self, state: ChainState):
        if state.k in self.indices:
            self.snapshots[state.k] = state


def run(state: ChainState, generations: int, observers=(),
        debug: bool = False) -> ChainState:
    """Apply step repeatedly, letting observers see every generation."""
    if generations < 0:
        raise ValueError("generations must be nonnegative")
    for obs in observers:
        obs.observe(state)
    for _ in range(generations):
        state = step(state, debug=debug)
        for obs in observers:
            obs.observe(state)
    return state


class ReferenceChain:
    """Slow oracle keeping full ancestry; distances via the closed form.

    The distance of two current individuals equals 2 c_N times the number
    of generations back to their most recent common ancestor, or the full
    horizon plus the initial distance of their generation-0 ancestors.
    Intended for small N over few generations in tests.
    """

    def __init__(self, N: int, rho0_units: np.ndarray):
        self.N = N
        self.rho0_units = rho0_units
        self.ancestry = [np.arange(N)]

    def record(self, parent_of: np.ndarray):
        rows = [row[parent_of] for row in self.ancestry]
        rows.append(np.arange(self.N))
        self.ancestry = rows

    def distances_units(self) -> np.ndarray:
        k = len(self.ancestry) - 1
        out = np.empty((self.N, self.N))
        for i in range(self.N):
            for j in range(self.N):
                if i == j:
                    out[i, j] = 0.0
                    continue
                back = None
                for g in range(k, -1, -1):
                    if self.ancestry[g][i] == self.ancestry[g][j]:
                        back = k - g
                        break
                if back is not None:
                    out[i, j] = 2.0 * back
                else:
                    a0, b0 = self.ancestry[0][i], self.ancestry[0][j]
                    out[i, j] = 2.0 * k + self.rho0_units[a0, b0]
        return out


# ---------------------------------------------------------------------------
# Backward samplers


def backward_pair_distance(law: ReproductionLaw, N: int, t: float,
                           rng: np.random.Generator,
                           size: Optional[int] = None):
    """Distance of two uniform distinct individuals after time t.

    Two lineages coalesce in each generation independently with the exact
    probability c_N, so the distance from a zero initial state equals
    2 c_N min(Geometric(c_N), floor(t / c_N)).
    """
    c = float(pairwise_coalescence_probability(law, N))
    cap = int(np.floor(t / c))
    g = rng.geometric(c, size=size)
    return 2.0 * c * np.minimum(g, cap)


def backward_external_branch(law: ReproductionLaw, N: int, t: float,
                             rng: np.random.Generator,
                             size: Optional[int] = None,
                             mode: str = "lineage"):
    """Sampled mark of individual 1 after floor(t / c_N) generations.

    mode "lineage": the age mark; the lineage sits in a non-singleton
    family with probability b_N in each generation, so the mark equals
    c_N min(Geometric(b_N), cap).

    mode "population": the external branch length, via a full-population
    backward ancestor simulation (laws with at most one non-singleton
    family per generation only).
    """
    c = float(pairwise_coalescence_probability(law, N))
    cap = int(np.floor(t / c))
    if mode == "lineage":
        b = float(singleton_escape_probability(law, N))
        if b == 0.0:
            g = np.full(size if size is not None else (), cap)
        else:
            g = np.minimum(rng.geometric(b, size=size), cap)
        out = c * np.asarray(g, dtype=float)
        return float(out) if size is None else out
    if mode != "population":
        raise ValueError(f"unknown mode {mode!r}")
    if law.single_family_events is None:
        raise ValueError(
            f"law {law.name!r} lacks single-family event structure")
    events = law.single_family_events(N)
    reps = 1 if size is None else int(size)
    out = np.empty(reps)
    for idx in range(reps):
        out[idx] = c * _population_first_merge(N, events, cap, rng)
    return float(out[0]) if size is None else out


def _population_first_merge(N: int, events, cap: int,
                            rng: np.random.Generator) -> int:
    """Generations back until lineage 1 first merges with another lineage
    of the full population, capped."""
    p_event = float(sum(p for p, _ in events))
    if p_event <= 0.0:
        return cap
    probs = np.array([float(p) for p, _ in events]) / p_event
    g = 0
    m = N
    while True:
        g += rng.geometric(p_event)
        if g >= cap:
            return cap
        kind, param = events[rng.choice(len(events), p=probs)][1]
        if kind == "fixed":
            K = int(param)
            a1 = rng.random() < K / N
            in_family = K - 1 if a1 else K
            others = rng.hypergeometric(in_family, N - 1 - in_family,
                                        m - 1) if m > 1 else 0
        elif kind == "bernoulli":
            q = float(param)
            a1 = rng.random() < q
            others = rng.binomial(m - 1, q) if m > 1 else 0
        else:
            raise ValueError(f"unknown event kind {kind!r}")
        merged = others + (1 if a1 else 0)
        if a1 and others >= 1:
            return g
        if merged >= 1:
            m = m - merged + 1
