"""Fixed-time marginals of the limiting tree-valued process and its
generators.

The time-t marginal is sampled by coalescent duality: n lineages merge at
the jump rates induced by the limit measure, marks record the time back to
the first colored participation of a lineage.  Generators act on bounded
exponential test functions of sampled distance matrices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import List, Optional, Sequence

import numpy as np

from .measures import LimitMeasure
from .partitions import (Partition, apply_partition, apply_semipartition,
                         limit_rates_partitions, limit_rates_semipartitions)
from .trees import DistanceMatrix, MarkedDistanceMatrix, TreeState

EXACT_TUPLE_LIMIT = 20000


class TestFunction:
    """Bounded test function of an n x n distance matrix (and marks).

    Subclasses either register symbolic directional derivatives or inherit
    the central finite-difference fallback.
    """

    def __init__(self, arity: int, marked: bool = False,
                 fd_step: float = 1e-5):
        self.arity = arity
        self.marked = marked
        self.fd_step = fd_step

    def __call__(self, d: np.ndarray, v: Optional[np.ndarray] = None):
        raise NotImplementedError

    def grad_distance_sum(self, d, v=None) -> float:
        """Directional derivative along uniform off-diagonal growth 2."""
        return self.fd_grad_distance_sum(d, v)

    def grad_mark_sum(self, d, v) -> float:
        """Sum of the partial derivatives in the marks."""
        return self.fd_grad_mark_sum(d, v)

    def fd_grad_distance_sum(self, d, v=None) -> float:
        h = self.fd_step
        bump = np.full_like(d, 2.0 * h)
        np.fill_diagonal(bump, 0.0)
        return (self(d + bump, v) - self(d - bump, v)) / (2.0 * h)

    def fd_grad_mark_sum(self, d, v) -> float:
        h = self.fd_step
        return (self(d, v + h) - self(d, v - h)) / (2.0 * h)


class ExponentialTestFunction(TestFunction):
    """phi = exp(-sum_{i != j} a_ij d(i,j) - sum_i b_i v(i))."""

    def __init__(self, a, b=None):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("coefficient matrix must be square")
        if np.any(a < 0):
            raise ValueError("coefficients must be nonnegative")
        marked = b is not None
        if marked:
            b = np.asarray(b, dtype=float)
            if b.shape != (a.shape[0],) or np.any(b < 0):
                raise ValueError("bad mark coefficients")
        super().__init__(a.shape[0], marked=marked)
        self.a = a.copy()
        np.fill_diagonal(self.a, 0.0)
        self.b = b

    def __call__(self, d, v=None):
        s = float(np.sum(self.a * d))
        if self.b is not None:
            s += float(np.dot(self.b, v))
        return math.exp(-s)

    def grad_distance_sum(self, d, v=None):
        return -2.0 * float(self.a.sum()) * self(d, v)

    def grad_mark_sum(self, d, v):
        return -float(self.b.sum()) * self(d, v)


class ConstantTestFunction(TestFunction):
    def __init__(self, arity: int, value: float = 1.0, marked: bool = False):
        super().__init__(arity, marked=marked)
        self.value = float(value)

    def __call__(self, d, v=None):
        return self.value

    def grad_distance_sum(self, d, v=None):
        return 0.0

    def grad_mark_sum(self, d, v):
        return 0.0


class LinearCombination(TestFunction):
    """Linear combination of test functions of equal arity."""

    def __init__(self, terms: Sequence[tuple]):
        arity = terms[0][1].arity
        marked = any(phi.marked for _, phi in terms)
        if any(phi.arity != arity for _, phi in terms):
            raise ValueError("mixed arities")
        super().__init__(arity, marked=marked)
        self.terms = [(float(c), phi) for c, phi in terms]

    def __call__(self, d, v=None):
        return sum(c * phi(d, v if phi.marked else None)
                   for c, phi in self.terms)

    def grad_distance_sum(self, d, v=None):
        return sum(c * phi.grad_distance_sum(d, v if phi.marked else None)
                   for c, phi in self.terms)

    def grad_mark_sum(self, d, v):
        return sum(c * phi.grad_mark_sum(d, v) for c, phi in self.terms)


def pair_exponential(n: int = 2) -> ExponentialTestFunction:
    """phi = exp(-d(1,2) - d(2,1)), the standard pair test function."""
    a = np.zeros((n, n))
    a[0, 1] = a[1, 0] = 1.0
    return ExponentialTestFunction(a)


# ---------------------------------------------------------------------------
# Coalescent sampler


@dataclass
class CoalescentState:
    """Active lineages of the dual coalescent at one event time."""

    block_of: np.ndarray
    leaves_of: dict
    mark_time: np.ndarray
    mark_fixed: np.ndarray
    coal_time: np.ndarray
    time: float = 0.0

    @classmethod
    def start(cls, n: int) -> "CoalescentState":
        return cls(block_of=np.arange(n),
                   leaves_of={b: [b] for b in range(n)},
                   mark_time=np.zeros(n),
                   mark_fixed=np.zeros(n, dtype=bool),
                   coal_time=np.full((n, n), np.inf))

    def merge(self, block_ids: Sequence[int]):
        groups = sorted(set(block_ids))
        if len(groups) < 2:
            return
        target = groups[0]
        for a_i in range(len(groups)):
            for b_i in range(a_i + 1, len(groups)):
                for i in self.leaves_of[groups[a_i]]:
                    for j in self.leaves_of[groups[b_i]]:
                        self.coal_time[i, j] = self.time
                        self.coal_time[j, i] = self.time
        merged = []
        for b in groups:
            merged.extend(self.leaves_of.pop(b))
        self.leaves_of[target] = merged
        for i in merged:
            self.block_of[i] = target

    def fix_marks(self, block_ids: Sequence[int]):
        for b in set(block_ids):
            for i in self.leaves_of[b]:
                if not self.mark_fixed[i]:
                    self.mark_fixed[i] = True
                    self.mark_time[i] = self.time


def sample_coalescent_tree(xi: LimitMeasure, n: int, t: float,
                           initial: Optional[TreeState] = None,
                           rng: Optional[np.random.Generator] = None
                           ) -> MarkedDistanceMatrix:
    """Marked distance matrix of an n-sample of the limit tree at time t.

    Distances double the coalescence times; a lineage's mark is the time
    back to its first colored participation, or t plus an initial mark for
    lineages that never participate.  Uncoalesced pairs add an initial
    distance sampled from the initial state, when one is given.
    """
    if rng is None:
        rng = np.random.default_rng()
    if t < 0:
        raise ValueError("t must be nonnegative")
    a0 = float(xi.kingman_weight)
    atoms = [(float(w) / float(x.l2_squared),
              np.array([float(u) for u in x.weights]))
             for w, x in xi.atoms]
    state = CoalescentState.start(n)
    while True:
        blocks = sorted(state.leaves_of)
        nb = len(blocks)
        kingman_rate = a0 * nb * (nb - 1) / 2.0
        atom_total = sum(r for r, _ in atoms)
        total = kingman_rate + atom_total
        if total <= 0.0:
            break
        dt = rng.exponential(1.0 / total)
        if state.time + dt > t:
            break
        state.time += dt
        u = rng.random() * total
        if u < kingman_rate:
            i, j = rng.choice(nb, size=2, replace=False)
            pair = [blocks[i], blocks[j]]
            state.fix_marks(pair)
            state.merge(pair)
        else:
            u -= kingman_rate
            for rate, w in atoms:
                if u < rate:
                    edges = np.cumsum(w)
                    draws = rng.random(nb)
                    colors = np.searchsorted(edges, draws, side="right")
                    colors[colors >= w.size] = -1
                    colored = [b for b, c in zip(blocks, colors) if c >= 0]
                    state.fix_marks(colored)
                    by_color = {}
                    for b, c in zip(blocks, colors):
                        if c >= 0:
                            by_color.setdefault(int(c), []).append(b)
                    for group in by_color.values():
                        state.merge(group)
                    break
                u -= rate

    survivors = sorted(state.leaves_of)
    rho = np.where(np.isfinite(state.coal_time), 2.0 * state.coal_time,
                   2.0 * t)
    np.fill_diagonal(rho, 0.0)
    v = np.where(state.mark_fixed, state.mark_time, t)
    if initial is not None:
        labels = rng.choice(initial.n, size=len(survivors), replace=True)
        anc = {b: int(lab) for b, lab in zip(survivors, labels)}
        d0 = initial.distances
        v0 = initial.matrix.v if initial.marked else np.zeros(initial.n)
        for i in range(n):
            for j in range(i + 1, n):
                if not np.isfinite(state.coal_time[i, j]):
                    extra = d0[anc[int(state.block_of[i])],
                               anc[int(state.block_of[j])]]
                    rho[i, j] += extra
                    rho[j, i] += extra
        for i in range(n):
            if not state.mark_fixed[i]:
                v[i] = t + v0[anc[int(state.block_of[i])]]
    r = rho - v[:, None] - v[None, :]
    np.fill_diagonal(r, 0.0)
    return MarkedDistanceMatrix(r, v, check=False)


def sample_limit_mark(xi: LimitMeasure, t: float,
                      rng: np.random.Generator,
                      size: Optional[int] = None):
    """Mark of a single sampled point at time t, via the event loop."""
    reps = 1 if size is None else int(size)
    out = np.empty(reps)
    atoms = [(float(w) / float(x.l2_squared), float(x.l1))
             for w, x in xi.atoms]
    total = sum(r for r, _ in atoms)
    for k in range(reps):
        time = 0.0
        mark = t
        while total > 0.0:
            time += rng.exponential(1.0 / total)
            if time > t:
                break
            u = rng.random() * total
            hit = False
            for rate, l1 in atoms:
                if u < rate:
                    hit = rng.random() < l1
                    break
                u -= rate
            if hit:
                mark = time
                break
        out[k] = mark
    return float(out[0]) if size is None else out


# ---------------------------------------------------------------------------
# Generators


def _ordered_tuples(n_points: int, arity: int, mc_samples: int,
                    rng: Optional[np.random.Generator]):
    if n_points ** arity <= EXACT_TUPLE_LIMIT:
        return list(product(range(n_points), repeat=arity)), True
    if mc_samples <= 0:
        raise ValueError("state too large for exact mode; set mc_samples")
    if rng is None:
        rng = np.random.default_rng()
    return [tuple(rng.integers(0, n_points, size=arity))
            for _ in range(mc_samples)], False


def _generator_term_plain(rho_sub: np.ndarray, phi: TestFunction,
                          rates) -> float:
    val = phi.grad_distance_sum(rho_sub)
    base = phi(rho_sub)
    for pi, lam in rates.entries.items():
        moved = apply_partition(pi, rho_sub).d
        val += float(lam) * (phi(moved) - base)
    return val


def apply_generator_B(xi: LimitMeasure, chi: TreeState, phi: TestFunction,
                      mc_samples: int = 0,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Generator of the unmarked limit process applied to a polynomial.

    The expectation over with-replacement n-samples of chi is exact when
    the tuple space is small, Monte Carlo otherwise.
    """
    if phi.marked:
        raise ValueError("unmarked generator needs an unmarked phi")
    rates = limit_rates_partitions(xi, phi.arity)
    d = chi.distances
    tuples, _ = _ordered_tuples(chi.n, phi.arity, mc_samples, rng)
    acc = 0.0
    for labels in tuples:
        idx = np.array(labels)
        rho_sub = d[np.ix_(idx, idx)]
        acc += _generator_term_plain(rho_sub, phi, rates)
    return acc / len(tuples)


def apply_generator_Bhat(xi: LimitMeasure, chi: TreeState,
                         phi: TestFunction, mc_samples: int = 0,
                         rng: Optional[np.random.Generator] = None) -> float:
    """Generator of the marked limit process applied to a marked
    polynomial; the reshuffle part acts through semi-partitions."""
    if not phi.marked:
        raise ValueError("marked generator needs a marked phi")
    if not chi.marked:
        raise ValueError("marked generator needs a marked state")
    rates = limit_rates_semipartitions(xi, phi.arity)
    r_full, v_full = chi.matrix.r, chi.matrix.v
    tuples, _ = _ordered_tuples(chi.n, phi.arity, mc_samples, rng)
    acc = 0.0
    for labels in tuples:
        idx = np.array(labels)
        r_sub = r_full[np.ix_(idx, idx)].copy()
        np.fill_diagonal(r_sub, 0.0)
        v_sub = v_full[idx]
        base = phi(r_sub, v_sub)
        val = phi.grad_mark_sum(r_sub, v_sub)
        sub = MarkedDistanceMatrix(r_sub, v_sub, check=False)
        for sigma, lam in rates.entries.items():
            moved = apply_semipartition(sigma, sub)
            val += float(lam) * (phi(moved.r, moved.v) - base)
        acc += val
    return acc / len(tuples)


def apply_generator_C(xi: LimitMeasure, matrices: Sequence,
                      phi: TestFunction,
                      weights: Optional[Sequence[float]] = None) -> float:
    """Generator of the distribution-valued limit process: the sampling
    measure is replaced by a supplied bag of distance matrices."""
    if phi.marked:
        raise ValueError("unmarked generator needs an unmarked phi")
    rates = limit_rates_partitions(xi, phi.arity)
    mats = []
    for m in matrices:
        a = m.d if isinstance(m, DistanceMatrix) else np.asarray(m, float)
        if a.shape[0] < phi.arity:
            raise ValueError("matrix smaller than the test function arity")
        mats.append(a[:phi.arity, :phi.arity])
    if weights is None:
        w = np.full(len(mats), 1.0 / len(mats))
    else:
        w = np.asarray(weights, dtype=float)
        w = w / w.sum()
    return float(sum(wk * _generator_term_plain(a, phi, rates)
                     for wk, a in zip(w, mats)))


# ---------------------------------------------------------------------------
# One-step prelimit generator estimate


@dataclass(frozen=True)
class EstimateResult:
    estimate: float
    stderr: float
    ci_low: float
    ci_high: float
    replicates: int


def one_step_generator_estimate(law, N: int, chi0: TreeState,
                                phi: TestFunction, replicates: int,
                                rng: np.random.Generator,
                                subsamples: int = 1) -> EstimateResult:
    """Monte Carlo estimate of the rescaled one-step generator action.

    Each replicate embeds the initial state into a population of size N,
    applies one Cannings generation, and compares the test polynomial
    before and after on shared without-replacement subsamples, scaled by
    the inverse pairwise coalescence probability.
    """
    from .cannings import one_generation_units
    from .measures import pairwise_coalescence_probability

    if N < phi.arity:
        raise ValueError("population smaller than the test function arity")
    c = float(pairwise_coalescence_probability(law, N))
    arity = phi.arity
    marked = phi.marked
    d0_state = chi0.distances
    v0_state = chi0.matrix.v if chi0.marked else np.zeros(chi0.n)
    vals = np.empty(replicates)
    for rep in range(replicates):
        if chi0.n == 1:
            rho0 = np.zeros((N, N))
            v0 = np.full(N, v0_state[0] / c)
        elif chi0.n == N:
            perm = rng.permutation(N)
            rho0 = d0_state[np.ix_(perm, perm)] / c
            v0 = v0_state[perm] / c
        else:
            labels = rng.integers(0, chi0.n, size=N)
            rho0 = d0_state[np.ix_(labels, labels)] / c
            np.fill_diagonal(rho0, 0.0)
            v0 = v0_state[labels] / c
        counts = law.sample(N, rng)
        rho1, parent_of, in_big = one_generation_units(rho0, counts, rng)
        if marked:
            v1 = np.where(in_big, 1.0, v0[parent_of] + 1.0)
        acc = 0.0
        for _ in range(subsamples):
            sub = rng.choice(N, size=arity, replace=False)
            ix = np.ix_(sub, sub)
            if marked:
                r0s = c * (rho0[ix] - v0[sub][:, None] - v0[sub][None, :])
                r1s = c * (rho1[ix] - v1[sub][:, None] - v1[sub][None, :])
                np.fill_diagonal(r0s, 0.0)
                np.fill_diagonal(r1s, 0.0)
                acc += phi(r1s, c * v1[sub]) - phi(r0s, c * v0[sub])
            else:
                acc += phi(c * rho1[ix]) - phi(c * rho0[ix])
        vals[rep] = acc / (subsamples * c)
    est = float(vals.mean())
    sd = float(vals.std(ddof=1)) if replicates > 1 else 0.0
    se = sd / math.sqrt(replicates)
    return EstimateResult(est, se, est - 1.96 * se, est + 1.96 * se,
                          replicates)
