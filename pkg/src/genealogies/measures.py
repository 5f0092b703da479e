"""Mass partitions, reproduction laws and limit measures on the simplex.

A reproduction law describes, for a population of size N, the random ordered
family-size vector of one generation.  A limit measure is a finite-atomic
probability measure on the simplex together with a Kingman atom at zero; it
drives all limit rates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence, Union

import numpy as np

Number = Union[float, Fraction]


def _as_number(x) -> Number:
    if isinstance(x, (Fraction, int)):
        return Fraction(x)
    return float(x)


@dataclass(frozen=True)
class MassPartition:
    """A point of the simplex: non-increasing weights with l1 norm <= 1."""

    weights: tuple

    def __init__(self, weights: Sequence[Number]):
        w = tuple(_as_number(v) for v in weights if v != 0)
        for a, b in zip(w, w[1:]):
            if a < b:
                raise ValueError("weights must be non-increasing")
        if any(v < 0 for v in w):
            raise ValueError("weights must be nonnegative")
        if sum(w) > 1 + 1e-12:
            raise ValueError("total mass exceeds 1")
        object.__setattr__(self, "weights", w)

    @property
    def l1(self) -> Number:
        return sum(self.weights, Fraction(0) if self._exact else 0.0)

    @property
    def l2_squared(self) -> Number:
        return sum((v * v for v in self.weights),
                   Fraction(0) if self._exact else 0.0)

    @property
    def _exact(self) -> bool:
        return all(isinstance(v, Fraction) for v in self.weights)

    @property
    def dust_mass(self) -> Number:
        return 1 - self.l1


@dataclass(frozen=True)
class IntegerMassPartition:
    """Family sizes of one generation: positive counts summing to N."""

    population_size: int
    counts: tuple

    def __init__(self, population_size: int, counts: Sequence[int]):
        c = tuple(sorted((int(k) for k in counts if k > 0), reverse=True))
        if sum(c) != population_size:
            raise ValueError(
                f"counts sum to {sum(c)}, expected {population_size}")
        object.__setattr__(self, "population_size", int(population_size))
        object.__setattr__(self, "counts", c)

    def as_mass_partition(self, exact: bool = True) -> MassPartition:
        N = self.population_size
        if exact:
            return MassPartition([Fraction(k, N) for k in self.counts])
        return MassPartition([k / N for k in self.counts])

    @property
    def num_families(self) -> int:
        return len(self.counts)


@dataclass
class ReproductionLaw:
    """A family of per-generation reproduction laws, one for each N.

    `sample` draws one family-size vector.  `enumerate_support`, when
    available, returns the exact finite support as (probability, sizes)
    pairs.  Closed forms for the pairwise coalescence probability and the
    singleton escape probability may be registered; they are cross-checked
    against enumeration in the tests.
    """

    name: str
    sample: Callable[[int, np.random.Generator], IntegerMassPartition]
    enumerate_support: Optional[Callable[[int], list]] = None
    coalescence_closed_form: Optional[Callable[[int], Number]] = None
    escape_closed_form: Optional[Callable[[int], Number]] = None
    # Backward-simulation structure: for laws whose reproduction events have
    # at most one non-singleton family, a list of
    # (event probability, ("fixed", K) | ("bernoulli", q)) per event type.
    single_family_events: Optional[Callable[[int], list]] = None
    min_population_size: int = 2

    def supports(self, N: int) -> bool:
        return N >= self.min_population_size


@dataclass(frozen=True)
class LimitMeasure:
    """Finite-atomic measure on the simplex plus a Kingman atom at zero."""

    kingman_weight: Number
    atoms: tuple  # of (weight, MassPartition)

    def __init__(self, kingman_weight: Number,
                 atoms: Sequence[tuple] = ()):
        a0 = _as_number(kingman_weight)
        ats = tuple((_as_number(w), x) for w, x in atoms)
        if a0 < 0 or any(w <= 0 for w, _ in ats):
            raise ValueError("weights must be positive")
        if any(not x.weights or x.weights[0] <= 0 for _, x in ats):
            raise ValueError("atoms must have positive leading weight")
        total = a0 + sum(w for w, _ in ats)
        if abs(float(total) - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {float(total)}, expected 1")
        object.__setattr__(self, "kingman_weight", a0)
        object.__setattr__(self, "atoms", ats)

    @classmethod
    def kingman(cls) -> "LimitMeasure":
        return cls(1)

    @classmethod
    def single_atom(cls, x: MassPartition) -> "LimitMeasure":
        return cls(0, [(1, x)])


def pairwise_coalescence_probability(law: ReproductionLaw, N: int) -> Number:
    """c_N: the chance that two distinct uniform samples share a parent.

    Exact when the support is enumerable or a closed form is registered.
    """
    if not law.supports(N):
        raise ValueError(f"law {law.name!r} does not support N={N}")
    if law.coalescence_closed_form is not None:
        c = law.coalescence_closed_form(N)
    elif law.enumerate_support is not None:
        c = Fraction(0)
        for p, imp in law.enumerate_support(N):
            c += p * sum(
                Fraction(k, N) * Fraction(k - 1, N - 1) for k in imp.counts)
    else:
        raise ValueError(
            f"law {law.name!r} has neither closed form nor support for N={N}")
    if c <= 0:
        raise ValueError(f"law {law.name!r} has c_N = 0 at N={N}")
    if c > 1:
        raise ValueError(f"c_N = {c} > 1")
    return c


def singleton_escape_probability(law: ReproductionLaw, N: int) -> Number:
    """b_N: the chance a uniform sample lies in a family with >= 2 members."""
    if not law.supports(N):
        raise ValueError(f"law {law.name!r} does not support N={N}")
    if law.escape_closed_form is not None:
        return law.escape_closed_form(N)
    if law.enumerate_support is None:
        raise ValueError(
            f"law {law.name!r} has neither closed form nor support for N={N}")
    b = Fraction(0)
    for p, imp in law.enumerate_support(N):
        b += p * sum(Fraction(k, N) for k in imp.counts if k >= 2)
    return b


DUST_FREE = "dust_free"
DUST = "dust"


def classify_dust(xi: LimitMeasure) -> str:
    """Dust-free iff the Kingman atom is charged.

    The alternative dust-free route (a divergent integral of
    |x|_1 / |x|_2^2) is unreachable for finite-atomic measures, so only the
    Kingman weight decides.
    """
    return DUST_FREE if xi.kingman_weight > 0 else DUST


def dust_integral(xi: LimitMeasure) -> Number:
    """Sum over atoms of weight * |x|_1 / |x|_2^2.

    In the dust case (zero Kingman weight) this is the reset rate of a
    single mark clock; with a charged Kingman atom the value still refers to
    the atomic part only.
    """
    total = Fraction(0)
    for w, x in xi.atoms:
        total += w * x.l1 / x.l2_squared
    return total


# ---------------------------------------------------------------------------
# Built-in law families


def _singleton_counts(N: int) -> IntegerMassPartition:
    return IntegerMassPartition(N, (1,) * N)


def moran_law() -> ReproductionLaw:
    """One family of size 2, all other families singletons."""

    def sample(N, rng):
        return IntegerMassPartition(N, (2,) + (1,) * (N - 2))

    def support(N):
        return [(Fraction(1), IntegerMassPartition(N, (2,) + (1,) * (N - 2)))]

    return ReproductionLaw(
        name="moran",
        sample=sample,
        enumerate_support=support,
        coalescence_closed_form=lambda N: Fraction(2, N * (N - 1)),
        escape_closed_form=lambda N: Fraction(2, N),
        single_family_events=lambda N: [(Fraction(1), ("fixed", 2))],
    )


def _integer_partitions(n: int, max_part: Optional[int] = None):
    """Yield partitions of n as non-increasing tuples."""
    if max_part is None:
        max_part = n
    if n == 0:
        yield ()
        return
    for first in range(min(n, max_part), 0, -1):
        for rest in _integer_partitions(n - first, first):
            yield (first,) + rest


def wright_fisher_law() -> ReproductionLaw:
    """Multinomial offspring counts with equal parent weights."""

    def sample(N, rng):
        counts = rng.multinomial(N, np.full(N, 1.0 / N))
        return IntegerMassPartition(N, counts[counts > 0])

    def support(N):
        if N > 12:
            raise ValueError("exact enumeration limited to N <= 12")
        from math import factorial
        out = []
        for parts in _integer_partitions(N):
            sizes = parts + (0,) * (N - len(parts))
            # multiplicity of each value among the N cells, zeros included
            mult = {}
            for v in sizes:
                mult[v] = mult.get(v, 0) + 1
            arrangements = Fraction(factorial(N))
            for m in mult.values():
                arrangements /= factorial(m)
            pmf = Fraction(factorial(N), N ** N)
            for v in parts:
                pmf /= factorial(v)
            out.append((arrangements * pmf, IntegerMassPartition(N, parts)))
        return out

    return ReproductionLaw(
        name="wright-fisher",
        sample=sample,
        enumerate_support=support,
        coalescence_closed_form=lambda N: Fraction(1, N),
        escape_closed_form=lambda N: 1 - Fraction(N - 1, N) ** (N - 1),
    )


def discretize_mass_partition(x: MassPartition, N: int) -> IntegerMassPartition:
    """Round N*x(i) to family sizes; sizes below 2 become singletons."""
    counts = []
    for w in x.weights:
        k = int(round(float(w) * N)) if not isinstance(w, Fraction) else int(
            round(Fraction(w) * N))
        if k >= 2:
            counts.append(k)
    if sum(counts) > N:
        raise ValueError("discretized families exceed the population")
    counts += [1] * (N - sum(counts))
    return IntegerMassPartition(N, counts)


def sparse_paintbox_law(x: MassPartition, p_coef: Number = 1,
                        p_exp: int = -1) -> ReproductionLaw:
    """With probability p_N = p_coef * N**p_exp the discretization of x,
    otherwise all singletons."""

    def prob(N) -> Number:
        if isinstance(p_coef, (int, Fraction)) and isinstance(p_exp, int):
            return Fraction(p_coef) * Fraction(N) ** p_exp
        return float(p_coef) * float(N) ** float(p_exp)

    def sample(N, rng):
        if rng.random() < prob(N):
            return discretize_mass_partition(x, N)
        return _singleton_counts(N)

    def support(N):
        p = prob(N)
        return [(p, discretize_mass_partition(x, N)),
                (1 - p, _singleton_counts(N))]

    def events(N):
        imp = discretize_mass_partition(x, N)
        big = [k for k in imp.counts if k >= 2]
        if len(big) > 1:
            raise ValueError("fast backward path needs a single family")
        if not big:
            return []
        return [(prob(N), ("fixed", big[0]))]

    name = "sparse-paintbox({},{}*N^{})".format(
        tuple(float(w) for w in x.weights), p_coef, p_exp)
    return ReproductionLaw(
        name=name,
        sample=sample,
        enumerate_support=support,
        single_family_events=events,
    )


def example5_law() -> ReproductionLaw:
    """Three-type mixture: ordinary / perturbative / trivial events.

    With probability 1/N the largest family is Binomial(N, 1/2), with
    probability N**-0.5 it is Binomial(N, N**-1/3), otherwise all families
    are singletons.  Binomial draws of 0 or 1 collapse to all singletons.
    """

    def type_probs(N):
        p_ord = 1.0 / N
        p_pert = N ** -0.5
        if p_ord + p_pert > 1:
            raise ValueError(f"N={N} too small for the three-type mixture")
        return p_ord, p_pert

    def counts_from_family(N, k):
        if k < 2:
            return _singleton_counts(N)
        return IntegerMassPartition(N, (k,) + (1,) * (N - k))

    def sample(N, rng):
        p_ord, p_pert = type_probs(N)
        u = rng.random()
        if u < p_ord:
            return counts_from_family(N, rng.binomial(N, 0.5))
        if u < p_ord + p_pert:
            return counts_from_family(N, rng.binomial(N, N ** (-1.0 / 3)))
        return _singleton_counts(N)

    def support(N):
        from scipy.stats import binom
        p_ord, p_pert = type_probs(N)
        q = N ** (-1.0 / 3)
        out = []
        trivial_mass = 1.0 - p_ord - p_pert
        for k in range(2, N + 1):
            w = p_ord * binom.pmf(k, N, 0.5) + p_pert * binom.pmf(k, N, q)
            if w > 0:
                out.append((w, counts_from_family(N, k)))
        trivial_mass += p_ord * binom.cdf(1, N, 0.5) + p_pert * binom.cdf(1, N, q)
        out.append((trivial_mass, _singleton_counts(N)))
        return out

    def c_closed(N):
        type_probs(N)
        return N ** -1.0 * 0.25 + N ** (-7.0 / 6)

    def b_closed(N):
        # E[K 1{K>=2}] / N for K ~ Binomial(N, q) equals q - q(1-q)^(N-1).
        p_ord, p_pert = type_probs(N)
        q = N ** (-1.0 / 3)
        return (p_ord * (0.5 - 0.5 * 0.5 ** (N - 1))
                + p_pert * (q - q * (1 - q) ** (N - 1)))

    def events(N):
        p_ord, p_pert = type_probs(N)
        q = N ** (-1.0 / 3)
        return [(p_ord, ("bernoulli", 0.5)), (p_pert, ("bernoulli", q))]

    return ReproductionLaw(
        name="example5",
        sample=sample,
        enumerate_support=support,
        coalescence_closed_form=c_closed,
        escape_closed_form=b_closed,
        single_family_events=events,
        min_population_size=3,
    )


def singleton_law() -> ReproductionLaw:
    """All families singletons; c_N = 0, so every rate scaling rejects it."""

    def sample(N, rng):
        return _singleton_counts(N)

    return ReproductionLaw(
        name="singleton",
        sample=sample,
        enumerate_support=lambda N: [(Fraction(1), _singleton_counts(N))],
        single_family_events=lambda N: [],
    )


BUILTIN_LAWS = {
    "moran": moran_law,
    "wright-fisher": wright_fisher_law,
    "example5": example5_law,
    "singleton": singleton_law,
}


def law_from_config(cfg: dict) -> ReproductionLaw:
    """Build a law from a config mapping, e.g. {"family": "example5"} or
    {"family": "sparse-paintbox", "x": [0.5], "p_coef": 1, "p_exp": -1}."""
    family = cfg["family"]
    if family == "sparse-paintbox":
        x = MassPartition([Fraction(v).limit_denominator(10 ** 9)
                           if not isinstance(v, Fraction) else v
                           for v in cfg["x"]])
        return sparse_paintbox_law(x, cfg.get("p_coef", 1),
                                   cfg.get("p_exp", -1))
    if family in BUILTIN_LAWS:
        return BUILTIN_LAWS[family]()
    raise ValueError(f"unknown law family {family!r}")


def limit_measure_from_config(cfg: dict) -> LimitMeasure:
    """Build a limit measure from e.g.
    {"kingman": 0.0, "atoms": [{"w": 1.0, "x": [0.5]}]}."""
    atoms = [(a["w"], MassPartition([Fraction(v).limit_denominator(10 ** 9)
                                     for v in a["x"]]))
             for a in cfg.get("atoms", [])]
    return LimitMeasure(cfg.get("kingman", 0.0), atoms)
