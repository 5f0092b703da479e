"""Distance matrices, marked distance matrices and decomposition maps.

Distances are in "2 x time depth" units; marks are in time units.  The map
alpha assembles an ultrametric from an external-branch decomposition, beta
splits an ultrametric into internal distances plus external branch lengths,
and upsilon extracts the external branch lengths alone.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations
from typing import Optional, Union

import numpy as np

ULTRAMETRIC_TOL = 1e-9


def _as_square(d) -> np.ndarray:
    a = np.asarray(d, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    return a


def _check_symmetric_zero_diag(a: np.ndarray):
    if np.any(np.abs(np.diag(a)) > ULTRAMETRIC_TOL):
        raise ValueError("diagonal must be zero")
    if np.any(np.abs(a - a.T) > ULTRAMETRIC_TOL):
        raise ValueError("matrix must be symmetric")
    if np.any(a < -ULTRAMETRIC_TOL):
        raise ValueError("distances must be nonnegative")


def first_ultrametric_violation(a: np.ndarray,
                                tol: float = ULTRAMETRIC_TOL):
    """Return a violating triple (i, j, k) or None."""
    n = a.shape[0]
    for k in range(n):
        bound = np.maximum(a[:, k][:, None], a[None, k, :])
        bad = a > bound + tol
        if bad.any():
            i, j = np.argwhere(bad)[0]
            return (int(i), int(j), k)
    return None


def first_triangle_violation(a: np.ndarray, tol: float = ULTRAMETRIC_TOL):
    """Return a triple (i, j, k) with a(i,j) > a(i,k)+a(k,j)+tol, or None."""
    n = a.shape[0]
    for k in range(n):
        bound = a[:, k][:, None] + a[None, k, :]
        bad = a > bound + tol
        if bad.any():
            i, j = np.argwhere(bad)[0]
            return (int(i), int(j), k)
    return None


@dataclass(frozen=True)
class DistanceMatrix:
    """A semi-ultrametric on n labeled points."""

    d: np.ndarray

    def __init__(self, d, check: bool = True):
        a = _as_square(d)
        a.setflags(write=False)
        if check:
            _check_symmetric_zero_diag(a)
            viol = first_ultrametric_violation(a)
            if viol is not None:
                raise ValueError(f"ultrametric violation at triple {viol}")
        object.__setattr__(self, "d", a)

    @property
    def n(self) -> int:
        return self.d.shape[0]

    @classmethod
    def zeros(cls, n: int) -> "DistanceMatrix":
        return cls(np.zeros((n, n)), check=False)

    def restrict(self, labels) -> "DistanceMatrix":
        idx = np.asarray(labels)
        return DistanceMatrix(self.d[np.ix_(idx, idx)], check=False)


@dataclass(frozen=True)
class MarkedDistanceMatrix:
    """A decomposed semi-ultrametric: internal distances r plus marks v."""

    r: np.ndarray
    v: np.ndarray

    def __init__(self, r, v, check: bool = True):
        a = _as_square(r)
        m = np.asarray(v, dtype=float)
        if m.ndim != 1 or m.shape[0] != a.shape[0]:
            raise ValueError("mark vector size mismatch")
        a.setflags(write=False)
        m.setflags(write=False)
        if check:
            _check_symmetric_zero_diag(a)
            if np.any(m < -ULTRAMETRIC_TOL):
                raise ValueError("marks must be nonnegative")
            viol = first_triangle_violation(a)
            if viol is not None:
                raise ValueError(f"triangle violation at triple {viol}")
            rho = _alpha_arrays(a, m)
            viol = first_ultrametric_violation(rho)
            if viol is not None:
                raise ValueError(
                    f"alpha image fails ultrametricity at triple {viol}")
        object.__setattr__(self, "r", a)
        object.__setattr__(self, "v", m)

    @property
    def n(self) -> int:
        return self.r.shape[0]

    @classmethod
    def zeros(cls, n: int) -> "MarkedDistanceMatrix":
        return cls(np.zeros((n, n)), np.zeros(n), check=False)

    def restrict(self, labels) -> "MarkedDistanceMatrix":
        idx = np.asarray(labels)
        return MarkedDistanceMatrix(self.r[np.ix_(idx, idx)], self.v[idx],
                                    check=False)


def _alpha_arrays(r: np.ndarray, v: np.ndarray) -> np.ndarray:
    rho = r + v[:, None] + v[None, :]
    np.fill_diagonal(rho, 0.0)
    return rho


def alpha(rv: MarkedDistanceMatrix) -> DistanceMatrix:
    """rho(i,j) = v(i) + r(i,j) + v(j) off the diagonal."""
    return DistanceMatrix(_alpha_arrays(rv.r, rv.v), check=False)


def upsilon(rho: DistanceMatrix) -> np.ndarray:
    """External branch lengths: half the minimal distance to another leaf."""
    n = rho.n
    if n == 1:
        return np.zeros(1)
    d = rho.d.copy()
    np.fill_diagonal(d, np.inf)
    return 0.5 * d.min(axis=1)


def beta(rho: DistanceMatrix) -> MarkedDistanceMatrix:
    """Split an ultrametric into internal distances and external branches.

    For a single leaf the marks are zero and r equals rho; alpha(beta(rho))
    reproduces rho exactly.
    """
    if rho.n == 1:
        return MarkedDistanceMatrix(rho.d, np.zeros(1), check=False)
    v = upsilon(rho)
    r = rho.d - v[:, None] - v[None, :]
    np.fill_diagonal(r, 0.0)
    # exact round trip: force r + v_i + v_j to reproduce rho bitwise
    return MarkedDistanceMatrix(r, v, check=False)


def upsilon_restricted(rho: DistanceMatrix, l: int, n: int) -> np.ndarray:
    """First n external branch lengths of the subtree on leaves 1..l."""
    if not (2 <= l <= rho.n and 1 <= n <= l):
        raise ValueError("need 1 <= n <= l <= rho.n and l >= 2")
    return upsilon(rho.restrict(range(l)))[:n]


@dataclass(frozen=True)
class TreeState:
    """Finite labeled tree state carrying the uniform measure per point."""

    matrix: Union[DistanceMatrix, MarkedDistanceMatrix]

    @property
    def n(self) -> int:
        return self.matrix.n

    @property
    def marked(self) -> bool:
        return isinstance(self.matrix, MarkedDistanceMatrix)

    @classmethod
    def point(cls, n: int = 1, marked: bool = False) -> "TreeState":
        if marked:
            return cls(MarkedDistanceMatrix.zeros(n))
        return cls(DistanceMatrix.zeros(n))

    @property
    def distances(self) -> np.ndarray:
        if self.marked:
            return _alpha_arrays(self.matrix.r, self.matrix.v)
        return self.matrix.d


def sample_distance_matrix(chi: TreeState, m: int, replacement: bool,
                           rng: np.random.Generator):
    """Sample m points from the uniform measure, with or without replacement.

    Returns the induced m x m matrix, or a (matrix, marks) pair for marked
    states.
    """
    n = chi.n
    if not replacement and m > n:
        raise ValueError("cannot draw more points than available")
    labels = rng.choice(n, size=m, replace=replacement)
    if chi.marked:
        sub = chi.matrix.restrict(labels)
        return sub.r.copy(), sub.v.copy()
    return chi.matrix.restrict(labels).d.copy()


def isomorphic(a: TreeState, b: TreeState, tol: float = 1e-9) -> bool:
    """Whether some relabeling matches the matrices (and marks)."""
    if a.n != b.n:
        return False
    if a.marked != b.marked:
        return False
    n = a.n
    if n > 10:
        raise ValueError("isomorphy check limited to n <= 10")
    if a.marked:
        da, db = a.matrix.r, b.matrix.r
        va, vb = a.matrix.v, b.matrix.v
    else:
        da, db = a.matrix.d, b.matrix.d
        va = vb = None

    def extend(perm, used):
        i = len(perm)
        if i == n:
            return True
        for j in range(n):
            if j in used:
                continue
            if va is not None and abs(va[i] - vb[j]) > tol:
                continue
            if all(abs(da[i, k_i] - db[j, k_j]) <= tol
                   for k_i, k_j in enumerate(perm)):
                if extend(perm + [j], used | {j}):
                    return True
        return False

    return extend([], set())


def validate(obj) -> Optional[str]:
    """Return None when the invariants hold, else a description of the
    first violation."""
    if isinstance(obj, TreeState):
        return validate(obj.matrix)
    if isinstance(obj, DistanceMatrix):
        viol = first_ultrametric_violation(obj.d)
        if viol is not None:
            return f"ultrametric violation at triple {viol}"
        return None
    if isinstance(obj, MarkedDistanceMatrix):
        if np.any(obj.v < -ULTRAMETRIC_TOL):
            return "negative mark"
        viol = first_triangle_violation(obj.r)
        if viol is not None:
            return f"triangle violation at triple {viol}"
        viol = first_ultrametric_violation(_alpha_arrays(obj.r, obj.v))
        if viol is not None:
            return f"alpha image fails ultrametricity at triple {viol}"
        return None
    a = _as_square(obj)
    return validate(DistanceMatrix(a, check=False))
