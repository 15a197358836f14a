"""Discretization conventions and the immutable containers shared by all modules.

Conventions
-----------
* The index set is ``[0, domain_length]`` with ``n`` uniform midpoint nodes
  ``t_k = (k - 1/2) w`` and quadrature weight ``w = domain_length / n``.
* The ambient Hilbert space is truncated to the span of ``e_1, ..., e_m``.
* A flow is stored as an ``(n, m)`` coefficient matrix; stacked it becomes a
  vector of length ``m n`` in node-major, basis-minor order.
* The data matrix ``X`` of an ensemble is ``(m n, N)``, one stacked flow per
  column.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "ShapeError",
    "GridMismatchError",
    "Grid",
    "BasisTruncation",
    "FlowSample",
    "FlowEnsemble",
    "DiscreteKernel",
    "EigenSystem",
    "ScoreMatrix",
    "stack",
    "unstack",
    "l2_inner",
    "check_compatible",
]

ORTHONORMALITY_TOL = 1e-8


class ShapeError(ValueError):
    """Array dimensions do not match the grid and truncation."""


class GridMismatchError(ValueError):
    """Two objects live on different grids or truncations."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Grid:
    """Uniform midpoint discretization of ``[0, domain_length]``."""

    n: int
    domain_length: float = 1.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"grid size must be a positive integer, got {self.n!r}")
        if not (np.isfinite(self.domain_length) and self.domain_length > 0):
            raise ValueError(f"domain_length must be positive, got {self.domain_length!r}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "domain_length", float(self.domain_length))

    @property
    def weight(self) -> float:
        return self.domain_length / self.n

    @cached_property
    def nodes(self) -> np.ndarray:
        return _frozen((np.arange(self.n) + 0.5) * self.weight)


@dataclass(frozen=True)
class BasisTruncation:
    """Number ``m`` of retained basis vectors of the ambient Hilbert space."""

    m: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"basis truncation must be a positive integer, got {self.m!r}")
        object.__setattr__(self, "m", int(self.m))


def check_compatible(a, b) -> None:
    """Raise :class:`GridMismatchError` unless ``a`` and ``b`` share grid and truncation."""
    if a.grid != b.grid:
        raise GridMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")
    if a.trunc != b.trunc:
        raise GridMismatchError(f"truncation mismatch: {a.trunc} vs {b.trunc}")


@dataclass(frozen=True)
class FlowSample:
    """A single discretized flow; ``coeffs[k, i] = <chi(t_k), e_i>``."""

    grid: Grid
    trunc: BasisTruncation
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = _frozen(self.coeffs)
        if coeffs.shape != (self.grid.n, self.trunc.m):
            raise ShapeError(
                f"coeffs must have shape ({self.grid.n}, {self.trunc.m}), got {coeffs.shape}"
            )
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("flow coefficients must be finite")
        object.__setattr__(self, "coeffs", coeffs)

    def __add__(self, other: "FlowSample") -> "FlowSample":
        check_compatible(self, other)
        return FlowSample(self.grid, self.trunc, self.coeffs + other.coeffs)

    def __sub__(self, other: "FlowSample") -> "FlowSample":
        check_compatible(self, other)
        return FlowSample(self.grid, self.trunc, self.coeffs - other.coeffs)

    def __mul__(self, c: float) -> "FlowSample":
        return FlowSample(self.grid, self.trunc, self.coeffs * float(c))

    __rmul__ = __mul__

    def pointwise_norm_sq(self) -> np.ndarray:
        """Squared norm of the flow at each node, shape ``(n,)``."""
        return np.einsum("ki,ki->k", self.coeffs, self.coeffs)


def stack(sample: FlowSample) -> np.ndarray:
    """Stack a flow into a vector of length ``m n`` (node-major, basis-minor)."""
    return sample.coeffs.reshape(-1).copy()


def unstack(v, grid: Grid, trunc: BasisTruncation) -> FlowSample:
    """Inverse of :func:`stack`."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size != grid.n * trunc.m:
        raise ShapeError(
            f"expected a vector of length {grid.n * trunc.m} (n={grid.n}, m={trunc.m}), "
            f"got shape {v.shape}"
        )
    return FlowSample(grid, trunc, v.reshape(grid.n, trunc.m))


def l2_inner(f: FlowSample, g: FlowSample) -> float:
    """Quadrature approximation of the L2 inner product of two flows."""
    check_compatible(f, g)
    return f.grid.weight * float(np.sum(f.coeffs * g.coeffs))


@dataclass(frozen=True)
class FlowEnsemble:
    """``N`` discretized flows stored as the ``(m n, N)`` data matrix ``X``.

    ``meta`` carries provenance (seed, generator name) and is written into
    file headers; it plays no role in any computation.
    """

    grid: Grid
    trunc: BasisTruncation
    X: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = _frozen(self.X)
        mn = self.grid.n * self.trunc.m
        if X.ndim == 1 and X.size == 0:
            X = _frozen(np.zeros((mn, 0)))
        if X.ndim != 2 or X.shape[0] != mn:
            raise ShapeError(f"X must have {mn} rows (n*m), got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("ensemble entries must be finite")
        object.__setattr__(self, "X", X)

    @property
    def N(self) -> int:
        return self.X.shape[1]

    @property
    def mn(self) -> int:
        return self.X.shape[0]

    def __len__(self) -> int:
        return self.N

    def sample(self, j: int) -> FlowSample:
        return unstack(self.X[:, j], self.grid, self.trunc)

    def samples(self):
        for j in range(self.N):
            yield self.sample(j)

    def coeff_tensor(self) -> np.ndarray:
        """View of ``X`` as an ``(n, m, N)`` array."""
        return self.X.reshape(self.grid.n, self.trunc.m, self.N)

    def mean_flow(self) -> FlowSample:
        if self.N == 0:
            raise ValueError("mean of an empty ensemble")
        return unstack(self.X.mean(axis=1), self.grid, self.trunc)

    def centered(self) -> "FlowEnsemble":
        """Ensemble with the empirical mean flow subtracted from every sample."""
        mean = self.X.mean(axis=1, keepdims=True)
        return FlowEnsemble(self.grid, self.trunc, self.X - mean, dict(self.meta))

    @classmethod
    def from_samples(cls, samples, meta=None) -> "FlowEnsemble":
        samples = list(samples)
        if not samples:
            raise ValueError("from_samples needs at least one sample; build empty ensembles directly")
        first = samples[0]
        for s in samples[1:]:
            check_compatible(first, s)
        X = np.column_stack([stack(s) for s in samples])
        return cls(first.grid, first.trunc, X, dict(meta or {}))


@dataclass(frozen=True)
class DiscreteKernel:
    """Operator-valued kernel on the grid, ``blocks[k, l] = K(t_k, t_l)``.

    ``blocks`` has shape ``(n, n, m, m)``.  The assembled ``(m n, m n)`` matrix
    has entry ``(k m + i, l m + i')`` equal to ``blocks[k, l, i, i']``.
    """

    grid: Grid
    trunc: BasisTruncation
    blocks: np.ndarray
    symmetry_tol: float = field(default=1e-12, compare=False, repr=False)

    def __post_init__(self):
        n, m = self.grid.n, self.trunc.m
        blocks = _frozen(self.blocks)
        if blocks.shape != (n, n, m, m):
            raise ShapeError(f"blocks must have shape {(n, n, m, m)}, got {blocks.shape}")
        if not np.all(np.isfinite(blocks)):
            raise ValueError("kernel blocks must be finite")
        object.__setattr__(self, "blocks", blocks)
        defect = self.symmetry_defect()
        scale = max(float(np.abs(blocks).max(initial=0.0)), np.finfo(float).tiny)
        if defect > self.symmetry_tol * scale:
            raise ValueError(f"kernel is not symmetric: max |K(s,t) - K(t,s)^T| = {defect:.3e}")

    @classmethod
    def from_assembly(cls, grid: Grid, trunc: BasisTruncation, A, mirror: bool = True):
        """Build from an ``(m n, m n)`` matrix; ``mirror`` copies the upper triangle down."""
        A = np.asarray(A, dtype=np.float64)
        mn = grid.n * trunc.m
        if A.shape != (mn, mn):
            raise ShapeError(f"assembly must be ({mn}, {mn}), got {A.shape}")
        if mirror:
            A = np.triu(A) + np.triu(A, 1).T
        n, m = grid.n, trunc.m
        blocks = A.reshape(n, m, n, m).transpose(0, 2, 1, 3)
        return cls(grid, trunc, blocks)

    def assembly(self) -> np.ndarray:
        n, m = self.grid.n, self.trunc.m
        return self.blocks.transpose(0, 2, 1, 3).reshape(n * m, n * m)

    def block(self, k: int, l: int) -> np.ndarray:
        return self.blocks[k, l]

    def diagonal_blocks(self) -> np.ndarray:
        """``K(t_k, t_k)`` for every node, shape ``(n, m, m)``."""
        k = np.arange(self.grid.n)
        return self.blocks[k, k]

    def diagonal_traces(self) -> np.ndarray:
        """``tr K(t_k, t_k)``, shape ``(n,)``."""
        return np.einsum("kii->k", self.diagonal_blocks())

    def symmetry_defect(self) -> float:
        return float(np.abs(self.blocks - self.blocks.transpose(1, 0, 3, 2)).max(initial=0.0))

    def __sub__(self, other: "DiscreteKernel") -> "DiscreteKernel":
        check_compatible(self, other)
        return DiscreteKernel(self.grid, self.trunc, self.blocks - other.blocks)


@dataclass(frozen=True)
class EigenSystem:
    """Eigenvalues and quadrature-orthonormal eigenflows.

    ``eigenflows`` has shape ``(J, n, m)``; ``eigenflows[j]`` is the
    coefficient matrix of the ``j``-th eigenflow.
    """

    grid: Grid
    trunc: BasisTruncation
    eigenvalues: np.ndarray
    eigenflows: np.ndarray

    def __post_init__(self):
        lam = _frozen(self.eigenvalues)
        phi = _frozen(self.eigenflows)
        n, m = self.grid.n, self.trunc.m
        if lam.ndim != 1:
            raise ShapeError("eigenvalues must be a vector")
        J = lam.size
        if J == 0:
            phi = _frozen(np.zeros((0, n, m)))
        if phi.shape != (J, n, m):
            raise ShapeError(f"eigenflows must have shape {(J, n, m)}, got {phi.shape}")
        if np.any(np.diff(lam) > 0):
            raise ValueError("eigenvalues must be sorted nonincreasing")
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "eigenflows", phi)
        dev = self.orthonormality_defect()
        if dev > ORTHONORMALITY_TOL:
            raise ValueError(f"eigenflows are not quadrature-orthonormal (defect {dev:.3e})")

    @property
    def count(self) -> int:
        return self.eigenvalues.size

    def stacked(self) -> np.ndarray:
        """Eigenflows as columns of an ``(m n, J)`` matrix."""
        return self.eigenflows.reshape(self.count, -1).T

    def flow(self, j: int) -> FlowSample:
        return FlowSample(self.grid, self.trunc, self.eigenflows[j])

    def gram(self) -> np.ndarray:
        P = self.stacked()
        return self.grid.weight * (P.T @ P)

    def orthonormality_defect(self) -> float:
        if self.count == 0:
            return 0.0
        return float(np.abs(self.gram() - np.eye(self.count)).max())

    def head(self, J: int) -> "EigenSystem":
        """The leading ``J`` eigenpairs."""
        if not 0 <= J <= self.count:
            raise ValueError(f"J={J} outside 0..{self.count}")
        return EigenSystem(self.grid, self.trunc, self.eigenvalues[:J], self.eigenflows[:J])


@dataclass(frozen=True)
class ScoreMatrix:
    """``values[j, r]`` is the quadrature inner product of sample ``j`` with eigenflow ``r``."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2:
            raise ShapeError("score matrix must be 2-D")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    def second_moment(self) -> np.ndarray:
        """``(1/N) S^T S``; the score covariance for centered data."""
        N = self.values.shape[0]
        if N == 0:
            raise ValueError("no samples")
        return self.values.T @ self.values / N
