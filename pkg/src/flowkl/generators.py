"""Seeded synthetic ensembles with known Karhunen-Loeve spectra.

Every sample draws its random coefficients from its own Philox stream keyed
by the seed, with the sample index in the high counter word.  Samples are
generated in fixed-size chunks, so the output does not depend on how many
worker threads are used.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BasisTruncation,
    DiscreteKernel,
    EigenSystem,
    FlowEnsemble,
    FlowSample,
    Grid,
    check_compatible,
    stack,
    unstack,
)

__all__ = [
    "RankDeficiencyError",
    "SeparableBrownianSpec",
    "FiniteRankSpec",
    "brownian_eigenvalues",
    "brownian_eigenfunctions",
    "generate_separable_brownian",
    "generate_finite_rank",
    "orthonormalize",
    "quadrature_gram",
    "brownian_population_kernel",
    "separable_brownian_kernel",
    "separable_brownian_eigensystem",
    "finite_rank_kernel",
    "planted_ensemble",
    "spec_from_dict",
]

CHUNK = 256
FINITE_RANK_GRAM_TOL = 1e-10
SEED_MASK = (1 << 64) - 1


class RankDeficiencyError(ValueError):
    """Input flows are (numerically) linearly dependent."""


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for sample ``index``: Philox keyed by ``seed``, counter high word ``index``."""
    return np.random.Generator(np.random.Philox(key=seed & SEED_MASK, counter=[0, 0, 0, index]))


def _draw(seed: int, N: int, shape: tuple, law: str, threads: int = 1) -> np.ndarray:
    """Draw ``N`` independent arrays of ``shape``, one Philox stream per sample.

    Each chunk reuses one bit generator and rewinds its state to the
    sample's counter, which is equivalent to (and cheaper than) building a
    fresh :func:`_sample_rng` per sample.
    """
    if law not in ("gaussian", "rademacher"):
        raise ValueError(f"unknown coefficient law {law!r}")
    out = np.empty((N,) + tuple(shape))

    def fill(start: int) -> None:
        bitgen = np.random.Philox(key=seed & SEED_MASK)
        rng = np.random.Generator(bitgen)
        state = bitgen.state
        for j in range(start, min(start + CHUNK, N)):
            state["state"]["counter"][:] = (0, 0, 0, j)
            state.update(buffer_pos=4, has_uint32=0, uinteger=0)
            bitgen.state = state
            if law == "gaussian":
                out[j] = rng.standard_normal(shape)
            else:
                out[j] = 2.0 * rng.integers(0, 2, size=shape) - 1.0

    starts = range(0, N, CHUNK)
    if threads > 1 and N > CHUNK:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, starts))
    else:
        for s in starts:
            fill(s)
    return out


def brownian_eigenvalues(j_max: int) -> np.ndarray:
    """``((j - 1/2) pi)^-2`` for ``j = 1..j_max``."""
    j = np.arange(1, j_max + 1)
    return 1.0 / ((j - 0.5) * np.pi) ** 2


def brownian_eigenfunctions(t, j_max: int) -> np.ndarray:
    """``sqrt(2) sin((j - 1/2) pi t)``, shape ``(len(t), j_max)``.

    On the midpoint grid of ``[0, 1]`` with ``j_max <= n`` these are exactly
    quadrature-orthonormal (they are the DST-IV basis).
    """
    j = np.arange(1, j_max + 1)
    return np.sqrt(2.0) * np.sin(np.outer(np.asarray(t, dtype=float), (j - 0.5) * np.pi))


@dataclass(frozen=True)
class SeparableBrownianSpec:
    """Flow with covariance kernel ``min(s, t) C0``, ``C0 = diag(mu)``.

    The temporal part is the Karhunen-Loeve series of standard Brownian motion
    truncated after ``j_max`` modes.
    """

    mu: tuple
    j_max: int
    seed: int = 0

    def __post_init__(self):
        mu = tuple(float(x) for x in self.mu)
        if not mu:
            raise ValueError("mu must be non-empty")
        if any(x <= 0 for x in mu):
            raise ValueError("mu must be strictly positive")
        if any(b > a for a, b in zip(mu, mu[1:])):
            raise ValueError("mu must be nonincreasing")
        if int(self.j_max) != self.j_max or self.j_max < 1:
            raise ValueError("j_max must be a positive integer")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "j_max", int(self.j_max))
        object.__setattr__(self, "seed", int(self.seed))

    @classmethod
    def default(cls, m: int, j_max: int = 64, seed: int = 0) -> "SeparableBrownianSpec":
        return cls(tuple(2.0 ** -(i + 1) for i in range(m)), j_max, seed)

    def to_dict(self) -> dict:
        return {"kind": "separable_brownian", "mu": list(self.mu), "j_max": self.j_max, "seed": self.seed}


@dataclass(frozen=True)
class FiniteRankSpec:
    """Finite Karhunen-Loeve series with prescribed eigenpairs."""

    eigenvalues: tuple
    eigenflows: tuple
    coefficient_law: str = "gaussian"
    seed: int = 0
    gram_tol: float = field(default=FINITE_RANK_GRAM_TOL, repr=False)

    def __post_init__(self):
        lam = tuple(float(x) for x in self.eigenvalues)
        flows = tuple(self.eigenflows)
        if len(lam) != len(flows) or not lam:
            raise ValueError("need one eigenflow per eigenvalue, at least one pair")
        if any(x <= 0 for x in lam) or any(b > a for a, b in zip(lam, lam[1:])):
            raise ValueError("eigenvalues must be positive and nonincreasing")
        if self.coefficient_law not in ("gaussian", "rademacher"):
            raise ValueError(f"unknown coefficient law {self.coefficient_law!r}")
        for f in flows[1:]:
            check_compatible(flows[0], f)
        dev = np.abs(quadrature_gram(flows) - np.eye(len(flows))).max()
        if dev > self.gram_tol:
            raise ValueError(f"eigenflows are not quadrature-orthonormal (Gram deviation {dev:.3e})")
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "eigenflows", flows)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def grid(self) -> Grid:
        return self.eigenflows[0].grid

    @property
    def trunc(self) -> BasisTruncation:
        return self.eigenflows[0].trunc

    def to_dict(self) -> dict:
        return {
            "kind": "finite_rank",
            "domain_length": self.grid.domain_length,
            "eigenvalues": list(self.eigenvalues),
            "eigenflows": [f.coeffs.tolist() for f in self.eigenflows],
            "coefficient_law": self.coefficient_law,
            "seed": self.seed,
        }


def spec_from_dict(d: dict):
    """Rebuild a generator spec from its JSON form."""
    kind = d.get("kind")
    if kind == "separable_brownian":
        return SeparableBrownianSpec(tuple(d["mu"]), int(d["j_max"]), int(d.get("seed", 0)))
    if kind == "finite_rank":
        flows = np.asarray(d["eigenflows"], dtype=float)
        if flows.ndim != 3:
            raise ValueError("eigenflows must be a J x n x m nested list")
        grid = Grid(flows.shape[1], float(d.get("domain_length", 1.0)))
        trunc = BasisTruncation(flows.shape[2])
        return FiniteRankSpec(
            tuple(d["eigenvalues"]),
            tuple(FlowSample(grid, trunc, f) for f in flows),
            d.get("coefficient_law", "gaussian"),
            int(d.get("seed", 0)),
        )
    raise ValueError(f"unknown spec kind {kind!r}")


def generate_separable_brownian(
    spec: SeparableBrownianSpec, grid: Grid, trunc: BasisTruncation, N: int, threads: int = 1
) -> FlowEnsemble:
    """Draw ``N`` flows ``sum_j sum_i sqrt(lam_j mu_i) xi_ji phi_j(t) e_i``."""
    if trunc.m != len(spec.mu):
        raise ValueError(f"truncation m={trunc.m} does not match len(mu)={len(spec.mu)}")
    if N < 0:
        raise ValueError("N must be nonnegative")
    phi = brownian_eigenfunctions(grid.nodes, spec.j_max)
    scale = np.sqrt(np.outer(brownian_eigenvalues(spec.j_max), spec.mu))
    xi = _draw(spec.seed, N, (spec.j_max, trunc.m), "gaussian", threads)
    X = np.empty((grid.n * trunc.m, N))
    for start in range(0, N, CHUNK):
        stop = min(start + CHUNK, N)
        coeffs = np.matmul(phi, scale * xi[start:stop])
        X[:, start:stop] = coeffs.reshape(stop - start, -1).T
    meta = {"generator": "separable_brownian", "seed": spec.seed, "spec": spec.to_dict()}
    return FlowEnsemble(grid, trunc, X, meta)


def generate_finite_rank(spec: FiniteRankSpec, N: int, threads: int = 1) -> FlowEnsemble:
    """Draw ``N`` flows ``sum_r sqrt(lam_r) xi_r Phi_r``."""
    if N < 0:
        raise ValueError("N must be nonnegative")
    J = len(spec.eigenvalues)
    P = np.column_stack([stack(f) for f in spec.eigenflows])
    xi = _draw(spec.seed, N, (J,), spec.coefficient_law, threads)
    X = P @ (np.sqrt(spec.eigenvalues)[:, None] * xi.T) if N else np.zeros((P.shape[0], 0))
    meta = {"generator": "finite_rank", "seed": spec.seed}
    return FlowEnsemble(spec.grid, spec.trunc, X, meta)


def quadrature_gram(flows) -> np.ndarray:
    """Gram matrix of flows under the quadrature inner product."""
    flows = list(flows)
    if not flows:
        return np.zeros((0, 0))
    P = np.column_stack([stack(f) for f in flows])
    return flows[0].grid.weight * (P.T @ P)


def orthonormalize(raw, rank_tol: float = 1e-10) -> list:
    """Gram-Schmidt under the quadrature inner product.

    Uses two passes of modified Gram-Schmidt per vector.  Raises
    :class:`RankDeficiencyError` when a pivot falls below ``rank_tol`` times
    the largest input norm.
    """
    raw = list(raw)
    if not raw:
        return []
    for f in raw[1:]:
        check_compatible(raw[0], f)
    grid, trunc = raw[0].grid, raw[0].trunc
    w = grid.weight
    V = np.column_stack([stack(f) for f in raw])
    lead = max(np.sqrt(w * np.sum(V * V, axis=0)))
    if lead == 0:
        raise RankDeficiencyError("all input flows are zero")
    Q = []
    for j in range(V.shape[1]):
        v = V[:, j].copy()
        for _ in range(2):
            for q in Q:
                v -= w * (q @ v) * q
        norm = np.sqrt(w * (v @ v))
        if norm < rank_tol * lead:
            raise RankDeficiencyError(
                f"flow {j} is linearly dependent on its predecessors (pivot {norm:.3e})"
            )
        Q.append(v / norm)
    return [unstack(q, grid, trunc) for q in Q]


def brownian_population_kernel(grid: Grid, mu) -> DiscreteKernel:
    """``K(t_k, t_l) = min(t_k, t_l) diag(mu)`` on the grid."""
    mu = np.asarray(mu, dtype=float)
    t = grid.nodes
    blocks = np.minimum.outer(t, t)[:, :, None, None] * np.diag(mu)[None, None]
    return DiscreteKernel(grid, BasisTruncation(mu.size), blocks)


def separable_brownian_kernel(spec: SeparableBrownianSpec, grid: Grid) -> DiscreteKernel:
    """Covariance kernel of :func:`generate_separable_brownian` (``j_max`` modes)."""
    phi = brownian_eigenfunctions(grid.nodes, spec.j_max)
    temporal = (phi * brownian_eigenvalues(spec.j_max)) @ phi.T
    temporal = np.triu(temporal) + np.triu(temporal, 1).T
    blocks = temporal[:, :, None, None] * np.diag(spec.mu)[None, None]
    return DiscreteKernel(grid, BasisTruncation(len(spec.mu)), blocks)


def separable_brownian_eigensystem(spec: SeparableBrownianSpec, grid: Grid) -> EigenSystem:
    """Closed-form eigenpairs ``(lam_j mu_i, phi_j e_i)`` sorted by eigenvalue.

    Exact on the unit-interval midpoint grid when ``j_max <= n``.
    """
    m = len(spec.mu)
    lam = np.outer(brownian_eigenvalues(spec.j_max), spec.mu)
    phi = brownian_eigenfunctions(grid.nodes, spec.j_max)
    order = np.argsort(-lam, axis=None, kind="stable")
    js, is_ = np.unravel_index(order, lam.shape)
    flows = np.zeros((order.size, grid.n, m))
    flows[np.arange(order.size), :, is_] = phi[:, js].T
    return EigenSystem(grid, BasisTruncation(m), lam[js, is_], flows)


def finite_rank_kernel(spec: FiniteRankSpec) -> DiscreteKernel:
    """Population kernel ``sum_r lam_r Phi_r(s) Phi_r(t)^T`` of a finite-rank spec."""
    P = np.column_stack([stack(f) for f in spec.eigenflows])
    A = (P * np.asarray(spec.eigenvalues)) @ P.T
    return DiscreteKernel.from_assembly(spec.grid, spec.trunc, A)


def planted_ensemble(eigenvalues, eigenflows, N: int, seed: int = 0) -> FlowEnsemble:
    """Ensemble whose empirical kernel ``X X^T / N`` has exactly the given eigenpairs.

    ``X = P diag(sqrt(N lam)) V^T`` with ``V`` a random ``N x J`` matrix with
    orthonormal columns.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    flows = list(eigenflows)
    J = lam.size
    if J != len(flows) or N < J:
        raise ValueError("need one flow per eigenvalue and N >= J")
    P = np.column_stack([stack(f) for f in flows])
    rng = np.random.default_rng(seed)
    V, _ = np.linalg.qr(rng.standard_normal((N, J)))
    X = (P * np.sqrt(N * lam)) @ V.T
    return FlowEnsemble(flows[0].grid, flows[0].trunc, X, {"generator": "planted", "seed": seed})
