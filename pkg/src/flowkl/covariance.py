"""Empirical operator-valued and scalar covariance kernels, and their structural checks."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import DiscreteKernel, EigenSystem, FlowEnsemble, Grid, check_compatible

__all__ = [
    "ScalarKernel",
    "NNDReport",
    "TraceReport",
    "empirical_operator_kernel",
    "nnd_check",
    "trace_identity",
    "scalar_autocovariance",
    "block_trace_norms",
]


@dataclass(frozen=True)
class ScalarKernel:
    """Real-valued autocovariance ``C(t_k, t_l) = E <chi(t_k), chi(t_l)>``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"scalar kernel must be {self.grid.n} x {self.grid.n}, got {v.shape}")
        if not np.array_equal(v, v.T):
            raise ValueError("scalar kernel must be symmetric")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class NNDReport:
    min_quadratic_form: float
    min_eigenvalue: float | None
    kernel_norm: float  # Frobenius norm of the assembly
    probes: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TraceReport:
    lhs: float
    rhs: float
    rel_err: float
    truncated: bool
    deficit: float

    def as_dict(self) -> dict:
        return asdict(self)


def _require_samples(ens: FlowEnsemble) -> None:
    if ens.N < 1:
        raise ValueError("empty ensemble: at least one sample is required")


def empirical_operator_kernel(ens: FlowEnsemble, center: bool = False) -> DiscreteKernel:
    """Blocked ``(1/N) X X^T``.

    The upper triangle is computed once and mirrored, so
    ``block(k, l) == block(l, k).T`` holds exactly.  With ``center=True`` the
    empirical mean flow is removed first.
    """
    _require_samples(ens)
    X = ens.centered().X if center else ens.X
    A = X @ X.T / ens.N
    return DiscreteKernel.from_assembly(ens.grid, ens.trunc, A, mirror=True)


def nnd_check(
    K: DiscreteKernel, probes: int = 64, seed: int = 0, eigensolve: bool = True
) -> NNDReport:
    """Probe the non-negative definiteness of ``K``.

    Each probe picks a random subset of nodes and a random vector of the
    truncated space at each chosen node, then evaluates
    ``sum_ab <K(t_a, t_b) h_b, h_a>`` normalised by ``sum_a |h_a|^2``.  With
    ``eigensolve`` the smallest eigenvalue of the full assembly is also
    reported.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    n, m = K.grid.n, K.trunc.m
    A = K.assembly()
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(probes):
        size = int(rng.integers(1, n + 1))
        nodes = np.sort(rng.choice(n, size=size, replace=False))
        idx = (nodes[:, None] * m + np.arange(m)).ravel()
        h = rng.standard_normal(idx.size)
        q = h @ A[np.ix_(idx, idx)] @ h / (h @ h)
        worst = min(worst, float(q))
    min_eig = float(np.linalg.eigvalsh(A)[0]) if eigensolve else None
    return NNDReport(worst, min_eig, float(np.linalg.norm(A)), probes)


def trace_identity(K: DiscreteKernel, eig: EigenSystem) -> TraceReport:
    """Compare ``sum_j lam_j`` with ``w sum_k tr K(t_k, t_k)``.

    A truncated eigensystem (fewer than ``m n`` pairs) is flagged in the
    report, together with the deficit ``rhs - lhs``.
    """
    check_compatible(K, eig)
    lhs = float(np.sum(eig.eigenvalues))
    rhs = K.grid.weight * float(np.sum(K.diagonal_traces()))
    denom = abs(rhs) if rhs != 0 else 1.0
    return TraceReport(
        lhs=lhs,
        rhs=rhs,
        rel_err=abs(lhs - rhs) / denom,
        truncated=eig.count < K.grid.n * K.trunc.m,
        deficit=rhs - lhs,
    )


def scalar_autocovariance(ens: FlowEnsemble, center: bool = False) -> ScalarKernel:
    """``C(t_k, t_l) = (1/N) sum_j <x_j(k), x_j(l)>``."""
    _require_samples(ens)
    src = ens.centered() if center else ens
    T = src.coeff_tensor()
    C = np.einsum("kij,lij->kl", T, T) / ens.N
    C = np.triu(C) + np.triu(C, 1).T
    return ScalarKernel(ens.grid, C)


def block_trace_norms(blocks: np.ndarray) -> np.ndarray:
    """Trace (nuclear) norm of each trailing ``m x m`` block."""
    return np.linalg.svd(blocks, compute_uv=False).sum(axis=-1)
