"""Eigensystems of the discretized covariance operator.

Two routes are provided.  The naive route diagonalises ``w K`` where ``K`` is
the assembled ``(m n, m n)`` kernel matrix.  The fast route takes the thin SVD
``X = U D V^T`` of the data matrix and reads off ``lam_j = w d_j^2 / N`` and
``Phi_j = w^{-1/2} unstack(u_j)``.  Both return eigenflows that are
orthonormal under the grid quadrature, with the sign fixed so that the
largest-magnitude coefficient of each eigenflow is positive.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import subspace_angles

from .core import DiscreteKernel, EigenSystem, FlowEnsemble, ScoreMatrix, check_compatible
from .covariance import empirical_operator_kernel

__all__ = [
    "NonPSDError",
    "PathReport",
    "naive_eigendecomposition",
    "svd_fast_path",
    "cross_validate_paths",
    "compute_scores",
    "eigenvalue_clusters",
]

NEGATIVE_TOL = 1e-8
CLUSTER_GAP = 1e-9


class NonPSDError(ValueError):
    """Kernel has an eigenvalue below ``-tol * lam_1``."""


def _fix_signs(U: np.ndarray) -> np.ndarray:
    if U.shape[1] == 0:
        return U
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def _to_eigensystem(grid, trunc, lam, U) -> EigenSystem:
    U = _fix_signs(U)
    flows = (U / np.sqrt(grid.weight)).T.reshape(-1, grid.n, trunc.m)
    return EigenSystem(grid, trunc, lam, flows)


def naive_eigendecomposition(
    K: DiscreteKernel, J: int | None = None, tol: float = NEGATIVE_TOL
) -> EigenSystem:
    """Leading ``J`` eigenpairs of the integral operator of ``K`` by a dense eigensolve.

    Eigenvalues in ``(-tol lam_1, 0)`` are reported as zero; anything below
    ``-tol lam_1`` raises :class:`NonPSDError`.
    """
    mn = K.grid.n * K.trunc.m
    J = mn if J is None else int(J)
    if not 0 <= J <= mn:
        raise ValueError(f"J={J} must lie in 0..{mn}")
    M = K.grid.weight * K.assembly()
    lam, U = np.linalg.eigh(M)
    lam, U = lam[::-1], U[:, ::-1]
    threshold = tol * max(lam[0], 0.0)
    if lam[-1] < -threshold:
        raise NonPSDError(
            f"kernel is not positive semidefinite: eigenvalue {lam[-1]:.3e} "
            f"below -{tol:g} * lambda_1"
        )
    lam = np.maximum(lam, 0.0)
    return _to_eigensystem(K.grid, K.trunc, lam[:J], U[:, :J])


def svd_fast_path(ens: FlowEnsemble, J: int | None = None, center: bool = False) -> EigenSystem:
    """Leading ``J`` eigenpairs of the empirical covariance from the thin SVD of ``X``."""
    r = min(ens.mn, ens.N)
    J = r if J is None else int(J)
    if not 0 <= J <= r:
        raise ValueError(f"J={J} exceeds the rank bound min(mn, N) = {r}")
    X = ens.centered().X if center else ens.X
    U, d, _ = np.linalg.svd(X, full_matrices=False)
    lam = ens.grid.weight * d[:J] ** 2 / ens.N
    return _to_eigensystem(ens.grid, ens.trunc, lam, U[:, :J])


def eigenvalue_clusters(lam, gap: float = CLUSTER_GAP) -> list:
    """Group consecutive eigenvalues whose spacing is at most ``gap * lam[0]``.

    Returns ``(start, stop)`` index pairs, one per group (singletons included).
    """
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0:
        return []
    scale = max(abs(lam[0]), np.finfo(float).tiny)
    clusters, start = [], 0
    for j in range(1, lam.size):
        if lam[j - 1] - lam[j] > gap * scale:
            clusters.append((start, j))
            start = j
    clusters.append((start, lam.size))
    return clusters


@dataclass
class PathReport:
    J: int
    max_eigval_rel_err: float
    min_abs_alignment: float
    max_cluster_angle: float
    simple_count: int
    clusters: list = field(default_factory=list)
    flagged_clusters: list = field(default_factory=list)

    def passed(self, eig_tol: float = 1e-10, align_tol: float = 1e-8, angle_tol: float = 1e-6) -> bool:
        return (
            self.max_eigval_rel_err <= eig_tol
            and self.min_abs_alignment >= 1.0 - align_tol
            and self.max_cluster_angle <= angle_tol
        )

    def as_dict(self) -> dict:
        return asdict(self)


def cross_validate_paths(
    ens: FlowEnsemble, J: int, tol: float = CLUSTER_GAP, center: bool = False
) -> PathReport:
    """Compare the naive and SVD routes on one ensemble.

    Eigenvalue discrepancies are measured relative to ``lam_1``.  Eigenflows
    of simple eigenvalues (gap above ``tol * lam_1`` on both sides) are
    compared by their absolute quadrature inner product; eigenvalue clusters
    are compared by the largest principal angle between the spanned
    subspaces.  A cluster that straddles index ``J`` cannot be compared and is
    listed in ``flagged_clusters`` instead.
    """
    naive = naive_eigendecomposition(empirical_operator_kernel(ens, center=center))
    fast = svd_fast_path(ens, J, center=center)
    lam_n = naive.eigenvalues
    lam1 = max(lam_n[0], np.finfo(float).tiny) if lam_n.size else 1.0
    rel = float(np.max(np.abs(lam_n[:J] - fast.eigenvalues) / lam1)) if J else 0.0

    w = ens.grid.weight
    Pn, Pf = naive.stacked()[:, :J], fast.stacked()
    alignments, angles = [], []
    clusters, flagged = [], []
    for start, stop in eigenvalue_clusters(lam_n, tol):
        if start >= J:
            break
        if stop > J:
            flagged.append([start, stop])
            continue
        if stop - start == 1:
            alignments.append(abs(w * Pn[:, start] @ Pf[:, start]))
        else:
            clusters.append([start, stop])
            theta = subspace_angles(Pn[:, start:stop], Pf[:, start:stop])
            angles.append(float(np.max(theta)))
    return PathReport(
        J=J,
        max_eigval_rel_err=rel,
        min_abs_alignment=float(min(alignments)) if alignments else 1.0,
        max_cluster_angle=float(max(angles)) if angles else 0.0,
        simple_count=len(alignments),
        clusters=clusters,
        flagged_clusters=flagged,
    )


def compute_scores(ens: FlowEnsemble, eig: EigenSystem, center: bool = False) -> ScoreMatrix:
    """``values[j, r] = w <X_j, Phi_r>`` for every sample and eigenflow."""
    check_compatible(ens, eig)
    X = ens.centered().X if center else ens.X
    return ScoreMatrix(ens.grid.weight * (X.T @ eig.stacked()))
