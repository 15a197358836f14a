"""Executable checks of the Mercer and Karhunen-Loeve statements on the grid.

All suprema over the index set are maxima over grid nodes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (
    DiscreteKernel,
    EigenSystem,
    FlowEnsemble,
    FlowSample,
    check_compatible,
    stack,
    unstack,
)
from .covariance import block_trace_norms, scalar_autocovariance
from .spectral import svd_fast_path

__all__ = [
    "SCHEMA_VERSION",
    "MercerReport",
    "KLReport",
    "ComparisonReport",
    "mercer_partial_sum",
    "mercer_convergence_report",
    "kl_truncate",
    "uniform_mse_profile",
    "projection_mse",
    "scalar_basis",
    "scalar_eigenfunctions",
    "fourier_tensor_basis",
    "scalar_comparison",
]

SCHEMA_VERSION = "1"
MC_SIGMAS = 4.0


class _Report:
    """JSON/CSV serialisation shared by the per-J reports."""

    _per_j: tuple = ()

    def as_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = [c for c in self._per_j if getattr(self, c) is not None]
        writer.writerow(cols)
        for row in zip(*(getattr(self, c) for c in cols)):
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
        return buf.getvalue()


@dataclass
class MercerReport(_Report):
    J_values: list
    residual_sup_trace: list
    diag_psd_min_eig: list
    diag_psd_min_rel: list
    bound_max_excess: list
    scale: float

    _per_j = (
        "J_values",
        "residual_sup_trace",
        "diag_psd_min_eig",
        "diag_psd_min_rel",
        "bound_max_excess",
    )

    def monotone(self, tol: float = 1e-10) -> bool:
        r = np.asarray(self.residual_sup_trace)
        return bool(np.all(np.diff(r) <= tol * self.scale))

    def domination_holds(self, tol: float = 1e-10) -> bool:
        """Every diagonal residual block has min eigenvalue >= -tol * tr K(t_k, t_k)."""
        return bool(np.min(self.diag_psd_min_rel, initial=0.0) >= -tol)

    def bound_holds(self, tol: float = 1e-10) -> bool:
        return bool(np.max(self.bound_max_excess, initial=-np.inf) <= tol)


@dataclass
class KLReport(_Report):
    J_values: list
    mse_profile_sup: list
    scale: float
    mc_mse_sup: list | None = None
    mc_samples: int | None = None
    mc_node: list | None = None
    mc_profile_at_node: list | None = None
    mc_mean_at_node: list | None = None
    mc_stderr_at_node: list | None = None

    _per_j = (
        "J_values",
        "mse_profile_sup",
        "mc_mse_sup",
        "mc_node",
        "mc_profile_at_node",
        "mc_mean_at_node",
        "mc_stderr_at_node",
    )

    def monotone(self, tol: float = 1e-10) -> bool:
        p = np.asarray(self.mse_profile_sup)
        return bool(np.all(np.diff(p) <= tol * self.scale) and np.all(p >= -tol * self.scale))

    def mc_agrees(self, sigmas: float = MC_SIGMAS) -> bool | None:
        """Monte Carlo mean within ``sigmas`` standard errors of the identity at every J."""
        if self.mc_mean_at_node is None:
            return None
        diff = np.abs(np.subtract(self.mc_mean_at_node, self.mc_profile_at_node))
        slack = sigmas * np.asarray(self.mc_stderr_at_node) + 1e-12 * self.scale
        return bool(np.all(diff <= slack))


@dataclass
class ComparisonReport:
    J: int
    operator_kl_global_mse: float
    scalar_basis_global_mse: float
    fourier_basis_global_mse: float
    total_energy: float
    schema_version: str = field(default=SCHEMA_VERSION)

    def optimal(self, tol: float = 1e-10) -> bool:
        kl = self.operator_kl_global_mse
        return kl <= self.scalar_basis_global_mse + tol and kl <= self.fourier_basis_global_mse + tol

    def as_dict(self) -> dict:
        return asdict(self)


def _check_J_values(J_values, limit: int) -> list:
    Js = [int(j) for j in J_values]
    if any(b <= a for a, b in zip(Js, Js[1:])):
        raise ValueError("J_values must be strictly increasing")
    if Js and (Js[0] < 0 or Js[-1] > limit):
        raise ValueError(f"J_values must lie in 0..{limit}")
    return Js


def mercer_partial_sum(eig: EigenSystem, J: int) -> DiscreteKernel:
    """Kernel ``sum_{j<=J} lam_j Phi_j(t_k) Phi_j(t_l)^T`` on the grid."""
    if not 0 <= J <= eig.count:
        raise ValueError(f"J={J} out of range 0..{eig.count}")
    P = eig.stacked()[:, :J]
    A = (P * eig.eigenvalues[:J]) @ P.T
    return DiscreteKernel.from_assembly(eig.grid, eig.trunc, A)


def mercer_convergence_report(
    K: DiscreteKernel, eig: EigenSystem, J_values
) -> MercerReport:
    """Residual of the Mercer partial sums at each ``J``.

    For every ``J`` the report holds the largest trace norm of the residual
    blocks ``K(t_k, t_l) - S_J(t_k, t_l)``, the smallest eigenvalue over the
    diagonal residual blocks, and the largest excess of the partial-sum block
    trace norm over ``sqrt(tr K(t_k, t_k) tr K(t_l, t_l))``.
    ``diag_psd_min_rel`` divides each node's smallest residual eigenvalue by
    ``tr K(t_k, t_k)`` (by the largest trace where that is zero).
    """
    check_compatible(K, eig)
    Js = _check_J_values(J_values, eig.count)
    n = K.grid.n
    diag = np.arange(n)
    traces = K.diagonal_traces()
    bound = np.sqrt(np.outer(np.maximum(traces, 0.0), np.maximum(traces, 0.0)))
    scale = float(max(traces.max(), np.finfo(float).tiny))
    denom = np.where(traces > 0, traces, scale)
    residuals, psd_mins, psd_rel, excess = [], [], [], []
    for J in Js:
        S = mercer_partial_sum(eig, J).blocks
        R = K.blocks - S
        residuals.append(float(block_trace_norms(R).max()))
        node_min = np.linalg.eigvalsh(R[diag, diag]).min(axis=1)
        psd_mins.append(float(node_min.min()))
        psd_rel.append(float((node_min / denom).min()))
        excess.append(float((block_trace_norms(S) - bound).max()))
    return MercerReport(
        J_values=Js,
        residual_sup_trace=residuals,
        diag_psd_min_eig=psd_mins,
        diag_psd_min_rel=psd_rel,
        bound_max_excess=excess,
        scale=scale,
    )


def kl_truncate(sample: FlowSample, eig: EigenSystem, J: int) -> FlowSample:
    """Projection of ``sample`` onto the first ``J`` eigenflows."""
    check_compatible(sample, eig)
    if not 0 <= J <= eig.count:
        raise ValueError(f"J={J} out of range 0..{eig.count}")
    P = eig.stacked()[:, :J]
    x = stack(sample)
    return unstack(P @ (sample.grid.weight * (P.T @ x)), sample.grid, sample.trunc)


def _profile(K: DiscreteKernel, eig: EigenSystem, J: int) -> np.ndarray:
    norms = np.einsum("jki,jki->jk", eig.eigenflows[:J], eig.eigenflows[:J])
    return K.diagonal_traces() - eig.eigenvalues[:J] @ norms


def uniform_mse_profile(
    K: DiscreteKernel,
    eig: EigenSystem,
    J_values,
    mc_samples: FlowEnsemble | None = None,
) -> KLReport:
    """Pointwise truncation error ``tr K(t,t) - sum_{j<=J} lam_j |Phi_j(t)|^2``.

    When ``mc_samples`` (fresh draws from the flow whose kernel is ``K``) are
    given, each is truncated and the mean squared pointwise error is
    estimated.  The Monte Carlo estimate is compared with the closed form at
    the node where the closed form is largest, which keeps the comparison
    free of the upward bias of a maximum over noisy estimates; the maximum of
    the Monte Carlo means is reported as well.
    """
    check_compatible(K, eig)
    Js = _check_J_values(J_values, eig.count)
    profiles = [_profile(K, eig, J) for J in Js]
    traces = K.diagonal_traces()
    report = KLReport(
        J_values=Js,
        mse_profile_sup=[float(p.max()) for p in profiles],
        scale=float(max(traces.max(), np.finfo(float).tiny)),
    )
    if mc_samples is None:
        return report
    check_compatible(K, mc_samples)
    M = mc_samples.N
    if M < 2:
        raise ValueError("Monte Carlo cross-check needs at least two samples")
    X = mc_samples.X
    w = K.grid.weight
    P = eig.stacked()
    scores = w * (P.T @ X)
    sups, nodes, at_node, means, ses = [], [], [], [], []
    for J, prof in zip(Js, profiles):
        E = (X - P[:, :J] @ scores[:J]).reshape(K.grid.n, K.trunc.m, M)
        err = np.einsum("kis,kis->ks", E, E)
        mean = err.mean(axis=1)
        k = int(np.argmax(prof))
        sups.append(float(mean.max()))
        nodes.append(k)
        at_node.append(float(prof[k]))
        means.append(float(mean[k]))
        ses.append(float(err[k].std(ddof=1) / np.sqrt(M)))
    report.mc_mse_sup = sups
    report.mc_samples = M
    report.mc_node = nodes
    report.mc_profile_at_node = at_node
    report.mc_mean_at_node = means
    report.mc_stderr_at_node = ses
    return report


def projection_mse(ens: FlowEnsemble, basis: np.ndarray) -> float:
    """Mean squared L2 error of projecting every sample onto ``basis``.

    ``basis`` is an ``(m n, J)`` matrix of stacked, quadrature-orthonormal
    flows.
    """
    if ens.N == 0:
        raise ValueError("empty ensemble")
    w = ens.grid.weight
    R = ens.X - basis @ (w * (basis.T @ ens.X))
    return w * float(np.sum(R * R)) / ens.N


def _energy_ranked(ens: FlowEnsemble, candidates: np.ndarray, J: int) -> np.ndarray:
    w = ens.grid.weight
    energy = np.mean((w * (candidates.T @ ens.X)) ** 2, axis=1)
    order = np.argsort(-energy, kind="stable")
    return candidates[:, order[:J]]


def scalar_eigenfunctions(C) -> tuple:
    """Eigenvalues and quadrature-normalised eigenfunctions of a scalar kernel.

    Returns ``(values, functions)`` with ``functions`` of shape ``(n, n)``,
    one eigenfunction per column, sorted by decreasing eigenvalue.
    """
    w = C.grid.weight
    vals, vecs = np.linalg.eigh(w * C.values)
    return vals[::-1], vecs[:, ::-1] / np.sqrt(w)


def scalar_basis(ens: FlowEnsemble, J: int) -> np.ndarray:
    """Rank-``J`` basis built from the scalar autocovariance.

    Each temporal eigenfunction ``beta_a`` of the scalar kernel carries an
    ``H``-valued coefficient ``c_a = <chi, beta_a>``; the eigenvectors ``v`` of
    its second-moment matrix give the candidate flows ``beta_a(t) v``.  The
    ``J`` candidates with the largest explained energy are returned as an
    ``(m n, J)`` matrix of stacked flows.
    """
    n, m = ens.grid.n, ens.trunc.m
    _, beta = scalar_eigenfunctions(scalar_autocovariance(ens))
    T = ens.coeff_tensor()
    coef = ens.grid.weight * np.einsum("ka,kis->ais", beta, T)
    cands, energies = [], []
    for a in range(n):
        M = coef[a] @ coef[a].T / ens.N
        vals, vecs = np.linalg.eigh(M)
        for b in range(m):
            cands.append(np.outer(beta[:, a], vecs[:, b]).ravel())
            energies.append(vals[b])
    cands = np.column_stack(cands)
    order = np.argsort(-np.asarray(energies), kind="stable")
    return cands[:, order[:J]]


def fourier_tensor_basis(ens: FlowEnsemble, J: int) -> np.ndarray:
    """Cosine-times-basis-vector flows, the ``J`` with largest empirical energy.

    The cosines ``sqrt(2/L) cos(a pi t / L)`` (``a = 0`` scaled to
    ``sqrt(1/L)``) are exactly orthonormal under the midpoint quadrature.
    """
    grid, m = ens.grid, ens.trunc.m
    L, t = grid.domain_length, grid.nodes
    a = np.arange(grid.n)
    cos = np.sqrt(2.0 / L) * np.cos(np.outer(t, a) * np.pi / L)
    cos[:, 0] = np.sqrt(1.0 / L)
    eye = np.eye(m)
    cands = np.einsum("ka,ib->kiab", cos, eye).reshape(grid.n * m, grid.n * m)
    return _energy_ranked(ens, cands, J)


def scalar_comparison(ens: FlowEnsemble, J: int) -> ComparisonReport:
    """Global truncation error of the operator KL basis against two alternatives."""
    r = min(ens.mn, ens.N)
    if not 0 <= J <= r:
        raise ValueError(f"J={J} must lie in 0..min(mn, N)={r}")
    kl = svd_fast_path(ens, J).stacked()
    return ComparisonReport(
        J=J,
        operator_kl_global_mse=projection_mse(ens, kl),
        scalar_basis_global_mse=projection_mse(ens, scalar_basis(ens, J)),
        fourier_basis_global_mse=projection_mse(ens, fourier_tensor_basis(ens, J)),
        total_energy=ens.grid.weight * float(np.sum(ens.X**2)) / ens.N,
    )
