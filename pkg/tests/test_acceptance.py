"""Acceptance criteria, one test each; outcomes are listed in the terminal summary."""

import json
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from flowkl.cli import run, run_bench
from flowkl.core import BasisTruncation, FlowEnsemble, FlowSample, Grid
from flowkl.covariance import empirical_operator_kernel, trace_identity
from flowkl.diagnostics import mercer_convergence_report, scalar_comparison, uniform_mse_profile
from flowkl.generators import (
    SeparableBrownianSpec,
    brownian_eigenfunctions,
    brownian_eigenvalues,
    brownian_population_kernel,
    generate_separable_brownian,
    planted_ensemble,
    separable_brownian_kernel,
)
from flowkl.spectral import compute_scores, cross_validate_paths, naive_eigendecomposition, svd_fast_path

from conftest import record


def test_01_path_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst_eig, worst_align, worst_angle = 0.0, 1.0, 0.0
    for _ in range(20):
        m = int(rng.integers(1, 9))
        n = int(rng.integers(1, 512 // m + 1))
        N = int(rng.integers(1, 513))
        grid, trunc = Grid(n, float(rng.uniform(0.5, 3.0))), BasisTruncation(m)
        ens = FlowEnsemble(grid, trunc, rng.standard_normal((n * m, N)))
        rep = cross_validate_paths(ens, min(n * m, N))
        worst_eig = max(worst_eig, rep.max_eigval_rel_err)
        worst_align = min(worst_align, rep.min_abs_alignment)
        worst_angle = max(worst_angle, rep.max_cluster_angle)
    elapsed = time.perf_counter() - t0
    ok = worst_eig <= 1e-10 and worst_align >= 1 - 1e-8 and worst_angle <= 1e-6 and elapsed < 30
    detail = f"max rel eig err {worst_eig:.1e}, min alignment 1-{1 - worst_align:.1e}, {elapsed:.1f}s"
    assert record(1, "path equivalence", ok, detail)


def test_02_brownian_spectrum():
    t0 = time.perf_counter()
    eig = naive_eigendecomposition(brownian_population_kernel(Grid(256), [1.0]), 5)
    exact = brownian_eigenvalues(5)
    rel = np.abs(eig.eigenvalues - exact) / exact
    elapsed = time.perf_counter() - t0
    ok = rel[0] <= 1e-3 and rel.max() <= 1e-2 and elapsed < 5
    assert record(2, "Brownian spectrum recovery", ok, f"lambda_1 rel err {rel[0]:.1e}, first 5 max {rel.max():.1e}")


def test_03_trace_identity():
    worst = 0.0
    for seed in range(5):
        ens = FlowEnsemble(Grid(12), BasisTruncation(3), np.random.default_rng(seed).standard_normal((36, 50)))
        K = empirical_operator_kernel(ens)
        worst = max(worst, trace_identity(K, naive_eigendecomposition(K)).rel_err)
    mu = (1.0, 0.5, 0.25)
    analytic_errs = []
    for n in (64, 128, 256):
        for K in (
            brownian_population_kernel(Grid(n), mu),
            separable_brownian_kernel(SeparableBrownianSpec(mu, n), Grid(n)),
        ):
            rep = trace_identity(K, naive_eigendecomposition(K))
            worst = max(worst, rep.rel_err)
            analytic_errs.append((n, abs(rep.lhs - sum(mu) / 2)))
    ok = worst <= 1e-12 and all(err <= 2 / n for n, err in analytic_errs)
    gap = max(err * n for n, err in analytic_errs)
    assert record(3, "trace identity", ok, f"max rel err {worst:.1e}, max n*|sum lam - analytic| {gap:.2f}")


def _mercer_kernels():
    ens = FlowEnsemble(Grid(16), BasisTruncation(3), np.random.default_rng(7).standard_normal((48, 30)))
    yield empirical_operator_kernel(ens)
    yield brownian_population_kernel(Grid(32), [1.0, 0.4])
    yield separable_brownian_kernel(SeparableBrownianSpec((1.0, 0.3, 0.1), 24), Grid(24))


def test_04_diagonal_domination():
    ok, worst_rel, worst_excess = True, np.inf, -np.inf
    for K in _mercer_kernels():
        eig = naive_eigendecomposition(K)
        rep = mercer_convergence_report(K, eig, list(range(eig.count + 1)))
        ok &= rep.domination_holds(1e-10) and rep.bound_holds(1e-10)
        worst_rel = min(worst_rel, min(rep.diag_psd_min_rel))
        worst_excess = max(worst_excess, max(rep.bound_max_excess))
    assert record(4, "diagonal domination", ok, f"min eig/tr {worst_rel:.1e}, max bound excess {worst_excess:.1e}")


def _analytic_tail_sup(spec, grid, J):
    lam = np.outer(brownian_eigenvalues(spec.j_max), spec.mu)
    order = np.argsort(-lam, axis=None, kind="stable")[J:]
    js, is_ = np.unravel_index(order, lam.shape)
    phi = brownian_eigenfunctions(grid.nodes, spec.j_max)
    per_dir = np.zeros((len(spec.mu), grid.n, grid.n))
    for j, i in zip(js, is_):
        per_dir[i] += lam[j, i] * np.outer(phi[:, j], phi[:, j])
    return np.abs(per_dir).sum(axis=0).max()


def test_05_uniform_convergence():
    ok = True
    for K in _mercer_kernels():
        eig = naive_eigendecomposition(K)
        rep = mercer_convergence_report(K, eig, list(range(eig.count + 1)))
        ok &= rep.monotone() and rep.residual_sup_trace[-1] <= 1e-10 * rep.scale
    grid = Grid(64)
    spec = SeparableBrownianSpec((1.0, 0.5), 64)
    K = separable_brownian_kernel(spec, grid)
    Js = [0, 1, 2, 4, 8, 16, 32, 64, 127]
    rep = mercer_convergence_report(K, naive_eigendecomposition(K), Js)
    err = max(abs(r - _analytic_tail_sup(spec, grid, J)) for J, r in zip(Js, rep.residual_sup_trace))
    ok &= rep.monotone() and err <= 1e-8
    assert record(5, "uniform Mercer convergence", ok, f"max |residual - analytic tail| {err:.1e}")


def test_06_monte_carlo_profile():
    grid, trunc = Grid(32), BasisTruncation(3)
    spec = SeparableBrownianSpec((1.0, 0.5, 0.25), 32, seed=10)
    K = separable_brownian_kernel(spec, grid)
    eig = naive_eigendecomposition(K)
    fresh = generate_separable_brownian(SeparableBrownianSpec(spec.mu, spec.j_max, 11), grid, trunc, 10_000)
    Js = [0, 1, 2, 4, 8, 16, 32, 64, 96]
    rep = uniform_mse_profile(K, eig, Js, mc_samples=fresh)
    diff = np.abs(np.subtract(rep.mc_mean_at_node, rep.mc_profile_at_node))
    slack = 4.0 * np.asarray(rep.mc_stderr_at_node) + 1e-12 * rep.scale
    ok = rep.mc_agrees(4.0) and rep.monotone()
    detail = f"max diff/slack {np.max(diff / slack):.2f} over {len(Js)} truncations"
    assert record(6, "MSE profile vs Monte Carlo", ok, detail)


def test_07_score_structure():
    worst = 0.0
    for seed, (n, m, N) in enumerate([(10, 3, 200), (20, 2, 15), (8, 4, 32)]):
        ens = FlowEnsemble(Grid(n), BasisTruncation(m), np.random.default_rng(seed).standard_normal((n * m, N)))
        for eig in (svd_fast_path(ens), naive_eigendecomposition(empirical_operator_kernel(ens), min(n * m, N))):
            C = compute_scores(ens, eig).second_moment()
            worst = max(worst, np.abs(C - np.diag(eig.eigenvalues)).max() / eig.eigenvalues[0])
    assert record(7, "score covariance", worst <= 1e-10, f"max |C - diag(lam)| / lam_1 {worst:.1e}")


def _cosines(grid, count):
    c = np.sqrt(2.0) * np.cos(np.outer(grid.nodes, np.arange(count)) * np.pi)
    c[:, 0] = 1.0
    return c


def _separable_planted():
    grid = Grid(12)
    beta = _cosines(grid, 4)
    V, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((3, 3)))
    c, mu = [1.0, 0.4, 0.15, 0.05], [1.0, 0.35, 0.1]
    pairs = sorted(((c[a] * mu[i], a, i) for a in range(4) for i in range(3)), reverse=True)
    flows = [FlowSample(grid, BasisTruncation(3), np.outer(beta[:, a], V[:, i])) for _, a, i in pairs]
    return planted_ensemble([p[0] for p in pairs], flows, 60, seed=2)


def _non_separable_planted():
    grid, trunc = Grid(12), BasisTruncation(2)
    beta = _cosines(grid, 4)
    e = np.eye(2)
    flows = [
        FlowSample(grid, trunc, 0.8 * np.outer(beta[:, 0], e[0]) + 0.6 * np.outer(beta[:, 1], e[1])),
        FlowSample(grid, trunc, 0.6 * np.outer(beta[:, 2], e[1]) - 0.8 * np.outer(beta[:, 3], e[0])),
        FlowSample(grid, trunc, np.outer(beta[:, 1], e[0])),
    ]
    return planted_ensemble([1.0, 0.5, 0.2], flows, 40, seed=3)


def test_08_optimality():
    margin = np.inf
    cases = [_separable_planted(), _non_separable_planted()]
    cases.append(FlowEnsemble(Grid(10), BasisTruncation(3), np.random.default_rng(4).standard_normal((30, 25))))
    for ens in cases:
        for J in range(1, min(ens.mn, ens.N) + 1):
            rep = scalar_comparison(ens, J)
            kl = rep.operator_kl_global_mse
            margin = min(margin, rep.scalar_basis_global_mse - kl, rep.fourier_basis_global_mse - kl)
    first = scalar_comparison(cases[1], 1)
    strict = first.scalar_basis_global_mse - first.operator_kl_global_mse
    ok = margin >= -1e-10 and strict > 0.1
    assert record(8, "KL optimality", ok, f"min margin {margin:.1e}, non-separable J=1 margin {strict:.3f}")


@pytest.mark.slow
def test_09_complexity_trend():
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        bench = run_bench([64, 128, 256, 512], N=32, m=4, reps=5, seed=0)
    elapsed = time.perf_counter() - t0
    ok = bench["slope_gap"] >= 1.5 and elapsed < 180
    slopes = f"slopes naive {bench['slope_naive']:.2f}, svd {bench['slope_svd']:.2f}"
    detail = f"{slopes}, gap {bench['slope_gap']:.2f}, {elapsed:.0f}s"
    assert record(9, "complexity trend", ok, detail)


def test_10_determinism(tmp_path):
    blobs, reports = [], []
    for i, threads in enumerate(["1", "1", "4"]):
        out = tmp_path / f"sim{i}"
        args = ["simulate", "--n", "32", "--m", "4", "--N", "3000", "--seed", "17", "--threads", threads]
        assert run(args + ["--out", str(out)]) == 0
        blobs.append((out / "ensemble.flowkl").read_bytes())
        rep_out = tmp_path / f"dec{i}"
        args = ["decompose", "--input", str(out / "ensemble.flowkl"), "--threads", threads]
        assert run(args + ["--out", str(rep_out)]) == 0
        results = json.loads((rep_out / "summary.json").read_text())["results"]
        reports.append(json.dumps(results, sort_keys=True))
    ok = blobs[0] == blobs[1] == blobs[2] and reports[0] == reports[1] == reports[2]
    assert record(10, "determinism", ok, f"{len(blobs)} runs, threads 1/1/4")
