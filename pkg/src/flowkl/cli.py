"""Simulate flow ensembles, decompose their covariance and run spectral checks.

Every run writes ``summary.json`` (config echo, library version, check
outcomes, artifact names) into the output directory, which defaults to
``flowkl-runs/<command>-<config hash>``.  Exit status is 0 when all checks
pass, 1 when a check fails, 2 on bad input or malformed files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import io as flowio
from .core import BasisTruncation, FlowEnsemble, Grid
from .covariance import empirical_operator_kernel, trace_identity
from .diagnostics import (
    SCHEMA_VERSION,
    mercer_convergence_report,
    scalar_comparison,
    uniform_mse_profile,
)
from .generators import (
    FiniteRankSpec,
    SeparableBrownianSpec,
    finite_rank_kernel,
    generate_finite_rank,
    generate_separable_brownian,
    separable_brownian_kernel,
    spec_from_dict,
)
from .spectral import NonPSDError, cross_validate_paths, naive_eigendecomposition, svd_fast_path

log = logging.getLogger("flowkl")

EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2
COMMANDS = ("simulate", "decompose", "mercer-check", "kl-check", "trace-check", "compare-scalar", "bench", "validate")
# options that change how a run executes but not what it computes
RUNTIME_ONLY = ("threads", "out", "json", "verbose")


class InputError(Exception):
    """Bad configuration or unreadable input; maps to exit status 2."""


@dataclass
class RunConfig:
    command: str
    options: dict = field(default_factory=dict)

    def echo(self) -> dict:
        opts = {k: v for k, v in sorted(self.options.items()) if k not in RUNTIME_ONLY}
        return {"command": self.command, **opts}

    def digest(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _int_list(text: str) -> list:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise argparse.ArgumentTypeError("J sweep must be strictly ascending")
    return values


def _float_list(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return parse


def _mn_sweep(text: str) -> list:
    key, _, values = text.partition("=")
    if key.strip() != "mn" or not values:
        raise argparse.ArgumentTypeError("sweep must look like mn=64,128,256")
    return _int_list(values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowkl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flowkl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, help="output directory (default: flowkl-runs/<command>-<hash>)")
    common.add_argument("--json", action="store_true", help="also print the summary to stdout")
    common.add_argument("--threads", type=_positive(int), default=1, help="worker/BLAS thread cap")
    common.add_argument("--verbose", "-v", action="store_true")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--n", type=_positive(int), default=32, help="grid nodes")
    grid.add_argument("--m", type=_positive(int), default=4, help="basis truncation")
    grid.add_argument("--domain-length", type=_positive(float), default=1.0)

    tols = argparse.ArgumentParser(add_help=False)
    tols.add_argument("--eig-tol", type=float, default=1e-10, help="relative eigenvalue tolerance")
    tols.add_argument("--align-tol", type=float, default=1e-8, help="eigenflow alignment tolerance")
    tols.add_argument("--check-tol", type=float, default=1e-10, help="tolerance for identity checks")

    p = sub.add_parser("simulate", parents=[common, grid], help="generate a synthetic ensemble")
    p.add_argument("--spec", type=Path, help="JSON generator spec")
    p.add_argument("--mu", type=_float_list, help="H-eigenvalues (default 2^-i)")
    p.add_argument("--j-max", type=_positive(int), default=64)
    p.add_argument("--N", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("decompose", parents=[common, tols], help="eigensystem of an ensemble")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--path", choices=("naive", "svd", "both"), default="both")
    p.add_argument("--J", type=int, help="number of eigenpairs (default min(mn, N))")
    p.add_argument("--center", action="store_true", help="subtract the empirical mean flow")
    p.add_argument("--cluster-gap", type=float, default=1e-9)

    p = sub.add_parser("mercer-check", parents=[common, tols], help="Mercer partial-sum convergence")
    p.add_argument("--input", type=Path, required=True, help="ensemble or kernel file")
    p.add_argument("--J-sweep", type=_int_list)
    p.add_argument("--center", action="store_true")

    p = sub.add_parser("kl-check", parents=[common, grid, tols], help="uniform truncation-error profile")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="ensemble or kernel file")
    src.add_argument("--spec", type=Path, help="JSON generator spec (enables the Monte Carlo check)")
    p.add_argument("--J-sweep", type=_int_list)
    p.add_argument("--mc-replicates", type=_positive(int), default=10_000)
    p.add_argument("--seed", type=int, help="Monte Carlo seed (default: spec seed + 1)")
    p.add_argument("--sigmas", type=float, default=4.0)
    p.add_argument("--center", action="store_true")

    p = sub.add_parser("trace-check", parents=[common, tols], help="trace identity")
    p.add_argument("--input", type=Path, required=True, help="ensemble or kernel file")
    p.add_argument("--center", action="store_true")
    p.add_argument("--trace-tol", type=float, default=1e-12)

    p = sub.add_parser("compare-scalar", parents=[common, tols], help="operator KL vs scalar-kernel basis")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--J-sweep", type=_int_list)

    p = sub.add_parser("bench", parents=[common], help="time the naive and SVD paths")
    p.add_argument("--sweep", type=_mn_sweep, default=[64, 128, 256, 512])
    p.add_argument("--N", type=_positive(int), default=32)
    p.add_argument("--m", type=_positive(int), default=4)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-slope-gap", type=float, default=1.5)

    p = sub.add_parser("validate", parents=[common], help="check a binary file")
    p.add_argument("--input", type=Path, required=True)
    return parser


def _load_spec(path: Path):
    try:
        return spec_from_dict(json.loads(path.read_text()))
    except OSError as exc:
        raise InputError(f"cannot read spec {path}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"invalid spec {path}: {exc}") from exc


def _load_kernel_source(path: Path, center: bool = False):
    """Kernel from an ensemble or kernel file, plus the ensemble when there is one."""
    if not path.exists():
        raise InputError(f"input file not found: {path}")
    kind = flowio.sniff(path)
    if kind == "kernel":
        return flowio.read_kernel(path), None
    ens = flowio.read_ensemble(path)
    if ens.N == 0:
        raise InputError("ensemble is empty")
    return empirical_operator_kernel(ens, center=center), ens


def _read_ensemble(path: Path) -> FlowEnsemble:
    if not path.exists():
        raise InputError(f"input file not found: {path}")
    ens = flowio.read_ensemble(path)
    if ens.N == 0:
        raise InputError("ensemble is empty")
    return ens


def _default_sweep(limit: int) -> list:
    js = [0]
    j = 1
    while j < limit:
        js.append(j)
        j *= 2
    js.append(limit)
    return js


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_simulate(a, out: Path, res: dict) -> dict:
    grid, trunc = Grid(a.n, a.domain_length), BasisTruncation(a.m)
    if a.N < 0:
        raise InputError("N must be nonnegative")
    if a.spec:
        spec = _load_spec(a.spec)
    else:
        mu = tuple(a.mu) if a.mu else tuple(2.0 ** -(i + 1) for i in range(a.m))
        try:
            spec = SeparableBrownianSpec(mu, a.j_max, a.seed)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
    if isinstance(spec, FiniteRankSpec):
        ens = generate_finite_rank(spec, a.N, threads=a.threads)
    else:
        if len(spec.mu) != trunc.m:
            raise InputError(f"spec has {len(spec.mu)} H-eigenvalues but --m is {trunc.m}")
        ens = generate_separable_brownian(spec, grid, trunc, a.N, threads=a.threads)
    path = out / "ensemble.flowkl"
    flowio.write_ensemble(path, ens)
    res["artifacts"].append(path.name)
    res["results"] = {"n": ens.grid.n, "m": ens.trunc.m, "N": ens.N, "sha256": _sha256(path), "spec": spec.to_dict()}
    return {}


def cmd_decompose(a, out: Path, res: dict) -> dict:
    ens = _read_ensemble(a.input)
    J = min(ens.mn, ens.N) if a.J is None else a.J
    results = {"J": J}
    systems = {}
    try:
        if a.path in ("naive", "both"):
            systems["naive"] = naive_eigendecomposition(empirical_operator_kernel(ens, center=a.center), J)
        if a.path in ("svd", "both"):
            systems["svd"] = svd_fast_path(ens, J, center=a.center)
    except ValueError as exc:
        if isinstance(exc, NonPSDError):
            raise
        raise InputError(str(exc)) from exc
    for name, eig in systems.items():
        flowio.write_eigensystem(out / f"eigensystem_{name}.flowke", eig)
        flowio.write_eigenvalues_csv(out / f"eigenvalues_{name}.csv", eig)
        res["artifacts"] += [f"eigensystem_{name}.flowke", f"eigenvalues_{name}.csv"]
        results[f"eigenvalues_{name}"] = eig.eigenvalues.tolist()
    checks = {}
    if a.path == "both":
        rep = cross_validate_paths(ens, J, tol=a.cluster_gap, center=a.center)
        (out / "crossval.json").write_text(json.dumps(rep.as_dict(), indent=2, sort_keys=True))
        res["artifacts"].append("crossval.json")
        results["crossval"] = rep.as_dict()
        checks["eigenvalues_agree"] = rep.max_eigval_rel_err <= a.eig_tol
        checks["eigenflows_align"] = rep.min_abs_alignment >= 1.0 - a.align_tol
        checks["clusters_agree"] = rep.max_cluster_angle <= 1e-6
    res["results"] = results
    return checks


def cmd_mercer(a, out: Path, res: dict) -> dict:
    K, _ = _load_kernel_source(a.input, a.center)
    eig = naive_eigendecomposition(K)
    Js = a.J_sweep or _default_sweep(eig.count)
    try:
        rep = mercer_convergence_report(K, eig, Js)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    (out / "mercer.json").write_text(rep.to_json())
    (out / "mercer.csv").write_text(rep.to_csv())
    res["artifacts"] += ["mercer.json", "mercer.csv"]
    res["results"] = rep.as_dict()
    checks = {
        "residual_monotone": rep.monotone(a.check_tol),
        "diagonal_domination": rep.domination_holds(a.check_tol),
        "cauchy_schwarz_bound": rep.bound_holds(a.check_tol),
    }
    if Js[-1] == eig.count:
        checks["full_rank_residual"] = rep.residual_sup_trace[-1] <= a.check_tol * rep.scale
    return checks


def cmd_kl(a, out: Path, res: dict) -> dict:
    mc = None
    if a.spec:
        spec = _load_spec(a.spec)
        if isinstance(spec, FiniteRankSpec):
            K = finite_rank_kernel(spec)
            draw = lambda seed: generate_finite_rank(  # noqa: E731
                FiniteRankSpec(spec.eigenvalues, spec.eigenflows, spec.coefficient_law, seed),
                a.mc_replicates,
                threads=a.threads,
            )
        else:
            grid, trunc = Grid(a.n, a.domain_length), BasisTruncation(a.m)
            if len(spec.mu) != trunc.m:
                raise InputError(f"spec has {len(spec.mu)} H-eigenvalues but --m is {trunc.m}")
            K = separable_brownian_kernel(spec, grid)
            draw = lambda seed: generate_separable_brownian(  # noqa: E731
                SeparableBrownianSpec(spec.mu, spec.j_max, seed), grid, trunc, a.mc_replicates, threads=a.threads
            )
        mc = draw(spec.seed + 1 if a.seed is None else a.seed)
    else:
        K, mc = _load_kernel_source(a.input, a.center)
        if mc is not None and a.center:
            mc = mc.centered()
    eig = naive_eigendecomposition(K)
    Js = a.J_sweep or _default_sweep(eig.count)
    try:
        rep = uniform_mse_profile(K, eig, Js, mc_samples=mc if mc is not None and mc.N >= 2 else None)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    (out / "kl.json").write_text(rep.to_json())
    (out / "kl.csv").write_text(rep.to_csv())
    res["artifacts"] += ["kl.json", "kl.csv"]
    res["results"] = rep.as_dict()
    checks = {"profile_monotone": rep.monotone(a.check_tol)}
    if Js[-1] == eig.count:
        checks["full_rank_profile"] = rep.mse_profile_sup[-1] <= a.check_tol * rep.scale
    agree = rep.mc_agrees(a.sigmas)
    if agree is not None:
        checks["monte_carlo_agrees"] = agree
    return checks


def cmd_trace(a, out: Path, res: dict) -> dict:
    K, _ = _load_kernel_source(a.input, a.center)
    eig = naive_eigendecomposition(K)
    rep = trace_identity(K, eig)
    (out / "trace.json").write_text(json.dumps(rep.as_dict(), indent=2, sort_keys=True))
    res["artifacts"].append("trace.json")
    res["results"] = rep.as_dict()
    return {"trace_identity": rep.rel_err <= a.trace_tol}


def cmd_compare(a, out: Path, res: dict) -> dict:
    ens = _read_ensemble(a.input)
    r = min(ens.mn, ens.N)
    Js = a.J_sweep or _default_sweep(r)[1:]
    if Js[0] < 0 or Js[-1] > r:
        raise InputError(f"J sweep must lie in 0..{r}")
    reports = [scalar_comparison(ens, J) for J in Js]
    rows = ["J,operator_kl_global_mse,scalar_basis_global_mse,fourier_basis_global_mse"]
    rows += [
        f"{c.J},{c.operator_kl_global_mse!r},{c.scalar_basis_global_mse!r},{c.fourier_basis_global_mse!r}"
        for c in reports
    ]
    (out / "compare.csv").write_text("\n".join(rows) + "\n")
    (out / "compare.json").write_text(
        json.dumps({"schema_version": SCHEMA_VERSION, "reports": [c.as_dict() for c in reports]}, indent=2)
    )
    res["artifacts"] += ["compare.csv", "compare.json"]
    res["results"] = {"reports": [c.as_dict() for c in reports]}
    return {"kl_optimal": all(c.optimal(a.check_tol) for c in reports)}


def _median_time(fn, reps: int) -> float:
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def run_bench(sweep, N: int, m: int, reps: int = 5, seed: int = 0) -> dict:
    """Median wall times of both spectral paths over an ``m n`` sweep, with log-log slopes."""
    if reps < 5:
        raise InputError("bench needs at least 5 repetitions")
    rng = np.random.default_rng(seed)
    rows = []
    for mn in sweep:
        mm = m if mn % m == 0 else 1
        grid, trunc = Grid(mn // mm), BasisTruncation(mm)
        ens = FlowEnsemble(grid, trunc, rng.standard_normal((mn, N)))
        J = min(mn, N)
        naive = _median_time(lambda: naive_eigendecomposition(empirical_operator_kernel(ens)), reps)
        fast = _median_time(lambda: svd_fast_path(ens, J), reps)
        rows.append({"mn": mn, "n": grid.n, "m": mm, "N": N, "naive_s": naive, "svd_s": fast})
    log_mn = np.log([r["mn"] for r in rows])
    slope_naive = float(np.polyfit(log_mn, np.log([r["naive_s"] for r in rows]), 1)[0])
    slope_svd = float(np.polyfit(log_mn, np.log([r["svd_s"] for r in rows]), 1)[0])
    return {"rows": rows, "slope_naive": slope_naive, "slope_svd": slope_svd, "slope_gap": slope_naive - slope_svd}


def host_description() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def cmd_bench(a, out: Path, res: dict) -> dict:
    if len(a.sweep) < 2:
        raise InputError("bench sweep needs at least two sizes")
    bench = run_bench(a.sweep, a.N, a.m, a.reps, a.seed)
    rows = ["mn,n,m,N,naive_median_s,svd_median_s"]
    rows += [f"{r['mn']},{r['n']},{r['m']},{r['N']},{r['naive_s']!r},{r['svd_s']!r}" for r in bench["rows"]]
    (out / "bench.csv").write_text("\n".join(rows) + "\n")
    res["artifacts"].append("bench.csv")
    res["results"] = {**bench, "host": host_description(), "threads": a.threads}
    return {"slope_gap": bench["slope_gap"] >= a.min_slope_gap}


def cmd_validate(a, out: Path, res: dict) -> dict:
    if not a.input.exists():
        raise InputError(f"input file not found: {a.input}")
    rep = flowio.validate_file(a.input)
    res["results"] = rep.as_dict()
    if not rep.ok:
        for err in rep.errors:
            print(f"flowkl: {a.input}: {err}", file=sys.stderr)
        raise _ValidationFailed()
    return {"valid": True}


class _ValidationFailed(Exception):
    pass


HANDLERS = {
    "simulate": cmd_simulate,
    "decompose": cmd_decompose,
    "mercer-check": cmd_mercer,
    "kl-check": cmd_kl,
    "trace-check": cmd_trace,
    "compare-scalar": cmd_compare,
    "bench": cmd_bench,
    "validate": cmd_validate,
}


def _jsonable(options: dict) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in options.items()}


def run(argv=None) -> int:
    """Parse ``argv``, execute one command and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")

    options = {k: v for k, v in vars(args).items() if k != "command"}
    config = RunConfig(args.command, _jsonable(options))
    out = args.out or Path("flowkl-runs") / f"{args.command}-{config.digest()}"
    summary = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "config": config.echo(),
        "artifacts": [],
        "results": {},
        "checks": {},
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"flowkl: cannot create output directory {out}: {exc}", file=sys.stderr)
        return EXIT_INPUT

    status, message = EXIT_OK, None
    try:
        with threadpool_limits(limits=args.threads):
            checks = HANDLERS[args.command](args, out, summary)
        checks = {k: bool(v) for k, v in checks.items()}
        summary["checks"] = checks
        if not all(checks.values()):
            status = EXIT_CHECK
            message = "failed checks: " + ", ".join(k for k, ok in checks.items() if not ok)
    except _ValidationFailed:
        status, message = EXIT_INPUT, "file failed validation"
    except NonPSDError as exc:
        status, message = EXIT_CHECK, str(exc)
    except (InputError, flowio.FormatError, ValueError, OSError) as exc:
        status, message = EXIT_INPUT, str(exc)
    except Exception as exc:  # exit-status contract: never escape with a traceback
        log.exception("unexpected failure")
        status, message = EXIT_INPUT, f"unexpected error: {exc}"

    summary["exit_code"] = status
    summary["status"] = {EXIT_OK: "ok", EXIT_CHECK: "check_failed", EXIT_INPUT: "input_error"}[status]
    if message:
        summary["message"] = message
        print(f"flowkl {args.command}: {message}", file=sys.stderr)
    text = json.dumps(summary, indent=2, sort_keys=True, default=float)
    (out / "summary.json").write_text(text + "\n")
    if args.json:
        print(text)
    return status


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
