"""Command-line front end.

Subcommands: ``simulate``, ``solve``, ``certify``, ``demo``, ``convergence``.
Exit codes: 0 success, 2 usage error, 3 certificate rejected, 4
non-convergence.  Every output CSV references the run manifest by the hash
of the resolved configuration, so identical configurations produce
byte-identical tables regardless of worker count.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .certification import LipschitzProfile, certify
from .convergence import convergence_study
from .core import ensemble_frame, field_frame, make_grid, simulate_brownian
from .errors import (
    CertificateRejected,
    InvalidArgument,
    NonConvergence,
    SolverDivergence,
)
from .fbsde import FbsdeSolution
from .path_dependent import demo_no_adapted_solution
from .regression import BasisConfig
from .reporting import RunManifest, write_csv, write_report
from .scenarios import SCENARIO_IDS, get_scenario
from .solvers import SolverConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CERTIFICATE = 3
EXIT_NONCONVERGENCE = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsvielab",
        description="Monte-Carlo laboratory for two-parameter backward equations",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate a Brownian ensemble")
    sim.add_argument("--horizon", type=float, default=1.0)
    _common_run_flags(sim)

    solve = sub.add_parser("solve", help="solve a catalogued scenario")
    solve.add_argument("--type", dest="kind", choices=["1", "2", "pathdep", "fbsde"],
                       required=True)
    solve.add_argument("--generator", required=True, help="catalog id")
    solve.add_argument("--horizon", type=float, default=None,
                       help="override the scenario horizon (where supported)")
    solve.add_argument("--beta", type=float, default=0.0)
    solve.add_argument("--tol", type=float, default=1e-4)
    solve.add_argument("--degree", type=int, default=3)
    solve.add_argument("--max-picard", type=int, default=50)
    solve.add_argument("--threads", type=int, default=1)
    solve.add_argument("--certification", choices=["strict", "warn", "off"],
                       default="strict")
    solve.add_argument("--lz0-scale", type=float, default=1.0,
                       help="stress multiplier on the anticipating z-profile")
    solve.add_argument("--window-steps", type=int, default=None)
    solve.add_argument("--max-csv-paths", type=int, default=256,
                       help="cap on paths written to field CSVs")
    _common_run_flags(solve)

    cert = sub.add_parser("certify", help="evaluate a well-posedness certificate")
    cert.add_argument("--profile", required=True, help="key=value profile file")
    cert.add_argument("--out", default=None, help="optional report path")

    demo = sub.add_parser("demo", help="run a demonstration")
    demo_sub = demo.add_subparsers(dest="demo_name", required=True)
    counter = demo_sub.add_parser(
        "counterexample",
        help="show the integrand field's genuine outer-time dependence",
    )
    counter.add_argument("--case", choices=["1.1", "4.2"], required=True)
    _common_run_flags(counter)

    conv = sub.add_parser("convergence", help="run a refinement ladder")
    conv.add_argument("--scenario", required=True)
    conv.add_argument("--steps", default="25,50,100,200",
                      help="comma-separated step counts")
    conv.add_argument("--paths", default="4000",
                      help="comma-separated path counts (broadcast if single)")
    conv.add_argument("--degree", default="3")
    conv.add_argument("--seed", type=int, default=20240613)
    conv.add_argument("--out", required=True)
    return parser


def _common_run_flags(cmd: argparse.ArgumentParser):
    cmd.add_argument("--paths", type=int, default=10000)
    cmd.add_argument("--steps", type=int, default=25)
    cmd.add_argument("--seed", type=int, default=12345)
    cmd.add_argument("--out", required=True, help="output directory")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    grid = make_grid(args.horizon, args.steps)
    ensemble = simulate_brownian(grid, args.paths, args.seed)
    manifest = RunManifest(
        config={
            "command": "simulate",
            "horizon": args.horizon,
            "steps": args.steps,
            "paths": args.paths,
            "seed": args.seed,
        },
        version=__version__,
    )
    out = _outdir(args)
    write_csv(out / "ensemble.csv", ensemble_frame(ensemble), manifest)
    manifest.wall_clock = time.perf_counter() - t0
    manifest.write(out / "manifest.txt")
    return EXIT_OK


def _solver_config(args) -> SolverConfig:
    return SolverConfig(
        beta=args.beta,
        tol=args.tol,
        max_picard=args.max_picard,
        basis=BasisConfig(degree=args.degree),
        certification=args.certification,
        threads=args.threads,
    )


def _picard_frame(history) -> pd.DataFrame:
    deltas = history.deltas()
    ratios = [np.nan] + history.ratios()
    return pd.DataFrame(
        {
            "iteration": np.arange(1, len(deltas) + 1),
            "delta": deltas,
            "ratio": ratios,
        }
    )


def _cmd_solve(args) -> int:
    t0 = time.perf_counter()
    scen_kwargs = {} if args.horizon is None else {"horizon": args.horizon}
    scen = get_scenario(args.generator, **scen_kwargs)
    kind_map = {"1": "type1", "2": "type2", "pathdep": "path", "fbsde": "fbsde"}
    requested = kind_map[args.kind]
    compatible = {
        "type1": {"type1"},
        "type2": {"type1", "type2"},
        "path": {"path"},
        "fbsde": {"fbsde"},
    }[requested]
    if scen.kind not in compatible:
        raise InvalidArgument(
            f"scenario {scen.id!r} is of kind {scen.kind!r}, not solvable as"
            f" --type {args.kind}"
        )
    cfg = _solver_config(args)
    config = {
        "command": "solve",
        "type": args.kind,
        "generator": scen.id,
        "horizon": scen.horizon,
        "steps": args.steps,
        "paths": args.paths,
        "seed": args.seed,
        "beta": args.beta,
        "tol": args.tol,
        "degree": args.degree,
        "max_picard": args.max_picard,
        "certification": args.certification,
        "lz0_scale": args.lz0_scale,
    }
    manifest = RunManifest(
        config=config, version=__version__, execution={"threads": args.threads}
    )
    timings = {}

    t = time.perf_counter()
    grid = make_grid(scen.horizon, args.steps)
    ensemble = simulate_brownian(grid, args.paths, args.seed)
    timings["simulate"] = time.perf_counter() - t

    t = time.perf_counter()
    if requested == "fbsde":
        from .fbsde import solve_fbsde_via_bsvie

        result = solve_fbsde_via_bsvie(
            scen.generator, cfg, ensemble, lz0_scale=args.lz0_scale
        )
    else:
        scenario = scen
        if args.lz0_scale != 1.0:
            gen = scen.generator
            if getattr(gen, "profile", None) is None:
                raise InvalidArgument(
                    f"scenario {scen.id!r} has no profile to scale"
                )
            scenario = replace(scen, generator=replace(
                gen, profile=gen.profile.scaled(args.lz0_scale)
            ))
        if requested == "type1":
            from .solvers import solve_type1

            result = solve_type1(scenario.psi(ensemble), scenario.generator, cfg, ensemble)
        elif requested == "type2":
            from .solvers import solve_type2

            result = solve_type2(scenario.psi(ensemble), scenario.generator, cfg, ensemble)
        else:
            from .path_dependent import solve_path_dependent

            result = solve_path_dependent(
                scenario.psi(ensemble), scenario.generator, cfg, ensemble,
                window_steps=args.window_steps,
            )
    timings["solve"] = time.perf_counter() - t

    t = time.perf_counter()
    out = _outdir(args)
    if isinstance(result, FbsdeSolution):
        _write_fbsde(out, result, manifest, args.max_csv_paths)
        history = result.bsvie.history
        residual_stats = result.bsvie.residual_stats
        solution = result.bsvie
    else:
        solution = result
        history = result.history
        residual_stats = result.residual_stats
    _write_solution(out, solution, manifest, args.max_csv_paths)
    if residual_stats is not None:
        write_csv(out / "residual.csv", residual_stats, manifest)
    write_csv(out / "picard.csv", _picard_frame(history), manifest)
    timings["export"] = time.perf_counter() - t

    manifest.phase_timings = timings
    manifest.wall_clock = time.perf_counter() - t0
    manifest.write(out / "manifest.txt")
    report = [
        f"converged = {history.converged}",
        f"iterations = {history.n_iterations}",
        f"beta = {history.beta!r}",
    ]
    if solution.certificate is not None:
        report.append(f"certificate_margin = {solution.certificate.margin!r}")
    write_report(out / "report.txt", report, manifest)
    return EXIT_OK


def _capped_y_frame(solution, cap: int) -> pd.DataFrame:
    values = solution.y.values[:cap]
    n_paths, n_nodes = values.shape
    return pd.DataFrame(
        {
            "path": np.repeat(np.arange(n_paths), n_nodes),
            "i": np.tile(np.arange(n_nodes), n_paths),
            "component": 0,
            "value": values.ravel(),
        }
    )


def _write_solution(out: Path, solution, manifest: RunManifest, cap: int):
    write_csv(out / "y.csv", _capped_y_frame(solution, cap), manifest)
    if solution.z is not None:
        write_csv(out / "z.csv", field_frame(solution.z, max_paths=cap), manifest)
    if solution.reconstruction is not None:
        write_csv(out / "reconstruction.csv", solution.reconstruction, manifest)


def _family_frame(values: np.ndarray, cap: int) -> pd.DataFrame:
    vals = values[:cap]
    n_paths, n_rows, n_cols = vals.shape
    ii, jj = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    keep = jj >= ii
    ii, jj = ii[keep], jj[keep]
    return pd.DataFrame(
        {
            "path": np.repeat(np.arange(n_paths), ii.size),
            "i": np.tile(ii, n_paths),
            "j": np.tile(jj, n_paths),
            "component": 0,
            "value": vals[:, keep].ravel(),
        }
    )


def _write_fbsde(out: Path, fam: FbsdeSolution, manifest: RunManifest, cap: int):
    write_csv(out / "x_family.csv", _family_frame(fam.x, cap), manifest)
    write_csv(out / "y_family.csv", _family_frame(fam.y, cap), manifest)
    lines = [
        f"coupling_gap = {fam.coupling_gap!r}",
        f"diagonal_gap = {fam.diagonal_gap!r}",
    ]
    write_report(out / "fbsde_report.txt", lines, manifest)


def _parse_profile_file(path: str) -> tuple[LipschitzProfile, float | None]:
    keys = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"profile line is not key = value: {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        keys[key.lower()] = float(val)
    horizon = keys.pop("horizon", keys.pop("t", 1.0))
    k_p = keys.pop("k_p", None)
    allowed = {"p", "eps", "ly0", "ly1", "lz0", "lz1", "lzhat0", "lzhat1"}
    unknown = set(keys) - allowed
    if unknown:
        raise InvalidArgument(f"unknown profile keys: {sorted(unknown)}")
    profile = LipschitzProfile.from_constants(horizon=horizon, **keys)
    return profile, k_p


def _cmd_certify(args) -> int:
    profile, k_p = _parse_profile_file(args.profile)
    cert = certify(profile, k_p=k_p)
    lines = cert.report_lines()
    print("\n".join(lines))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK if cert.accepted else EXIT_CERTIFICATE


def _cmd_demo_counterexample(args) -> int:
    t0 = time.perf_counter()
    horizon = 1.0 if args.case == "1.1" else 2.0
    grid = make_grid(horizon, args.steps)
    ensemble = simulate_brownian(grid, args.paths, args.seed)
    cfg = SolverConfig()
    report = demo_no_adapted_solution(args.case, cfg, ensemble)
    manifest = RunManifest(
        config={
            "command": "demo-counterexample",
            "case": args.case,
            "horizon": horizon,
            "steps": args.steps,
            "paths": args.paths,
            "seed": args.seed,
        },
        version=__version__,
    )
    out = _outdir(args)
    write_csv(out / "z_mean_by_t.csv", report.z_mean_by_t, manifest)
    lines = [
        f"case = {report.case}",
        f"window = {report.window!r}",
        f"slope = {report.slope!r}",
        f"intercept = {report.intercept!r}",
        f"constrained_residual = {report.constrained_residual!r}",
        f"bsvie_residual = {report.bsvie_residual!r}",
        f"verdict = {report.verdict}",
    ]
    write_report(out / "verdict.txt", lines, manifest)
    manifest.wall_clock = time.perf_counter() - t0
    manifest.write(out / "manifest.txt")
    print("\n".join(lines))
    return EXIT_OK


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _cmd_convergence(args) -> int:
    t0 = time.perf_counter()
    steps = _parse_int_list(args.steps)
    paths = _parse_int_list(args.paths)
    degrees = _parse_int_list(args.degree)
    n = max(len(steps), len(paths), len(degrees))

    def broadcast(xs):
        if len(xs) == 1:
            return xs * n
        if len(xs) != n:
            raise InvalidArgument("ladder coordinate lists must align or be scalar")
        return xs

    ladder = list(zip(broadcast(steps), broadcast(paths), broadcast(degrees)))
    table = convergence_study(args.scenario, ladder, seed=args.seed)
    manifest = RunManifest(
        config={
            "command": "convergence",
            "scenario": args.scenario,
            "steps": args.steps,
            "paths": args.paths,
            "degree": args.degree,
            "seed": args.seed,
        },
        version=__version__,
    )
    out = _outdir(args)
    write_csv(out / "ladder.csv", table.rungs, manifest)
    lines = [
        f"scenario = {table.scenario_id}",
        f"axis = {table.axis}",
        f"fitted_order = {table.fitted_order!r}",
    ]
    write_report(out / "report.txt", lines, manifest)
    manifest.wall_clock = time.perf_counter() - t0
    manifest.write(out / "manifest.txt")
    print("\n".join(lines))
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse signals usage errors with code 2
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "solve":
            return _cmd_solve(args)
        if args.command == "certify":
            return _cmd_certify(args)
        if args.command == "demo":
            return _cmd_demo_counterexample(args)
        if args.command == "convergence":
            return _cmd_convergence(args)
        parser.error(f"unknown command {args.command!r}")
    except CertificateRejected as exc:
        print(f"certificate rejected: {exc}", file=sys.stderr)
        if exc.certificate is not None:
            print("\n".join(exc.certificate.report_lines()), file=sys.stderr)
        return EXIT_CERTIFICATE
    except NonConvergence as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (InvalidArgument, SolverDivergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
