"""Command-line front end: ``mfclab <subcommand> --config PATH``.

Exit codes: 0 success, 1 solver failure or failed verification, 2 bad
configuration. Every run writes ``manifest.ini`` listing its outputs with
SHA-256 checksums; failures additionally write ``error.csv``.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, RunManifest, load_config, stage_seed
from .errors import ConfigError, MfcLabError, SolverError
from .linearized import classify_stability, second_order_check
from .measures import gaussian_density
from .mfg import MinimizerSet, SolverConfig, dpp_gap, master_equation_residual, solve_mfc
from .model import ProblemSpec, build_spec, duality_identities, sample_xp
from .particles import chaos_rate_experiment, solve_vn_small, vn_vs_u_gap

log = logging.getLogger("mfclab")

# verify tolerances before scaling by [verify] tolerance_scale
DUALITY_TOL = 1e-7
MASTER_TOL = 1e-2
SOC_TOL = 1e-6
VN_GAP_TOL = 5e-3


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, tuple):
        return ";".join(_cell(a) for a in v)
    return str(v)


class Run:
    """Output directory, manifest and stage timing for one command."""

    def __init__(self, cfg: ExperimentConfig, command: str, out: Path):
        self.cfg, self.out = cfg, out
        out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(cfg.digest(), command)

    @contextmanager
    def stage(self, name: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.manifest.stages[name] = time.perf_counter() - t

    def csv(self, name: str, rows: list[dict], header: list[str] | None = None) -> Path:
        header = header or (list(rows[0]) if rows else [])
        path = self.out / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(r.get(k, "")) for k in header])
        self.manifest.add_file(self.out, path)
        return path

    def dat(self, name: str, columns: list[str], blocks: list[np.ndarray]) -> Path:
        """Whitespace-separated columns; blocks are separated by a blank line."""
        path = self.out / name
        with open(path, "w") as fh:
            fh.write("# " + " ".join(columns) + "\n")
            for i, block in enumerate(blocks):
                if i:
                    fh.write("\n")
                for row in np.atleast_2d(block):
                    fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        self.manifest.add_file(self.out, path)
        return path

    def finish(self):
        (self.out / "manifest.ini").write_text(self.manifest.to_text())


def _spec(cfg: ExperimentConfig) -> ProblemSpec:
    try:
        return build_spec(cfg.descriptor, cfg.grid, **dict(cfg.params))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _solver(cfg: ExperimentConfig, stage: str) -> SolverConfig:
    try:
        return SolverConfig(
            damping=cfg.damping,
            tol=cfg.tolerance,
            max_iter=cfg.max_iter,
            multistarts=cfg.multistarts,
            seed=stage_seed(cfg.seed, stage),
            merge_tol=cfg.merge_tol,
            threads=cfg.threads,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _base(cfg: ExperimentConfig, spec: ProblemSpec, mean=None, variance=None) -> MinimizerSet:
    m0 = gaussian_density(spec.grid, cfg.initial_mean if mean is None else mean, cfg.initial_variance if variance is None else variance)
    return solve_mfc(spec, cfg.t0, m0, _solver(cfg, "solve"))


def _field_blocks(grid, values: np.ndarray) -> list[np.ndarray]:
    pts = grid.points.reshape(-1, grid.dim)
    return [np.column_stack([np.full(len(pts), t), pts, v.reshape(-1)]) for t, v in zip(grid.times, values)]


# ---------------------------------------------------------------------------
# commands


def cmd_solve_mfg(cfg: ExperimentConfig, run: Run) -> int:
    spec = _spec(cfg)
    with run.stage("solve"):
        ms = _base(cfg, spec)
    best = ms.best()
    g = best.grid
    cols = ["t"] + [f"x{i + 1}" for i in range(g.dim)]
    run.dat("u_field.dat", cols + ["u"], _field_blocks(g, best.u.values))
    run.dat("m_path.dat", cols + ["m"], _field_blocks(g, best.m.values))
    run.csv("cost.csv", [{"global_min_cost": ms.global_min_cost, "unique": ms.unique, "clusters": len(ms.clusters)}])
    run.csv("minimizers.csv", ms.summary_rows(), ["cluster", "cost", "members", "global", "starts"])
    conv = [
        {"start": label, "iteration": it, "residual": res, "cost": cost, "damping": th}
        for label, rows in ms.logs.items()
        for it, res, cost, th in rows
    ]
    run.csv("convergence.csv", conv, ["start", "iteration", "residual", "cost", "damping"])
    return 0


def cmd_stability_scan(cfg: ExperimentConfig, run: Run) -> int:
    spec = _spec(cfg)
    family = list(itertools.product(cfg.family_means, cfg.family_variances))
    if not family:
        raise ConfigError("empty initial-measure family")
    rows = []
    with run.stage("scan"):
        for mean, var in family:
            row = {"mean": mean, "variance": var}
            try:
                ms = _base(cfg, spec, mean, var)
                rep = classify_stability(spec, ms.best(), cfg.sigma_grid, threshold=cfg.threshold, threads=cfg.threads)
                row.update(clusters=len(ms.global_clusters), verdict=rep.verdict, min_relative_singular_value=min(rep.relative), status="ok")
            except MfcLabError as exc:
                row.update(clusters=0, verdict="error", min_relative_singular_value=float("nan"), status=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    run.csv("stability_map.csv", rows, ["mean", "variance", "clusters", "verdict", "min_relative_singular_value", "status"])
    strong = sum(r["verdict"] == "strongly_stable" for r in rows)
    run.csv("stability_summary.csv", [{"cells": len(rows), "strongly_stable": strong, "fraction": strong / len(rows)}])
    return 0


def cmd_chaos_rate(cfg: ExperimentConfig, run: Run) -> int:
    spec = _spec(cfg)
    with run.stage("solve"):
        ms = _base(cfg, spec)
    with run.stage("chaos"):
        try:
            res = chaos_rate_experiment(
                spec, ms.best(), cfg.n_values, cfg.replicas, stage_seed(cfg.seed, "chaos"), delta_factor=cfg.delta_factor, threads=cfg.threads
            )
        except ValueError as exc:
            raise SolverError(str(exc)) from None
    run.csv("chaos.csv", res.csv_rows(), ["N", "mean_error", "ci_halfwidth", "replicas_used", "truncated_fraction"])
    fit = dict(res.fit_summary(), delta_track=res.delta_track, excluded=res.excluded)
    run.csv("chaos_fit.csv", [fit], ["gamma_hat", "c_hat", "r_squared", "delta_track", "excluded"])
    run.dat("chaos.dat", ["N", "mean_error"], [np.column_stack([res.N_values, res.errors])])
    if res.warnings:
        run.csv("warnings.csv", [{"stage": "chaos", "message": w} for w in res.warnings], ["stage", "message"])
    return 0


def _vn_rows(cfg: ExperimentConfig, spec: ProblemSpec) -> tuple[list[dict], list[dict]]:
    rows, summary = [], []
    for N in cfg.small_n:
        small = solve_vn_small(spec, N)
        rep = vn_vs_u_gap(spec, small, count=cfg.gap_points, seed=stage_seed(cfg.seed, f"vn{N}"), inner=cfg.gap_inner)
        rows += [dict(r, N=N) for r in rep["rows"]]
        summary.append({"N": N, "max_gap": rep["max_gap"], "mean_gap": rep["mean_gap"], "lipschitz_bound": small.lipschitz_bound, "hjb_residual": small.residual})
    return rows, summary


def cmd_vn_compare(cfg: ExperimentConfig, run: Run) -> int:
    spec = _spec(cfg)
    with run.stage("vn"):
        rows, summary = _vn_rows(cfg, spec)
    run.csv("vn_gap.csv", rows, ["N", "t", "x", "V", "U", "gap"])
    run.csv("vn_summary.csv", summary, ["N", "max_gap", "mean_gap", "lipschitz_bound", "hjb_residual"])
    return 0


def cmd_second_order_check(cfg: ExperimentConfig, run: Run) -> int:
    spec = _spec(cfg)
    with run.stage("solve"):
        ms = _base(cfg, spec)
    with run.stage("second_order"):
        rep = second_order_check(spec, ms.best(), cfg.soc_count, stage_seed(cfg.seed, "second_order"))
    run.csv("second_order.csv", [{"beta": d, "value": v} for d, v in zip(rep.descriptors, rep.values)], ["beta", "value"])
    run.csv("second_order_summary.csv", [{"minimum": rep.minimum, "count": len(rep.values), "unique_cluster": ms.unique}])
    return 0


def _check(name: str, value: float, tol: float, passed: bool) -> dict:
    return {"check": name, "value": value, "tolerance": tol, "passed": bool(passed)}


def cmd_verify(cfg: ExperimentConfig, run: Run) -> int:
    spec = _spec(cfg)
    s = cfg.tolerance_scale
    checks = []
    x, p = sample_xp(spec.grid.dim, spec.grid.box_halfwidth, 10.0, 400, np.random.default_rng(stage_seed(cfg.seed, "duality")))
    dual = duality_identities(spec.hamiltonian, x, p)
    checks.append(_check("duality_hamiltonian", dual["hamiltonian_residual"], DUALITY_TOL * s, dual["hamiltonian_residual"] <= DUALITY_TOL * s))
    checks.append(_check("duality_gradient", dual["gradient_residual"], DUALITY_TOL * s, dual["gradient_residual"] <= DUALITY_TOL * s))
    with run.stage("solve"):
        ms = _base(cfg, spec)
    best = ms.best()
    checks.append(_check("unique_cluster", float(len(ms.global_clusters)), 1.0, ms.unique))
    checks.append(_check("fixed_point_residual", best.fixed_point_residual, cfg.tolerance * s, best.fixed_point_residual <= cfg.tolerance * s))
    if ms.unique:
        g = best.grid
        t_mid = float(g.times[g.nt // 2])
        with run.stage("master"):
            mres = master_equation_residual(spec, best, t_mid, SolverConfig(multistarts=1, tol=cfg.tolerance))
        checks.append(_check("master_residual", mres, MASTER_TOL * s, mres <= MASTER_TOL * s))
        with run.stage("second_order"):
            soc = second_order_check(spec, best, cfg.soc_count, stage_seed(cfg.seed, "second_order"))
        checks.append(_check("second_order_min", soc.minimum, -SOC_TOL * s, soc.minimum >= -SOC_TOL * s))
        with run.stage("dpp"):
            gap = abs(dpp_gap(spec, best, t_mid, _solver(cfg, "dpp"))["gap"])
        checks.append(_check("dpp_gap", gap, 2 * cfg.tolerance * s, gap <= 2 * cfg.tolerance * s))
    if spec.grid.dim == 1:
        with run.stage("vn"):
            _, summary = _vn_rows(cfg, spec)
        for r in summary:
            checks.append(_check(f"small_n_gap_N{r['N']}", r["max_gap"], VN_GAP_TOL * s, r["max_gap"] <= VN_GAP_TOL * s))
    run.csv("verify.csv", checks, ["check", "value", "tolerance", "passed"])
    failed = [c["check"] for c in checks if not c["passed"]]
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "solve-mfg": cmd_solve_mfg,
    "stability-scan": cmd_stability_scan,
    "chaos-rate": cmd_chaos_rate,
    "vn-compare": cmd_vn_compare,
    "second-order-check": cmd_second_order_check,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfclab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI experiment configuration")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--seed", type=int, help="base seed (overrides [run] seed)")
        p.add_argument("--threads", type=int, help="worker threads (overrides [run] threads)")
    return parser


def _error_record(kind: str, exc: Exception, lineno=None) -> dict:
    return {"kind": kind, "type": type(exc).__name__, "line": "" if lineno is None else lineno, "message": str(exc)}


def _report(out: Path | None, record: dict, run: Run | None = None):
    print(",".join(_cell(v) for v in record.values()), file=sys.stderr)
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    if run is None:
        path = out / "error.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(record))
            w.writerow([_cell(v) for v in record.values()])
    else:
        run.csv("error.csv", [record], list(record))
        run.finish()


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else None
    try:
        cfg = load_config(args.config)
        overrides = {k: getattr(args, k) for k in ("seed", "threads") if getattr(args, k) is not None}
        cfg = cfg.replace(**overrides)
    except ConfigError as exc:
        _report(out, _error_record("config", exc, exc.lineno))
        return 2
    out = out or Path(cfg.out)
    run = Run(cfg, args.command, out)
    try:
        status = COMMANDS[args.command](cfg, run)
    except ConfigError as exc:
        _report(out, _error_record("config", exc, exc.lineno), run)
        return 2
    except MfcLabError as exc:
        _report(out, _error_record("solver", exc), run)
        return 1
    run.finish()
    return status


if __name__ == "__main__":
    sys.exit(main())
