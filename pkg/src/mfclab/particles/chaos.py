"""Propagation-of-chaos rate experiment for the mean-field feedback system."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import SolverError
from ..mfg import MfgSolution
from ..model import ProblemSpec
from .ensemble import QuantileTrack, _rng, drive, first_exit, sample_initial

log = logging.getLogger(__name__)

MAX_EXCLUDED_FRACTION = 0.2


@dataclass(frozen=True)
class ChaosExperimentResult:
    """Mean ``sup_t d1`` error per N with 95% normal confidence half-widths and a log-log fit."""

    N_values: list
    errors: list
    ci_halfwidths: list
    replicas_used: list
    truncated_fraction: list
    fitted_rate: float
    fitted_constant: float
    r_squared: float
    delta_track: float
    excluded: int = 0
    raw: dict = field(default_factory=dict, repr=False)
    warnings: list = field(default_factory=list)

    def csv_rows(self) -> list[dict]:
        return [
            {"N": n, "mean_error": e, "ci_halfwidth": c, "replicas_used": r, "truncated_fraction": f}
            for n, e, c, r, f in zip(self.N_values, self.errors, self.ci_halfwidths, self.replicas_used, self.truncated_fraction)
        ]

    def fit_summary(self) -> dict:
        return {"gamma_hat": self.fitted_rate, "c_hat": self.fitted_constant, "r_squared": self.r_squared}


def fit_power_law(n_values, errors) -> tuple[float, float, float]:
    """Least-squares fit ``log e = log C - gamma log N``; returns ``(gamma, C, r^2)``."""
    ln = np.log(np.asarray(n_values, float))
    le = np.log(np.asarray(errors, float))
    slope, intercept = np.polyfit(ln, le, 1)
    pred = intercept + slope * ln
    ss_res = float(np.sum((le - pred) ** 2))
    ss_tot = float(np.sum((le - le.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(-slope), float(np.exp(intercept)), r2


def _replica(sol: MfgSolution, track: QuantileTrack, N: int, seed: int):
    traj, exits = drive(sol.grid, sol.m[0], np.asarray(sol.alpha.values), N, seed, stream=N)
    if exits:
        raise SolverError(f"{exits} boundary reflections")
    return float(track.path(traj, 1).max()), track.path(traj, 2)


def chaos_rate_experiment(
    spec: ProblemSpec,
    sol: MfgSolution,
    N_values,
    replicas: int,
    seed: int,
    *,
    delta_factor: float = 3.0,
    threads: int = 1,
) -> ChaosExperimentResult:
    """``E[sup_t d1(m^N_t, m(t))]`` of the mean-field feedback system for each N.

    Replica ``r`` uses seed ``seed + r`` with an independent stream per N. The
    tracking radius is ``delta_factor`` times the mean ``sup_t d2`` at the
    largest N; the fraction of runs leaving it is reported per N. Errors are
    taken over the whole horizon whether or not a run leaves the radius.

    Raises
    ------
    SolverError
        If more than 20% of all replicas fail.
    """
    if sol.grid.dim != 1:
        raise ValueError("the chaos experiment uses exact 1D distances")
    if not sol.converged or sol.unique_global is False:
        raise ValueError("the chaos experiment needs a converged unique-cluster solution")
    ns = [int(n) for n in N_values]
    if any(b <= a for a, b in zip(ns, ns[1:])) or ns[0] < 1:
        raise ValueError("N values must be positive and strictly increasing")
    if replicas < 1:
        raise ValueError("need at least one replica")
    track = QuantileTrack(sol.m)
    jobs = [(N, r) for N in ns for r in range(replicas)]

    def run(job):
        N, r = job
        try:
            return _replica(sol, track, N, seed + r)
        except SolverError as exc:
            return exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    by_n: dict[int, list] = {N: [] for N in ns}
    excluded = 0
    for (N, _), res in zip(jobs, results):
        if isinstance(res, Exception):
            excluded += 1
            continue
        by_n[N].append(res)
    if excluded > MAX_EXCLUDED_FRACTION * len(jobs):
        raise SolverError(f"{excluded} of {len(jobs)} replicas failed; experiment invalid")

    top = by_n[ns[-1]]
    if not top:
        raise SolverError("no replica succeeded at the largest N")
    delta = delta_factor * float(np.mean([d2.max() for _, d2 in top]))
    times = sol.grid.times
    errors, cis, used, trunc = [], [], [], []
    raw = {}
    warnings = []
    for N in ns:
        e = np.array([s for s, _ in by_n[N]])
        raw[N] = e
        used.append(len(e))
        errors.append(float(e.mean()) if len(e) else float("nan"))
        if len(e) > 1:
            cis.append(float(1.96 * e.std(ddof=1) / np.sqrt(len(e))))
        else:
            cis.append(float("nan"))
            warnings.append(f"N={N}: a single replica gives no confidence band")
        trunc.append(float(np.mean([first_exit(d2, times, delta) is not None for _, d2 in by_n[N]])) if len(e) else float("nan"))
    for w in warnings:
        log.warning(w)
    good = [(n, e) for n, e in zip(ns, errors) if np.isfinite(e) and e > 0]
    gamma, c, r2 = fit_power_law(*zip(*good)) if len(good) >= 2 else (float("nan"),) * 3
    return ChaosExperimentResult(ns, errors, cis, used, trunc, gamma, c, r2, delta, excluded, raw, warnings)


def sampling_floor(sol: MfgSolution, n_samples: int, seed: int) -> float:
    """``sup_t d1`` between ``m(t)`` and ``n_samples`` i.i.d. draws from each ``m(t)``."""
    track = QuantileTrack(sol.m)
    rng = _rng(seed, n_samples)
    return max(track.distance(n, sample_initial(sol.m[n], n_samples, rng)) for n in range(len(sol.m)))
