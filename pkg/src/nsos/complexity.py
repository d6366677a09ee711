"""Wall-time measurements of the dimensioning heuristic and curve fits."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .dimensioning import dimension_heuristic
from .model import NsosModel, NsosScenario


@dataclass
class TimingPoint:
    sweep: str
    value: float
    wall_time: float
    total_cores: int
    iterations: int
    evaluations: int


@dataclass
class Fit:
    model: str
    coef: list
    r2: float


def time_heuristic(scenario: NsosScenario, runs: int = 10) -> TimingPoint:
    """Average wall time over ``runs`` independent heuristic runs."""
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        res = dimension_heuristic(NsosModel(scenario))
        times.append(time.perf_counter() - t0)
    return TimingPoint("", 0.0, float(np.mean(times)), res.total_cores, res.iterations,
                       res.model_evaluations)


def _r2(y, yhat):
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def fit_quadratic(x, y) -> Fit:
    x, y = np.asarray(x, float), np.asarray(y, float)
    coef = np.polyfit(x, y, 2)
    return Fit("a*x^2 + b*x + c", coef.tolist(), _r2(y, np.polyval(coef, x)))


def fit_log(x, y, shift: float = 0.0) -> Fit:
    """Least squares for y = a*log(1/(x - shift)) + b."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    z = np.log(1.0 / (x - shift))
    coef = np.polyfit(z, y, 1)
    label = "a*log(1/x) + b" if shift == 0 else f"a*log(1/(x - {shift:.6g})) + b"
    return Fit(label, coef.tolist(), _r2(y, np.polyval(coef, z)))


def lambda_sweep(template: NsosScenario, rates, runs: int = 10) -> list[TimingPoint]:
    out = []
    for lam in rates:
        p = time_heuristic(template.with_arrivals(lam), runs)
        out.append(dataclasses.replace(p, sweep="lambda", value=float(lam)))
    return out


def tmax_sweep(template: NsosScenario, slos, runs: int = 10) -> list[TimingPoint]:
    out = []
    for slo in slos:
        p = time_heuristic(dataclasses.replace(template, slo=float(slo)), runs)
        out.append(dataclasses.replace(p, sweep="tmax", value=float(slo)))
    return out


def ndso_sweep(template: NsosScenario, domain_counts, runs: int = 10) -> list[TimingPoint]:
    out = []
    for d in domain_counts:
        p = time_heuristic(dataclasses.replace(template, domains=int(d), shares=None), runs)
        out.append(dataclasses.replace(p, sweep="ndso", value=float(d)))
    return out


def analyze_timings(points: list[TimingPoint], zero_load_time: float | None = None) -> dict:
    """Fits per sweep: quadratic in lambda, logarithmic in T_max, spread over N_DSO.

    The T_max fit first tries log(1/T_max); when that explains less than 90%
    of the variance and the zero-load time is known, it is refitted against
    log(1/(T_max - T0)), the distance to the infeasibility edge.
    """
    report: dict = {}
    lam = [p for p in points if p.sweep == "lambda"]
    if len(lam) >= 3:
        report["lambda"] = dataclasses.asdict(fit_quadratic([p.value for p in lam],
                                                            [p.wall_time for p in lam]))
    tm = [p for p in points if p.sweep == "tmax"]
    if len(tm) >= 3:
        x, y = [p.value for p in tm], [p.wall_time for p in tm]
        fit = fit_log(x, y)
        if fit.r2 < 0.9 and zero_load_time is not None:
            fit = fit_log(x, y, zero_load_time)
        report["tmax"] = dataclasses.asdict(fit)
    nd = [p for p in points if p.sweep == "ndso"]
    if nd:
        t = [p.wall_time for p in nd]
        report["ndso"] = {"min": min(t), "max": max(t), "spread": max(t) / min(t)}
    return report
