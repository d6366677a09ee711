"""Closed-loop dynamic resource provisioning co-simulated with the DES.

Every ``dt`` seconds the monitor reports the last window's statistics, the
predictor forecasts the next window's peak rate, the heuristic dimensions a
target allocation and the scaler applies it: scale-ins at once, scale-outs
after ``boot_delay``.  Each monitor window a reactive trigger compares the
measured rate with the forecast and re-dimensions on a mismatch.  A token
bucket at the entry admits SORs at the maximum sustainable rate of the
currently active allocation.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import stats

from .des import ArrivalProfile, NsosSimulator, SimConfig
from .dimensioning import dimension_heuristic, max_sustainable_rate
from .errors import ConfigInvalid, InsufficientHistory
from .model import NsosModel, NsosScenario

log = logging.getLogger(__name__)

NONE, SCALE_OUT, SCALE_IN = "none", "scale_out", "scale_in"

TIMELINE_COLUMNS = (
    "t", "lambda_actual", "lambda_peak", "lambda_pred", "target_cores", "active_cores_start",
    "active_cores_min", "total_cores", "mean_response", "ci95", "offered", "rejected",
    "rejection_fraction", "admitted", "token_capacity", "reactive_events", "capped",
    "covered",
)


@dataclass
class WorkloadStats:
    mean_rate: float
    scv: float
    window: float
    peak_rate: float | None = None
    t_end: float | None = None

    def __post_init__(self):
        if self.mean_rate < 0 or (self.scv is not None and self.scv < 0):
            raise ValueError("mean_rate and scv must be >= 0")
        if self.peak_rate is None:
            self.peak_rate = self.mean_rate


class Predictor(Protocol):
    def observe(self, stats: WorkloadStats) -> None: ...

    def forecast(self) -> tuple[float, float]: ...


def _scv_or_one(scv):
    return 1.0 if scv is None or not np.isfinite(scv) else float(scv)


class PersistencePredictor:
    """Next peak equals the last observed peak plus a safety margin."""

    def __init__(self, margin: float = 0.1):
        self.margin = margin
        self.history: list[WorkloadStats] = []

    def observe(self, stats: WorkloadStats):
        self.history.append(stats)

    def forecast(self):
        if not self.history:
            raise InsufficientHistory("persistence needs one observed window")
        last = self.history[-1]
        return last.peak_rate * (1.0 + self.margin), _scv_or_one(last.scv)


class LinearTrendPredictor:
    """Least-squares line through the last ``h`` peaks, extrapolated one window."""

    def __init__(self, h: int = 6):
        if h < 3:
            raise ValueError("h must be >= 3")
        self.h = h
        self.history: list[WorkloadStats] = []

    def observe(self, stats: WorkloadStats):
        self.history.append(stats)

    def forecast(self):
        if len(self.history) < 3:
            raise InsufficientHistory("linear trend needs three observed windows")
        y = np.array([s.peak_rate for s in self.history[-self.h:]])
        x = np.arange(len(y), dtype=float)
        slope, intercept = np.polyfit(x, y, 1)
        return max(0.0, float(intercept + slope * len(y))), _scv_or_one(self.history[-1].scv)


class NoisyOraclePredictor:
    """True next-window peak of the profile with relative Gaussian error."""

    def __init__(self, profile: ArrivalProfile, dt: float, rel_sigma: float = 0.0,
                 seed: int = 0, sub_window: float = 60.0):
        self.profile, self.dt, self.rel_sigma = profile, dt, rel_sigma
        self.sub_window = sub_window
        self.rng = np.random.default_rng(seed)
        self.history: list[WorkloadStats] = []

    def observe(self, stats: WorkloadStats):
        self.history.append(stats)

    def forecast(self):
        t = self.history[-1].t_end if self.history else 0.0
        peak = float(self.profile.window_means(t, t + self.dt, self.sub_window).max())
        noise = self.rng.normal(0.0, self.rel_sigma) if self.rel_sigma > 0 else 0.0
        scv = _scv_or_one(self.history[-1].scv) if self.history else self.profile.scv
        return max(0.0, peak * (1.0 + noise)), scv


def reactive_trigger(lam_cur: float, lam_pred: float, up: float = 0.05,
                     down: float = -0.5) -> str:
    if not lam_cur > 0:
        raise ValueError("current rate must be > 0")
    ratio = (lam_cur - lam_pred) / lam_cur
    if ratio >= up:
        return SCALE_OUT
    if ratio <= down:
        return SCALE_IN
    return NONE


class TokenBucket:
    """Admits an arrival iff a whole token is available; starts full."""

    def __init__(self, rate: float, depth: float, t0: float = 0.0):
        if rate < 0 or depth < 1:
            raise ValueError("need rate >= 0 and depth >= 1")
        self.rate, self.depth = float(rate), float(depth)
        self.tokens = float(depth)
        self.last = t0
        self.generated = 0.0

    def _advance(self, t):
        if t > self.last:
            add = self.rate * (t - self.last)
            self.generated += add
            self.tokens = min(self.depth, self.tokens + add)
            self.last = t

    def admit(self, t: float) -> bool:
        self._advance(t)
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True
        return False

    def reconfigure(self, rate: float, depth: float, t: float):
        self._advance(t)
        self.rate, self.depth = float(rate), float(depth)
        self.tokens = min(self.tokens, self.depth)


@dataclass
class DrpConfig:
    dt: float = 600.0
    boot_delay: float = 82.0
    up_threshold: float = 0.05
    down_threshold: float = -0.5
    monitor_window: float = 60.0
    duration: float | None = None
    seed: int = 0
    service_dist: str = "gamma"
    bucket_seconds: float = 1.0

    def __post_init__(self):
        if not self.dt > self.monitor_window > 0:
            raise ConfigInvalid("need dt > monitor_window > 0")
        ratio = self.dt / self.monitor_window
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigInvalid("dt must be a whole number of monitor windows")
        if self.boot_delay < 0:
            raise ConfigInvalid("boot_delay must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "DrpConfig":
        return cls(**d)


@dataclass
class ScalingEvent:
    t_request: float
    t_ready: float
    entity: str
    delta: int
    reason: str
    t_applied: float | None = None


@dataclass
class DrpTimeline:
    records: list
    allocations: list
    events: list
    names: tuple
    config: dict = field(default_factory=dict)

    def column(self, name):
        return np.array([r[name] for r in self.records], dtype=float)

    @property
    def total_rejection(self) -> float:
        offered = sum(r["offered"] for r in self.records)
        return sum(r["rejected"] for r in self.records) / offered if offered else 0.0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TIMELINE_COLUMNS + tuple(f"cores_{n}" for n in self.names))
            for rec, alloc in zip(self.records, self.allocations):
                row = [rec[c] for c in TIMELINE_COLUMNS] + list(alloc)
                w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])

    def write_sidecar(self, path, extra: dict | None = None):
        payload = {"config": self.config, "columns": list(TIMELINE_COLUMNS),
                   "entities": list(self.names),
                   "events": [asdict(e) for e in self.events]}
        payload.update(extra or {})
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")


class _Controller:
    def __init__(self, scenario: NsosScenario, profile: ArrivalProfile, predictor,
                 cfg: DrpConfig):
        self.cfg = cfg
        self.profile = profile
        self.predictor = predictor
        self.model = NsosModel(scenario)
        self.names = self.model.names
        self.duration = cfg.duration if cfg.duration is not None else float(
            profile.breaks[-1] + (profile.breaks[-1] - profile.breaks[-2]
                                  if len(profile.breaks) > 1 else cfg.dt))
        self.ext_scv = scenario.ext_scv
        first_peak = profile.window_means(0.0, cfg.dt, cfg.monitor_window).max()
        first = self._dimension(first_peak, profile.scv)
        self.active = np.array(first.allocation.cores, dtype=int)
        self.pending: deque = deque()  # (ready_at, entity, n, event)
        self.lam_ref = first_peak
        self.events: list[ScalingEvent] = []
        self.capped = not first.feasible
        rate, depth = self._policer_params()
        self.bucket = TokenBucket(rate, depth)
        n_bins = int(round(self.duration / cfg.monitor_window))
        self.sim = NsosSimulator(
            self.model, self.active,
            SimConfig(self.duration, 0.0, cfg.seed, cfg.service_dist, 10),
            profile, admit=self.bucket.admit, bin_width=cfg.monitor_window)
        self.n_bins = n_bins

    def _dimension(self, rate, scv):
        return dimension_heuristic(self.model.scaled(max(rate, 0.0), scv))

    def _policer_params(self):
        rate, _ = max_sustainable_rate(self.model, self.model.allocation(self.active))
        return rate, max(1.0, math.ceil(rate * self.cfg.bucket_seconds))

    def committed(self):
        c = self.active.copy()
        for _, e, n, _ in self.pending:
            c[e] += n
        return c

    def _set_active(self, cores, t):
        self.active = np.asarray(cores, dtype=int)
        self.sim.set_cores(self.active)
        rate, depth = self._policer_params()
        self.bucket.reconfigure(rate, depth, t)
        self.min_active = np.minimum(self.min_active, self.active)

    def apply_target(self, target, t, reason, grow_only=False):
        target = np.asarray(target, dtype=int)
        committed = self.committed()
        if grow_only:
            target = np.maximum(target, committed)
        shrink = False
        new_active = self.active.copy()
        for e in range(len(target)):
            if target[e] > committed[e]:
                n = int(target[e] - committed[e])
                ev = ScalingEvent(t, t + self.cfg.boot_delay, self.names[e], n, reason)
                self.events.append(ev)
                self.pending.append((t + self.cfg.boot_delay, e, n, ev))
            elif target[e] < committed[e]:
                excess = int(committed[e] - target[e])
                # cancel not-yet-booted cores first, newest first
                keep = deque()
                for item in reversed(self.pending):
                    ready, ent, n, ev = item
                    if ent == e and excess > 0:
                        cut = min(n, excess)
                        excess -= cut
                        ev.delta -= cut
                        if n - cut > 0:
                            keep.appendleft((ready, ent, n - cut, ev))
                    else:
                        keep.appendleft(item)
                self.pending = keep
                if excess > 0:
                    new_active[e] -= excess
                    self.events.append(ScalingEvent(t, t, self.names[e], -excess, reason, t))
                    shrink = True
        self.pending = deque(sorted(self.pending, key=lambda p: (p[0], p[1])))
        if shrink:
            self._set_active(new_active, t)
        if self.cfg.boot_delay == 0:
            self._activate_ready(t)

    def _activate_ready(self, t):
        cores = self.active.copy()
        changed = False
        while self.pending and self.pending[0][0] <= t:
            ready, e, n, ev = self.pending.popleft()
            cores[e] += n
            ev.t_applied = t
            changed = True
        if changed:
            self._set_active(cores, t)

    def run(self) -> DrpTimeline:
        cfg = self.cfg
        per_dt = int(round(cfg.dt / cfg.monitor_window))
        n_windows = int(math.ceil(self.n_bins / per_dt))
        records, allocations = [], []
        lam_pred = self.lam_ref
        target_total = int(self.active.sum())
        for w in range(n_windows):
            t0 = w * cfg.dt
            self.min_active = self.active.copy()
            active_start = int(self.active.sum())
            reactive = 0
            gen0 = self.bucket.generated - self.bucket.tokens
            window_capped = self.capped
            for k in range(per_dt):
                tick = t0 + (k + 1) * cfg.monitor_window
                tick = min(tick, self.duration)
                while self.pending and self.pending[0][0] <= tick:
                    ready = self.pending[0][0]
                    self.sim.run_until(ready)
                    self.bucket._advance(ready)
                    self._activate_ready(ready)
                self.sim.run_until(tick)
                self.bucket._advance(tick)
                if k == per_dt - 1 or tick >= self.duration:
                    break
                b = self.sim.bins.get(int((tick - cfg.monitor_window) // cfg.monitor_window))
                lam_cur = b["offered"] / cfg.monitor_window if b else 0.0
                if lam_cur > 0:
                    action = reactive_trigger(lam_cur, self.lam_ref, cfg.up_threshold,
                                              cfg.down_threshold)
                    if action != NONE:
                        reactive += 1
                        scv = self._bin_scv([b])
                        res = self._dimension(lam_cur, scv)
                        window_capped |= not res.feasible
                        self.apply_target(res.allocation.cores, tick, action,
                                          grow_only=action == SCALE_OUT)
                        self.lam_ref = lam_cur
                t1 = min(t0 + cfg.dt, self.duration)
            rec = self._window_record(w, t0, t1, per_dt)
            # tokens on hand at t0 plus tokens generated during the window
            token_capacity = self.bucket.generated - gen0
            realized = self._dimension(self.profile.window_means(t0, t1, cfg.monitor_window).max(),
                                       self.profile.scv)
            rec.update(lambda_pred=lam_pred, target_cores=target_total,
                       active_cores_start=active_start,
                       active_cores_min=int(self.min_active.sum()),
                       total_cores=int(self.active.sum()), token_capacity=token_capacity,
                       reactive_events=reactive, capped=bool(window_capped),
                       covered=bool(np.all(self.min_active >= np.asarray(realized.allocation.cores))))
            records.append(rec)
            allocations.append(self.active.tolist())
            if t1 >= self.duration:
                break
            # periodic provisioning for the next window
            bins = self._bins(t0, per_dt)
            obs = WorkloadStats(rec["lambda_actual"], self._bin_scv(bins), cfg.dt,
                                rec["lambda_peak"], t1)
            self.predictor.observe(obs)
            try:
                lam_pred, scv_pred = self.predictor.forecast()
            except InsufficientHistory:
                lam_pred, scv_pred = obs.peak_rate, _scv_or_one(obs.scv)
            res = self._dimension(lam_pred, scv_pred)
            self.capped = not res.feasible
            target_total = res.total_cores
            self.apply_target(res.allocation.cores, t1, "periodic")
            self.lam_ref = lam_pred
        # SORs admitted near the end of a window finish after it closes
        self.sim.run_until()
        for rec in records:
            rec.update(self._response_stats(rec["t"], per_dt))
        return DrpTimeline(records, allocations, self.events, self.names,
                           {"drp": asdict(cfg), "duration": self.duration})

    @staticmethod
    def _bin_scv(bins):
        n = sum(b["ia_n"] for b in bins if b)
        if n < 2:
            return 1.0
        s = sum(b["ia_sum"] for b in bins if b)
        sq = sum(b["ia_sq"] for b in bins if b)
        mean = s / n
        var = max(sq / n - mean * mean, 0.0)
        return var / (mean * mean) if mean > 0 else 1.0

    def _bins(self, t0, per_dt):
        first = int(round(t0 / self.cfg.monitor_window))
        return [self.sim.bins.get(first + k) for k in range(per_dt)]

    def _window_record(self, w, t0, t1, per_dt):
        bins = self._bins(t0, per_dt)
        offered = sum(b["offered"] for b in bins if b)
        rejected = sum(b["rejected"] for b in bins if b)
        rates = np.array([b["offered"] / self.cfg.monitor_window if b else 0.0 for b in bins])
        return {
            "t": t0, "lambda_actual": offered / (t1 - t0), "lambda_peak": float(rates.max()),
            "offered": offered, "rejected": rejected,
            "rejection_fraction": rejected / offered if offered else 0.0,
            "admitted": offered - rejected,
        }

    def _response_stats(self, t0, per_dt):
        """Mean response of SORs admitted in the window, CI from per-minute means."""
        bins = [b for b in self._bins(t0, per_dt) if b and b["served"]]
        served = sum(b["served"] for b in bins)
        mean = sum(b["resp_sum"] for b in bins) / served if served else math.nan
        means = np.array([b["resp_sum"] / b["served"] for b in bins])
        half = math.nan
        if len(means) >= 2:
            half = float(stats.t.ppf(0.975, len(means) - 1) * means.std(ddof=1)
                         / math.sqrt(len(means)))
        return {"mean_response": mean, "ci95": half}


def run_drp_loop(scenario: NsosScenario, profile: ArrivalProfile, predictor=None,
                 config: DrpConfig | None = None) -> DrpTimeline:
    """Co-simulate the provisioning loop over the whole profile."""
    cfg = config or DrpConfig()
    predictor = predictor if predictor is not None else PersistencePredictor()
    return _Controller(scenario, profile, predictor, cfg).run()
