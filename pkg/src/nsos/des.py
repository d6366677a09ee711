"""Discrete-event simulation of the orchestration call flow.

Every entity instance is a FCFS queue with ``c`` identical servers (its
cores).  Messages pick an instance of the target entity with probability
proportional to its cores.  Each SOR walks the call flow of its domain,
including the parallel DSNFVO/DSRRO branches and the join at DSO.
"""
from __future__ import annotations

import csv
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import ConfigInvalid, IncompatibleFamily
from .model import Fork, NsosModel, as_model, balanced_split, call_flow
from .qna import QueueingNetwork

FAMILIES = ("gamma", "exponential", "deterministic")
TRACE_COLUMNS = ("sor", "domain", "arrival", "exit", "branch_a_done", "branch_b_done",
                 "join_start")


@dataclass
class SimConfig:
    duration: float
    warmup: float = 0.0
    seed: int = 0
    service_dist: str | dict = "gamma"
    batch_count: int = 10
    trace: bool = False

    def __post_init__(self):
        if not self.duration > 0:
            raise ConfigInvalid("duration must be > 0")
        if not 0 <= self.warmup < self.duration:
            raise ConfigInvalid("warmup must lie in [0, duration)")
        if int(self.batch_count) != self.batch_count or self.batch_count < 5:
            raise ConfigInvalid("batch_count must be an integer >= 5")
        families = self.service_dist.values() if isinstance(self.service_dist, dict) \
            else [self.service_dist]
        bad = [f for f in families if f not in FAMILIES]
        if bad:
            raise ConfigInvalid(f"unknown service families {bad}; expected one of {FAMILIES}")

    def family_for(self, kind: str) -> str:
        if isinstance(self.service_dist, dict):
            return self.service_dist.get(kind, "gamma")
        return self.service_dist


@dataclass
class ArrivalProfile:
    """Piecewise-constant SOR rate: ``rates[i]`` holds on [breaks[i], breaks[i+1]).

    The last rate extends past the final break.  ``scv`` selects Poisson
    (1.0) or a gamma renewal process run in the time-changed clock.
    """

    breaks: Sequence[float]
    rates: Sequence[float]
    scv: float = 1.0

    def __post_init__(self):
        self.breaks = np.asarray(self.breaks, dtype=float)
        self.rates = np.asarray(self.rates, dtype=float)
        if self.breaks.ndim != 1 or self.breaks.shape != self.rates.shape or not len(self.breaks):
            raise ConfigInvalid("breaks and rates must be equal-length, nonempty vectors")
        if self.breaks[0] != 0 or np.any(np.diff(self.breaks) <= 0):
            raise ConfigInvalid("breaks must start at 0 and increase strictly")
        if np.any(self.rates < 0) or not np.all(np.isfinite(self.rates)):
            raise ConfigInvalid("rates must be finite and >= 0")
        if self.scv < 0:
            raise ConfigInvalid("scv must be >= 0")

    @classmethod
    def constant(cls, rate: float, scv: float = 1.0) -> "ArrivalProfile":
        return cls([0.0], [rate], scv)

    def rate_at(self, t: float) -> float:
        return float(self.rates[np.searchsorted(self.breaks, t, side="right") - 1])

    def _edges(self, t0, t1):
        inner = self.breaks[(self.breaks > t0) & (self.breaks < t1)]
        return np.concatenate(([t0], inner, [t1]))

    def mean_rate(self, t0: float, t1: float) -> float:
        edges = self._edges(t0, t1)
        r = np.array([self.rate_at(t) for t in edges[:-1]])
        return float(np.sum(r * np.diff(edges)) / (t1 - t0))

    def peak_rate(self, t0: float, t1: float) -> float:
        edges = self._edges(t0, t1)
        return float(max(self.rate_at(t) for t in edges[:-1]))

    def window_means(self, t0: float, t1: float, width: float) -> np.ndarray:
        n = max(1, int(round((t1 - t0) / width)))
        return np.array([self.mean_rate(t0 + i * width, t0 + (i + 1) * width) for i in range(n)])

    def scaled(self, factor: float) -> "ArrivalProfile":
        return ArrivalProfile(self.breaks, self.rates * factor, self.scv)

    def to_dict(self) -> dict:
        return {"breaks": self.breaks.tolist(), "rates": self.rates.tolist(), "scv": self.scv}

    @classmethod
    def from_dict(cls, d: dict) -> "ArrivalProfile":
        return cls(d["breaks"], d["rates"], d.get("scv", 1.0))


def diurnal_profile(peak: float, trough_ratio: float = 0.2, day: float = 86400.0,
                    step: float = 600.0, peaks=((0.45, 0.09, 0.8), (0.83, 0.07, 1.0)),
                    trough_at: float = 0.17, scv: float = 1.0) -> ArrivalProfile:
    """Synthetic daily load with two bumps and a night-time trough.

    ``peaks`` lists (centre, width, relative height) as fractions of the
    day; the result is sampled every ``step`` seconds and scaled so that its
    maximum equals ``peak`` and its minimum equals ``trough_ratio * peak``.
    """
    t = np.arange(0.0, day, step)
    x = (t + 0.5 * step) / day
    shape = np.zeros_like(x)
    for centre, width, height in peaks:
        d = np.minimum(np.abs(x - centre), 1 - np.abs(x - centre))
        shape += height * np.exp(-0.5 * (d / width) ** 2)
    # dip towards the trough so the night is flat and low
    d = np.minimum(np.abs(x - trough_at), 1 - np.abs(x - trough_at))
    shape -= 0.3 * np.exp(-0.5 * (d / 0.08) ** 2)
    shape = (shape - shape.min()) / (shape.max() - shape.min())
    rates = peak * (trough_ratio + (1 - trough_ratio) * shape)
    return ArrivalProfile(t, rates, scv)


class ServiceSampler:
    """Service times with mean 1/mu and SCV ``scv``, drawn in buffered blocks."""

    def __init__(self, mu: float, scv: float, family: str = "gamma", rng=None, block: int = 4096):
        if not mu > 0:
            raise ValueError("mu must be > 0")
        if scv < 0:
            raise ValueError("scv must be >= 0")
        if family == "exponential" and not math.isclose(scv, 1.0):
            raise IncompatibleFamily(f"exponential service needs scv=1, got {scv}")
        if family == "deterministic" and scv != 0:
            raise IncompatibleFamily(f"deterministic service needs scv=0, got {scv}")
        if family not in FAMILIES:
            raise IncompatibleFamily(f"unknown family {family!r}")
        self.mu, self.scv, self.family = float(mu), float(scv), family
        self.deterministic = scv == 0
        self.shape = math.inf if self.deterministic else 1.0 / scv
        self.scale = 0.0 if self.deterministic else scv / mu
        self.rng = rng if rng is not None else np.random.default_rng()
        self.block = block
        self._buf: list = []

    def sample(self, n: int) -> np.ndarray:
        if self.deterministic:
            return np.full(n, 1.0 / self.mu)
        if self.family == "exponential":
            return self.rng.exponential(1.0 / self.mu, n)
        return self.rng.gamma(self.shape, self.scale, n)

    def __call__(self) -> float:
        if not self._buf:
            self._buf = self.sample(self.block).tolist()
            self._buf.reverse()
        return self._buf.pop()


def service_sampler(mu: float, scv: float, family: str = "gamma", rng=None) -> ServiceSampler:
    return ServiceSampler(mu, scv, family, rng)


class _Uniforms:
    def __init__(self, rng, block=8192):
        self.rng, self.block, self.buf = rng, block, []

    def __call__(self) -> float:
        if not self.buf:
            self.buf = self.rng.random(self.block).tolist()
        return self.buf.pop()


class _ArrivalStream:
    """Renewal arrivals in the clock time-changed by the cumulative rate."""

    def __init__(self, profile: ArrivalProfile, rng, t0: float = 0.0):
        self.breaks = profile.breaks.tolist() + [math.inf]
        self.rates = profile.rates.tolist()
        self.scv = profile.scv
        self.rng = rng
        self.t = t0
        self.seg = int(np.searchsorted(profile.breaks, t0, side="right") - 1)
        self.buf: list = []

    def _unit(self) -> float:
        if not self.buf:
            if self.scv == 0:
                self.buf = [1.0] * 1024
            elif self.scv == 1:
                self.buf = self.rng.exponential(1.0, 4096).tolist()
            else:
                self.buf = self.rng.gamma(1.0 / self.scv, self.scv, 4096).tolist()
        return self.buf.pop()

    def next(self) -> float:
        need = self._unit()
        t, seg = self.t, self.seg
        while True:
            rate, end = self.rates[seg], self.breaks[seg + 1]
            if rate > 0:
                reach = t + need / rate
                if reach < end:
                    t = reach
                    break
                need -= rate * (end - t)
            if end == math.inf:
                t = math.inf
                break
            t, seg = end, seg + 1
        self.t, self.seg = t, seg
        return t


class _Instance:
    __slots__ = ("entity", "label", "servers", "busy", "queue", "n", "last", "area",
                 "busy_area", "arrivals", "wait_sum", "soj_sum", "done")

    def __init__(self, entity, label, servers):
        self.entity, self.label, self.servers = entity, label, servers
        self.busy = 0
        self.queue = deque()
        self.n = 0
        self.last = 0.0
        self.area = self.busy_area = 0.0
        self.arrivals = 0
        self.wait_sum = self.soj_sum = 0.0
        self.done = 0


@dataclass
class SimStats:
    mean_response: float
    ci95: float
    per_node_utilization: dict
    per_node_mean_wait: dict
    served: int
    rejected: int = 0
    offered: int = 0
    per_node_mean_sojourn: dict = field(default_factory=dict)
    per_node_mean_number: dict = field(default_factory=dict)
    per_node_arrival_rate: dict = field(default_factory=dict)
    batch_means: list = field(default_factory=list)
    trace: list | None = None

    def to_row(self) -> dict:
        return {"mean_response": self.mean_response, "ci95": self.ci95,
                "ci_low": self.mean_response - self.ci95,
                "ci_high": self.mean_response + self.ci95,
                "served": self.served, "rejected": self.rejected, "offered": self.offered}


def batch_means_ci(arrivals, responses, t0, t1, batches):
    """Mean and 95% half-width from equal-length batches by arrival time."""
    arrivals = np.asarray(arrivals, dtype=float)
    responses = np.asarray(responses, dtype=float)
    if not len(responses):
        return math.nan, math.nan, []
    idx = np.clip(((arrivals - t0) / (t1 - t0) * batches).astype(int), 0, batches - 1)
    sums = np.bincount(idx, responses, minlength=batches)
    counts = np.bincount(idx, minlength=batches)
    means = sums[counts > 0] / counts[counts > 0]
    mean = float(responses.mean())
    if len(means) < 2:
        return mean, math.inf, means.tolist()
    half = float(stats.t.ppf(0.975, len(means) - 1) * means.std(ddof=1) / math.sqrt(len(means)))
    return mean, half, means.tolist()


class _Engine:
    """Shared event loop: FCFS multi-server instances and a time-ordered heap."""

    ARRIVAL, DEPART = 0, 1

    def __init__(self, warmup: float, horizon: float):
        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.warmup = warmup
        self.horizon = horizon

    def push(self, t, kind, a, b=None, c=None):
        self.seq += 1
        heapq.heappush(self.heap, (t, self.seq, kind, a, b, c))

    def _account(self, inst, t):
        lo = inst.last if inst.last > self.warmup else self.warmup
        hi = t if t < self.horizon else self.horizon
        if hi > lo:
            inst.area += inst.n * (hi - lo)
            inst.busy_area += inst.busy * (hi - lo)
        inst.last = t

    def _node_stats(self, instances):
        span = self.horizon - self.warmup
        util, wait, soj, num, lam = {}, {}, {}, {}, {}
        for inst in instances:
            self._account(inst, self.horizon)
            util[inst.label] = inst.busy_area / (span * inst.servers) if inst.servers else 0.0
            wait[inst.label] = inst.wait_sum / inst.done if inst.done else math.nan
            soj[inst.label] = inst.soj_sum / inst.done if inst.done else math.nan
            num[inst.label] = inst.area / span
            lam[inst.label] = inst.arrivals / span
        return util, wait, soj, num, lam


class NsosSimulator(_Engine):
    """Event-driven replay of SORs through the instance network.

    Supports reallocation (``set_cores``), an admission hook and statistics
    binned by SOR arrival time, which the provisioning loop builds on.
    """

    def __init__(self, model: NsosModel, cores, config: SimConfig, profile: ArrivalProfile,
                 admit: Callable[[float], bool] | None = None, bin_width: float | None = None):
        super().__init__(config.warmup, config.duration)
        self.model, self.config, self.profile = model, config, profile
        self.admit = admit
        self.scenario = model.scenario
        seeds = np.random.SeedSequence(config.seed).spawn(4 + len(model.names))
        rngs = [np.random.default_rng(s) for s in seeds]
        self.arrivals = _ArrivalStream(profile, rngs[0])
        self.u_domain = _Uniforms(rngs[1])
        self.u_dispatch = _Uniforms(rngs[2])
        kinds = [e.kind for e in model.entity_ids]
        self.samplers = [
            ServiceSampler(model.service_rate[e], model.service_scv[e],
                           config.family_for(kinds[e]), rngs[4 + e])
            for e in range(len(model.names))
        ]
        self._compile()
        self.entity_instances: list[list[_Instance]] = [[] for _ in model.names]
        self.retired: list[_Instance] = []
        self.cum: list[list[float]] = [[] for _ in model.names]
        self.cores = np.zeros(len(model.names), dtype=int)
        self.set_cores(cores)
        self.cum_shares = np.cumsum(self.scenario.shares).tolist()
        self.live: dict = {}
        self.sor_count = 0
        self.resp_arrival: list = []
        self.resp_time: list = []
        self.offered = self.rejected = 0
        self.trace = [] if config.trace else None
        self.bin_width = bin_width
        self.bins: dict = {}
        self.last_arrival = None
        next_t = self.arrivals.next()
        if next_t < self.horizon:
            self.push(next_t, self.ARRIVAL, None)

    def _compile(self):
        idx = {e: i for i, e in enumerate(self.model.entity_ids)}
        self.step_entity: list[int] = []
        self.step_next: list[list[int]] = []
        self.step_need: list[int] = []
        self.step_role: list[str] = []
        self.entry: list[int] = []

        def add(ent, role=""):
            self.step_entity.append(idx[ent])
            self.step_next.append([])
            self.step_need.append(1)
            self.step_role.append(role)
            return len(self.step_entity) - 1

        for d in range(1, self.scenario.domains + 1):
            prev: list[int] = []
            first = None
            for item in call_flow(self.scenario, d):
                if isinstance(item, Fork):
                    ends = []
                    for b, branch in enumerate(item.branches):
                        chain = prev
                        for j, ent in enumerate(branch):
                            role = ("a_end", "b_end")[b] if j == len(branch) - 1 else ""
                            s = add(ent, role)
                            for p in chain:
                                self.step_next[p].append(s)
                            chain = [s]
                        ends.extend(chain)
                    prev = ends
                    continue
                s = add(item, "join" if len(prev) > 1 else "")
                if first is None:
                    first = s
                for p in prev:
                    self.step_next[p].append(s)
                self.step_need[s] = max(1, len(prev))
                prev = [s]
            self.entry.append(first)

    # -- capacity -------------------------------------------------------------
    def set_cores(self, cores):
        """Apply a new allocation now; queues of removed instances move over."""
        cores = np.asarray(cores, dtype=int)
        for e, c in enumerate(cores):
            if c == self.cores[e] and self.entity_instances[e]:
                continue
            split = balanced_split(int(c), int(self.model.max_cores[e]))
            insts = self.entity_instances[e]
            orphans = deque()
            for i, k in enumerate(split):
                if i < len(insts):
                    self._account(insts[i], self.now)
                    insts[i].servers = k
                else:
                    insts.append(_Instance(e, f"{self.model.names[e]}#{i + 1}", k))
                    insts[-1].last = self.now
            for inst in insts[len(split):]:
                self._account(inst, self.now)
                inst.servers = 0
                orphans.extend(inst.queue)
                inst.n -= len(inst.queue)
                inst.queue.clear()
                self.retired.append(inst)
            del insts[len(split):]
            total = float(sum(split))
            self.cum[e] = np.cumsum(split).astype(float).tolist()
            if total:
                self.cum[e] = [x / total for x in self.cum[e]]
            self.cores[e] = c
            for inst in insts:
                self._start_waiting(inst)
            for job in orphans:
                self._enqueue(e, job[0], job[1], job[2])

    def _pick(self, e) -> _Instance | None:
        insts = self.entity_instances[e]
        if not insts:
            return None
        if len(insts) == 1:
            return insts[0]
        u = self.u_dispatch()
        cum = self.cum[e]
        for i, c in enumerate(cum):
            if u < c:
                return insts[i]
        return insts[-1]

    def _enqueue(self, e, sor, step, t_arr):
        inst = self._pick(e)
        if inst is None:
            raise ConfigInvalid(f"entity {self.model.names[e]} has no cores but receives load")
        self._account(inst, self.now)
        inst.n += 1
        if self.warmup <= t_arr < self.horizon:
            inst.arrivals += 1
        if inst.busy < inst.servers:
            self._start(inst, sor, step, t_arr)
        else:
            inst.queue.append((sor, step, t_arr))

    def _start(self, inst, sor, step, t_arr):
        inst.busy += 1
        self.push(self.now + self.samplers[inst.entity](), self.DEPART, inst, (sor, step), t_arr)
        if inst.entity is not None and self.trace is not None and self.step_role[step] == "join":
            self.live[sor][5] = self.now

    def _start_waiting(self, inst):
        while inst.queue and inst.busy < inst.servers:
            self._account(inst, self.now)
            sor, step, t_arr = inst.queue.popleft()
            if self.warmup <= t_arr < self.horizon:
                inst.wait_sum += self.now - t_arr
            self._start(inst, sor, step, t_arr)

    # -- statistics bins ----------------------------------------------------------
    def _bin(self, t):
        b = int(t // self.bin_width)
        rec = self.bins.get(b)
        if rec is None:
            rec = self.bins[b] = {"offered": 0, "rejected": 0, "resp_sum": 0.0, "served": 0,
                                  "ia_n": 0, "ia_sum": 0.0, "ia_sq": 0.0}
        return rec

    # -- main loop ------------------------------------------------------------------
    def _arrival(self, t):
        nxt = self.arrivals.next()
        if nxt < self.horizon:
            self.push(nxt, self.ARRIVAL, None)
        binrec = self._bin(t) if self.bin_width else None
        if binrec is not None:
            binrec["offered"] += 1
            if self.last_arrival is not None:
                gap = t - self.last_arrival
                binrec["ia_n"] += 1
                binrec["ia_sum"] += gap
                binrec["ia_sq"] += gap * gap
        self.last_arrival = t
        measured = t >= self.warmup
        if measured:
            self.offered += 1
        if self.admit is not None and not self.admit(t):
            if measured:
                self.rejected += 1
            if binrec is not None:
                binrec["rejected"] += 1
            return
        u = self.u_domain()
        d = 0
        for i, c in enumerate(self.cum_shares):
            if u < c:
                d = i
                break
        else:
            d = len(self.cum_shares) - 1
        sor = self.sor_count
        self.sor_count += 1
        self.live[sor] = [t, d + 1, 0, math.nan, math.nan, math.nan]
        step = self.entry[d]
        self._enqueue(self.step_entity[step], sor, step, t)

    def _depart(self, t, inst, job, t_arr):
        sor, step = job
        self._account(inst, t)
        inst.busy -= 1
        inst.n -= 1
        if self.warmup <= t_arr < self.horizon:
            inst.done += 1
            inst.soj_sum += t - t_arr
        self._start_waiting(inst)
        state = self.live[sor]
        role = self.step_role[step]
        if role == "a_end":
            state[3] = t
        elif role == "b_end":
            state[4] = t
        nexts = self.step_next[step]
        if not nexts:
            self._finish(sor, state, t)
            return
        for s in nexts:
            need = self.step_need[s]
            if need > 1:
                state[2] += 1
                if state[2] < need:
                    continue
                state[2] = 0
            self._enqueue(self.step_entity[s], sor, s, t)

    def _finish(self, sor, state, t):
        del self.live[sor]
        arrival = state[0]
        resp = t - arrival
        if self.warmup <= arrival < self.horizon:
            self.resp_arrival.append(arrival)
            self.resp_time.append(resp)
        if self.bin_width:
            rec = self._bin(arrival)
            rec["resp_sum"] += resp
            rec["served"] += 1
        if self.trace is not None:
            self.trace.append((sor, state[1], arrival, t, state[3], state[4], state[5]))

    def run_until(self, t_stop: float = math.inf):
        heap = self.heap
        pop = heapq.heappop
        ARRIVAL = self.ARRIVAL
        while heap and heap[0][0] <= t_stop:
            t, _, kind, a, b, c = pop(heap)
            self.now = t
            if kind == ARRIVAL:
                self._arrival(t)
            else:
                self._depart(t, a, b, c)
        if t_stop != math.inf:
            self.now = max(self.now, t_stop)

    def results(self) -> SimStats:
        cfg = self.config
        mean, half, batches = batch_means_ci(self.resp_arrival, self.resp_time, cfg.warmup,
                                             cfg.duration, cfg.batch_count)
        insts = [i for group in self.entity_instances for i in group] + self.retired
        util, wait, soj, num, lam = self._node_stats(insts)
        trace = None
        if self.trace is not None:
            trace = sorted(self.trace)
        return SimStats(mean, half, util, wait, len(self.resp_time), self.rejected,
                        self.offered, soj, num, lam, batches, trace)


def simulate_scenario(target, allocation, config: SimConfig,
                      profile: ArrivalProfile | None = None, admit=None) -> SimStats:
    """Simulate the call flow for an allocation and summarise by batch means.

    ``target`` is an NsosScenario or NsosModel; a generic EntityModel is run
    through :func:`simulate_network` on its instance network.  Without a
    profile the scenario's own external rate and SCV are used.
    """
    model = as_model(target)
    cores = allocation.cores if hasattr(allocation, "cores") else allocation
    if profile is None:
        profile = ArrivalProfile.constant(model.total_ext, float(model.ext_scv[model._mix > 0][0])
                                          if model.total_ext > 0 else 1.0)
    if not isinstance(model, NsosModel):
        net = model.expand(cores)
        return simulate_network(net, config, profile)
    sim = NsosSimulator(model, cores, config, profile, admit)
    sim.run_until()
    return sim.results()


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


class _NetworkSimulator(_Engine):
    def __init__(self, net: QueueingNetwork, config: SimConfig, profile: ArrivalProfile | None):
        super().__init__(config.warmup, config.duration)
        if np.any(net.routing.sum(axis=1) > 1 + 1e-12):
            raise ConfigInvalid("generic simulation needs substochastic routing rows")
        k = net.size
        seeds = np.random.SeedSequence(config.seed).spawn(3 + 2 * k)
        rngs = [np.random.default_rng(s) for s in seeds]
        self.u_route = _Uniforms(rngs[0])
        self.u_entry = _Uniforms(rngs[1])
        fam = config.family_for
        self.samplers = [ServiceSampler(n.service_rate, n.service_scv, fam(net.labels[i]),
                                        rngs[3 + i]) for i, n in enumerate(net.nodes)]
        self.nodes = [_Instance(i, net.labels[i], n.servers) for i, n in enumerate(net.nodes)]
        self.cum_route = np.cumsum(net.routing, axis=1).tolist()
        self.streams = []
        if profile is None:
            for i in range(k):
                if net.ext_rate[i] > 0:
                    st = _ArrivalStream(ArrivalProfile.constant(net.ext_rate[i], net.ext_scv[i]),
                                        rngs[3 + k + i])
                    self.streams.append((st, [(1.0, i)]))
        else:
            mix = net.ext_rate / net.ext_rate.sum()
            st = _ArrivalStream(profile, rngs[2])
            self.streams.append((st, list(zip(np.cumsum(mix).tolist(), range(k)))))
        for s, (st, _) in enumerate(self.streams):
            t = st.next()
            if t < self.horizon:
                self.push(t, self.ARRIVAL, s)
        self.resp_arrival, self.resp_time = [], []
        self.job_count = 0

    def _enqueue(self, node, job, t_arr):
        inst = self.nodes[node]
        self._account(inst, self.now)
        inst.n += 1
        if self.warmup <= t_arr < self.horizon:
            inst.arrivals += 1
        if inst.busy < inst.servers:
            inst.busy += 1
            self.push(self.now + self.samplers[node](), self.DEPART, inst, job, t_arr)
        else:
            inst.queue.append((job, t_arr))

    def run(self):
        heap, pop = self.heap, heapq.heappop
        while heap:
            t, _, kind, a, job, t_arr = pop(heap)
            self.now = t
            if kind == self.ARRIVAL:
                st, entries = self.streams[a]
                nxt = st.next()
                if nxt < self.horizon:
                    self.push(nxt, self.ARRIVAL, a)
                node = entries[0][1]
                if len(entries) > 1:
                    u = self.u_entry()
                    node = next((n for c, n in entries if u < c), entries[-1][1])
                self.job_count += 1
                self._enqueue(node, t, t)
                continue
            inst = a
            self._account(inst, t)
            inst.busy -= 1
            inst.n -= 1
            if self.warmup <= t_arr < self.horizon:
                inst.done += 1
                inst.soj_sum += t - t_arr
            if inst.queue:
                nxt_job, nxt_arr = inst.queue.popleft()
                if self.warmup <= nxt_arr < self.horizon:
                    inst.wait_sum += t - nxt_arr
                inst.busy += 1
                self.push(t + self.samplers[inst.entity](), self.DEPART, inst, nxt_job, nxt_arr)
            u = self.u_route()
            row = self.cum_route[inst.entity]
            dest = next((j for j, c in enumerate(row) if u < c), None)
            if dest is None:
                if self.warmup <= job < self.horizon:
                    self.resp_arrival.append(job)
                    self.resp_time.append(t - job)
            else:
                self._enqueue(dest, job, t)


def simulate_network(net: QueueingNetwork, config: SimConfig,
                     profile: ArrivalProfile | None = None) -> SimStats:
    """Simulate a Markov-routed network of FCFS multi-server nodes.

    Jobs carry their network arrival time, so ``mean_response`` is the mean
    network sojourn.  Routing rows must be substochastic.
    """
    sim = _NetworkSimulator(net, config, profile)
    sim.run()
    mean, half, batches = batch_means_ci(sim.resp_arrival, sim.resp_time, config.warmup,
                                         config.duration, config.batch_count)
    util, wait, soj, num, lam = sim._node_stats(sim.nodes)
    offered = len(sim.resp_time)
    return SimStats(mean, half, util, wait, offered, 0, offered, soj, num, lam, batches)


def piecewise_linear_profile(knots, step: float = 60.0, scv: float = 1.0,
                             end: float | None = None) -> ArrivalProfile:
    """Sample straight lines between (time, rate) knots every ``step`` seconds."""
    knots = np.asarray(knots, dtype=float)
    end = knots[-1, 0] if end is None else end
    t = np.arange(0.0, end, step)
    rates = np.interp(t + 0.5 * step, knots[:, 0], knots[:, 1])
    return ArrivalProfile(t, rates, scv)


def profile_from_dict(spec: dict) -> ArrivalProfile:
    """Build a profile from explicit steps, line knots or diurnal parameters."""
    if "breaks" in spec:
        return ArrivalProfile.from_dict(spec)
    if "knots" in spec:
        return piecewise_linear_profile(spec["knots"], spec.get("step", 60.0),
                                        spec.get("scv", 1.0), spec.get("end"))
    if "diurnal" in spec:
        params = dict(spec["diurnal"])
        if "peaks" in params:
            params["peaks"] = tuple(tuple(p) for p in params["peaks"])
        return diurnal_profile(**params)
    raise ConfigInvalid("profile needs 'breaks', 'knots' or 'diurnal'")
