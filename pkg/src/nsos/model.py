"""Queueing model of the slice orchestration system.

Entities (GO, SAE, RAE and six per-domain orchestration components) are mapped
to an entity-level flow-split matrix; an allocation of CPU cores expands every
entity into one queue node per instance, and the QNA engine yields the mean
response time per entity.  The DSNFVO/DSVIM and DSRRO/DSeNBs pairs of each
domain form the two parallel branches of a fork/join subnetwork.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import qna
from .errors import Unstable
from .qna import CANONICAL, FlowSolution, QueueingNetwork, QueueNode

GLOBAL_KINDS = ("GO", "SAE", "RAE")
DOMAIN_KINDS = ("DSO", "DSNFVO", "DSVIM", "DSRRO", "DSeNBs", "DSSDNC")
KINDS = GLOBAL_KINDS + DOMAIN_KINDS


class EntityId(NamedTuple):
    kind: str
    domain: int | None = None

    @property
    def label(self) -> str:
        return self.kind if self.domain is None else f"{self.kind}_{self.domain}"

    @classmethod
    def parse(cls, label: str) -> "EntityId":
        if label in GLOBAL_KINDS:
            return cls(label)
        kind, _, dom = label.rpartition("_")
        if kind not in DOMAIN_KINDS or not dom.isdigit():
            raise ValueError(f"unknown entity label {label!r}")
        return cls(kind, int(dom))

    def validate(self, domains: int):
        if self.kind in GLOBAL_KINDS:
            if self.domain is not None:
                raise ValueError(f"{self.kind} carries no domain index")
        elif self.kind in DOMAIN_KINDS:
            if self.domain is None or not 1 <= self.domain <= domains:
                raise ValueError(f"{self.kind} needs a domain index in [1, {domains}]")
        else:
            raise ValueError(f"unknown entity kind {self.kind!r}")


def _per_kind(value, name, cast=float) -> dict:
    if isinstance(value, dict):
        missing = [k for k in KINDS if k not in value]
        if missing:
            raise ValueError(f"{name} lacks entries for {missing}")
        return {k: cast(value[k]) for k in KINDS}
    return {k: cast(value) for k in KINDS}


@dataclass
class NsosScenario:
    """Orchestration-system description (rates per second, times in seconds).

    ``service_rate``, ``service_scv`` and ``max_cores_per_instance`` accept a
    scalar (same for every entity kind) or a mapping keyed by entity kind.
    """

    domains: int = 1
    shares: Sequence[float] | None = None
    service_rate: dict | float = 10000.0
    service_scv: dict | float = 0.65
    max_cores_per_instance: dict | int = 4
    slo: float = 2e-3
    core_budget: int = 1000
    ext_rate: float = 1000.0
    ext_scv: float = 1.0
    rae_in_flow: bool = False
    sdnc_in_total: bool = True

    def __post_init__(self):
        if int(self.domains) != self.domains or self.domains < 1:
            raise ValueError("domains must be a positive integer")
        self.domains = int(self.domains)
        if self.shares is None:
            self.shares = tuple([1.0 / self.domains] * self.domains)
        self.shares = tuple(float(a) for a in self.shares)
        if len(self.shares) != self.domains:
            raise ValueError("one share per domain is required")
        if any(a < 0 for a in self.shares) or not math.isclose(sum(self.shares), 1.0, abs_tol=1e-9):
            raise ValueError("shares must be nonnegative and sum to 1")
        self.service_rate = _per_kind(self.service_rate, "service_rate")
        self.service_scv = _per_kind(self.service_scv, "service_scv")
        self.max_cores_per_instance = _per_kind(self.max_cores_per_instance,
                                                "max_cores_per_instance", int)
        if any(v <= 0 for v in self.service_rate.values()):
            raise ValueError("service rates must be > 0")
        if any(v < 0 for v in self.service_scv.values()):
            raise ValueError("service SCVs must be >= 0")
        if any(v < 1 for v in self.max_cores_per_instance.values()):
            raise ValueError("max_cores_per_instance must be >= 1")
        if not self.slo > 0:
            raise ValueError("slo must be > 0")
        if self.ext_rate < 0 or self.ext_scv < 0:
            raise ValueError("ext_rate and ext_scv must be >= 0")
        self.core_budget = int(self.core_budget)

    def with_arrivals(self, rate: float, scv: float | None = None) -> "NsosScenario":
        return dataclasses.replace(self, ext_rate=float(rate),
                                   ext_scv=self.ext_scv if scv is None else float(scv))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["shares"] = list(self.shares)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "NsosScenario":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "NsosScenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def entities(scenario: NsosScenario) -> list[EntityId]:
    out = [EntityId(k) for k in GLOBAL_KINDS]
    for d in range(1, scenario.domains + 1):
        out.extend(EntityId(k, d) for k in DOMAIN_KINDS)
    return out


def visit_ratios(scenario: NsosScenario) -> dict[EntityId, float]:
    per_sor = {"DSO": 3, "DSNFVO": 2, "DSVIM": 1, "DSRRO": 2, "DSeNBs": 1, "DSSDNC": 1}
    v = {
        EntityId("GO"): 4.0 if scenario.rae_in_flow else 3.0,
        EntityId("SAE"): 1.0,
        EntityId("RAE"): 1.0 if scenario.rae_in_flow else 0.0,
    }
    for d, alpha in enumerate(scenario.shares, start=1):
        for kind in DOMAIN_KINDS:
            v[EntityId(kind, d)] = per_sor[kind] * alpha
    return v


@dataclass
class TransitionMatrix:
    entities: list[EntityId]
    routing: np.ndarray
    exit: np.ndarray

    def index(self, ent: EntityId) -> int:
        return self.entities.index(ent)


def entity_transition_matrix(scenario: NsosScenario) -> TransitionMatrix:
    """Entity-level flow splits.

    DSO forks one message to each branch, so its row sums to 4/3.  At the
    join only the DSNFVO reply feeds DSO's next service; the DSRRO reply is
    absorbed by the join and therefore leaves the rate equations.
    """
    ents = entities(scenario)
    idx = {e: i for i, e in enumerate(ents)}
    n = len(ents)
    p = np.zeros((n, n))
    go, sae, rae = idx[EntityId("GO")], idx[EntityId("SAE")], idx[EntityId("RAE")]
    visits_go = 4.0 if scenario.rae_in_flow else 3.0
    p[go, sae] = 1.0 / visits_go
    p[sae, go] = 1.0
    p[rae, go] = 1.0
    if scenario.rae_in_flow:
        p[go, rae] = 1.0 / visits_go
    for d, alpha in enumerate(scenario.shares, start=1):
        dso, nfvo, vim, rro, enbs, sdnc = (idx[EntityId(k, d)] for k in DOMAIN_KINDS)
        p[go, dso] = alpha / visits_go
        p[dso, nfvo] = p[dso, rro] = p[dso, sdnc] = p[dso, go] = 1.0 / 3.0
        p[nfvo, dso] = p[nfvo, vim] = 0.5
        p[vim, nfvo] = 1.0
        p[rro, enbs] = 0.5
        p[enbs, rro] = 1.0
        p[sdnc, dso] = 1.0
    exit_ = np.clip(1.0 - p.sum(axis=1), 0.0, None)
    return TransitionMatrix(ents, p, exit_)


class Fork(NamedTuple):
    branches: tuple


def call_flow(scenario: NsosScenario, domain: int) -> list:
    """Ordered service steps of one SOR addressed to ``domain``.

    Items are EntityIds or a Fork of branches; the step after a Fork is the
    join and starts only when every branch is done.
    """
    go, sae = EntityId("GO"), EntityId("SAE")
    dso = EntityId("DSO", domain)
    head = [go, sae, go]
    if scenario.rae_in_flow:
        head += [EntityId("RAE"), go]
    fork = Fork((
        (EntityId("DSNFVO", domain), EntityId("DSVIM", domain), EntityId("DSNFVO", domain)),
        (EntityId("DSRRO", domain), EntityId("DSeNBs", domain), EntityId("DSRRO", domain)),
    ))
    return head + [dso, fork, dso, EntityId("DSSDNC", domain), dso, go]


def balanced_split(cores: int, max_per_instance: int) -> tuple[int, ...]:
    """Spread ``cores`` over ceil(cores / max) instances, larger ones first."""
    if cores <= 0:
        return ()
    k = -(-cores // max_per_instance)
    q, r = divmod(cores, k)
    return (q + 1,) * r + (q,) * (k - r)


@dataclass(frozen=True)
class Allocation:
    names: tuple
    cores: tuple
    max_cores: tuple

    def __post_init__(self):
        if not len(self.names) == len(self.cores) == len(self.max_cores):
            raise ValueError("names, cores and max_cores must align")
        if any(c < 0 for c in self.cores):
            raise ValueError("core counts must be >= 0")

    @property
    def per_instance_cores(self) -> tuple:
        return tuple(balanced_split(c, m) for c, m in zip(self.cores, self.max_cores))

    @property
    def instances(self) -> tuple:
        return tuple(len(s) for s in self.per_instance_cores)

    @property
    def total_cores(self) -> int:
        return int(sum(self.cores))

    def as_dict(self) -> dict:
        return dict(zip(self.names, (int(c) for c in self.cores)))

    def with_cores(self, cores) -> "Allocation":
        return Allocation(self.names, tuple(int(c) for c in cores), self.max_cores)


@dataclass
class Evaluation:
    T: float
    per_entity: dict
    flow: FlowSolution
    network: QueueingNetwork


class EntityModel:
    """Response-time model over entities with per-instance expansion.

    The overall time is the plain sum of the per-entity times; subclasses
    override ``total`` for other compositions.
    """

    def __init__(self, names, routing, ext_rate, ext_scv, service_rate, service_scv,
                 max_cores, slo, core_budget=10 ** 6, variant=CANONICAL,
                 multi_server_beta=True):
        self.names = tuple(names)
        n = len(self.names)
        self.routing = np.asarray(routing, dtype=float).reshape(n, n)
        self.ext_rate = np.asarray(ext_rate, dtype=float).reshape(n)
        self.ext_scv = np.asarray(ext_scv, dtype=float).reshape(n)
        self.service_rate = np.asarray(service_rate, dtype=float).reshape(n)
        self.service_scv = np.asarray(service_scv, dtype=float).reshape(n)
        self.max_cores = np.asarray(max_cores, dtype=int).reshape(n)
        self.slo = float(slo)
        self.core_budget = int(core_budget)
        self.variant = variant
        self.multi_server_beta = multi_server_beta
        self._mix = self.ext_rate
        self.total_ext = float(self.ext_rate.sum())
        rates = qna.flow_rates(self.routing, self.ext_rate)
        # visit ratios survive a later rescale to zero load
        self.visits = rates / self.total_ext if self.total_ext > 0 else rates
        self.rates = rates
        self.active = self.visits > 0

    @classmethod
    def single(cls, service_rate, service_scv, ext_rate, ext_scv, slo,
               max_cores=10 ** 6, core_budget=10 ** 6, **kw) -> "EntityModel":
        return cls(["E"], [[0.0]], [ext_rate], [ext_scv], [service_rate], [service_scv],
                   [max_cores], slo, core_budget, **kw)

    def scaled(self, ext_rate: float, ext_scv: float | None = None) -> "EntityModel":
        """Copy with the total external rate set to ``ext_rate`` (same mix)."""
        if self.total_ext <= 0 and not self.visits.any():
            raise ValueError("model has no external arrival pattern to rescale")
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        mix = self.ext_rate / self.total_ext if self.total_ext > 0 else self._mix
        new._mix = mix
        new.ext_rate = mix * float(ext_rate)
        new.rates = self.visits * float(ext_rate)
        new.total_ext = float(ext_rate)
        if ext_scv is not None:
            new.ext_scv = np.where(mix > 0, float(ext_scv), self.ext_scv)
        return new

    @property
    def visit_ratios(self) -> np.ndarray:
        return self.visits

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def total(self, per_entity: np.ndarray) -> np.ndarray:
        return per_entity.sum(axis=-1)

    def fork_pairs(self) -> list:
        """(branch A entities, branch B entities) for every fork/join."""
        return []

    def zero_load_time(self) -> float:
        return float(self.total(self.visits / self.service_rate))

    def stability_cores(self) -> np.ndarray:
        """Fewest cores per entity that keep every instance strictly stable."""
        load = self.rates / self.service_rate
        m = np.ceil(load).astype(int)
        m = np.where(self.active & (load / np.maximum(m, 1) >= 1.0 - qna.STABILITY_MARGIN),
                     m + 1, m)
        return np.where(self.active, np.maximum(m, 1), 0)

    def allocation(self, cores) -> Allocation:
        return Allocation(self.names, tuple(int(c) for c in cores),
                          tuple(int(c) for c in self.max_cores))

    def _layout(self, cores):
        ent, per = [], []
        for e, (c, cap) in enumerate(zip(cores, self.max_cores)):
            split = balanced_split(int(c), int(cap))
            ent.extend([e] * len(split))
            per.extend(split)
        return np.array(ent, dtype=int), np.array(per, dtype=float)

    def _instance_arrays(self, ent, per, cores):
        """Instance-level rates and routing for a batch with one layout size."""
        share = per / cores[np.arange(len(cores))[:, None], ent]
        rate = self.rates[ent] * share
        ext_rate = self.ext_rate[ent] * share
        ext_scv = np.where(self.ext_rate[ent] > 0,
                           share * self.ext_scv[ent] + 1.0 - share, 1.0)
        routing = self.routing[ent[:, :, None], ent[:, None, :]] * share[:, None, :]
        return rate, ext_rate, ext_scv, routing

    def evaluate_many(self, cores_batch):
        """Overall and per-entity times for a batch of core vectors.

        Unstable allocations yield ``inf``.  Candidates are grouped by their
        instance count so each group is solved without padding, which keeps
        every result identical to evaluating it alone.
        """
        cores_batch = np.atleast_2d(np.asarray(cores_batch, dtype=int))
        n_cand, n_ent = cores_batch.shape
        per_entity = np.full((n_cand, n_ent), np.inf)
        layouts = [self._layout(c) for c in cores_batch]
        groups: dict[int, list[int]] = {}
        for i, (ent, _) in enumerate(layouts):
            groups.setdefault(len(ent), []).append(i)
        for _, members in sorted(groups.items()):
            ent = np.stack([layouts[i][0] for i in members])
            per = np.stack([layouts[i][1] for i in members])
            cores = cores_batch[members].astype(float)
            per_entity[members] = self._solve_group(ent, per, cores)
        return self.total(per_entity), per_entity

    def _solve_group(self, ent, per, cores):
        n_cand, n_ent = cores.shape
        out = np.zeros((n_cand, n_ent))
        missing = self.active[None, :] & (cores <= 0)
        if ent.shape[1] == 0:
            out[missing] = np.inf
            return out
        rate, ext_rate, ext_scv, routing = self._instance_arrays(ent, per, cores)
        mu = self.service_rate[ent]
        rho = rate / (per * mu)
        stable = ~np.any(rho >= 1.0 - qna.STABILITY_MARGIN, axis=1) & ~missing.any(axis=1)
        if not stable.any():
            out[:] = np.inf
            return out
        sel = np.flatnonzero(stable)
        a, b = qna.scv_system(rate[sel], ext_rate[sel], ext_scv[sel], routing[sel],
                              rho[sel], per[sel], self.service_scv[ent[sel]], self.variant)
        ca2, _ = qna.solve_scv_system(a, b)
        w = qna.node_waiting_times(rate[sel], mu[sel], per[sel], ca2,
                                   self.service_scv[ent[sel]], self.multi_server_beta)
        share = per[sel] / cores[sel][np.arange(len(sel))[:, None], ent[sel]]
        contrib = (w + 1.0 / mu[sel]) * self.visits[ent[sel]] * share
        rows = np.repeat(np.arange(len(sel)), ent.shape[1])
        acc = np.zeros((len(sel), n_ent))
        np.add.at(acc, (rows, ent[sel].ravel()), contrib.ravel())
        out[sel] = acc
        out[~stable] = np.inf
        return out

    def response_time(self, cores) -> float:
        return float(self.evaluate_many([cores])[0][0])

    def expand(self, cores) -> QueueingNetwork:
        """Instance-level network for an allocation (zero-core entities vanish)."""
        ent, per = self._layout(cores)
        rate, ext_rate, ext_scv, routing = self._instance_arrays(
            ent[None], per[None], np.asarray(cores, dtype=float)[None])
        labels = []
        for e in range(len(self.names)):
            k = int((ent == e).sum())
            labels.extend(f"{self.names[e]}#{j + 1}" for j in range(k))
        nodes = [QueueNode(int(c), float(self.service_rate[e]), float(self.service_scv[e]))
                 for e, c in zip(ent, per)]
        return QueueingNetwork(nodes, routing[0], ext_rate[0], ext_scv[0], labels)

    def evaluate(self, cores) -> Evaluation:
        """Full detail for one allocation; raises Unstable when it saturates."""
        cores = np.asarray(cores, dtype=int)
        starved = [self.names[e] for e in np.flatnonzero(self.active & (cores <= 0))]
        if starved:
            raise Unstable(f"no cores for loaded entities {', '.join(starved)}", starved)
        net = self.expand(cores)
        ent, per = self._layout(cores)
        rate = self.rates[ent] * per / cores[ent]
        rho = rate / (per * net.service_rate)
        bad = np.flatnonzero(rho >= 1.0 - qna.STABILITY_MARGIN)
        if bad.size:
            names = sorted({self.names[ent[k]] for k in bad})
            raise Unstable(f"utilization >= 1 at {', '.join(names)}", names)
        notes: list[str] = []
        ca2 = qna.solve_arrival_scvs(net, rate, per, self.variant, warnings_out=notes)
        w = qna.node_waiting_times(rate, net.service_rate, per, ca2, net.service_scv,
                                   self.multi_server_beta)
        flow = FlowSolution(rate, ca2, rho, w, w + 1.0 / net.service_rate, notes)
        per_entity = np.zeros(len(self.names))
        np.add.at(per_entity, ent, flow.node_time * self.visits[ent] * per / cores[ent])
        return Evaluation(float(self.total(per_entity)),
                          dict(zip(self.names, per_entity.tolist())), flow, net)


class NsosModel(EntityModel):
    """Entity model with the per-domain fork/join composition."""

    def __init__(self, scenario: NsosScenario, variant=CANONICAL, multi_server_beta=True):
        tm = entity_transition_matrix(scenario)
        ents = tm.entities
        go = tm.index(EntityId("GO"))
        ext_rate = np.zeros(len(ents))
        ext_rate[go] = 1.0
        ext_scv = np.ones(len(ents))
        ext_scv[go] = scenario.ext_scv
        kinds = [e.kind for e in ents]
        super().__init__(
            [e.label for e in ents], tm.routing, ext_rate, ext_scv,
            [scenario.service_rate[k] for k in kinds],
            [scenario.service_scv[k] for k in kinds],
            [scenario.max_cores_per_instance[k] for k in kinds],
            scenario.slo, scenario.core_budget, variant, multi_server_beta,
        )
        self._mix = ext_rate
        self.ext_rate = ext_rate * scenario.ext_rate
        self.rates = self.visits * scenario.ext_rate
        self.total_ext = float(scenario.ext_rate)
        self.scenario = scenario
        self.entity_ids = ents
        self.transition = tm
        plain = ["GO", "SAE", "RAE", "DSO"] + (["DSSDNC"] if scenario.sdnc_in_total else [])
        self._plain = np.array([i for i, e in enumerate(ents) if e.kind in plain], dtype=int)
        by = {e: i for i, e in enumerate(ents)}
        doms = range(1, scenario.domains + 1)
        self._branch_a = np.array([[by[EntityId("DSNFVO", d)], by[EntityId("DSVIM", d)]] for d in doms])
        self._branch_b = np.array([[by[EntityId("DSRRO", d)], by[EntityId("DSeNBs", d)]] for d in doms])

    def total(self, per_entity):
        per_entity = np.asarray(per_entity, dtype=float)
        plain = per_entity[..., self._plain].sum(axis=-1)
        a = per_entity[..., self._branch_a].sum(axis=-1)
        b = per_entity[..., self._branch_b].sum(axis=-1)
        return plain + np.maximum(a, b).sum(axis=-1)

    def fork_pairs(self):
        return [(tuple(a), tuple(b)) for a, b in zip(self._branch_a.tolist(),
                                                     self._branch_b.tolist())]

    def fork_join_times(self, per_entity) -> np.ndarray:
        per_entity = np.asarray(per_entity, dtype=float)
        a = per_entity[..., self._branch_a].sum(axis=-1)
        b = per_entity[..., self._branch_b].sum(axis=-1)
        return np.maximum(a, b)

    def allocation_from_dict(self, cores: dict) -> Allocation:
        unknown = set(cores) - set(self.names)
        if unknown:
            raise ValueError(f"unknown entities in allocation: {sorted(unknown)}")
        return self.allocation([int(cores.get(n, 0)) for n in self.names])


@dataclass
class ResponseTime:
    T: float
    per_entity_T: dict
    per_node: FlowSolution
    network: QueueingNetwork
    fork_join: dict = field(default_factory=dict)


def as_model(target, **kw) -> EntityModel:
    if isinstance(target, EntityModel):
        return target
    if isinstance(target, NsosScenario):
        return NsosModel(target, **kw)
    raise TypeError(f"expected NsosScenario or EntityModel, got {type(target).__name__}")


def expand_to_instances(model: EntityModel, allocation: Allocation) -> QueueingNetwork:
    return model.expand(allocation.cores)


def response_time(scenario, allocation: Allocation, **kw) -> ResponseTime:
    model = as_model(scenario, **kw)
    ev = model.evaluate(allocation.cores)
    fj = {}
    if isinstance(model, NsosModel):
        per = np.array([ev.per_entity[n] for n in model.names])
        fj = {d + 1: float(t) for d, t in enumerate(model.fork_join_times(per))}
    return ResponseTime(ev.T, ev.per_entity, ev.flow, ev.network, fj)
