"""Open networks of G/G/m queues solved with the QNA decomposition.

Each node is treated as an independent G/G/m queue described by the first two
moments of its aggregated arrival process and of its service process.  Mean
rates come from the flow-balance equations, arrival SCVs from Whitt's linear
system, and waiting times from Kraemer/Langenbach-Belz (one server) or
Allen-Cunneen (several servers).

The batched helpers (``scv_system``, ``solve_scv_system``,
``node_waiting_times``) accept arrays with arbitrary leading batch dimensions,
so many candidate networks of the same size can be analyzed in one call.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import OutOfDomain, SingularRouting, SingularScvSystem, Unstable

log = logging.getLogger(__name__)

# rho >= 1 - STABILITY_MARGIN counts as unstable
STABILITY_MARGIN = 1e-6

CANONICAL = "canonical"
LITERAL = "literal"
VARIANTS = (CANONICAL, LITERAL)


@dataclass(frozen=True)
class QueueNode:
    servers: int
    service_rate: float
    service_scv: float

    def __post_init__(self):
        if int(self.servers) != self.servers or self.servers < 1:
            raise ValueError(f"servers must be a positive integer, got {self.servers}")
        if not self.service_rate > 0:
            raise ValueError(f"service_rate must be > 0, got {self.service_rate}")
        if not self.service_scv >= 0:
            raise ValueError(f"service_scv must be >= 0, got {self.service_scv}")


@dataclass
class QueueingNetwork:
    """K nodes, a KxK flow-split matrix and per-node external arrivals.

    ``routing[k, i]`` is the mean number of messages sent to node i per
    message processed at node k.  Rows may sum to more than one at fork
    points; everywhere else ``1 - row sum`` is the exit probability.
    """

    nodes: Sequence[QueueNode]
    routing: np.ndarray
    ext_rate: np.ndarray
    ext_scv: np.ndarray
    labels: Sequence[str] | None = None

    def __post_init__(self):
        self.nodes = tuple(self.nodes)
        k = len(self.nodes)
        self.routing = np.asarray(self.routing, dtype=float).reshape(k, k)
        self.ext_rate = np.asarray(self.ext_rate, dtype=float).reshape(k)
        self.ext_scv = np.asarray(self.ext_scv, dtype=float).reshape(k)
        if np.any(self.routing < 0):
            raise ValueError("routing entries must be nonnegative")
        if np.any(self.ext_rate < 0) or np.any(self.ext_scv < 0):
            raise ValueError("external rates and SCVs must be nonnegative")
        if self.labels is None:
            self.labels = tuple(str(i) for i in range(k))
        else:
            self.labels = tuple(self.labels)
            if len(self.labels) != k:
                raise ValueError("one label per node is required")

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def servers(self) -> np.ndarray:
        return np.array([n.servers for n in self.nodes], dtype=float)

    @property
    def service_rate(self) -> np.ndarray:
        return np.array([n.service_rate for n in self.nodes], dtype=float)

    @property
    def service_scv(self) -> np.ndarray:
        return np.array([n.service_scv for n in self.nodes], dtype=float)

    @property
    def exit_prob(self) -> np.ndarray:
        return np.clip(1.0 - self.routing.sum(axis=1), 0.0, None)


@dataclass
class FlowSolution:
    rate: np.ndarray
    arrival_scv: np.ndarray
    utilization: np.ndarray
    waiting: np.ndarray
    node_time: np.ndarray
    warnings: list[str] = field(default_factory=list)


def flow_rates(routing, ext_rate) -> np.ndarray:
    """Solve lambda = lambda_0 + P^T lambda for a single network."""
    routing = np.asarray(routing, dtype=float)
    ext_rate = np.asarray(ext_rate, dtype=float)
    k = len(ext_rate)
    if k == 0:
        return np.zeros(0)
    radius = np.max(np.abs(np.linalg.eigvals(routing)))
    if radius >= 1.0 - 1e-12:
        raise SingularRouting(
            f"spectral radius of the routing matrix is {radius:.6g}; messages never leave"
        )
    try:
        lam = np.linalg.solve(np.eye(k) - routing.T, ext_rate)
    except np.linalg.LinAlgError as exc:
        raise SingularRouting(str(exc)) from exc
    scale = max(1.0, float(np.max(np.abs(lam))))
    if np.any(lam < -1e-12 * scale):
        raise SingularRouting("flow-balance solution has negative rates")
    return np.clip(lam, 0.0, None)


def solve_traffic_rates(net: QueueingNetwork) -> np.ndarray:
    return flow_rates(net.routing, net.ext_rate)


def scv_system(rate, ext_rate, ext_scv, routing, rho, servers, service_scv,
               variant=CANONICAL):
    """Coefficients of c_a^2 = a + B^T c_a^2, with ``b[..., i, k] = b_ik``.

    The canonical variant follows Whitt's QNA.  The literal variant keeps the
    formula as sometimes transcribed: the superposition weight multiplies only
    the external term, b_ik uses the downstream utilization and the weight is
    1 + 4(1-rho)^2 / (gamma - 1) with gamma the plain sum of squared
    proportions (taken as 1 when gamma == 1, where it is undefined).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rate = np.asarray(rate, dtype=float)
    routing = np.asarray(routing, dtype=float)
    busy = rate > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        col_rate = rate[..., None, :]
        q = np.where(col_rate > 0, rate[..., :, None] * routing / col_rate, 0.0)
        q0 = np.where(busy, ext_rate / rate, 0.0)
        x = 1.0 + (np.maximum(service_scv, 0.2) - 1.0) / np.sqrt(servers)
        gamma = q0 ** 2 + (q ** 2).sum(axis=-2)
        rho_up2 = (rho ** 2)[..., :, None]
        split = q * ((1.0 - routing) + routing * rho_up2 * x[..., :, None])
        if variant == CANONICAL:
            w = np.where(busy, 1.0 / (1.0 + 4.0 * (1.0 - rho) ** 2 * (1.0 / gamma - 1.0)), 1.0)
            a = 1.0 + w * (q0 * ext_scv - 1.0 + split.sum(axis=-2))
            b = w[..., None, :] * q * routing * (1.0 - rho_up2)
        else:
            denom = gamma - 1.0
            w = np.where(busy & (np.abs(denom) > 1e-12),
                         1.0 + 4.0 * (1.0 - rho) ** 2 / denom, 1.0)
            a = 1.0 + w * (q0 * ext_scv - 1.0) + split.sum(axis=-2)
            b = w[..., None, :] * q * routing * (1.0 - (rho ** 2)[..., None, :])
    a = np.where(busy, a, 1.0)
    b = np.where(busy[..., None, :], b, 0.0)
    return a, b


def solve_scv_system(a, b):
    """Solve c = a + B^T c; returns (c clamped at zero, clamped mask)."""
    k = a.shape[-1]
    lhs = np.eye(k) - np.swapaxes(b, -1, -2)
    try:
        c = np.linalg.solve(lhs, a[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularScvSystem(str(exc)) from exc
    if not np.all(np.isfinite(c)):
        raise SingularScvSystem("non-finite arrival SCVs")
    clamped = c < 0
    return np.where(clamped, 0.0, c), clamped


def solve_arrival_scvs(net: QueueingNetwork, rate, servers=None, variant=CANONICAL,
                       warnings_out: list | None = None) -> np.ndarray:
    rate = np.asarray(rate, dtype=float)
    servers = net.servers if servers is None else np.asarray(servers, dtype=float)
    rho = utilization(rate, net.service_rate, servers)
    _check_stable(rho, net.labels)
    a, b = scv_system(rate, net.ext_rate, net.ext_scv, net.routing, rho, servers,
                      net.service_scv, variant)
    c, clamped = solve_scv_system(a, b)
    if clamped.any():
        msg = "clamped negative arrival SCV at nodes " + ", ".join(
            net.labels[i] for i in np.flatnonzero(clamped))
        log.warning(msg)
        if warnings_out is not None:
            warnings_out.append(msg)
    return c


def utilization(rate, service_rate, servers):
    return np.asarray(rate) / (np.asarray(service_rate) * np.asarray(servers))


def _check_stable(rho, labels):
    bad = np.flatnonzero(rho >= 1.0 - STABILITY_MARGIN)
    if bad.size:
        names = [labels[i] for i in bad]
        raise Unstable(f"utilization >= 1 at {', '.join(names)}", names)


def erlang_c(m: int, rho: float) -> float:
    """Probability of waiting in an M/M/m queue with per-server load rho.

    Uses the Erlang-B recurrence, which avoids factorials.
    """
    if int(m) != m or m < 1:
        raise OutOfDomain(f"m must be a positive integer, got {m}")
    if not 0 <= rho < 1:
        raise OutOfDomain(f"rho must lie in [0, 1), got {rho}")
    load = m * rho
    b = 1.0
    for k in range(1, int(m) + 1):
        b = load * b / (k + load * b)
    return b / (1.0 - rho * (1.0 - b))


def _erlang_c_array(m, rho):
    m = np.asarray(m)
    rho = np.asarray(rho, dtype=float)
    load = m * rho
    b = np.ones(np.broadcast(m, rho).shape)
    top = int(np.max(m)) if m.size else 0
    for k in range(1, top + 1):
        b = np.where(k <= m, load * b / (k + load * b), b)
    return b / (1.0 - rho * (1.0 - b))


def klb_beta(rho, ca2, cs2):
    """Kraemer/Langenbach-Belz correction factor; 1 when c_a^2 >= 1."""
    rho = np.asarray(rho, dtype=float)
    ca2 = np.asarray(ca2, dtype=float)
    cs2 = np.asarray(cs2, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        expo = -2.0 * (1.0 - rho) * (1.0 - ca2) ** 2 / (3.0 * rho * (ca2 + cs2))
        beta = np.exp(expo)
    beta = np.where(np.isnan(beta), 0.0, beta)
    return np.where(ca2 < 1.0, beta, 1.0)


def waiting_time_single(lam, mu, ca2, cs2) -> float:
    rho = lam / mu
    if rho >= 1.0 - STABILITY_MARGIN:
        raise Unstable(f"rho={rho:.6g} >= 1")
    if rho == 0:
        return 0.0
    beta = float(klb_beta(rho, ca2, cs2))
    return rho * (ca2 + cs2) * beta / (2.0 * mu * (1.0 - rho))


def waiting_time_mmm(lam, mu, m) -> float:
    rho = lam / (m * mu)
    if rho >= 1.0 - STABILITY_MARGIN:
        raise Unstable(f"rho={rho:.6g} >= 1")
    return erlang_c(m, rho) / (m * mu - lam)


def waiting_time_multi(lam, mu, m, ca2, cs2, beta_correction=False) -> float:
    """Allen-Cunneen: ((c_a^2 + c_s^2) / 2) * W(M/M/m).

    With ``beta_correction`` the KLB factor (at per-server utilization) is
    applied as well; see ``node_waiting_times``.
    """
    w = 0.5 * (ca2 + cs2) * waiting_time_mmm(lam, mu, m)
    if beta_correction:
        w *= float(klb_beta(lam / (m * mu), ca2, cs2))
    return w


def node_waiting_times(rate, service_rate, servers, ca2, cs2, multi_server_beta=True):
    """Vectorized mean queueing delay for every node (caller checks stability).

    Single-server nodes use KLB.  Multi-server nodes use Allen-Cunneen; by
    default they also get the KLB factor, which keeps the delay non-increasing
    in the server count when c_a^2 < 1 (plain Allen-Cunneen can exceed the
    one-server KLB value there).
    """
    rate = np.asarray(rate, dtype=float)
    mu = np.asarray(service_rate, dtype=float)
    m = np.asarray(servers)
    rho = rate / (m * mu)
    beta = klb_beta(rho, ca2, cs2)
    scale = 0.5 * (np.asarray(ca2) + np.asarray(cs2))
    with np.errstate(divide="ignore", invalid="ignore"):
        single = rho * scale * beta / (mu * (1.0 - rho))
        multi = scale * _erlang_c_array(m, rho) / (m * mu - rate)
    if multi_server_beta:
        multi = multi * beta
    w = np.where(m <= 1, single, multi)
    return np.where(rate > 0, w, 0.0)


def analyze_network(net: QueueingNetwork, variant=CANONICAL, multi_server_beta=True) -> FlowSolution:
    rate = solve_traffic_rates(net)
    servers = net.servers
    mu = net.service_rate
    rho = utilization(rate, mu, servers)
    notes: list[str] = []
    ca2 = solve_arrival_scvs(net, rate, servers, variant, warnings_out=notes)
    w = node_waiting_times(rate, mu, servers, ca2, net.service_scv, multi_server_beta)
    return FlowSolution(rate=rate, arrival_scv=ca2, utilization=rho, waiting=w,
                        node_time=w + 1.0 / mu, warnings=notes)

