"""Minimum-core dimensioning: greedy marginal allocation and exhaustive search."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import TooLarge, ZeroLoadInfeasible
from .model import Allocation, EntityModel, as_model

log = logging.getLogger(__name__)

MAX_BRUTEFORCE_CHECKS = 10 ** 7
_CHUNK = 4096


@dataclass
class DimensioningResult:
    allocation: Allocation
    predicted_T: float
    total_cores: int
    model_evaluations: int
    feasible: bool
    initial_cores: int = 0
    iterations: int = 0
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "allocation": self.allocation.as_dict(),
            "instances": dict(zip(self.allocation.names, self.allocation.instances)),
            "predicted_T": self.predicted_T,
            "total_cores": self.total_cores,
            "initial_cores": self.initial_cores,
            "iterations": self.iterations,
            "model_evaluations": self.model_evaluations,
            "feasible": self.feasible,
        }


def _check_zero_load(model: EntityModel):
    t0 = model.zero_load_time()
    if model.slo <= t0:
        raise ZeroLoadInfeasible(
            f"T_max={model.slo:.6g}s does not exceed the zero-load response time {t0:.6g}s")


PAIRED, ENTITY, TOTAL = "paired", "entity", "total"
SELECTIONS = (PAIRED, ENTITY, TOTAL)


def _paired_moves(model, active, T, per, cand_T, cand_per):
    """Single-core moves plus one-core-per-branch moves across each fork/join.

    A core on one branch of a tied fork/join leaves the max unchanged, so
    its value only shows when the competing branch is sped up too.  Pair
    times are composed from the single-core evaluations: the candidate of
    ``e`` with ``f``'s own time taken from the candidate of ``f``.
    """
    pos = {int(e): i for i, e in enumerate(active)}
    moves = [((i,), float(cand_T[i])) for i in range(len(active))]
    for branch_a, branch_b in model.fork_pairs():
        for e in branch_a:
            for f in branch_b:
                if e in pos and f in pos:
                    comp = cand_per[pos[e]].copy()
                    comp[f] = cand_per[pos[f], f]
                    moves.append(((pos[e], pos[f]), float(model.total(comp))))
    return moves


def _choose_paired(moves, T, slo):
    """Fewest cores that meet the SLO outright, else the best gain per core."""
    for size in (1, 2):
        done = [(t, k) for k, (idx, t) in enumerate(moves) if len(idx) == size and t <= slo]
        if done:
            return moves[min(done)[1]][0]
    rate = np.array([(T - t) / len(idx) for idx, t in moves])
    best = float(rate.max())
    if not best > 0:
        return None
    return moves[int(np.flatnonzero(rate >= best - 1e-12 * abs(T))[0])][0]


def dimension_heuristic(target, selection: str = PAIRED, incremental: bool = False,
                        **model_kw) -> DimensioningResult:
    """Greedy marginal allocation of cores.

    Starts from the stability allocation and adds cores until T <= T_max or
    the budget is spent.  Each round evaluates one extra core on every loaded
    entity and commits a move:

    * ``"paired"`` (default): moves are single cores or one core on each
      branch of a fork/join; a move that meets T_max with the fewest cores
      wins, otherwise the largest drop in T per core.
    * ``"entity"``: the single core whose entity's own time drops most.
    * ``"total"``: the single core whose composed T drops most; this stalls
      when the two fork/join branches are tied.

    When no move lowers T, one round of two-core jumps on a single entity is
    tried before giving up; this crosses instance boundaries where a single
    extra core makes the balanced layout slower.

    T is recomputed in full after each commit unless ``incremental`` is set,
    in which case it is updated from the chosen entity's own time change.
    ``iterations`` counts committed cores, so it equals M* - M_0.
    """
    if selection not in SELECTIONS:
        raise ValueError(f"selection must be one of {SELECTIONS}")
    model = as_model(target, **model_kw)
    _check_zero_load(model)
    cores = model.stability_cores()
    active = np.flatnonzero(model.active)
    rows = np.arange(len(active))
    T_vec, per = model.evaluate_many([cores])
    T, per = float(T_vec[0]), per[0]
    evaluations = 1
    m0 = int(cores.sum())
    trace = [(m0, T)]

    def stop(feasible):
        alloc = model.allocation(cores)
        return DimensioningResult(alloc, T, alloc.total_cores, evaluations, feasible,
                                  m0, alloc.total_cores - m0, trace)

    while T > model.slo and cores.sum() < model.core_budget:
        cand = np.repeat(cores[None], len(active), axis=0)
        cand[rows, active] += 1
        cand_T, cand_per = model.evaluate_many(cand)
        evaluations += len(active)
        own_gain = per[active] - cand_per[rows, active]
        if selection == PAIRED:
            moves = _paired_moves(model, active, T, per, cand_T, cand_per)
            if cores.sum() + 2 > model.core_budget:
                moves = [m for m in moves if len(m[0]) == 1]
            pick = _choose_paired(moves, T, model.slo)
        else:
            gain = own_gain if selection == ENTITY else T - cand_T
            best = float(gain.max())
            scale = abs(T) if selection == TOTAL else float(np.abs(per[active]).max())
            pick = None
            if best > 0:
                pick = (int(np.flatnonzero(gain >= best - 1e-12 * scale)[0]),)
        if pick is None and cores.sum() + 2 <= model.core_budget:
            # stalled at an instance boundary: try two cores on one entity,
            # which opens the next instance with a balanced split
            jump = np.repeat(cores[None], len(active), axis=0)
            jump[rows, active] += 2
            jump_T, jump_per = model.evaluate_many(jump)
            evaluations += len(active)
            best = int(np.argmin(jump_T))
            if jump_T[best] < T:
                cores, T, per = jump[best], float(jump_T[best]), jump_per[best]
                trace.append((int(cores.sum()), T))
                continue
        if pick is None:
            log.info("no move lowers T; stopping at M=%d", cores.sum())
            return stop(False)
        if len(pick) == 1:
            cores = cand[pick[0]]
            T = T - own_gain[pick[0]] if incremental else float(cand_T[pick[0]])
            per = cand_per[pick[0]]
        else:
            cores = cores.copy()
            cores[active[list(pick)]] += 1
            T_vec, per_new = model.evaluate_many([cores])
            evaluations += 1
            T = T - own_gain[list(pick)].sum() if incremental else float(T_vec[0])
            per = per_new[0]
        trace.append((int(cores.sum()), T))
    return stop(T <= model.slo and cores.sum() <= model.core_budget)


def bruteforce_check_count(n_entities: int, m0: int, m_star: int) -> int:
    """Weak compositions examined when scanning from M_0 up to M*.

    Python integers are unbounded, so the count is exact for any input.
    """
    if n_entities < 1 or m_star < m0:
        raise ValueError("need n_entities >= 1 and m_star >= m0")
    return sum(math.comb(n_entities + k - 1, k) for k in range(m_star - m0 + 1))


def weak_compositions(total: int, parts: int) -> np.ndarray:
    """All weak compositions of ``total`` into ``parts`` parts, in lexicographic order."""
    if parts == 1:
        return np.array([[total]], dtype=int)
    rows = []
    # stars and bars: choose positions of the parts-1 bars among total+parts-1 slots
    for bars in combinations(range(total + parts - 1), parts - 1):
        edges = (-1,) + bars + (total + parts - 1,)
        rows.append([edges[i + 1] - edges[i] - 1 for i in range(parts)])
    return np.array(rows, dtype=int)


def dimension_bruteforce(target, max_checks: int = MAX_BRUTEFORCE_CHECKS,
                         **model_kw) -> DimensioningResult:
    """Exhaustive search over extra-core compositions in increasing total.

    Ties on T at the first feasible total are broken by the lexicographically
    smallest composition.
    """
    model = as_model(target, **model_kw)
    _check_zero_load(model)
    base = model.stability_cores()
    active = np.flatnonzero(model.active)
    m0 = int(base.sum())
    guide = dimension_heuristic(model)
    if guide.feasible:
        # the optimum can be no larger than the heuristic's total
        estimate = bruteforce_check_count(len(active), m0, guide.total_cores)
        if estimate > max_checks:
            raise TooLarge(f"exhaustive search needs about {estimate} checks (> {max_checks})",
                           estimate)
    checks = 0
    best_T, best_row = math.inf, base
    for extra in range(0, model.core_budget - m0 + 1):
        level = math.comb(len(active) + extra - 1, extra)
        if checks + level > max_checks:
            raise TooLarge(f"exhaustive search needs more than {max_checks} checks "
                           f"(level M={m0 + extra} alone has {level})", checks + level)
        comps = weak_compositions(extra, len(active))
        comps = comps[np.lexsort(comps.T[::-1])]
        level_T, level_row = math.inf, None
        for start in range(0, len(comps), _CHUNK):
            block = comps[start:start + _CHUNK]
            cand = np.repeat(base[None], len(block), axis=0)
            cand[:, active] += block
            T, _ = model.evaluate_many(cand)
            checks += len(block)
            i = int(np.argmin(T))  # first minimum keeps the lexicographic tie-break
            if T[i] < level_T:
                level_T, level_row = float(T[i]), cand[i]
        best_T, best_row = level_T, level_row
        if best_T <= model.slo:
            alloc = model.allocation(best_row)
            return DimensioningResult(alloc, best_T, alloc.total_cores, checks, True,
                                      m0, extra)
    alloc = model.allocation(best_row)
    return DimensioningResult(alloc, best_T, alloc.total_cores, checks, False, m0,
                              model.core_budget - m0)


def max_sustainable_rate(target, allocation: Allocation, rel_tol: float = 1e-4,
                         **model_kw) -> tuple[float, float]:
    """Largest external rate the allocation serves within T_max.

    Returns ``(rate, stability_bound)``; the bound is the rate at which the
    busiest entity saturates.
    """
    model = as_model(target, **model_kw)
    cores = np.asarray(allocation.cores, dtype=int)
    v = model.visit_ratios
    loaded = v > 0
    if np.any(loaded & (cores <= 0)):
        return 0.0, 0.0
    bound = float(np.min(cores[loaded] * model.service_rate[loaded] / v[loaded]))

    def ok(rate):
        return model.scaled(rate).response_time(cores) <= model.slo

    if not ok(bound * 1e-9):
        return 0.0, bound
    lo, hi = 0.0, bound
    while hi - lo > rel_tol * max(lo, 1e-12 * bound):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo, bound
