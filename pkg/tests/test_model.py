import json
from collections import Counter

import numpy as np
import pytest

from nsos.errors import Unstable
from nsos.model import (DOMAIN_KINDS, KINDS, EntityId, EntityModel, Fork, NsosModel,
                        NsosScenario, balanced_split, call_flow, entities, entity_transition_matrix,
                        response_time, visit_ratios)
from nsos.qna import flow_rates, waiting_time_mmm, waiting_time_single


def flow_visits(scenario, domain):
    """Count service steps in the per-domain call flow, forks included."""
    counts = Counter()
    for step in call_flow(scenario, domain):
        if isinstance(step, Fork):
            for branch in step.branches:
                counts.update(branch)
        else:
            counts[step] += 1
    return counts


@pytest.mark.parametrize("domains,shares", [(1, None), (2, [0.3, 0.7]), (3, None)])
@pytest.mark.parametrize("rae", [False, True])
def test_visit_ratios_match_flow_equations(domains, shares, rae):
    s = NsosScenario(domains=domains, shares=shares, rae_in_flow=rae)
    tm = entity_transition_matrix(s)
    ext = np.zeros(len(tm.entities))
    ext[tm.index(EntityId("GO"))] = 1.0
    lam = flow_rates(tm.routing, ext)
    v = visit_ratios(s)
    for e, rate in zip(tm.entities, lam):
        assert rate == pytest.approx(v[e], abs=1e-12), e


@pytest.mark.parametrize("rae", [False, True])
def test_call_flow_counts_equal_visit_ratios(rae):
    s = NsosScenario(domains=2, shares=[0.25, 0.75], rae_in_flow=rae)
    v = visit_ratios(s)
    total = Counter()
    for d, alpha in enumerate(s.shares, start=1):
        for e, k in flow_visits(s, d).items():
            total[e] += alpha * k
    for e in entities(s):
        assert total.get(e, 0.0) == pytest.approx(v[e])


def test_transition_rows():
    tm = entity_transition_matrix(NsosScenario())
    rows = dict(zip((e.label for e in tm.entities), tm.routing.sum(axis=1)))
    assert rows["DSO_1"] == pytest.approx(4 / 3)
    assert rows["SAE"] == rows["DSVIM_1"] == rows["DSeNBs_1"] == 1.0
    # replies from the radio branch end at the join
    assert rows["DSRRO_1"] == pytest.approx(0.5)
    assert tm.exit[tm.index(EntityId("GO"))] == pytest.approx(1 / 3)


@pytest.mark.parametrize("label", ["GO", "SAE", "DSO_1", "DSeNBs_12"])
def test_entity_label_roundtrip(label):
    assert EntityId.parse(label).label == label


@pytest.mark.parametrize("label", ["XX", "DSO", "GO_1", "DSO_x"])
def test_entity_label_rejects(label):
    with pytest.raises(ValueError):
        EntityId.parse(label).validate(2)


@pytest.mark.parametrize("cores,cap,expect", [(0, 4, ()), (4, 4, (4,)), (5, 4, (3, 2)),
                                              (9, 4, (3, 3, 3)), (7, 1, (1,) * 7)])
def test_balanced_split(cores, cap, expect):
    assert balanced_split(cores, cap) == expect


def test_scenario_roundtrip(tmp_path):
    rates = {k: 10000.0 for k in KINDS}
    rates["GO"] = 5000.0
    s = NsosScenario(domains=2, shares=[0.4, 0.6], service_rate=rates, slo=3e-3)
    path = tmp_path / "s.json"
    s.save(path)
    again = NsosScenario.load(path)
    assert again.to_dict() == s.to_dict()
    assert again.service_rate["GO"] == 5000.0
    assert again.service_rate["DSO"] == 10000.0


@pytest.mark.parametrize("bad", [{"bogus": 1}, {"domains": 0},
                                 {"shares": [0.5, 0.6], "domains": 2}, {"slo": -1.0},
                                 {"service_rate": {"GO": 1.0}}])
def test_scenario_rejects(bad):
    with pytest.raises((TypeError, ValueError)):
        NsosScenario.from_dict(bad)


def test_bundled_scenarios_load():
    from importlib import resources
    for name in ("scenario_base.json", "scenario_desk.json"):
        data = json.loads((resources.files("nsos") / "data" / name).read_text())
        NsosScenario.from_dict(data)


def test_single_entity_model_matches_closed_forms():
    m = EntityModel.single(10.0, 1.0, 7.0, 1.0, slo=1.0, max_cores=1)
    assert m.response_time([1]) == pytest.approx(1 / (10.0 - 7.0), rel=1e-12)
    # one instance with three cores is M/M/3
    m3 = EntityModel.single(10.0, 1.0, 25.0, 1.0, slo=1.0)
    assert m3.response_time([3]) == pytest.approx(waiting_time_mmm(25.0, 10.0, 3) + 0.1,
                                                  rel=1e-12)


def test_instances_split_poisson_traffic():
    # three single-core instances each see a thinned Poisson stream
    m = EntityModel.single(10.0, 1.0, 24.0, 1.0, slo=1.0, max_cores=1)
    assert m.response_time([3]) == pytest.approx(waiting_time_single(8.0, 10.0, 1.0, 1.0) + 0.1,
                                                 rel=1e-12)
    net = m.expand([3])
    assert net.labels == ("E#1", "E#2", "E#3")
    np.testing.assert_allclose(net.ext_scv, 1.0)


def test_zero_load_time():
    s = NsosScenario()
    model = NsosModel(s.with_arrivals(0.0))
    cores = NsosModel(s).stability_cores()
    # D=1: GO 3, SAE 1, DSO 3, max(NFVO 2 + VIM 1, RRO 2 + eNBs 1), SDNC 1
    assert model.zero_load_time() == pytest.approx(11 / 10000)
    assert model.response_time(cores) == pytest.approx(11 / 10000)


def test_stability_cores_are_minimal():
    model = NsosModel(NsosScenario(ext_rate=5000))
    m0 = model.stability_cores()
    assert np.isfinite(model.response_time(m0))
    for e in np.flatnonzero(m0 > 0):
        fewer = m0.copy()
        fewer[e] -= 1
        assert not np.isfinite(model.response_time(fewer))
    assert m0[model.names.index("RAE")] == 0


def test_stability_bumps_exact_integer_load():
    # GO carries exactly 3 cores of work at 10000 SOR/s
    model = NsosModel(NsosScenario(ext_rate=10000))
    assert model.stability_cores()[model.names.index("GO")] == 4


def test_evaluate_reports_saturated_entities():
    model = NsosModel(NsosScenario(ext_rate=5000))
    cores = model.stability_cores()
    cores[model.names.index("DSO_1")] -= 1
    with pytest.raises(Unstable) as info:
        model.evaluate(cores)
    assert "DSO_1" in info.value.nodes


def test_evaluate_agrees_with_batch():
    model = NsosModel(NsosScenario(domains=2, ext_rate=8000))
    cores = model.stability_cores() + 1
    ev = model.evaluate(cores)
    T, per = model.evaluate_many([cores, cores + 1])
    assert ev.T == pytest.approx(T[0], rel=1e-12)
    np.testing.assert_allclose([ev.per_entity[n] for n in model.names], per[0], rtol=1e-12)
    assert T[1] < T[0]


def test_fork_join_is_max_of_branches():
    model = NsosModel(NsosScenario(ext_rate=5000))
    cores = model.stability_cores()
    rt = response_time(model, model.allocation(cores))
    per = rt.per_entity_T
    a = per["DSNFVO_1"] + per["DSVIM_1"]
    b = per["DSRRO_1"] + per["DSeNBs_1"]
    assert rt.fork_join[1] == pytest.approx(max(a, b))
    plain = sum(per[n] for n in ("GO", "SAE", "RAE", "DSO_1", "DSSDNC_1"))
    assert rt.T == pytest.approx(plain + max(a, b))


def test_sdnc_can_be_left_out_of_total():
    base = NsosScenario(ext_rate=5000)
    cores = NsosModel(base).stability_cores()
    with_sdnc = NsosModel(base).response_time(cores)
    without = NsosModel(NsosScenario(ext_rate=5000, sdnc_in_total=False)).response_time(cores)
    assert without < with_sdnc


def test_allocation_from_dict():
    model = NsosModel(NsosScenario(domains=2))
    alloc = model.allocation_from_dict({"GO": 3, "DSO_2": 2})
    assert alloc.as_dict()["DSO_2"] == 2 and alloc.total_cores == 5
    with pytest.raises(ValueError):
        model.allocation_from_dict({"DSO_3": 1})


def test_domain_kinds_per_domain():
    s = NsosScenario(domains=3)
    labels = [e.label for e in entities(s)]
    assert len(labels) == 3 + 3 * len(DOMAIN_KINDS)
