import math

import numpy as np
import pytest

from nsos.errors import OutOfDomain, SingularRouting, Unstable
from nsos.qna import (CANONICAL, LITERAL, QueueingNetwork, QueueNode, analyze_network,
                      erlang_c, flow_rates, klb_beta, node_waiting_times, scv_system,
                      solve_scv_system, waiting_time_mmm, waiting_time_multi,
                      waiting_time_single)


def erlang_c_sum(m, rho):
    """Textbook factorial-sum form, used as an independent oracle."""
    a = m * rho
    head = sum(a ** k / math.factorial(k) for k in range(m))
    tail = a ** m / (math.factorial(m) * (1 - rho))
    return tail / (head + tail)


@pytest.mark.parametrize("m", [1, 2, 3, 5, 8, 16, 30])
@pytest.mark.parametrize("rho", [0.05, 0.3, 0.6, 0.9, 0.99])
def test_erlang_c_matches_factorial_sum(m, rho):
    assert erlang_c(m, rho) == pytest.approx(erlang_c_sum(m, rho), rel=1e-12)


def test_erlang_c_single_server_is_rho():
    for rho in np.linspace(0.0, 0.95, 20):
        assert erlang_c(1, rho) == pytest.approx(rho, abs=1e-15)


@pytest.mark.parametrize("m,rho", [(0, 0.5), (2, 1.0), (2, -0.1), (1.5, 0.3)])
def test_erlang_c_domain(m, rho):
    with pytest.raises(OutOfDomain):
        erlang_c(m, rho)


@pytest.mark.parametrize("lam,mu", [(1.0, 2.0), (900.0, 1000.0), (3.0, 10.0)])
def test_mm1_closed_form(lam, mu):
    rho = lam / mu
    assert waiting_time_single(lam, mu, 1.0, 1.0) == pytest.approx(rho / (mu - lam), rel=1e-12)


@pytest.mark.parametrize("lam,mu", [(1.0, 2.0), (900.0, 1000.0)])
def test_md1_closed_form(lam, mu):
    rho = lam / mu
    assert waiting_time_single(lam, mu, 1.0, 0.0) == pytest.approx(
        rho / (2 * mu * (1 - rho)), rel=1e-12)


@pytest.mark.parametrize("m", [1, 2, 4, 10])
def test_multi_with_poisson_exponential_is_mmm(m):
    lam, mu = 0.8 * m * 5.0, 5.0
    w = waiting_time_multi(lam, mu, m, 1.0, 1.0)
    assert w == pytest.approx(erlang_c_sum(m, 0.8) / (m * mu - lam), rel=1e-12)


def test_klb_beta_is_one_for_bursty_arrivals():
    assert np.all(klb_beta(np.array([0.2, 0.7]), np.array([1.0, 3.0]), 0.5) == 1.0)
    assert 0 < float(klb_beta(0.5, 0.5, 0.5)) < 1


def test_unstable_single():
    with pytest.raises(Unstable):
        waiting_time_single(1.0, 1.0, 1.0, 1.0)
    with pytest.raises(Unstable):
        waiting_time_mmm(4.0, 1.0, 4)


def test_plain_allen_cunneen_can_increase_with_servers():
    # smooth arrivals: KLB at one server beats plain Allen-Cunneen at two
    w1 = waiting_time_single(0.3, 1.0, 0.1, 0.0)
    w2 = waiting_time_multi(0.6, 1.0, 2, 0.1, 0.0)
    assert w2 > w1
    beta = node_waiting_times([0.3, 0.6], [1.0, 1.0], [1, 2], [0.1, 0.1], [0.0, 0.0])
    assert beta[1] <= beta[0]


def _tandem(k, lam, mus):
    routing = np.zeros((k, k))
    for i in range(k - 1):
        routing[i, i + 1] = 1.0
    ext = np.zeros(k)
    ext[0] = lam
    return QueueingNetwork([QueueNode(1, mu, 1.0) for mu in mus], routing, ext, np.ones(k))


def test_jackson_tandem_is_exact():
    mus = [5.0, 7.0, 4.5, 10.0]
    sol = analyze_network(_tandem(4, 3.0, mus))
    np.testing.assert_allclose(sol.arrival_scv, 1.0, rtol=1e-12)
    np.testing.assert_allclose(sol.rate, 3.0, rtol=1e-12)
    expect = np.array([3.0 / mu / (mu - 3.0) for mu in mus])
    np.testing.assert_allclose(sol.waiting, expect, rtol=1e-12)


def test_jackson_feedback_network_is_exact():
    # with Poisson input and exponential service, QNA keeps every SCV at 1
    routing = np.array([[0.0, 0.6, 0.2], [0.5, 0.0, 0.3], [0.1, 0.0, 0.0]])
    net = QueueingNetwork([QueueNode(1, 20.0, 1.0), QueueNode(2, 9.0, 1.0),
                           QueueNode(1, 12.0, 1.0)], routing, [3.0, 1.0, 0.5], [1.0] * 3)
    sol = analyze_network(net)
    np.testing.assert_allclose(sol.arrival_scv, 1.0, atol=1e-12)
    lam = np.linalg.solve(np.eye(3) - routing.T, [3.0, 1.0, 0.5])
    np.testing.assert_allclose(sol.rate, lam, rtol=1e-12)
    assert sol.waiting[1] == pytest.approx(waiting_time_mmm(lam[1], 9.0, 2), rel=1e-12)


def test_flow_rates_conservation():
    rng = np.random.default_rng(5)
    p = rng.uniform(0, 1, (6, 6))
    p /= p.sum(axis=1, keepdims=True) * 1.25
    ext = rng.uniform(0, 3, 6)
    lam = flow_rates(p, ext)
    np.testing.assert_allclose(lam, ext + p.T @ lam, rtol=1e-12)
    # everything that enters leaves
    assert float(lam @ (1 - p.sum(axis=1))) == pytest.approx(ext.sum(), rel=1e-12)


def test_flow_rates_singular():
    with pytest.raises(SingularRouting):
        flow_rates(np.array([[0.0, 1.0], [1.0, 0.0]]), [1.0, 0.0])


def test_literal_variant_differs_downstream():
    # the literal transcription uses the downstream utilization in b_ik
    net = _tandem(2, 3.0, [5.0, 4.0])
    assert analyze_network(net, LITERAL).arrival_scv[1] != pytest.approx(1.0)


def test_scv_system_solution():
    net = _tandem(3, 2.0, [4.0, 5.0, 6.0])
    rate = flow_rates(net.routing, net.ext_rate)
    rho = rate / net.service_rate
    a, b = scv_system(rate, net.ext_rate, np.array([2.0, 0.0, 0.0]), net.routing, rho,
                      net.servers, np.array([0.3, 0.5, 0.7]), CANONICAL)
    c, clamped = solve_scv_system(a, b)
    assert not clamped.any()
    np.testing.assert_allclose(c, a + b.T @ c, atol=1e-12)
    # departures of node 0 feed node 1 directly
    assert c[0] == pytest.approx(2.0)
    assert c[1] == pytest.approx(rho[0] ** 2 * 0.3 + (1 - rho[0] ** 2) * 2.0)
