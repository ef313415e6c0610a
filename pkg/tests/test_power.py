import math

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import phasor_power, ybus
from vlsos.poly import VarSpace
from vlsos.power import (
    DATA_DIR,
    EquilibriumError,
    NetworkError,
    NetworkModel,
    build_relative_system,
    electrical_power,
    ingest_network,
    network_from_dict,
    solve_equilibrium,
)
from vlsos.sim import Scenario, integrate, integrate_recast


def two_bus(r=0.0, x=0.5, P_M=0.6, P_D=0.6, E=(1.0, 1.0), H1=10.0):
    return {
        "frequency": 60.0,
        "generator_damping_ratio": 5.0,
        "reference": 1,
        "buses": [{"id": 1, "type": "generator", "E": E[0]}, {"id": 2, "type": "load", "E": E[1]}],
        "lines": [{"from": 1, "to": 2, "r": r, "x": x}],
        "generators": [{"bus": 1, "H": H1}],
        "loads": [{"bus": 2, "P_D": P_D, "D": 1.5}],
    }


def star(P_M, P_D=1.0, x=(0.5, 0.4), E=(1.0, 1.1, 0.95)):
    """Reference bus 1 and generator bus 2, both feeding load bus 3."""
    return {
        "frequency": 60.0,
        "generator_damping_ratio": 5.0,
        "reference": 1,
        "buses": [
            {"id": 1, "type": "generator", "E": E[0]},
            {"id": 2, "type": "generator", "E": E[1]},
            {"id": 3, "type": "load", "E": E[2]},
        ],
        "lines": [{"from": 1, "to": 3, "x": x[0]}, {"from": 2, "to": 3, "x": x[1]}],
        "generators": [{"bus": 1, "H": 10.0}, {"bus": 2, "H": 2.0, "P_M": P_M}],
        "loads": [{"bus": 3, "P_D": P_D, "D": 1.5}],
    }


# -- ingestion -----------------------------------------------------------------


def test_ingest_minimal_two_bus():
    net = network_from_dict(two_bus())
    assert net.order == [2, 1]
    assert net.generators[1].M == pytest.approx(2 * 10.0 / (2 * math.pi * 60))
    assert net.generators[1].D == pytest.approx(5 * net.generators[1].M)


def test_reject_zero_damping():
    d = two_bus()
    d["loads"][0]["D"] = 0.0
    with pytest.raises(NetworkError):
        network_from_dict(d)


def test_reject_bad_files():
    d = two_bus()
    del d["lines"][0]["x"]
    with pytest.raises(NetworkError):
        network_from_dict(d)
    d = two_bus()
    d["lines"][0]["x"] = -0.1
    with pytest.raises(NetworkError):
        network_from_dict(d)
    d = star(0.5)
    d["generators"][1]["H"] = 50.0  # reference must carry the largest inertia
    with pytest.raises(NetworkError):
        network_from_dict(d)


def test_bundled_wscc9(wscc9_model):
    net = wscc9_model.net
    assert len(net.buses) == 9
    assert net.G == 3 and net.L == 6
    for b in (4, 6, 9):
        assert net.loads[b].P_D > 0
    for ld in net.loads.values():
        assert 1.0 <= ld.D <= 2.0
    M = {b: g.M for b, g in net.generators.items()}
    assert M[1] == max(M.values())
    for g in net.generators.values():
        assert g.D == pytest.approx(5 * g.M)
    # load damping is reproducible from the recorded seed
    with open(DATA_DIR / "wscc9.yaml") as fh:
        again = network_from_dict(yaml.safe_load(fh))
    assert [again.loads[b].D for b in sorted(again.loads)] == [net.loads[b].D for b in sorted(net.loads)]


# -- injections ------------------------------------------------------------------


def test_lossless_equal_angles():
    net = network_from_dict(two_bus())
    P = electrical_power(net, [0.3, 0.3])
    assert np.allclose(P, 0.0, atol=1e-12)
    assert abs(P.sum()) < 1e-12


def test_injections_match_phasor_oracle(wscc9_model):
    net = wscc9_model.net
    with open(DATA_DIR / "wscc9.yaml") as fh:
        data = yaml.safe_load(fh)
    rng = np.random.default_rng(5)
    for outaged in [(), [(5, 7)], [(5, 7), (7, 8)]]:
        Y, E, order = ybus(data, outaged)
        assert order == net.order
        for _ in range(5):
            d = rng.uniform(-math.pi, math.pi, 9)
            assert np.allclose(electrical_power(net, d, outaged), phasor_power(Y, E, d), atol=1e-10)


@given(st.lists(st.floats(-math.pi, math.pi), min_size=9, max_size=9), st.integers(0, 8), st.integers(-3, 3))
@settings(max_examples=40, deadline=None)
def test_injections_periodic(wscc9_model, d, k, shift):
    net = wscc9_model.net
    d = np.array(d)
    e = d.copy()
    e[k] += 2 * math.pi * shift
    assert np.allclose(electrical_power(net, d), electrical_power(net, e), atol=1e-10)


@given(st.lists(st.floats(-math.pi, math.pi), min_size=9, max_size=9))
@settings(max_examples=40, deadline=None)
def test_lossless_sum_zero(d):
    with open(DATA_DIR / "wscc9.yaml") as fh:
        data = yaml.safe_load(fh)
    for ln in data["lines"]:
        ln["r"] = 0.0
        ln["b"] = 0.0
    net = network_from_dict(data)
    assert abs(electrical_power(net, np.array(d)).sum()) < 1e-9


# -- equilibrium -------------------------------------------------------------------


def test_equilibrium_matches_oracle(wscc9_model, frozen):
    ref = frozen["wscc9_equilibrium"]
    eq = wscc9_model.eq
    assert ref["order"] == wscc9_model.net.order
    assert eq.residual < 1e-10
    assert np.allclose(eq.delta, ref["delta"], atol=1e-9)
    assert eq.P_M_ref == pytest.approx(ref["P_ref"], abs=1e-9)
    # injections balance demand and mechanical power
    P = electrical_power(wscc9_model.net, eq.delta)
    for k, b in enumerate(wscc9_model.net.order[:-1]):
        want = -wscc9_model.net.loads[b].P_D if b in wscc9_model.net.loads else wscc9_model.net.generators[b].P_M
        assert P[k] == pytest.approx(want, abs=1e-10)


def test_twobus_equilibrium_matches_oracle(twobus_model, frozen):
    ref = frozen["twobus_equilibrium"]
    assert np.allclose(twobus_model.eq.delta, ref["delta"], atol=1e-9)


def test_star_closed_form():
    P_M, P_D, x, E = 0.4, 1.0, (0.5, 0.4), (1.0, 1.1, 0.95)
    net = network_from_dict(star(P_M, P_D, x, E))
    assert net.order == [3, 2, 1]
    eq = solve_equilibrium(net)
    d3 = math.asin((P_M - P_D) / (E[0] * E[2] / x[0]))
    d2 = d3 + math.asin(P_M / (E[1] * E[2] / x[1]))
    assert np.allclose(eq.relative, [d3, d2], atol=1e-10)
    assert eq.P_M_ref == pytest.approx(P_D - P_M, abs=1e-10)


def test_balanced_star_gives_zero_angles():
    # generator 2 covers almost the whole demand; the reference nearly idles
    eq = solve_equilibrium(network_from_dict(star(1e-6, 1e-6 + 1e-9)))
    assert np.allclose(eq.delta, 0.0, atol=1e-5)


def test_infeasible_operating_point():
    d = star(0.2, P_D=5.0)  # beyond the transfer limit of the reference line
    with pytest.raises(EquilibriumError):
        solve_equilibrium(network_from_dict(d))


# -- relative system and recasting ------------------------------------------------


def test_relative_field_vanishes_at_origin(wscc9_model):
    rel = wscc9_model.rel
    assert rel.dim == 8 + 2 + 1
    assert np.max(np.abs(rel.rhs(np.zeros(rel.dim)))) < 1e-10


def test_nonuniform_damping_rejected():
    d = star(0.4)
    d["generators"][1]["D"] = 1.0
    net = network_from_dict(d)
    with pytest.raises(NetworkError):
        build_relative_system(net, solve_equilibrium(net))


def test_star_swing_equations():
    P_M, P_D, x, E = 0.4, 1.0, (0.5, 0.4), (1.0, 1.1, 0.95)
    net = network_from_dict(star(P_M, P_D, x, E))
    eq = solve_equilibrium(net)
    rel = build_relative_system(net, eq)
    y = np.array([0.1, -0.2, 0.3, 0.05])  # load angle, generator angle, generator speed, reference speed
    got = rel.rhs(y)
    d3, d2 = eq.relative + y[:2]
    b13, b23 = E[0] * E[2] / x[0], E[1] * E[2] / x[1]
    P1 = b13 * math.sin(-d3)
    P2 = b23 * math.sin(d2 - d3)
    P3 = b13 * math.sin(d3) + b23 * math.sin(d3 - d2)
    g, ld = net.generators, net.loads[3]
    lam = g[2].D / g[2].M
    accel_ref = (eq.P_M_ref - P1) / g[1].M
    assert got[0] == pytest.approx((-P_D - P3) / ld.D - y[3])
    assert got[1] == pytest.approx(y[2])
    assert got[2] == pytest.approx(-lam * y[2] + (P_M - P2) / g[2].M - accel_ref)
    assert got[3] == pytest.approx(-lam * y[3] + accel_ref)


def test_recast_dimensions(wscc9_model, frozen):
    sys = wscc9_model.sys
    want = frozen["recast_dims_L6_G3"]
    assert (sys.m, sys.q) == (want["m"], want["q"])
    assert max(f.degree for f in sys.F) <= 3
    z0 = np.zeros(sys.m)
    assert np.max(np.abs(sys.compiled()(z0))) < 1e-12


def test_recast_constraints_invariant(wscc9_model):
    for lg in wscc9_model.sys.constraint_lie_derivatives():
        assert lg.is_zero()


@given(st.lists(st.floats(-3.0, 3.0), min_size=11, max_size=11))
@settings(max_examples=40, deadline=None)
def test_recast_field_matches_chain_rule(wscc9_model, y):
    m = wscc9_model
    y = np.array(y)
    z = m.rmap.forward(y)
    assert np.max(np.abs(m.rmap.constraint_values(z))) < 1e-12
    yd = m.rel.rhs(y)
    zd = m.sys.compiled()(z[None])[0]
    for k, (s, c) in enumerate(m.rmap.pairs):
        assert zd[s] == pytest.approx(math.cos(y[k]) * yd[k], abs=1e-8)
        assert zd[c] == pytest.approx(math.sin(y[k]) * yd[k], abs=1e-8)
    for j, v in enumerate(m.rmap.speed):
        assert zd[v] == pytest.approx(yd[m.rel.n_angles + j], abs=1e-8)
    assert np.allclose(m.rmap.inverse(z), y, atol=1e-12)


def test_recast_scalar_sine():
    # d(delta)/dt = -sin(delta): dz1 = (1 - z2)(-z1), dz2 = z1 (-z1)
    sp = VarSpace(["z1", "z2"])
    z1, z2 = sp.vars()
    rate = -z1
    assert ((1 - z2) * rate) == -z1 + z1 * z2
    assert (z1 * rate) == -(z1 * z1)


def test_dual_integration_agreement(wscc9_model):
    m = wscc9_model
    rng = np.random.default_rng(11)
    y0 = np.concatenate([rng.uniform(-0.3, 0.3, m.rel.n_angles), rng.uniform(-0.5, 0.5, m.rel.dim - m.rel.n_angles)])
    tr = integrate(Scenario(m, [], 10.0, 0.01), y0=y0, rtol=1e-11, atol=1e-12)
    t, z = integrate_recast(m, m.rmap.forward(y0), 10.0, 0.01, rtol=1e-11, atol=1e-12)
    assert np.allclose(t, tr.t)
    assert np.max(np.abs(z - tr.z)) <= 1e-6
    assert np.max(np.abs(m.rmap.constraint_values(z))) <= 1e-6


def test_bundled_threebus():
    m = NetworkModel.build(ingest_network(DATA_DIR / "threebus.yaml"))
    assert m.net.order == [3, 2, 1]
    assert m.eq.residual < 1e-10 and m.eq.P_M_ref > 0
    assert (m.sys.m, m.sys.q) == (2 * 2 + 2, 2)
    assert len(m.inter) == 2
