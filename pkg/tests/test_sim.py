import csv
import io

import numpy as np
import pytest

from vlsos.roa import pairs_from_constraints, sample_shell
from vlsos.sim import (
    ATOL,
    RTOL,
    BAND_TOL,
    Event,
    LevelError,
    Scenario,
    SimulationError,
    activation_report,
    fault_scenario,
    integrate,
    levels_at,
)


def test_equilibrium_is_fixed(wscc9_model):
    tr = integrate(Scenario(wscc9_model, [], 10.0, 0.05))
    assert np.max(np.abs(tr.y)) < 1e-8
    assert tr.t[0] == 0.0 and tr.t[-1] == 10.0


def test_scenario_validation(wscc9_model):
    with pytest.raises(ValueError):
        Scenario(wscc9_model, [Event(2.0, (5, 7)), Event(1.0, (7, 8))], 5.0)
    with pytest.raises(Exception):
        Scenario(wscc9_model, [Event(1.0, (1, 9))], 5.0)  # no such line
    with pytest.raises(ValueError):
        Event(1.0, (5, 7), "open")
    with pytest.raises(SimulationError):
        integrate(Scenario(wscc9_model, [], 1.0), y0=np.full(wscc9_model.rel.dim, np.nan))


def test_fault_segments(wscc9_model):
    sc = fault_scenario(wscc9_model)
    segs = sc.segments()
    assert [(a, b) for a, b, _ in segs] == [(0.0, 1.0), (1.0, 3.0), (3.0, 10.0)]
    assert segs[0][2] == {(5, 7)}
    assert segs[1][2] == {(5, 7), (7, 8)}
    assert segs[2][2] == frozenset()
    assert sc.control_start == 3.0


def test_twobus_damped_oscillation(twobus_model):
    y0 = np.zeros(twobus_model.rel.dim)
    y0[0] = 0.1
    tr = integrate(Scenario(twobus_model, [], 30.0, 0.01), y0=y0)
    a = np.abs(tr.y[:, 0])
    assert a[-1] < 1e-3 * a[0]
    assert a[len(a) // 2 :].max() < a[: len(a) // 2].max()


@pytest.fixture(scope="module")
def fault_run(wscc9_model, wscc9_roa):
    Vs = [e.V for e in wscc9_roa]
    return integrate(fault_scenario(wscc9_model, horizon=30.0), Vs=Vs), Vs


def test_manifold_drift(wscc9_model, fault_run):
    tr, _ = fault_run
    c = wscc9_model.rmap.constraint_values(tr.z)
    assert np.max(np.abs(c)) <= 1e-6
    assert np.max(np.abs(c)) <= 10 * RTOL
    assert np.nanmin(tr.V) >= -1e-12


def test_islanded_pair_separates(wscc9_model, fault_run):
    # with 5-7 and 7-8 open, buses 2 and 7 only see each other and drift away together
    tr, _ = fault_run
    order = wscc9_model.net.order
    k2, k7 = order.index(2), order.index(7)
    t = tr.t
    during = (t >= 1.0) & (t <= 3.0)
    gap = tr.y[during, k2] - tr.y[during, k7]
    drift = 0.5 * (tr.y[during, k2] + tr.y[during, k7])
    assert np.ptp(drift) > 5 * np.ptp(gap)


def test_post_fault_levels(wscc9_model, wscc9_levels):
    g = np.asarray(wscc9_levels)
    buses = [wscc9_model.subsystem_bus(i) for i in range(8)]
    top2 = {buses[i] for i in np.argsort(g)[-2:]}
    assert top2 == {7, 2}
    assert np.all((g >= 0) & (g <= 1))
    rest = [g[i] for i in range(8) if buses[i] not in (2, 7)]
    assert max(rest) < 0.1 * min(g[buses.index(2)], g[buses.index(7)])


def test_levels_at_examples(wscc9_model, wscc9_roa):
    Vs = [e.V for e in wscc9_roa]
    rmap = wscc9_model.rmap
    assert np.allclose(levels_at(np.zeros(wscc9_model.rel.dim), Vs, rmap), 0.0, atol=1e-15)
    sub = wscc9_model.inter.subsystems[6]
    z, ok = sample_shell(Vs[6], sub.variables, pairs_from_constraints(sub.G), 20, np.random.default_rng(0), 1.0, 1.0, steps=80)
    for y in rmap.inverse(z[ok]):
        assert levels_at(y, Vs, rmap, check=False)[6] == pytest.approx(1.0, abs=1e-9)
    big = rmap.inverse(3 * z[ok][0])
    with pytest.raises(LevelError):
        levels_at(big, Vs, rmap)


def test_tolerance_halving(wscc9_model, wscc9_roa):
    Vs = [e.V for e in wscc9_roa]
    sc = fault_scenario(wscc9_model, horizon=10.0)
    a = integrate(sc, Vs=Vs)
    b = integrate(sc, Vs=Vs, rtol=RTOL / 2, atol=ATOL / 2)
    assert np.allclose(a.t, b.t)
    assert np.max(np.abs(a.V - b.V)) < 1e-6


def test_activation_only_within_band(twobus_model, twobus_certified):
    res = twobus_certified
    laws, Vs = res["laws"], res["Vs"]
    law = laws[0]
    sub = twobus_model.inter.subsystems[law.subsystem]
    z, ok = sample_shell(Vs[0], sub.variables, pairs_from_constraints(sub.G), 10, np.random.default_rng(3), 0.6, 0.9)
    for y0 in twobus_model.rmap.inverse(z[ok][:5]):
        tr = integrate(Scenario(twobus_model, [], 10.0, 0.01), y0=y0, controls=laws, Vs=Vs)
        v = tr.V[:, law.subsystem]
        tol = BAND_TOL * law.upper + 1e-9
        on = tr.active[:, 0]
        assert on.any()
        assert np.all(v[on] >= law.lower - tol) and np.all(v[on] <= law.upper + tol)
        assert np.all((v[~on] < law.lower + tol) | (v[~on] > law.upper - tol))
        rep = activation_report(tr, laws)
        assert len(rep) == 1 and rep[0]["windows"]
        assert rep[0]["band"] == [law.lower, law.upper]


def test_control_waits_for_clearance(twobus_model, twobus_certified):
    res = twobus_certified
    laws, Vs = res["laws"], res["Vs"]
    line = (twobus_model.net.lines[0].frm, twobus_model.net.lines[0].to)
    y0 = np.zeros(twobus_model.rel.dim)
    y0[0] = 0.2
    sc = Scenario(twobus_model, [Event(1.0, line, "trip"), Event(1.05, line, "restore")], 5.0, 0.01)
    tr = integrate(sc, y0=y0, controls=laws, Vs=Vs)
    assert not tr.active[tr.t < 1.05].any()


def test_csv_layout(twobus_model, twobus_certified):
    res = twobus_certified
    y0 = np.zeros(twobus_model.rel.dim)
    y0[0] = 0.2
    tr = integrate(Scenario(twobus_model, [], 1.0, 0.1), y0=y0, controls=res["laws"], Vs=res["Vs"])
    text = tr.to_csv(["config_hash=abc seed=0"])
    lines = text.splitlines()
    assert lines[0] == "# config_hash=abc seed=0"
    rows = list(csv.reader(io.StringIO("\n".join(lines[1:]))))
    head = rows[0]
    assert head[0] == "t"
    assert head[1 : 1 + len(tr.state_labels)] == tr.state_labels
    assert "V1" in head and head[-1].startswith("u1_k")
    assert len(rows) == len(tr.t) + 1
    assert all(len(r) == len(head) for r in rows)
    assert float(rows[-1][0]) == pytest.approx(1.0)
