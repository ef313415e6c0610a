import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import toy_matrix
from vlsos.certify import (
    CertificationError,
    Outcome,
    RingOptions,
    format_table,
    min_epsilon,
    ring_condition,
    run_certification,
)
from vlsos.model import PolySystem, decompose_node_overlap
from vlsos.poly import VarSpace

SP = VarSpace(["x1", "x2"])


def toy(c):
    x1, x2 = SP.vars()
    sys = PolySystem(SP, (-x1 + c * x2, -x2 + c * x1))
    inter = decompose_node_overlap(sys, [[0], [1]])
    return inter, [x1 * x1, x2 * x2]


def stable_by_eigenvalues(c):
    return np.linalg.eigvals(toy_matrix(c)).real.max() < 0


def test_decoupled_converges_in_one_step():
    inter, Vs = toy(0.0)
    verdict, state, laws = run_certification(inter, Vs, [1.0, 0.5])
    assert verdict.outcome is Outcome.ASYMPTOTICALLY_STABLE
    assert state.table[1] == [0.0, 0.0]
    assert verdict.iterations == 1 and not laws


def test_min_epsilon_examples():
    inter, Vs = toy(0.0)
    assert min_epsilon(0, 0, [1.0, 1.0], inter, Vs).value == 0.0
    # dV/dt = 2 x^2 is positive on every ring
    x1, x2 = SP.vars()
    bad = decompose_node_overlap(PolySystem(SP, (x1, -x2)), [[0], [1]])
    r = min_epsilon(0, 0, [1.0, 1.0], bad, Vs)
    assert r.value is None and r.calls == 1


def test_degenerate_ring():
    inter, Vs = toy(0.1)
    assert ring_condition(0, 0, [0.5, 0.5], inter, Vs, 0.5).solve().feasible


@pytest.mark.parametrize("c,eps2", [(0.1, 1.0), (0.1, 0.25), (0.3, 0.6)])
def test_toy_ring_matches_closed_form(c, eps2):
    # on x2^2 <= eps2, -2 x1^2 + 2c x1 x2 < 0 exactly when x1^2 > c^2 eps2
    inter, Vs = toy(c)
    r = min_epsilon(0, 0, [1.0, eps2], inter, Vs)
    want = c * c * eps2
    assert r.value == pytest.approx(want, abs=2e-4 + 1e-3 * want)
    assert not ring_condition(0, 0, [1.0, eps2], inter, Vs, 0.0).solve().feasible
    # dense sampling of the ring above the returned level
    g1 = np.linspace(np.sqrt(r.value), 1.0, 301)
    g2 = np.linspace(-np.sqrt(eps2), np.sqrt(eps2), 301)
    X1, X2 = np.meshgrid(np.concatenate([-g1, g1]), g2)
    assert (-2 * X1**2 + 2 * c * X1 * X2).max() < 0


def test_toy_weak_coupling_certified():
    assert stable_by_eigenvalues(0.1)
    inter, Vs = toy(0.1)
    verdict, state, _ = run_certification(inter, Vs, [1.0, 1.0])
    assert verdict.outcome is Outcome.ASYMPTOTICALLY_STABLE
    assert all(e == 0.0 for e in verdict.limits)


@given(st.floats(1.0, 4.0))
@settings(max_examples=8, deadline=None)
def test_no_false_certificate_beyond_critical_coupling(frozen, c):
    assert c >= frozen["toy_critical_coupling"] - 1e-12
    assert not stable_by_eigenvalues(c + 1e-12)
    inter, Vs = toy(c)
    verdict, _, _ = run_certification(inter, Vs, [1.0, 1.0])
    assert verdict.outcome is not Outcome.ASYMPTOTICALLY_STABLE


@given(st.floats(0.0, 0.9))
@settings(max_examples=8, deadline=None)
def test_level_sequences_monotone_and_clamped(c):
    inter, Vs = toy(c)
    opts = RingOptions()
    verdict, state, _ = run_certification(inter, Vs, [1.0, 0.7], opts=opts)
    for i in range(2):
        col = state.column(i)
        assert all(b <= a for a, b in zip(col, col[1:]))
        # strict decrease while active
        for k, (a, b) in enumerate(zip(col, col[1:])):
            if state.status[k][i] == "active":
                assert b < a
        assert all(e == 0.0 or e > opts.tol for e in col)
    if verdict.outcome is Outcome.ASYMPTOTICALLY_STABLE:
        assert stable_by_eigenvalues(c)


def test_initial_levels_checked():
    inter, Vs = toy(0.1)
    with pytest.raises(CertificationError):
        run_certification(inter, Vs, [1.5, 0.5])
    with pytest.raises(ValueError):
        run_certification(inter, Vs, [0.5])


def test_table_format_and_determinism():
    inter, Vs = toy(0.3)
    a = run_certification(inter, Vs, [1.0, 0.8])[1]
    b = run_certification(inter, Vs, [1.0, 0.8])[1]
    ta, tb = format_table(a), format_table(b)
    assert ta == tb
    lines = ta.splitlines()
    assert lines[0].split() == ["k", "S1", "S2"]
    assert lines[1].split() == ["0", "1.0000", "0.8000"]
    assert len(lines) == len(a.table) + 1
