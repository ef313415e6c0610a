import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sos_cases import motzkin, random_sos, reconstruction_error
from vlsos.poly import VarSpace
from vlsos.roa import affine_lie
from vlsos.sdp import SdpStatus
from vlsos.sos import (
    AffinePoly,
    DegreeMismatch,
    SosProgram,
    check_sos,
    gram_factors,
    putinar_certificate,
)

X = VarSpace(["x"])
XY = VarSpace(["x", "y"])


def test_perfect_square():
    x = X.var("x")
    res = check_sos(x * x - 2 * x + 1)
    assert res.is_sos
    assert reconstruction_error(x * x - 2 * x + 1, res.factors) <= 1e-6
    # one factor, proportional to x - 1
    big = [h for h in res.factors if h.coeff_norm() > 1e-3]
    assert len(big) == 1
    h = big[0]
    assert abs(h.coefficient(next(iter((x).terms)))) == pytest.approx(1.0, abs=1e-4)
    assert abs(h.constant) == pytest.approx(1.0, abs=1e-4)


def test_negative_square_rejected():
    x = X.var("x")
    assert not check_sos(-(x * x))


def test_odd_degree_rejected():
    with pytest.raises(ValueError):
        check_sos(X.var("x") ** 3)


def test_motzkin_rejected_but_nonnegative(frozen):
    res = check_sos(motzkin())
    assert not res.is_sos
    assert res.status is SdpStatus.INFEASIBLE
    # failure is SOS-specific: the polynomial is nonnegative
    assert frozen["motzkin_grid_min"] >= -1e-12


def test_compile_single_block():
    x = X.var("x")
    prog = SosProgram(X)
    prog.add_sos(x * x)
    problem = prog.compile()
    assert problem.block_dims == [2]
    assert prog.solve().feasible


def test_compile_infeasible_with_multiplier():
    prog = SosProgram(X)
    s = prog.new_sos_poly([0], 0)
    prog.add_sos(AffinePoly.lift(-1.0, X) - s)
    assert not prog.solve().feasible


def test_degree_mismatch():
    x = X.var("x")
    prog = SosProgram(X)
    prog.add_sos(x * x, cliques=[[]])
    with pytest.raises(DegreeMismatch):
        prog.compile()


def test_lyapunov_program_for_linear_decay():
    # dx/dt = -x, V = a x + b x^2
    x = X.var("x")
    prog = SosProgram(X)
    V = prog.new_free_poly([0], 2, min_degree=1)
    phi = 1e-4 * x * x
    vdot = affine_lie(V, [-x])
    prog.add_sos(V - phi)
    prog.add_sos(-vdot - phi)
    sol = prog.solve()
    assert sol.feasible
    Vv = sol.value(V)
    assert abs(Vv.coefficient(next(iter(x.terms)))) <= 1e-6
    assert Vv.coefficient(next(iter((x * x).terms))) > 0
    assert check_sos(Vv - phi)
    assert check_sos(-Vv.lie_derivative([-x]) - phi)


def test_putinar_examples():
    x = X.var("x")
    cert = putinar_certificate(x, ineqs=[x], sigma_degree=0)
    assert cert is not None
    assert cert.sigmas[0].constant == pytest.approx(1.0, abs=1e-6)
    assert cert.residual(x, [x], []).max_abs_coeff() <= 1e-6

    one = X.const(1.0)
    cert = putinar_certificate(one, ineqs=[x], sigma_degree=0)
    assert cert is not None and cert.residual(one, [x], []).max_abs_coeff() <= 1e-6


def test_putinar_on_circle():
    z1, z2 = XY.var("x"), XY.var("y")
    p = 2 - z2
    h = z1 * z1 + z2 * z2 - 2 * z2
    cert = putinar_certificate(p, eqs=[h])
    assert cert is not None
    # coefficient identity p = sigma0 + lambda h
    assert cert.residual(p, [], [h]).max_abs_coeff() <= 1e-6
    assert check_sos(cert.sigma0)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_explicit_sums_accepted(seed):
    p, _ = random_sos(np.random.default_rng(seed))
    res = check_sos(p)
    assert res.is_sos
    assert reconstruction_error(p, res.factors) <= 1e-6


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_round_trip_constraints(seed):
    rng = np.random.default_rng(seed)
    p, _ = random_sos(rng, nvars=2, half_degree=1)
    XY2 = p.space
    x = XY2.var(0)
    prog = SosProgram(XY2)
    s = prog.new_sos_poly([0, 1], 2)
    q = prog.new_free_poly([0, 1], 1)
    expr = AffinePoly.lift(p, XY2) + s * 0.5 - q * x
    con = prog.add_sos(expr)
    sol = prog.solve()
    assert sol.feasible
    decoded = p + sol.value(s) * 0.5 - sol.value(q) * x
    assert check_sos(sol.value(s))
    assert check_sos(decoded)
    # Gram matrix reproduces the decoded expression
    basis, Q = sol.gram(con)[0]
    recon = XY2.zero()
    for h in gram_factors(XY2, basis, Q):
        recon = recon + h * h
    assert (recon - decoded).max_abs_coeff() <= 1e-5


def test_compile_deterministic():
    p, _ = random_sos(np.random.default_rng(3), nvars=3, half_degree=2)

    def build():
        prog = SosProgram(p.space)
        s = prog.new_sos_poly([0, 1], 2)
        prog.add_sos(AffinePoly.lift(p, p.space) - s)
        return prog.compile().dump()

    assert build() == build()


def test_cliques_reduce_block_sizes():
    sp = VarSpace(["a", "b", "c"])
    a, b, c = sp.vars()
    p = (a - b) ** 2 + (b + c) ** 2 + 1
    prog = SosProgram(sp)
    con = prog.add_sos(p, cliques=[[0, 1], [1, 2]])
    problem = prog.compile()
    assert sorted(problem.block_dims) == [3, 3]
    assert prog.solve().feasible
    assert len(con.gram_blocks) == 2


def test_objective_scalar_only():
    prog = SosProgram(X)
    V = prog.new_free_poly([0], 2)
    with pytest.raises(ValueError):
        prog.minimize(V)
