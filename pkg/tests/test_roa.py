import numpy as np
import pytest

from vlsos.poly import CompiledPolyVector, VarSpace
from vlsos.roa import (
    IsolatedSystem,
    RoaError,
    RoaOptions,
    contour_data,
    decrease_level,
    estimate_roa,
    expand_interior,
    gamma_max,
    initial_lyapunov,
    pairs_from_constraints,
    sample_band,
    sample_shell,
)

Z = VarSpace(["z"])


def scalar(field):
    return IsolatedSystem(Z, [0], [field], [])


def test_linear_decay_quadratic():
    z = Z.var("z")
    cand = initial_lyapunov(scalar(-z), 2, beta=1.0)
    assert cand is not None
    c = cand.V.coefficient(next(iter((z * z).terms)))
    assert c > 0
    assert abs(cand.V.coefficient(next(iter(z.terms)))) <= 1e-6 * c


def test_unstable_has_no_lyapunov():
    z = Z.var("z")
    assert initial_lyapunov(scalar(z), 2, beta=1.0) is None
    assert initial_lyapunov(scalar(z), 4, beta=1.0) is None


def test_gamma_max_examples():
    x = Z.var("z")
    iso = scalar(-x)
    dom = [1 - x * x]
    assert gamma_max(x * x, iso, dom) == pytest.approx(1.0, rel=2e-4)
    assert gamma_max(4 * x * x, iso, dom) == pytest.approx(4.0, rel=2e-4)
    with pytest.raises(RoaError):
        gamma_max(Z.zero(), iso, dom)


def test_options_validated():
    with pytest.raises(ValueError):
        RoaOptions(degree=3)
    with pytest.raises(ValueError):
        RoaOptions(margin=0.0)


def test_cubic_estimate_inside_true_region(frozen):
    z = Z.var("z")
    iso = scalar(-z + z * z * z)
    est = estimate_roa(iso)
    Vc = CompiledPolyVector([est.V])
    bound = frozen["cubic_roa_bound"]
    # the certified set {V <= 1} is strictly inside |z| < bound
    assert Vc(np.array([[bound], [-bound]]))[:, 0].min() > 1.0
    zz = np.linspace(-bound, bound, 4001)[:, None]
    inside = zz[Vc(zz)[:, 0] <= 1.0, 0]
    assert inside.min() > -bound and inside.max() < bound
    # and it is not trivially small
    assert inside.max() - inside.min() > 0.5 * bound


def test_linear_system_keeps_growing():
    sp = VarSpace(["a", "b"])
    a, b = sp.vars()
    iso = IsolatedSystem(sp, [0, 1], [-a + b, -a - 2 * b], [])
    cand = initial_lyapunov(iso, 2, beta=0.1)
    est = expand_interior(iso, cand, max_iters=3)
    h = est.beta_history
    assert all(y >= x for x, y in zip(h, h[1:]))
    # globally stable: the levels are limited only by solver numerics and
    # end far past the starting shape level
    assert est.gamma_history[0] > 1e3
    assert h[-1] > 1e3 * 0.1


def check_estimate(sub, est, n, rng):
    iso = IsolatedSystem.from_subsystem(sub)
    V = est.V
    assert abs(V.constant) == 0.0
    h = est.beta_history
    assert all(y >= x for x, y in zip(h, h[1:]))
    pairs = pairs_from_constraints(iso.eqs)
    pts = sample_band(V, iso.variables, pairs, n, rng, upper=1.0)
    # drop points numerically at the origin
    norm = np.linalg.norm(pts[:, iso.variables], axis=1)
    pts = pts[norm > 1e-6]
    Vdot = V.lie_derivative(iso.field)
    vals = CompiledPolyVector([V, Vdot])(pts)
    assert vals[:, 0].min() > 0
    assert vals[:, 1].max() < 0
    # points sit exactly on the manifold
    for s, c in pairs:
        assert np.max(np.abs(pts[:, s] ** 2 + pts[:, c] ** 2 - 2 * pts[:, c])) < 1e-12
    return vals


def test_wscc9_estimates(wscc9_model, wscc9_roa):
    rng = np.random.default_rng(2)
    for sub, est in zip(wscc9_model.inter, wscc9_roa):
        assert est.gamma_max > 0
        check_estimate(sub, est, 2000, rng)


def test_s2_level_set_contained(wscc9_model, wscc9_roa):
    sub, est = wscc9_model.inter.subsystems[1], wscc9_roa[1]
    assert est.gamma_max > 0
    check_estimate(sub, est, 10_000, np.random.default_rng(7))


def test_scaling_puts_boundary_at_one(wscc9_model, wscc9_roa):
    sub, est = wscc9_model.inter.subsystems[6], wscc9_roa[6]
    iso = IsolatedSystem.from_subsystem(sub)
    opts = RoaOptions()
    g, _ = decrease_level(est.V, iso, opts, 1.0)
    assert g == pytest.approx(1.0, abs=1e-3)
    pts, ok = sample_shell(est.V, iso.variables, pairs_from_constraints(iso.eqs), 500, np.random.default_rng(1), 1.0, 1.0)
    vals = CompiledPolyVector([est.V])(pts[ok])[:, 0]
    assert ok.mean() > 0.9
    assert np.max(np.abs(vals - 1.0)) <= 1e-3


def test_s7_contours_nested(wscc9_model, wscc9_roa):
    est = wscc9_roa[6]
    rmap = wscc9_model.rmap
    k = wscc9_model.net.order.index(2)
    grid = contour_data(est, rmap.pairs[k], rmap.speed[0], n=61)
    assert len(grid.values) == len(est.V_history)
    areas = [(v <= 1.0).sum() for v in grid.values]
    assert areas[-1] >= areas[0] > 0
    # contours are drawn with the other coordinates at zero, so the origin is inside
    mid = len(grid.x) // 2
    assert grid.values[-1][mid, mid] == pytest.approx(0.0, abs=1e-12)
