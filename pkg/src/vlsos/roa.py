"""Lyapunov functions and region-of-attraction estimates for isolated subsystems.

Each subsystem is treated as ``dz/dt = F_i(z)``, ``G_i(z) = 0``.  A quadratic
(by default) Lyapunov function is found by SOS feasibility and then enlarged
with the expanding-interior iteration:

* level step:  max gamma with dV/dt < 0 on {V <= gamma}; V is rescaled by gamma,
* shape step:  max beta with {p <= beta} inside {V <= 1},
* V step:      with the multipliers of the two steps fixed, re-solve for V
  while maximizing beta directly (the problem is linear in V and beta).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import Subsystem
from .poly import CompiledPolyVector, Monomial, Polynomial, VarSpace, monomial_basis
from .sdp import SdpOptions
from .sos import AffinePoly, SosProgram

log = logging.getLogger(__name__)


class RoaError(RuntimeError):
    pass


@dataclass
class RoaOptions:
    degree: int = 2
    multiplier_degree: int = 2
    margin: float = 1e-4  # phi = margin * sum z^2
    beta0: float = 0.1
    tol: float = 1e-4
    max_iters: int = 30
    gamma_cap: float = 1e6
    sdp: SdpOptions = field(default_factory=SdpOptions)

    def __post_init__(self):
        if self.degree < 2 or self.degree % 2:
            raise ValueError("Lyapunov degree must be even and at least 2")
        if self.multiplier_degree < 0 or self.multiplier_degree % 2:
            raise ValueError("multiplier degree must be even")
        if not (self.margin > 0 and self.tol > 0 and self.beta0 > 0):
            raise ValueError("margin, tol and beta0 must be positive")


@dataclass
class IsolatedSystem:
    """Variables, isolated vector field (global length) and constraints of one subsystem."""

    space: VarSpace
    variables: list
    field: list
    eqs: list
    index: int = 0

    @classmethod
    def from_subsystem(cls, sub: Subsystem) -> "IsolatedSystem":
        return cls(sub.space, list(sub.variables), sub.isolated_field(), list(sub.G), sub.index)

    def shape(self) -> Polynomial:
        p = self.space.zero()
        for v in self.variables:
            x = self.space.var(v)
            p = p + x * x
        return p


@dataclass
class LyapunovCandidate:
    V: Polynomial
    index: int
    degree: int


@dataclass
class RoaEstimate:
    V: Polynomial  # scaled: ROA estimate is {V <= 1}
    gamma_max: float  # level of the last unscaled candidate
    beta_history: list
    shape: Polynomial
    index: int = 0
    V_history: list = field(default_factory=list)  # scaled V accepted at each iteration
    gamma_history: list = field(default_factory=list)
    iterations: int = 0
    stalled: bool = False


# -- SOS building blocks -----------------------------------------------------------


def affine_lie(u: AffinePoly, field_: Sequence[Polynomial]) -> AffinePoly:
    """Lie derivative of an affine unknown along a fixed polynomial field."""
    out = AffinePoly(u.space, u.const.lie_derivative(field_) if not u.const.is_zero() else None)
    cache: dict[Monomial, Polynomial] = {}
    for m, d in u.lin.items():
        if m not in cache:
            cache[m] = Polynomial(u.space, {m: 1.0}).lie_derivative(field_)
        for m2, c2 in cache[m].items():
            tgt = out.lin.setdefault(m2, {})
            for k, c in d.items():
                tgt[k] = tgt.get(k, 0.0) + c * c2
    return out


def margin_poly(space: VarSpace, variables: Sequence[int], margin: float) -> Polynomial:
    p = space.zero()
    for v in variables:
        x = space.var(v)
        p = p + x * x
    return p * margin


def subtract_eq_multipliers(prog: SosProgram, expr: AffinePoly, variables, eqs, degree: int) -> AffinePoly:
    """expr - sum lambda_k h_k with free lambda_k chosen so the product matches ``degree``."""
    for h in eqs:
        d = max(degree - h.degree, 0)
        lam = prog.new_free_poly(variables, d)
        expr = expr - lam * h
    return expr


def _even_up(d: int) -> int:
    return d + (d % 2)


def _vdot_degree(iso: IsolatedSystem, vdeg: int) -> int:
    fdeg = max((iso.field[v].degree for v in iso.variables), default=1)
    return _even_up(vdeg - 1 + max(fdeg, 1))


def add_positivity(prog: SosProgram, iso: IsolatedSystem, V, opts: RoaOptions) -> None:
    expr = AffinePoly.lift(V, iso.space) - margin_poly(iso.space, iso.variables, opts.margin)
    expr = subtract_eq_multipliers(prog, expr, iso.variables, iso.eqs, opts.degree)
    prog.add_sos(expr, "V positive")


def add_decrease(
    prog: SosProgram,
    iso: IsolatedSystem,
    V,
    level: float,
    opts: RoaOptions,
    s: Optional[Polynomial] = None,
):
    """-dV/dt - s (level - V) - lambda^T G - phi in SOS; returns the multiplier s."""
    Vaff = AffinePoly.lift(V, iso.space)
    vdot = affine_lie(Vaff, iso.field)
    top = _vdot_degree(iso, opts.degree)
    if s is None:
        sdeg = max(min(opts.multiplier_degree, top - opts.degree), 0)
        s = prog.new_sos_poly(iso.variables, sdeg, name="s2")
    expr = -vdot - (level - Vaff) * s
    expr = expr - margin_poly(iso.space, iso.variables, opts.margin)
    expr = subtract_eq_multipliers(prog, expr, iso.variables, iso.eqs, top)
    prog.add_sos(expr, "V decreasing")
    return s


def add_shape_containment(prog: SosProgram, iso: IsolatedSystem, V, p: Polynomial, beta, opts: RoaOptions, s1=None):
    """1 - V - s1 (beta - p) - lambda^T G in SOS, i.e. {p <= beta} inside {V <= 1}."""
    Vaff = AffinePoly.lift(V, iso.space)
    top = _even_up(max(opts.degree, p.degree))
    if s1 is None:
        s1 = prog.new_sos_poly(iso.variables, max(top - p.degree, 0), name="s1")
    expr = 1.0 - Vaff - AffinePoly.lift(s1, iso.space) * (beta - p)
    expr = subtract_eq_multipliers(prog, expr, iso.variables, iso.eqs, top)
    prog.add_sos(expr, "shape inside level")
    return s1


# -- searches ------------------------------------------------------------------------


def bracket_max(check: Callable[[float], object], guess: float, cap: float, tol: float, floor: float = 1e-8):
    """Largest t in (floor, cap] at which ``check`` succeeds, relative tolerance ``tol``.

    Returns ``(t, payload)`` or ``(None, None)`` when nothing above ``floor`` works.
    """
    t = min(guess, cap)
    res = check(t)
    if res:
        good, good_res = t, res
        bad = None
        while good < cap:
            t = min(2 * good, cap)
            res = check(t)
            if res:
                good, good_res = t, res
            else:
                bad = t
                break
        if bad is None:
            return good, good_res
    else:
        bad = t
        good = None
        while t > floor:
            t *= 0.5
            res = check(t)
            if res:
                good, good_res = t, res
                break
            bad = t
        if good is None:
            return None, None
    while bad - good > tol * good:
        mid = 0.5 * (good + bad)
        res = check(mid)
        if res:
            good, good_res = mid, res
        else:
            bad = mid
    return good, good_res


def initial_lyapunov(
    sub,
    degree: int = 2,
    shape: Optional[Polynomial] = None,
    beta: float = 0.1,
    opts: Optional[RoaOptions] = None,
) -> Optional[LyapunovCandidate]:
    """V positive and decreasing on {p <= beta} of the isolated subsystem; None if infeasible."""
    opts = opts or RoaOptions(degree=degree)
    if opts.degree != degree:
        opts = RoaOptions(**{**opts.__dict__, "degree": degree})
    iso = sub if isinstance(sub, IsolatedSystem) else IsolatedSystem.from_subsystem(sub)
    p = shape if shape is not None else iso.shape()
    prog = SosProgram(iso.space)
    V = prog.new_free_poly(iso.variables, degree, min_degree=1, name="V")
    # positivity and decrease on the shape region
    top = _vdot_degree(iso, degree)
    phi = margin_poly(iso.space, iso.variables, opts.margin)
    s1 = prog.new_sos_poly(iso.variables, max(_even_up(degree) - p.degree, 0))
    e1 = V - s1 * (beta - p) - phi
    prog.add_sos(subtract_eq_multipliers(prog, e1, iso.variables, iso.eqs, degree), "V positive")
    s2 = prog.new_sos_poly(iso.variables, max(top - p.degree, 0))
    e2 = -affine_lie(V, iso.field) - s2 * (beta - p) - phi
    prog.add_sos(subtract_eq_multipliers(prog, e2, iso.variables, iso.eqs, top), "V decreasing")
    sol = prog.solve(opts.sdp)
    if not sol.feasible:
        log.info("subsystem %d: no degree-%d Lyapunov function (%s)", iso.index, degree, sol.status.value)
        return None
    return LyapunovCandidate(sol.value(V).threshold(1e-12), iso.index, degree)


def decrease_level(V: Polynomial, iso: IsolatedSystem, opts: RoaOptions, guess: float = 1.0):
    """Largest gamma with dV/dt < 0 on {V <= gamma} (manifold, minus the origin)."""

    def check(g):
        prog = SosProgram(iso.space)
        s = add_decrease(prog, iso, V, g, opts)
        sol = prog.solve(opts.sdp)
        return (sol.value(s),) if sol.feasible else None

    g, res = bracket_max(check, guess, opts.gamma_cap, opts.tol)
    return g, (res[0] if res else None)


def gamma_max(
    V: Polynomial,
    sub,
    domain: Optional[Sequence[Polynomial]] = None,
    opts: Optional[RoaOptions] = None,
    guess: float = 1.0,
) -> float:
    """Largest gamma with {V <= gamma} inside the domain.

    ``domain`` lists polynomials that must stay nonnegative; without it the
    domain is where the isolated dynamics decrease V.
    """
    opts = opts or RoaOptions()
    if V.is_zero():
        raise RoaError("degenerate Lyapunov function")
    iso = sub if isinstance(sub, IsolatedSystem) else IsolatedSystem.from_subsystem(sub)
    if domain is None:
        g, _ = decrease_level(V, iso, opts, guess)
        if g is None:
            raise RoaError("no positive level with decreasing V")
        return g
    vars_ = sorted(set(iso.variables) | set(V.variables()))

    def check(gm):
        prog = SosProgram(iso.space)
        for k, d in enumerate(domain):
            top = _even_up(max(d.degree, V.degree))
            s = prog.new_sos_poly(vars_, max(top - V.degree, 0))
            expr = AffinePoly.lift(d, iso.space) - s * (gm - V)
            expr = subtract_eq_multipliers(prog, expr, vars_, iso.eqs, top)
            prog.add_sos(expr, f"domain {k}")
        return prog.solve(opts.sdp).feasible

    g, _ = bracket_max(check, guess, opts.gamma_cap, opts.tol)
    if g is None:
        raise RoaError("no positive level inside the domain")
    return g


def shape_level(V: Polynomial, iso: IsolatedSystem, p: Polynomial, opts: RoaOptions, guess: float):
    def check(b):
        prog = SosProgram(iso.space)
        s1 = add_shape_containment(prog, iso, V, p, b, opts)
        sol = prog.solve(opts.sdp)
        return (sol.value(s1),) if sol.feasible else None

    b, res = bracket_max(check, guess, opts.gamma_cap, opts.tol)
    return b, (res[0] if res else None)


def _v_step(iso: IsolatedSystem, p: Polynomial, s1: Polynomial, s2: Polynomial, opts: RoaOptions):
    prog = SosProgram(iso.space)
    V = prog.new_free_poly(iso.variables, opts.degree, min_degree=1, name="V")
    beta = prog.new_scalar()
    add_positivity(prog, iso, V, opts)
    add_decrease(prog, iso, V, 1.0, opts, s=s2)
    top = _even_up(max(opts.degree, p.degree + s1.degree))
    expr = 1.0 - V - beta * s1 + AffinePoly.lift(s1 * p, iso.space)
    expr = subtract_eq_multipliers(prog, expr, iso.variables, iso.eqs, top)
    prog.add_sos(expr, "shape inside level")
    prog.maximize(beta)
    sol = prog.solve(opts.sdp)
    if not sol.feasible:
        return None, None
    return sol.value(V).threshold(1e-12), sol.scalar(beta)


def expand_interior(
    sub,
    initial: LyapunovCandidate,
    shape: Optional[Polynomial] = None,
    max_iters: Optional[int] = None,
    opts: Optional[RoaOptions] = None,
) -> RoaEstimate:
    opts = opts or RoaOptions()
    iso = sub if isinstance(sub, IsolatedSystem) else IsolatedSystem.from_subsystem(sub)
    p = shape if shape is not None else iso.shape()
    max_iters = opts.max_iters if max_iters is None else max_iters

    V = initial.V
    est = RoaEstimate(V, float("nan"), [], p, iso.index)
    beta_guess = opts.beta0
    gamma_guess = 1.0
    for it in range(max_iters + 1):
        gamma, s2 = decrease_level(V, iso, opts, gamma_guess)
        if gamma is None:
            est.stalled = True
            break
        Vs = V * (1.0 / gamma)
        beta, s1 = shape_level(Vs, iso, p, opts, beta_guess)
        if beta is None:
            est.stalled = True
            break
        if est.beta_history and beta < est.beta_history[-1]:
            # the re-verified candidate is worse than the accepted one
            est.stalled = True
            break
        est.V, est.gamma_max = Vs, gamma
        est.beta_history.append(beta)
        est.gamma_history.append(gamma)
        est.V_history.append(Vs)
        est.iterations = it
        log.debug("subsystem %d iter %d: gamma %.6g beta %.6g", iso.index, it, gamma, beta)
        if len(est.beta_history) > 1 and beta - est.beta_history[-2] < opts.tol:
            break
        if it == max_iters:
            break
        Vn, _ = _v_step(iso, p, s1, s2, opts)
        if Vn is None:
            est.stalled = True
            break
        V, beta_guess, gamma_guess = Vn, beta, 1.0
    if not est.beta_history:
        raise RoaError(f"subsystem {iso.index}: no certified level set")
    return est


def estimate_roa(sub, opts: Optional[RoaOptions] = None) -> RoaEstimate:
    opts = opts or RoaOptions()
    iso = sub if isinstance(sub, IsolatedSystem) else IsolatedSystem.from_subsystem(sub)
    cand = initial_lyapunov(iso, opts.degree, None, opts.beta0, opts)
    beta = opts.beta0
    while cand is None and beta > 1e-6:
        beta *= 0.1
        cand = initial_lyapunov(iso, opts.degree, None, beta, opts)
    if cand is None:
        raise RoaError(f"subsystem {iso.index}: no Lyapunov function of degree {opts.degree}")
    return expand_interior(iso, cand, None, None, opts)


# -- sampling and contour data ----------------------------------------------------


def pairs_from_constraints(eqs: Sequence[Polynomial]) -> list[tuple[int, int]]:
    """Recover (s, c) pairs from constraints of the form s^2 + c^2 - 2c."""
    out = []
    for g in eqs:
        terms = dict(g.items())
        quad = [m for m, cf in terms.items() if m.degree == 2 and abs(cf - 1.0) < 1e-12]
        lin = [m for m, cf in terms.items() if m.degree == 1 and abs(cf + 2.0) < 1e-12]
        if len(terms) != 3 or len(quad) != 2 or len(lin) != 1:
            continue
        (c,) = lin[0].variables()
        s = [v for m in quad for v in m.variables() if v != c]
        if len(s) == 1:
            out.append((s[0], c))
    return out


def sample_band(
    V: Polynomial,
    variables: Sequence[int],
    pairs: Sequence[tuple[int, int]],
    n: int,
    rng: np.random.Generator,
    upper: float = 1.0,
    lower: float = 0.0,
    base: Optional[np.ndarray] = None,
    batch: int = 20000,
    max_rounds: int = 500,
) -> np.ndarray:
    """``n`` manifold points with ``lower <= V <= upper``.

    Angles of recast pairs are drawn uniformly from an interval and mapped
    through (sin, 1 - cos), other variables uniformly from a box; the box is
    adapted so the sublevel set sits inside it with reasonable acceptance.
    Coordinates outside ``variables`` are copied from ``base``.
    """
    m = len(V.space)
    Vc = CompiledPolyVector([V])
    variables = list(variables)
    angle_pairs = [(s, c) for s, c in pairs if s in variables]
    in_pair = {v for pc in angle_pairs for v in pc}
    free = [v for v in variables if v not in in_pair]
    base = np.zeros(m) if base is None else np.asarray(base, dtype=float)

    def draw(k, a, r):
        z = np.tile(base, (k, 1))
        for s, c in angle_pairs:
            x = rng.uniform(-a, a, k)
            z[:, s] = np.sin(x)
            z[:, c] = 1.0 - np.cos(x)
        for v in free:
            z[:, v] = rng.uniform(-r, r, k)
        return z

    def angles(z):
        return np.abs(np.stack([np.arctan2(z[:, s], 1.0 - z[:, c]) for s, c in angle_pairs], axis=-1)).max(axis=1) if angle_pairs else np.zeros(len(z))

    a, r = math.pi, 1.0
    for _ in range(80):
        z = draw(4000, a, r)
        ins = z[Vc(z)[:, 0] <= upper]
        if len(ins) == 0:
            a, r = a * 0.5, r * 0.5
            continue
        smax = np.abs(ins[:, free]).max() if free else 0.0
        amax = angles(ins).max()
        if free and smax > 0.9 * r:
            r *= 2.0
            continue
        if angle_pairs and amax > 0.9 * a and a < math.pi:
            a = min(math.pi, 2.0 * a)
            continue
        if len(ins) < 200:
            a2 = min(math.pi, 1.5 * amax) if angle_pairs else a
            r2 = 1.5 * smax if free else r
            if a2 >= a and r2 >= r:
                break
            a, r = max(a2, 1e-12), max(r2, 1e-12)
            continue
        break
    out, got = [], 0
    for _ in range(max_rounds):
        z = draw(batch, a, r)
        vals = Vc(z)[:, 0]
        keep = z[(vals <= upper) & (vals >= lower)]
        out.append(keep)
        got += len(keep)
        if got >= n:
            break
    pts = np.concatenate(out)[:n] if out else np.zeros((0, m))
    if len(pts) < n:
        raise RoaError(f"only {len(pts)} samples found in the band [{lower}, {upper}]")
    return pts


def sample_shell(
    V: Polynomial,
    variables: Sequence[int],
    pairs: Sequence[tuple[int, int]],
    n: int,
    rng: np.random.Generator,
    lower: float,
    upper: float,
    base: Optional[np.ndarray] = None,
    free_max: float = 1e3,
    steps: int = 60,
) -> tuple[np.ndarray, np.ndarray]:
    """Manifold points on level sets V = L with L uniform in [lower, upper].

    Random rays in the local coordinates (angles of recast pairs, raw values
    otherwise) are bisected for the level; thin bands are therefore as cheap
    as thick ones.  ``base`` (one point or one row per ray) fixes the other
    coordinates.  Returns the points and a mask of rays that found their level.
    """
    m = len(V.space)
    Vc = CompiledPolyVector([V])
    variables = list(variables)
    angle_pairs = [(s, c) for s, c in pairs if s in variables and c in variables]
    in_pair = {v for pc in angle_pairs for v in pc}
    free = [v for v in variables if v not in in_pair]
    if base is None:
        base = np.zeros((n, m))
    base = np.broadcast_to(np.asarray(base, dtype=float), (n, m)).copy()
    d = rng.standard_normal((n, len(angle_pairs) + len(free)))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    level = rng.uniform(lower, upper, n)
    na = len(angle_pairs)
    amax = np.abs(d[:, :na]).max(axis=1) if na else np.zeros(n)
    fmax = np.abs(d[:, na:]).max(axis=1) if free else np.zeros(n)
    with np.errstate(divide="ignore"):
        tmax = np.minimum(np.where(amax > 0, math.pi / amax, np.inf), np.where(fmax > 0, free_max / fmax, np.inf))

    def point(t):
        z = base.copy()
        for a, (s, c) in enumerate(angle_pairs):
            x = t * d[:, a]
            z[:, s] = np.sin(x)
            z[:, c] = 1.0 - np.cos(x)
        for a, v in enumerate(free):
            z[:, v] = t * d[:, na + a]
        return z

    def f(t):
        return Vc(point(t))[:, 0] - level

    ok = f(np.zeros(n)) < 0
    # grow the bracket geometrically up to the coordinate limit
    hi = np.minimum(np.full(n, 1e-3), tmax)
    for _ in range(60):
        pos = f(hi) >= 0
        grow = ~pos & (hi < tmax)
        if not grow.any():
            break
        hi = np.where(grow, np.minimum(hi * 2.0, tmax), hi)
    ok &= f(hi) >= 0
    lo = np.zeros(n)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        below = f(mid) < 0
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return point(hi), ok


@dataclass
class ContourGrid:
    x: np.ndarray  # angle grid (rad)
    y: np.ndarray  # speed grid
    values: list  # one V grid per history entry, shape (len(y), len(x))
    x_label: str
    y_label: str


def contour_data(
    est: RoaEstimate,
    angle_pair: Optional[tuple[int, int]],
    speed_var: Optional[int],
    x_range=(-math.pi, math.pi),
    y_range=(-5.0, 5.0),
    n: int = 121,
    labels=("delta", "omega"),
    history: bool = True,
) -> ContourGrid:
    """V over an (angle, speed) window with every other coordinate held at zero."""
    m = len(est.V.space)
    xs = np.linspace(*x_range, n)
    ys = np.linspace(*y_range, n)
    X, Y = np.meshgrid(xs, ys)
    z = np.zeros((X.size, m))
    if angle_pair is not None:
        s, c = angle_pair
        z[:, s] = np.sin(X.ravel())
        z[:, c] = 1.0 - np.cos(X.ravel())
    if speed_var is not None:
        z[:, speed_var] = Y.ravel()
    Vs = est.V_history if history and est.V_history else [est.V]
    vals = [CompiledPolyVector([v])(z)[:, 0].reshape(X.shape) for v in Vs]
    return ContourGrid(xs, ys, vals, labels[0], labels[1])
