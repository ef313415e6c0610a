"""Distributed asymptotic-stability test with per-subsystem level sequences.

At iteration ``k`` every subsystem ``i`` looks for the smallest level
``eps_i^{k+1}`` such that ``dV_i/dt < 0`` (coupled dynamics) on the ring

    eps_i^{k+1} <= V_i <= eps_i^k,   V_j <= eps_j^k  (j neighbours of i),

restricted to the constraint manifold.  All subsystems publish their new
level before the next iteration starts.  Sequences that reach zero certify
asymptotic stability of the interconnection on the initial sublevel set.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

from .model import InterconnectedSystem, neighbors
from .poly import Polynomial
import numpy as np

from .roa import affine_lie, margin_poly, pairs_from_constraints
from .sdp import SdpOptions, bisect_search
from .sos import AffinePoly, SosProgram

log = logging.getLogger(__name__)


class CertificationError(RuntimeError):
    pass


class Outcome(str, enum.Enum):
    ASYMPTOTICALLY_STABLE = "AsymptoticallyStable"
    LYAPUNOV_STABLE_ONLY = "LyapunovStableOnly"
    NOT_CERTIFIED = "NotCertified"


@dataclass
class RingOptions:
    multiplier_degree: int = 2
    margin: float = 1e-4
    tol: float = 1e-4  # bisection tolerance on levels; smaller levels are clamped to 0
    eps_bar: float = 1e-3
    max_iter: int = 200
    cliques: bool = True
    workers: int = 1
    sdp: SdpOptions = field(default_factory=SdpOptions)

    def __post_init__(self):
        if not (self.tol > 0 and self.eps_bar > 0 and self.margin > 0):
            raise ValueError("tolerances must be positive")
        if self.multiplier_degree % 2:
            raise ValueError("multiplier degree must be even")


def _even_up(d: int) -> int:
    return d + (d % 2)


def _check_vs(sys: InterconnectedSystem, i: int, Vs: Sequence[Optional[Polynomial]]) -> list[int]:
    nbr = sorted(neighbors(sys, i) - {i})
    for j in [i] + nbr:
        if j >= len(Vs) or Vs[j] is None:
            raise CertificationError(f"missing Lyapunov function for subsystem {j + 1} (neighbour of {i + 1})")
    return nbr


def level_extents(V: Polynomial, variables: Sequence[int], pairs: Sequence[tuple[int, int]], level: float) -> dict:
    """Approximate half-widths of {V <= level} per variable, from the local quadratic model.

    Angles enter through (sin, 1 - cos) pairs, so the second-order model in the
    angle coordinates picks up the linear coefficient of the cosine variable.
    Only used to rescale SOS programs; any positive value is admissible.
    """
    cvar = {c: s for s, c in pairs if s in variables and c in variables}
    coords = [v for v in variables if v not in cvar]
    pos = {v: a for a, v in enumerate(coords)}
    n = len(coords)
    P = np.zeros((n, n))
    for m, cf in V.items():
        vs = list(m)
        if m.degree == 1 and vs[0][0] in cvar:
            a = pos[cvar[vs[0][0]]]
            P[a, a] += cf
        elif m.degree == 2 and all(v in pos for v, _ in vs):
            if len(vs) == 1:
                a = pos[vs[0][0]]
                P[a, a] += 2 * cf
            else:
                a, b = pos[vs[0][0]], pos[vs[1][0]]
                P[a, b] += cf
                P[b, a] += cf
    out = {}
    if n == 0 or level <= 0:
        return out
    w, U = np.linalg.eigh(P)
    if w.min() <= 1e-12 * max(1.0, abs(w).max()):
        return out
    ext = np.sqrt(2 * level * np.diag(U @ np.diag(1 / w) @ U.T))
    for v, a in pos.items():
        out[v] = float(ext[a])
    for c, s in cvar.items():
        out[s] = min(out[s], 1.0)
        out[c] = out[s] ** 2 / 2
    return out


def ring_scales(sys: InterconnectedSystem, i: int, Vs, eps, nbr) -> dict:
    """Diagonal variable scaling for the ring program of subsystem i."""
    pairs = []
    for sub in sys.subsystems:
        pairs += pairs_from_constraints(sub.G)
    r: dict = {}
    for j in [i] + nbr:
        e = level_extents(Vs[j], sys.subsystems[j].variables, pairs, eps[j])
        for v, x in e.items():
            r.setdefault(v, x)  # own subsystem first
    return {v: x for v, x in r.items() if np.isfinite(x) and x > 0}


def add_ring_constraint(
    prog: SosProgram,
    sys: InterconnectedSystem,
    i: int,
    Vs: Sequence[Polynomial],
    eps: Sequence[float],
    vdot: AffinePoly,
    lower: Optional[float],
    opts: RingOptions,
    name: str = "ring",
):
    """Add ``-vdot - multipliers in SOS`` for the ring of subsystem ``i``.

    ``lower=None`` selects the boundary form ``V_i = eps_i`` (free multiplier).
    """
    sub = sys.subsystems[i]
    nbr = _check_vs(sys, i, Vs)
    # work with V_j / eps_j so every level constraint sits at 1 (conditioning)
    scale = {j: 1.0 / eps[j] if eps[j] > 0 else 1.0 for j in [i] + nbr}
    Vs = {j: Vs[j] * scale[j] for j in [i] + nbr}
    eps = {j: eps[j] * scale[j] for j in [i] + nbr}
    if lower is not None:
        lower = lower * scale[i]
    vdot = vdot * scale[i]
    # rescale the variables so the level sets have unit extent
    r = ring_scales(sys, i, Vs, eps, nbr)
    Vs = {j: V.rescale(r) for j, V in Vs.items()}
    vdot = vdot.rescale(r)
    Vi = Vs[i]
    own = sorted(set(sub.variables) | set(Vi.variables()))
    cliques = []
    for j in nbr:
        cliques.append(sorted(set(own) | set(sys.subsystems[j].variables) | set(Vs[j].variables())))
    if not cliques:
        cliques = [own]
    md = opts.multiplier_degree
    top = _even_up(max([vdot.degree, Vi.degree + md] + [Vs[j].degree + md for j in nbr]))

    expr = -vdot - margin_poly(sys.space, sorted(Vi.variables()), opts.margin)
    upper_gap = eps[i] - Vi
    if lower is None:
        rho = prog.new_free_poly(own, top - Vi.degree, name="rho")
        expr = expr - rho * upper_gap
    else:
        sb = prog.new_sos_poly(own, top - Vi.degree, name="sigma_upper")
        sa = prog.new_sos_poly(own, top - Vi.degree, name="sigma_lower")
        expr = expr - sb * upper_gap - sa * (Vi - lower)
    for j, q in zip(nbr, cliques):
        sj = prog.new_sos_poly(q, top - Vs[j].degree, name=f"sigma_{j + 1}")
        expr = expr - sj * (eps[j] - Vs[j])
    own_eqs = [g.rescale(r) for g in sub.G]
    for g in own_eqs:
        lam = prog.new_free_poly(own, max(top - g.degree, 0))
        expr = expr - lam * g
    for j, q in zip(nbr, cliques):
        for g in sys.subsystems[j].G:
            g = g.rescale(r)
            if any(g.allclose(h) for h in own_eqs):
                continue
            lam = prog.new_free_poly(q, max(top - g.degree, 0))
            expr = expr - lam * g
    return prog.add_sos(expr, name, cliques=cliques if opts.cliques else None)


def subsystem_vdot(
    sys: InterconnectedSystem, i: int, V: Polynomial, control_rows: Optional[Mapping[int, Polynomial]] = None
) -> Polynomial:
    return V.lie_derivative(sys.subsystems[i].coupled_field(control_rows))


def ring_condition(
    i: int,
    k: int,
    eps: Sequence[float],
    sys: InterconnectedSystem,
    Vs: Sequence[Polynomial],
    eps_next: float,
    control_rows: Optional[Mapping[int, Polynomial]] = None,
    opts: Optional[RingOptions] = None,
) -> SosProgram:
    """SOS program whose feasibility certifies dV_i/dt < 0 on the ring [eps_next, eps_i]."""
    opts = opts or RingOptions()
    _check_vs(sys, i, Vs)
    prog = SosProgram(sys.space)
    vdot = AffinePoly.lift(subsystem_vdot(sys, i, Vs[i], control_rows), sys.space)
    add_ring_constraint(prog, sys, i, Vs, eps, vdot, eps_next, opts, name=f"ring S{i + 1} k={k}")
    return prog


@dataclass
class MinEpsilon:
    value: Optional[float]  # None when even the degenerate ring fails
    calls: int
    status: str = "ok"


def min_epsilon(
    i: int,
    k: int,
    eps: Sequence[float],
    sys: InterconnectedSystem,
    Vs: Sequence[Polynomial],
    control_rows: Optional[Mapping[int, Polynomial]] = None,
    opts: Optional[RingOptions] = None,
) -> MinEpsilon:
    """Smallest ring inner level on [0, eps_i] (bisection, tolerance ``opts.tol``)."""
    opts = opts or RingOptions()
    top = eps[i]
    if top <= 0:
        return MinEpsilon(0.0, 0)

    def check(e):
        prog = ring_condition(i, k, eps, sys, Vs, e, control_rows, opts)
        sol = prog.solve(opts.sdp)
        if sol.status.value not in ("Optimal", "Infeasible"):
            log.debug("S%d k=%d level %.6f: solver status %s", i + 1, k, e, sol.status.value)
        return sol.feasible

    # the degenerate ring at the current level decides feasibility in one call
    if not check(top):
        return MinEpsilon(None, 1, "infeasible")
    res = bisect_search(check, 0.0, top, opts.tol, minimize=True, permissive_payload=True)
    value = 0.0 if res.value <= opts.tol else res.value
    return MinEpsilon(value, res.calls + 1)


# -- fork-join iteration -------------------------------------------------------------


@dataclass
class LevelState:
    names: list
    table: list = field(default_factory=list)  # table[k][i] = eps_i^k
    status: list = field(default_factory=list)  # status[k][i] for the step k -> k+1
    controlled: set = field(default_factory=set)  # (i, k) pairs where control was applied
    calls: int = 0

    @property
    def k(self) -> int:
        return len(self.table) - 1

    def column(self, i: int) -> list[float]:
        return [row[i] for row in self.table]


@dataclass
class Verdict:
    outcome: Outcome
    limits: list
    controls: list  # (i, k) pairs, 0-based
    iterations: int
    message: str = ""


ControlHook = Callable[..., Optional[object]]


def _solve_one(args):
    i, k, eps, sys, Vs, controller, opts = args
    r = min_epsilon(i, k, eps, sys, Vs, None, opts)
    law = None
    if r.value is None and controller is not None:
        law = controller(i, k, eps, sys, Vs)
        if law is not None:
            r2 = min_epsilon(i, k, eps, sys, Vs, law.rows(), opts)
            r2.calls += r.calls
            r = r2
            if r.value is None:
                law = None
            else:
                law.lower = r.value
    return r, law


def run_certification(
    sys: InterconnectedSystem,
    Vs: Sequence[Polynomial],
    gamma0: Sequence[float],
    eps_bar: Optional[float] = None,
    controller: Optional[ControlHook] = None,
    opts: Optional[RingOptions] = None,
):
    """Iterate the level sequences; returns ``(Verdict, LevelState, control_laws)``.

    A subsystem makes progress in an iteration when its level drops by at least
    ``eps_bar`` relative to its current level.  The run stops when no subsystem
    makes progress (limits reached), when all levels are zero, or at the
    iteration cap.
    """
    opts = opts or RingOptions()
    if eps_bar is not None:
        opts.eps_bar = eps_bar
    n = len(sys)
    if len(gamma0) != n or len(Vs) != n:
        raise ValueError("need one initial level and one Lyapunov function per subsystem")
    for i, g in enumerate(gamma0):
        if not 0.0 <= g <= 1.0:
            raise CertificationError(f"initial level of S{i + 1} is {g:.4f}, outside (0, 1]")
    state = LevelState([s.label for s in sys.subsystems])
    eps = [float(g) for g in gamma0]
    state.table.append(list(eps))
    laws = []
    frozen = [e == 0.0 for e in eps]

    pool = ProcessPoolExecutor(opts.workers) if opts.workers > 1 else None
    try:
        for k in range(opts.max_iter):
            tasks = [(i, k, tuple(eps), sys, Vs, controller, opts) for i in range(n) if not frozen[i]]
            results = list(pool.map(_solve_one, tasks)) if pool else [_solve_one(t) for t in tasks]
            new = list(eps)
            stat = ["converged" if frozen[i] else "active" for i in range(n)]
            progress = False
            for (i, *_), (r, law) in zip(tasks, results):
                state.calls += r.calls
                if law is not None:
                    state.controlled.add((i, k))
                    laws.append(law)
                if r.value is None:
                    if k == 0:
                        state.status.append(stat)
                        msg = f"S{i + 1} has no decreasing ring at k=0"
                        return (
                            Verdict(Outcome.NOT_CERTIFIED, list(eps), sorted(state.controlled), k, msg),
                            state,
                            laws,
                        )
                    stat[i] = "infeasible"
                    continue
                v = min(r.value, eps[i])
                if eps[i] - v >= opts.eps_bar * eps[i]:
                    progress = True
                else:
                    stat[i] = "stalled"
                new[i] = v
                if v == 0.0:
                    frozen[i] = True
                    stat[i] = "converged"
                    progress = True
            state.status.append(stat)
            eps = new
            state.table.append(list(eps))
            log.info("k=%d levels %s", k + 1, " ".join(f"{e:.4f}" for e in eps))
            if all(frozen) or not progress:
                break
        else:
            log.warning("iteration cap %d reached", opts.max_iter)
    finally:
        if pool:
            pool.shutdown()

    limits = list(eps)
    capped = state.k >= opts.max_iter and not all(frozen)
    if all(e <= opts.eps_bar for e in limits) and not capped:
        out = Outcome.ASYMPTOTICALLY_STABLE
        msg = "all level sequences reach zero"
    else:
        out = Outcome.LYAPUNOV_STABLE_ONLY
        msg = "iteration cap reached" if capped else "nonzero limits"
    return Verdict(out, limits, sorted(state.controlled), state.k, msg), state, laws


def format_table(state: LevelState, digits: int = 4) -> str:
    """Plain-text level table: one row per iteration, '*' where control was applied."""
    w = digits + 4
    head = "k".rjust(4) + "".join(n.rjust(w + 1) for n in state.names)
    lines = [head]
    for k, row in enumerate(state.table):
        cells = []
        for i, e in enumerate(row):
            mark = "*" if (i, k) in state.controlled else " "
            cells.append(f"{e:.{digits}f}".rjust(w) + mark)
        lines.append(str(k).rjust(4) + "".join(cells))
    return "\n".join(lines) + "\n"
