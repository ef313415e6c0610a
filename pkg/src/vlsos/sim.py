"""Time-domain replay of the trigonometric network model.

Line trips and restorations switch the admittance matrix; integration is
restarted exactly at every event time.  Control laws from the certification
stage act on one state equation each and are switched on and off by terminal
events on the edges of their activation band.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .control import ControlLaw
from .poly import CompiledPolyVector, Polynomial
from .power import NetworkModel, RecastMap, RelativeSystem

log = logging.getLogger(__name__)

RTOL = 1e-8
ATOL = 1e-10
# explicit steps near the stability limit of the fast load modes leave interpolation
# noise of ~1e-8 at rest; capping the step removes it for a modest cost
MAX_STEP = 0.1
BAND_TOL = 1e-9  # relative slack of the band test when a mode is (re)initialized


class SimulationError(RuntimeError):
    pass


class LevelError(ValueError):
    """A state lies outside the unit sublevel set of some subsystem."""

    def __init__(self, msg, levels):
        super().__init__(msg)
        self.levels = levels


@dataclass(frozen=True)
class Event:
    time: float
    line: tuple
    action: str = "trip"  # or "restore"

    def __post_init__(self):
        if self.action not in ("trip", "restore"):
            raise ValueError(f"unknown event action {self.action!r}")


@dataclass
class Scenario:
    model: NetworkModel
    events: list = field(default_factory=list)
    horizon: float = 10.0
    dt: float = 0.01
    start: float = 0.0
    control_start: Optional[float] = None  # defaults to the last event (fault clearance)

    def __post_init__(self):
        times = [e.time for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("event times must be nondecreasing")
        if self.dt <= 0 or self.horizon <= self.start:
            raise ValueError("need dt > 0 and horizon > start")
        for e in self.events:
            self.model.net.line(*e.line)  # raises for unknown lines
            if not (self.start <= e.time <= self.horizon):
                raise ValueError(f"event at t={e.time} outside [{self.start}, {self.horizon}]")
        if self.control_start is None:
            self.control_start = times[-1] if times else self.start

    def segments(self) -> list[tuple[float, float, frozenset]]:
        """Intervals of constant topology with the outaged line set on each."""
        out, cur, t0 = [], set(), self.start
        for e in self.events:
            if e.time > t0:
                out.append((t0, e.time, frozenset(cur)))
                t0 = e.time
            key = (min(e.line), max(e.line))
            if e.action == "trip":
                cur.add(key)
            else:
                cur.discard(key)
        out.append((t0, self.horizon, frozenset(cur)))
        return out


def fault_scenario(model: NetworkModel, horizon: float = 10.0, dt: float = 0.01) -> Scenario:
    """Line 5-7 out on [0, 3] s and line 7-8 out on [1, 3] s."""
    ev = [
        Event(0.0, (5, 7)),
        Event(1.0, (7, 8)),
        Event(3.0, (5, 7), "restore"),
        Event(3.0, (7, 8), "restore"),
    ]
    return Scenario(model, ev, horizon, dt)


@dataclass
class Trajectory:
    t: np.ndarray
    y: np.ndarray
    z: np.ndarray
    V: np.ndarray  # (N, n_subsystems), nan where no function was given
    active: np.ndarray  # (N, n_laws) bool
    windows: list  # per law: list of (t_on, t_off)
    state_labels: list
    z_labels: list
    v_labels: list
    law_labels: list

    def to_csv(self, header: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        for line in header:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        cols = ["t"] + self.state_labels + self.z_labels + self.v_labels + self.law_labels
        w.writerow(cols)
        for k in range(len(self.t)):
            row = [self.t[k], *self.y[k], *self.z[k], *self.V[k]]
            w.writerow([f"{x:.10g}" for x in row] + [int(a) for a in self.active[k]])
        return buf.getvalue()

    def final(self) -> np.ndarray:
        return self.y[-1]


def control_index(law: ControlLaw, rmap: RecastMap) -> int:
    """State index (relative coordinates) of the equation the law enters."""
    keys = set(law.direction)
    for k, (s, c) in enumerate(rmap.pairs):
        if s in keys:
            return k
    for j, v in enumerate(rmap.speed):
        if v in keys:
            return rmap.n_angles + j
    raise SimulationError(f"control law for S{law.subsystem + 1} enters no known state equation")


def _levels(Vc: Optional[CompiledPolyVector], z: np.ndarray, nsub: int) -> np.ndarray:
    if Vc is None:
        return np.full(z.shape[:-1] + (nsub,), np.nan)
    return Vc(np.atleast_2d(z))


def levels_at(y: np.ndarray, Vs: Sequence[Polynomial], rmap: RecastMap, check: bool = True) -> np.ndarray:
    """gamma_i = V_i at the recast image of relative state y."""
    z = rmap.forward(np.asarray(y, dtype=float))
    g = CompiledPolyVector(list(Vs))(z[None])[0]
    if check and np.any(g > 1.0):
        bad = [int(i) + 1 for i in np.flatnonzero(g > 1.0)]
        raise LevelError(f"state outside the unit level set of subsystem(s) {bad}", g)
    return g


def integrate(
    scenario: Scenario,
    y0: Optional[np.ndarray] = None,
    controls: Sequence[ControlLaw] = (),
    Vs: Optional[Sequence[Polynomial]] = None,
    rtol: float = RTOL,
    atol: float = ATOL,
    method: str = "DOP853",
    max_step: float = MAX_STEP,
) -> Trajectory:
    model = scenario.model
    rel, rmap = model.rel, model.rmap
    nsub = len(model.inter.subsystems)
    y = np.zeros(rel.dim) if y0 is None else np.array(y0, dtype=float)
    if y.shape != (rel.dim,) or not np.all(np.isfinite(y)):
        raise SimulationError("initial state must be a finite vector of the model dimension")
    if controls and Vs is None:
        raise SimulationError("control laws need the Lyapunov functions for their activation test")
    Vc = CompiledPolyVector(list(Vs)) if Vs is not None else None
    laws = []
    for law in controls:
        if law.upper - law.lower <= BAND_TOL * max(law.upper, 1e-12):
            # a single level set has measure zero along trajectories
            log.info("S%d k=%d: degenerate activation band ignored", law.subsystem + 1, law.iteration)
            continue
        laws.append(law)
    idx = [control_index(l, rmap) for l in laws]
    uc = CompiledPolyVector([l.u for l in laws]) if laws else None
    Vl = [CompiledPolyVector([Vs[l.subsystem]]) for l in laws]

    def lvl(k, yy):
        return float(Vl[k](rmap.forward(yy)[None])[0, 0])

    def rhs_factory(sysr: RelativeSystem, on: tuple):
        def f(t, yy):
            extra = None
            if any(on):
                u = uc(rmap.forward(yy)[None])[0]
                extra = np.zeros_like(yy)
                for k, a in enumerate(on):
                    if a:
                        extra[idx[k]] += u[k]
            return sysr.rhs(yy, extra)

        return f

    def edge_events(on):
        evs = []
        for k, law in enumerate(laws):
            if on[k]:
                pairs = [(law.upper, 1.0), (law.lower, -1.0)]  # leave through either edge
            else:
                pairs = [(law.upper, -1.0), (law.lower, 1.0)]  # enter through either edge
            for edge, direction in pairs:
                def g(t, yy, k=k, edge=edge):
                    return lvl(k, yy) - edge

                g.terminal = True
                g.direction = direction
                g.law = k
                evs.append(g)
        return evs

    def initial_mode(t, yy):
        if t < scenario.control_start - 1e-12:
            return tuple(False for _ in laws)
        out = []
        for k, law in enumerate(laws):
            v, tol = lvl(k, yy), BAND_TOL * max(law.upper, 1e-12)
            out.append(law.lower - tol <= v <= law.upper + tol)
        return tuple(out)

    grid = scenario.start + scenario.dt * np.arange(int(round((scenario.horizon - scenario.start) / scenario.dt)) + 1)
    ts, ys, acts = [], [], []
    windows: list = [[] for _ in laws]
    open_at: list = [None] * len(laws)
    cuts = [a for a, _, _ in scenario.segments()] + [scenario.horizon]
    if laws and scenario.start < scenario.control_start < scenario.horizon and scenario.control_start not in cuts:
        cuts = sorted(cuts + [scenario.control_start])
    topo = scenario.segments()

    def outaged_at(t):
        for a, b, o in topo:
            if a <= t < b:
                return o
        return topo[-1][2]

    t = scenario.start
    on = initial_mode(t, y)
    for k, a in enumerate(on):
        if a:
            open_at[k] = t
    for seg in range(len(cuts) - 1):
        a, b = cuts[seg], cuts[seg + 1]
        if b <= a:
            continue
        if seg > 0 and laws and abs(a - scenario.control_start) < 1e-12:
            on = initial_mode(a, y)
            for k, x in enumerate(on):
                if x and open_at[k] is None:
                    open_at[k] = a
        sysr = rel.with_outages(outaged_at(a))
        t = a
        while t < b:
            evs = edge_events(on) if (laws and t >= scenario.control_start - 1e-12) else None
            teval = np.append(grid[(grid >= t) & (grid < b)], b)
            sol = solve_ivp(
                rhs_factory(sysr, on), (t, b), y, method=method, t_eval=teval, events=evs, rtol=rtol, atol=atol,
                max_step=max_step,
            )
            if sol.status == -1:
                raise SimulationError(f"integration failed at t={sol.t[-1] if len(sol.t) else t:.6g}: {sol.message}")
            # an event before the first output point leaves empty lists behind
            st = np.asarray(sol.t, dtype=float)
            sy = sol.y.T if len(st) else np.zeros((0, rel.dim))
            ts.append(st)
            ys.append(sy)
            acts.append(np.tile(np.array(on, dtype=bool), (len(st), 1)))
            if sol.status == 1:
                fired = [(sol.t_events[e][0], e) for e in range(len(evs)) if len(sol.t_events[e])]
                te, e = min(fired)
                k = evs[e].law
                y = sol.y_events[e][0].copy()
                on = tuple((not x) if j == k else x for j, x in enumerate(on))
                if on[k]:
                    open_at[k] = te
                else:
                    windows[k].append((open_at[k], te))
                    open_at[k] = None
                # drop grid points already integrated past the event
                keep = ts[-1] <= te
                ts[-1], ys[-1], acts[-1] = ts[-1][keep], ys[-1][keep], acts[-1][keep]
                t = te + 1e-12 if te < b else b  # avoid retriggering the same root
            else:
                y = sol.y[:, -1]
                t = b
    for k in range(len(laws)):
        if open_at[k] is not None:
            windows[k].append((open_at[k], None))
    # final sample at the horizon
    ts.append(np.array([scenario.horizon]))
    ys.append(y[None])
    acts.append(np.array([on], dtype=bool).reshape(1, len(laws)))
    T = np.concatenate(ts)
    Y = np.concatenate(ys)
    A = np.concatenate(acts) if laws else np.zeros((len(T), 0), dtype=bool)
    # duplicated restart times keep the sample of the later segment (its mode)
    _, first_rev = np.unique(T[::-1], return_index=True)
    uniq = len(T) - 1 - first_rev
    T, Y, A = T[uniq], Y[uniq], A[uniq]
    Z = rmap.forward(Y)
    V = _levels(Vc, Z, nsub)
    space = model.sys.space
    return Trajectory(
        T,
        Y,
        Z,
        V,
        A,
        windows,
        rel.state_labels(),
        list(space.names),
        [f"V{i + 1}" for i in range(nsub)],
        [f"u{l.subsystem + 1}_k{l.iteration}" for l in laws],
    )


def integrate_recast(
    model: NetworkModel, z0: np.ndarray, horizon: float, dt: float = 0.01, rtol=RTOL, atol=ATOL, max_step=MAX_STEP
):
    """Integrate the polynomial recast system directly (no events)."""
    F = model.sys.compiled()
    grid = dt * np.arange(int(round(horizon / dt)) + 1)
    sol = solve_ivp(lambda t, z: F(z[None])[0], (0.0, horizon), np.asarray(z0, float), method="DOP853",
                    t_eval=grid, rtol=rtol, atol=atol, max_step=max_step)
    if sol.status == -1:
        raise SimulationError(sol.message)
    return sol.t, sol.y.T


def activation_report(traj: Trajectory, laws: Sequence[ControlLaw]) -> list[dict]:
    out = []
    laws = [l for l in laws if l.upper - l.lower > BAND_TOL * max(l.upper, 1e-12)]
    for law, win in zip(laws, traj.windows):
        out.append(
            {
                "subsystem": law.subsystem + 1,
                "iteration": law.iteration,
                "band": [float(law.lower), float(law.upper)],
                "windows": [[float(a), None if b is None else float(b)] for a, b in win],
                "effort": float(law.effort()),
            }
        )
    return out
