"""Local state feedback for subsystems whose level set is not trapping.

When the boundary ``V_i = eps_i^k`` (with neighbours inside their own levels)
admits no certificate of decrease, an affine law ``u`` in the subsystem's
variables is sought together with the SOS multipliers.  The law enters one
designated equation (generator speed, or load angle through the recast
chain rule) and is only active while ``V_i`` lies in its band.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .certify import MinEpsilon, RingOptions, add_ring_constraint, min_epsilon, ring_scales, subsystem_vdot
from .model import InterconnectedSystem, neighbors
from .poly import CompiledPolyVector, Polynomial, VarSpace, format_poly, parse_poly
from .roa import RoaError, affine_lie, pairs_from_constraints, sample_shell
from .sdp import SdpStatus
from .sos import AffinePoly, SosProgram

log = logging.getLogger(__name__)


@dataclass
class ControlLaw:
    """``u`` enters row v as ``direction[v] * u``; active for lower <= V_i <= upper."""

    subsystem: int
    iteration: int
    u: Polynomial
    direction: Mapping[int, Polynomial]
    lower: float
    upper: float
    channel: str = ""

    def rows(self) -> dict[int, Polynomial]:
        return {v: b * self.u for v, b in self.direction.items()}

    def active(self, level: float) -> bool:
        return self.lower <= level <= self.upper

    def effort(self) -> float:
        return float(sum(abs(c) for _, c in self.u.items()))

    def to_dict(self) -> dict:
        sp = self.u.space
        return {
            "subsystem": self.subsystem + 1,
            "iteration": self.iteration,
            "channel": self.channel,
            "u": format_poly(self.u),
            "direction": {sp.names[v]: format_poly(b) for v, b in self.direction.items()},
            "band": [self.lower, self.upper],
        }

    @classmethod
    def from_dict(cls, d: dict, space: VarSpace) -> "ControlLaw":
        return cls(
            int(d["subsystem"]) - 1,
            int(d["iteration"]),
            parse_poly(d["u"], space),
            {space.index(k): parse_poly(v, space) for k, v in d["direction"].items()},
            float(d["band"][0]),
            float(d["band"][1]),
            d.get("channel", ""),
        )


@dataclass
class Channel:
    """Where a control input enters a subsystem."""

    name: str
    direction: Mapping[int, Polynomial]


def speed_channel(space: VarSpace, var: int) -> Channel:
    return Channel("speed", {var: space.const(1.0)})


def angle_channel(space: VarSpace, s: int, c: int) -> Channel:
    """Input added to the angle rate: d(z_s) += (1 - z_c) u, d(z_c) += z_s u."""
    return Channel("angle", {s: 1 - space.var(c), c: space.var(s)})


def direct_channel(space: VarSpace, var: int) -> Channel:
    return Channel("direct", {var: space.const(1.0)})


@dataclass
class ControlOptions:
    degree: int = 1
    # synthesis margins as multiples of the ring margin, tried in order until a law verifies;
    # the inaccurate optima of these programs are sensitive to the margin
    robustness: tuple = (100.0, 30.0, 300.0, 1000.0)
    samples: int = 2000
    seed: int = 0
    inflation: tuple = (1.0, 1.5, 2.0, 4.0)  # gain factors tried when the synthesis optimum is inaccurate
    ring: RingOptions = field(default_factory=RingOptions)


# -- detection ---------------------------------------------------------------------


@dataclass
class ControlNeed:
    needed: bool
    reason: str  # "certified", "sample", "inconclusive"
    witness: Optional[np.ndarray] = None
    max_vdot: Optional[float] = None


def _boundary_program(sys, i, eps, Vs, opts: RingOptions, control_rows=None) -> SosProgram:
    prog = SosProgram(sys.space)
    vdot = AffinePoly.lift(subsystem_vdot(sys, i, Vs[i], control_rows), sys.space)
    add_ring_constraint(prog, sys, i, Vs, eps, vdot, None, opts, name=f"boundary S{i + 1}")
    return prog


def sample_neighbourhood(
    sys: InterconnectedSystem,
    i: int,
    eps: Sequence[float],
    Vs: Sequence[Polynomial],
    n: int,
    rng: np.random.Generator,
    lower: float,
    upper: float,
) -> np.ndarray:
    """Manifold points with lower <= V_i <= upper and V_j <= eps_j for each neighbour."""
    sub = sys.subsystems[i]
    pairs_all = []
    for s in sys.subsystems:
        pairs_all += pairs_from_constraints(s.G)
    z, ok = sample_shell(Vs[i], sub.variables, pairs_all, n, rng, lower, upper)
    own = set(sub.variables)
    for j in sorted(neighbors(sys, i) - {i}):
        vj = [v for v in sys.subsystems[j].variables if v not in own]
        if not vj:
            ok &= CompiledPolyVector([Vs[j]])(z)[:, 0] <= eps[j]
            continue
        if eps[j] <= 0:
            z[:, vj] = 0.0
            ok &= CompiledPolyVector([Vs[j]])(z)[:, 0] <= 1e-12
            continue
        z, okj = sample_shell(Vs[j], vj, pairs_all, n, rng, 0.0, eps[j], base=z)
        ok &= okj
    return z[ok]


def needs_control(
    i: int,
    k: int,
    eps: Sequence[float],
    sys: InterconnectedSystem,
    Vs: Sequence[Polynomial],
    opts: Optional[ControlOptions] = None,
) -> ControlNeed:
    """Does the boundary V_i = eps_i fail to be certified decreasing?"""
    opts = opts or ControlOptions()
    sol = _boundary_program(sys, i, eps, Vs, opts.ring).solve(opts.ring.sdp)
    if sol.feasible:
        return ControlNeed(False, "certified")
    rng = np.random.default_rng(opts.seed + 7919 * i + k)
    try:
        z = sample_neighbourhood(sys, i, eps, Vs, opts.samples, rng, 0.995 * eps[i], eps[i])
    except RoaError:
        return ControlNeed(True, "inconclusive")
    if len(z) == 0:
        return ControlNeed(True, "inconclusive")
    vd = CompiledPolyVector([subsystem_vdot(sys, i, Vs[i])])(z)[:, 0]
    j = int(np.argmax(vd))
    if vd[j] >= 0:
        return ControlNeed(True, "sample", z[j], float(vd[j]))
    return ControlNeed(True, "inconclusive", None, float(vd[j]))


# -- synthesis ---------------------------------------------------------------------


def synthesize(
    i: int,
    k: int,
    eps: Sequence[float],
    sys: InterconnectedSystem,
    Vs: Sequence[Polynomial],
    channel: Channel,
    opts: Optional[ControlOptions] = None,
) -> Optional[ControlLaw]:
    """Minimal-L1 affine law making the boundary V_i = eps_i decreasing.

    Returns the law (band upper edge eps_i, lower edge filled in later) or
    ``None`` when no law of the requested degree exists.
    """
    opts = opts or ControlOptions()
    schedule = opts.robustness if isinstance(opts.robustness, (tuple, list)) else (opts.robustness,)
    for rob in schedule:
        law = _synthesize_once(i, k, eps, sys, Vs, channel, opts, float(rob))
        if law is not None:
            return law
    return None


def _synthesize_once(i, k, eps, sys, Vs, channel, opts: ControlOptions, rob: float) -> Optional[ControlLaw]:
    sub = sys.subsystems[i]
    space = sys.space
    ring = RingOptions(**{**opts.ring.__dict__, "margin": opts.ring.margin * rob})
    prog = SosProgram(space)
    # u = sum (p_k - n_k) m_k with p, n >= 0; minimize sum (p + n)
    from .poly import monomial_basis

    basis = [m for m in monomial_basis(sub.variables, opts.degree) if m.degree >= 1]
    # coefficients are expressed relative to the level-set extent of each monomial,
    # so the objective is the L1 size of u over the band rather than in raw units
    r = ring_scales(sys, i, Vs, eps, sorted(neighbors(sys, i) - {i}))
    u = AffinePoly(space)
    cost = AffinePoly(space)
    for m in basis:
        p = prog.new_scalar(nonneg=True)
        q = prog.new_scalar(nonneg=True)
        w = 1.0
        for v, e in m:
            w *= r.get(v, 1.0) ** e
        mono = Polynomial(space, {m: 1.0 / w})
        u = u + (p - q) * mono
        cost = cost + p + q
    Vi = Vs[i]
    grad_b = space.zero()
    for v, b in channel.direction.items():
        grad_b = grad_b + Vi.diff(v) * b
    vdot = AffinePoly.lift(subsystem_vdot(sys, i, Vi), space) + u * grad_b
    add_ring_constraint(prog, sys, i, Vs, eps, vdot, None, ring, name=f"control S{i + 1} k={k}")
    prog.minimize(cost)
    sol = prog.solve(ring.sdp)
    if sol.feasible:
        law_u = sol.value(u).threshold(1e-9)
        return ControlLaw(i, k, law_u, dict(channel.direction), 0.0, float(eps[i]), channel.name)
    if sol.status in (SdpStatus.NUMERICAL_FAILURE, SdpStatus.MAX_ITER) and np.all(np.isfinite(sol.sdp.scalar_values)):
        # inaccurate optimum: keep it only if a separate feasibility program with the
        # law fixed certifies the boundary (gain inflation gives that program slack)
        cand = sol.value(u).threshold(1e-9)
        for f in opts.inflation:
            law = ControlLaw(i, k, cand * f, dict(channel.direction), 0.0, float(eps[i]), channel.name)
            if _boundary_program(sys, i, eps, Vs, opts.ring, law.rows()).solve(opts.ring.sdp).feasible:
                log.info("S%d k=%d: %s law verified after %.2gx inflation", i + 1, k, channel.name, f)
                return law
    log.info("S%d k=%d: no %s control law at robustness %g (%s)", i + 1, k, channel.name, rob, sol.status.value)
    return None


def controlled_min_epsilon(
    i: int,
    k: int,
    eps: Sequence[float],
    sys: InterconnectedSystem,
    Vs: Sequence[Polynomial],
    law: ControlLaw,
    opts: Optional[RingOptions] = None,
) -> MinEpsilon:
    return min_epsilon(i, k, eps, sys, Vs, law.rows(), opts)


class Controller:
    """Certification hook: synthesize on the designated channel when a boundary fails."""

    def __init__(self, channels: Mapping[int, Channel], opts: Optional[ControlOptions] = None):
        self.channels = dict(channels)
        self.opts = opts or ControlOptions()
        self.reports: list[ControlNeed] = []

    def __call__(self, i, k, eps, sys, Vs) -> Optional[ControlLaw]:
        if i not in self.channels:
            return None
        need = needs_control(i, k, eps, sys, Vs, self.opts)
        self.reports.append(need)
        if not need.needed:
            return None
        return synthesize(i, k, eps, sys, Vs, self.channels[i], self.opts)


def finalize_band(law: ControlLaw, lower: float) -> ControlLaw:
    law.lower = float(lower)
    return law
