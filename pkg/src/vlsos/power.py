"""Structure-preserving power network model.

Loads are first-order frequency-dependent nodes, generators follow the swing
equation.  Angles are taken relative to a reference generator, shifted so the
operating point sits at the origin, and then recast into polynomial form with
``z_s = sin(x)``, ``z_c = 1 - cos(x)`` per angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import yaml

from .model import InterconnectedSystem, PolySystem, decompose_node_overlap
from .poly import Polynomial, VarSpace

DATA_DIR = Path(__file__).parent / "data"


class NetworkError(ValueError):
    pass


class EquilibriumError(RuntimeError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str  # "load" | "generator"
    E: float


@dataclass(frozen=True)
class Line:
    frm: int
    to: int
    r: float
    x: float
    b: float = 0.0

    @property
    def key(self) -> tuple[int, int]:
        return (min(self.frm, self.to), max(self.frm, self.to))

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class Load:
    bus: int
    P_D: float
    D: float


@dataclass(frozen=True)
class Generator:
    bus: int
    M: float
    D: float
    P_M: Optional[float]  # None for the reference (slack) machine


@dataclass
class PowerNetwork:
    """Network data with nodes held in model order: loads, generators, reference last."""

    buses: list
    lines: list
    loads: dict
    generators: dict
    reference: int
    name: str = ""
    seed: Optional[int] = None
    notes: str = ""

    def __post_init__(self):
        self.validate()
        loads = sorted(b.id for b in self.buses if b.kind == "load")
        gens = sorted(b.id for b in self.buses if b.kind == "generator" and b.id != self.reference)
        self.order = loads + gens + [self.reference]
        self._pos = {b: k for k, b in enumerate(self.order)}
        self._bus = {b.id: b for b in self.buses}

    def validate(self) -> None:
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids")
        idset = set(ids)
        for b in self.buses:
            if b.kind not in ("load", "generator"):
                raise NetworkError(f"bus {b.id}: unknown type {b.kind!r}")
            if not b.E > 0:
                raise NetworkError(f"bus {b.id}: voltage magnitude must be positive")
            if b.kind == "load" and b.id not in self.loads:
                raise NetworkError(f"load bus {b.id} has no load entry")
            if b.kind == "generator" and b.id not in self.generators:
                raise NetworkError(f"generator bus {b.id} has no generator entry")
        for bid, ld in self.loads.items():
            if self_kind(self.buses, bid) != "load":
                raise NetworkError(f"load attached to non-load bus {bid}")
            if not ld.D > 0:
                raise NetworkError(f"load {bid}: D must be positive, got {ld.D}")
            if ld.P_D < 0:
                raise NetworkError(f"load {bid}: negative demand")
        for bid, g in self.generators.items():
            if self_kind(self.buses, bid) != "generator":
                raise NetworkError(f"generator attached to non-generator bus {bid}")
            if not g.M > 0:
                raise NetworkError(f"generator {bid}: M must be positive")
            if not g.D > 0:
                raise NetworkError(f"generator {bid}: D must be positive")
            if bid != self.reference and not (g.P_M is not None and g.P_M > 0):
                raise NetworkError(f"generator {bid}: P_M must be positive")
        if self.reference not in self.generators:
            raise NetworkError("reference must be a generator bus")
        if max(g.M for g in self.generators.values()) > self.generators[self.reference].M:
            raise NetworkError("reference generator must have the largest inertia")
        keys = set()
        for ln in self.lines:
            if ln.frm not in idset or ln.to not in idset or ln.frm == ln.to:
                raise NetworkError(f"line {ln.frm}-{ln.to}: bad endpoints")
            if ln.key in keys:
                raise NetworkError(f"duplicate line {ln.frm}-{ln.to}")
            if ln.r < 0 or ln.x <= 0:
                raise NetworkError(f"line {ln.frm}-{ln.to}: need r >= 0, x > 0")
            keys.add(ln.key)

    # -- sizes and lookups
    @property
    def n_nodes(self) -> int:
        return len(self.order)

    @property
    def L(self) -> int:
        return len(self.loads)

    @property
    def G(self) -> int:
        return len(self.generators)

    def pos(self, bus: int) -> int:
        return self._pos[bus]

    def bus(self, bus: int) -> Bus:
        return self._bus[bus]

    @property
    def E(self) -> np.ndarray:
        return np.array([self._bus[b].E for b in self.order])

    def line(self, a: int, b: int) -> Line:
        key = (min(a, b), max(a, b))
        for ln in self.lines:
            if ln.key == key:
                return ln
        raise NetworkError(f"no line {a}-{b}")

    def admittance(self, outaged: Iterable[tuple[int, int]] = ()) -> np.ndarray:
        """Bus admittance matrix in node order with the given lines removed."""
        out = {(min(a, b), max(a, b)) for a, b in outaged}
        for k in out:
            self.line(*k)
        n = self.n_nodes
        Y = np.zeros((n, n), dtype=complex)
        for ln in self.lines:
            if ln.key in out:
                continue
            i, j = self._pos[ln.frm], self._pos[ln.to]
            y = ln.series_admittance
            Y[i, i] += y + 0.5j * ln.b
            Y[j, j] += y + 0.5j * ln.b
            Y[i, j] -= y
            Y[j, i] -= y
        return Y


def self_kind(buses, bid):
    for b in buses:
        if b.id == bid:
            return b.kind
    raise NetworkError(f"unknown bus {bid}")


@dataclass(frozen=True)
class Transfer:
    """Polar form of an admittance matrix as used in the injection formula."""

    Ymag: np.ndarray  # |Y_ij| off the diagonal, 0 on it
    theta: np.ndarray
    Gii: np.ndarray

    @classmethod
    def from_admittance(cls, Y: np.ndarray) -> "Transfer":
        Ymag = np.abs(Y)
        theta = np.angle(Y)
        np.fill_diagonal(Ymag, 0.0)
        np.fill_diagonal(theta, 0.0)
        return cls(Ymag, theta, Y.real.diagonal().copy())


def electrical_power(net: PowerNetwork, delta: Sequence[float], outaged=()) -> np.ndarray:
    """P_Ei = E_i^2 G_ii + sum_j E_i E_j |Y_ij| cos(d_i - d_j - theta_ij), node order."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (net.n_nodes,):
        raise ValueError(f"expected {net.n_nodes} angles")
    return _injections(Transfer.from_admittance(net.admittance(outaged)), net.E, delta)


def _injections(tr: Transfer, E: np.ndarray, delta: np.ndarray) -> np.ndarray:
    d = delta[..., :, None] - delta[..., None, :] - tr.theta
    return E**2 * tr.Gii + E * np.sum(tr.Ymag * E * np.cos(d), axis=-1)


def _injection_jacobian(tr: Transfer, E: np.ndarray, delta: np.ndarray) -> np.ndarray:
    d = delta[:, None] - delta[None, :] - tr.theta
    K = -np.outer(E, E) * tr.Ymag * np.sin(d)  # dP_i/dd_i contributions
    J = -K
    np.fill_diagonal(J, K.sum(axis=1))
    return J


@dataclass(frozen=True)
class Equilibrium:
    delta: np.ndarray  # absolute angles, node order, reference at 0
    relative: np.ndarray  # non-reference angles minus reference angle
    P_M_ref: float
    residual: float
    iterations: int


def _balance_targets(net: PowerNetwork) -> np.ndarray:
    t = np.zeros(net.n_nodes - 1)
    for k, b in enumerate(net.order[:-1]):
        t[k] = -net.loads[b].P_D if b in net.loads else net.generators[b].P_M
    return t


def solve_equilibrium(
    net: PowerNetwork, guess: Optional[Sequence[float]] = None, tol: float = 1e-10, max_iter: int = 50
) -> Equilibrium:
    """Damped Newton on the n-1 non-reference balances; the reference absorbs the slack."""
    n = net.n_nodes
    tr = Transfer.from_admittance(net.admittance())
    E = net.E
    target = _balance_targets(net)
    x = np.zeros(n - 1) if guess is None else np.asarray(guess, dtype=float).copy()
    if x.shape == (n,):
        x = x[:-1] - x[-1]

    def resid(x):
        d = np.append(x, 0.0)
        return target - _injections(tr, E, d)[:-1]

    r = resid(x)
    for it in range(max_iter + 1):
        nr = np.max(np.abs(r))
        if nr < tol:
            d = np.append(x, 0.0)
            P_ref = float(_injections(tr, E, d)[-1])
            if not P_ref > 0:
                raise EquilibriumError(f"slack mechanical power {P_ref:.4g} is not positive")
            return Equilibrium(d, x.copy(), P_ref, float(nr), it)
        if it == max_iter:
            break
        J = -_injection_jacobian(tr, E, np.append(x, 0.0))[:-1, :-1]
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise EquilibriumError("singular power-flow Jacobian") from exc
        if not np.all(np.isfinite(step)):
            raise EquilibriumError("singular power-flow Jacobian")
        t = 1.0
        while t > 1e-4:
            xn = x + t * step
            rn = resid(xn)
            if np.max(np.abs(rn)) < (1 - 0.25 * t) * nr or np.max(np.abs(rn)) < tol:
                break
            t *= 0.5
        x, r = xn, rn
    raise EquilibriumError(f"no convergence in {max_iter} Newton iterations (residual {np.max(np.abs(r)):.3g})")


# -- relative-coordinate dynamics ------------------------------------------------


@dataclass
class RelativeSystem:
    """Shifted relative model with state ``y = (x_1..x_{N-1}, w_1..w_{G-1}, w_n)``.

    ``x_k`` is the angle of node k relative to the reference, minus its
    equilibrium value; ``w_i`` the generator speed relative to the reference and
    ``w_n`` the reference speed.
    """

    net: PowerNetwork
    eq: Equilibrium
    outaged: frozenset = frozenset()
    lam: float = 0.0

    def __post_init__(self):
        net = self.net
        self.tr = Transfer.from_admittance(net.admittance(self.outaged))
        self.Evec = net.E
        self.n_angles = net.n_nodes - 1
        self.gen_buses = [b for b in net.order[:-1] if b in net.generators]
        self.gen_pos = [net.pos(b) for b in self.gen_buses]
        self.load_pos = [net.pos(b) for b in net.order[:-1] if b in net.loads]
        self.dim = self.n_angles + len(self.gen_buses) + 1
        # speed state index of each generator node, reference last
        self.speed_index = {p: self.n_angles + k for k, p in enumerate(self.gen_pos)}
        self.ref_speed = self.dim - 1
        # per-node constants
        self.D = np.array([net.loads[b].D for b in net.order[:-1] if b in net.loads])
        self.P_D = np.array([net.loads[b].P_D for b in net.order[:-1] if b in net.loads])
        self.M = np.array([net.generators[b].M for b in self.gen_buses])
        self.P_M = np.array([net.generators[b].P_M for b in self.gen_buses])
        self.M_ref = net.generators[net.reference].M
        self.P_M_ref = self.eq.P_M_ref

    def with_outages(self, outaged: Iterable[tuple[int, int]]) -> "RelativeSystem":
        keys = frozenset((min(a, b), max(a, b)) for a, b in outaged)
        return RelativeSystem(self.net, self.eq, keys, self.lam)

    def angles(self, y: np.ndarray) -> np.ndarray:
        """Absolute-frame angles (reference at 0) for states ``y`` (..., dim)."""
        x = y[..., : self.n_angles]
        d = x + self.eq.relative
        return np.concatenate([d, np.zeros(d.shape[:-1] + (1,))], axis=-1)

    def rhs(self, y: np.ndarray, extra: Optional[np.ndarray] = None) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        P = _injections(self.tr, self.Evec, self.angles(y))
        w_n = y[..., self.ref_speed]
        out = np.empty_like(y)
        accel_ref = (self.P_M_ref - P[..., -1]) / self.M_ref
        out[..., self.ref_speed] = -self.lam * w_n + accel_ref
        lp = self.load_pos
        out[..., lp] = (-self.P_D - P[..., lp]) / self.D - w_n[..., None]
        for k, p in enumerate(self.gen_pos):
            si = self.speed_index[p]
            out[..., p] = y[..., si]
            out[..., si] = -self.lam * y[..., si] + (self.P_M[k] - P[..., p]) / self.M[k] - accel_ref
        if extra is not None:
            out = out + extra
        return out

    def state_labels(self) -> list[str]:
        order = self.net.order
        lab = [f"d{order[p]}" for p in range(self.n_angles)]
        lab += [f"w{b}" for b in self.gen_buses]
        lab.append(f"w{self.net.reference}")
        return lab


def build_relative_system(net: PowerNetwork, eq: Equilibrium, outaged=(), ratio_tol: float = 1e-9) -> RelativeSystem:
    ratios = np.array([g.D / g.M for g in net.generators.values()])
    if np.max(np.abs(ratios - ratios[0])) > ratio_tol * max(1.0, abs(ratios[0])):
        raise NetworkError(f"generator damping ratios D/M are not uniform: {ratios}")
    sys = RelativeSystem(net, eq, frozenset(), float(ratios[0]))
    if not outaged:
        f0 = sys.rhs(np.zeros(sys.dim))
        if np.max(np.abs(f0)) > 1e-10:
            raise EquilibriumError(f"vector field at origin is {np.max(np.abs(f0)):.3g}")
        return sys
    return sys.with_outages(outaged)


# -- recasting -------------------------------------------------------------------


@dataclass
class RecastMap:
    """Map between relative states and recast variables.

    ``pairs[k] = (s, c)`` are the recast variable ids for angle ``k``; ``speed[j]``
    the id of speed state ``n_angles + j``.
    """

    space: VarSpace
    n_angles: int
    pairs: list
    speed: list
    labels: dict = field(default_factory=dict)

    def forward(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        z = np.empty(y.shape[:-1] + (len(self.space),))
        x = y[..., : self.n_angles]
        for k, (s, c) in enumerate(self.pairs):
            z[..., s] = np.sin(x[..., k])
            z[..., c] = 1.0 - np.cos(x[..., k])
        for j, v in enumerate(self.speed):
            z[..., v] = y[..., self.n_angles + j]
        return z

    def inverse(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        y = np.empty(z.shape[:-1] + (self.n_angles + len(self.speed),))
        for k, (s, c) in enumerate(self.pairs):
            y[..., k] = np.arctan2(z[..., s], 1.0 - z[..., c])
        for j, v in enumerate(self.speed):
            y[..., self.n_angles + j] = z[..., v]
        return y

    def constraints(self) -> list[Polynomial]:
        out = []
        for s, c in self.pairs:
            zs, zc = self.space.var(s), self.space.var(c)
            out.append(zs * zs + zc * zc - 2 * zc)
        return out

    def constraint_values(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.stack([z[..., s] ** 2 + z[..., c] ** 2 - 2 * z[..., c] for s, c in self.pairs], axis=-1)


def _trig_factors(space: VarSpace, pairs, k: Optional[int]):
    """(cos x_k, sin x_k) as polynomials; the reference has x = 0."""
    if k is None:
        return space.const(1.0), space.zero()
    s, c = pairs[k]
    return 1 - space.var(c), space.var(s)


def injection_polynomials(rel: RelativeSystem, space: VarSpace, pairs) -> list[Polynomial]:
    """P_Ei in recast variables for every node (reference last)."""
    tr, E = rel.tr, rel.Evec
    n = rel.net.n_nodes
    shift = np.append(rel.eq.relative, 0.0)
    idx = lambda p: None if p == n - 1 else p  # noqa: E731
    out = []
    for i in range(n):
        Ci, Si = _trig_factors(space, pairs, idx(i))
        acc = space.const(E[i] ** 2 * tr.Gii[i])
        for j in range(n):
            if j == i or tr.Ymag[i, j] == 0.0:
                continue
            Cj, Sj = _trig_factors(space, pairs, idx(j))
            phi = shift[i] - shift[j] - tr.theta[i, j]
            cos_d = Ci * Cj + Si * Sj
            sin_d = Si * Cj - Ci * Sj
            acc = acc + (E[i] * E[j] * tr.Ymag[i, j]) * (math.cos(phi) * cos_d - math.sin(phi) * sin_d)
        out.append(acc)
    return out


def recast(rel: RelativeSystem, names: Optional[Sequence[str]] = None) -> tuple[PolySystem, RecastMap]:
    """Polynomial system in z with one (sin, 1-cos) pair per relative angle."""
    na = rel.n_angles
    m = 2 * na + (rel.dim - na)
    names = list(names) if names else [f"z{k + 1}" for k in range(m)]
    space = VarSpace(names)
    pairs = [(2 * k, 2 * k + 1) for k in range(na)]
    speed = list(range(2 * na, m))
    order = rel.net.order
    labels = {}
    for k in range(na):
        labels[names[2 * k]] = f"sin d{order[k]}"
        labels[names[2 * k + 1]] = f"1-cos d{order[k]}"
    for j, lab in enumerate(rel.state_labels()[na:]):
        labels[names[speed[j]]] = lab
    rmap = RecastMap(space, na, pairs, speed, labels)

    P = injection_polynomials(rel, space, pairs)
    w = {j: space.var(speed[j - na]) for j in range(na, rel.dim)}
    w_n = w[rel.ref_speed]
    accel_ref = (rel.P_M_ref - P[-1]) / rel.M_ref
    ydot: dict[int, Polynomial] = {rel.ref_speed: -rel.lam * w_n + accel_ref}
    for k, p in enumerate(rel.load_pos):
        ydot[p] = (-rel.P_D[k] - P[p]) / rel.D[k] - w_n
    for k, p in enumerate(rel.gen_pos):
        si = rel.speed_index[p]
        ydot[p] = w[si]
        ydot[si] = -rel.lam * w[si] + (rel.P_M[k] - P[p]) / rel.M[k] - accel_ref

    F = [None] * m
    for k, (s, c) in enumerate(pairs):
        Ck, Sk = _trig_factors(space, pairs, k)
        F[s] = Ck * ydot[k]
        F[c] = Sk * ydot[k]
    for j in range(na, rel.dim):
        F[speed[j - na]] = ydot[j]
    F = [f.threshold(1e-12) for f in F]
    # exact zeros at the origin up to roundoff in the equilibrium
    F = [f - f.constant if abs(f.constant) < 1e-9 else f for f in F]
    return PolySystem(space, tuple(F), tuple(rmap.constraints())), rmap


def channel_rows(rel: RelativeSystem, rmap: RecastMap, bus: int) -> tuple[str, int]:
    """Control channel for a bus: load angle equation or generator speed equation."""
    p = rel.net.pos(bus)
    if bus in rel.net.loads:
        return "angle", p
    if bus == rel.net.reference:
        return "speed", rel.ref_speed
    return "speed", rel.speed_index[p]


def decompose_network(rel: RelativeSystem, sys: PolySystem, rmap: RecastMap) -> InterconnectedSystem:
    """One subsystem per non-reference bus, each sharing the reference speed."""
    blocks = []
    names = []
    for k in range(rel.n_angles):
        blk = list(rmap.pairs[k])
        if k in rel.speed_index:
            blk.append(rmap.speed[rel.speed_index[k] - rel.n_angles])
        blocks.append(blk)
        names.append(f"S{k + 1}")
    ref = [rmap.speed[rel.ref_speed - rel.n_angles]]
    return decompose_node_overlap(sys, blocks, ref, names)


def subsystem_bus(rel: RelativeSystem, i: int) -> int:
    return rel.net.order[i]


# -- file ingestion --------------------------------------------------------------


def _req(d: dict, key: str, ctx: str):
    if key not in d:
        raise NetworkError(f"{ctx}: missing field {key!r}")
    return d[key]


def network_from_dict(data: dict) -> PowerNetwork:
    if not isinstance(data, dict):
        raise NetworkError("network file must be a mapping")
    freq = float(data.get("frequency", 60.0))
    ws = 2 * math.pi * freq
    ratio = data.get("generator_damping_ratio")
    seed = data.get("seed")
    lo, hi = data.get("load_damping_range", [1.0, 2.0])
    buses = []
    for b in _req(data, "buses", "network"):
        buses.append(Bus(int(_req(b, "id", "bus")), str(_req(b, "type", "bus")), float(_req(b, "E", "bus"))))
    lines = [
        Line(int(_req(ln, "from", "line")), int(_req(ln, "to", "line")), float(ln.get("r", 0.0)),
             float(_req(ln, "x", "line")), float(ln.get("b", 0.0)))
        for ln in _req(data, "lines", "network")
    ]
    raw_loads = sorted(_req(data, "loads", "network"), key=lambda d: int(_req(d, "bus", "load")))
    missing = [d for d in raw_loads if "D" not in d]
    drawn = iter([])
    if missing:
        if seed is None:
            raise NetworkError("load damping not given and no seed to draw it")
        drawn = iter(np.random.default_rng(int(seed)).uniform(float(lo), float(hi), size=len(missing)))
    loads = {}
    for d in raw_loads:
        bid = int(d["bus"])
        if bid in loads:
            raise NetworkError(f"duplicate load at bus {bid}")
        D = float(d["D"]) if "D" in d else float(next(drawn))
        loads[bid] = Load(bid, float(_req(d, "P_D", f"load {bid}")), D)
    ref = int(_req(data, "reference", "network"))
    gens = {}
    for g in _req(data, "generators", "network"):
        bid = int(_req(g, "bus", "generator"))
        if "M" in g:
            M = float(g["M"])
        elif "H" in g:
            M = 2.0 * float(g["H"]) / ws
        else:
            raise NetworkError(f"generator {bid}: need M or H")
        if "D" in g:
            D = float(g["D"])
        elif ratio is not None:
            D = float(ratio) * M
        else:
            raise NetworkError(f"generator {bid}: need D or generator_damping_ratio")
        P_M = g.get("P_M")
        gens[bid] = Generator(bid, M, D, None if (bid == ref and P_M is None) else float(_req(g, "P_M", f"gen {bid}")))
    return PowerNetwork(buses, lines, loads, gens, ref, str(data.get("name", "")), seed, str(data.get("notes", "")))


def ingest_network(path) -> PowerNetwork:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise NetworkError(f"cannot parse {path}: {exc}") from exc
    return network_from_dict(data)


def wscc9(path: Optional[Path] = None) -> PowerNetwork:
    return ingest_network(path or DATA_DIR / "wscc9.yaml")


@dataclass
class NetworkModel:
    """Everything derived from a network: equilibrium, relative model, recast and decomposition."""

    net: PowerNetwork
    eq: Equilibrium
    rel: RelativeSystem
    sys: PolySystem
    rmap: RecastMap
    inter: InterconnectedSystem

    @classmethod
    def build(cls, net: PowerNetwork) -> "NetworkModel":
        eq = solve_equilibrium(net)
        rel = build_relative_system(net, eq)
        sys, rmap = recast(rel)
        return cls(net, eq, rel, sys, rmap, decompose_network(rel, sys, rmap))

    def subsystem_bus(self, i: int) -> int:
        return self.net.order[i]

    def control_channels(self) -> dict:
        """Speed equation for generators, angle equation for loads."""
        from .control import angle_channel, speed_channel

        out = {}
        for k in range(self.rel.n_angles):
            if k in self.rel.speed_index:
                out[k] = speed_channel(self.sys.space, self.rmap.speed[self.rel.speed_index[k] - self.rel.n_angles])
            else:
                s, c = self.rmap.pairs[k]
                out[k] = angle_channel(self.sys.space, s, c)
        return out
