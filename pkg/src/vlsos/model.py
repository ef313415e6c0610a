"""Polynomial DAE systems and their decomposition into interacting subsystems."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .poly import CompiledPolyVector, Polynomial, VarSpace, format_poly, parse_poly

ORIGIN_TOL = 1e-9


class DecompositionError(ValueError):
    pass


@dataclass(frozen=True)
class PolySystem:
    """``dz/dt = F(z)``, ``0 = G(z)`` with the equilibrium at the origin."""

    space: VarSpace
    F: tuple
    G: tuple = ()
    labels: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "F", tuple(self.F))
        object.__setattr__(self, "G", tuple(self.G))
        if len(self.F) != len(self.space):
            raise ValueError(f"F has {len(self.F)} rows for {len(self.space)} variables")
        for k, f in enumerate(self.F):
            if f.space != self.space:
                raise ValueError("F row in a different variable space")
            if abs(f.constant) > ORIGIN_TOL:
                raise ValueError(f"F[{k}](0) = {f.constant} != 0: origin is not an equilibrium")
        for k, g in enumerate(self.G):
            if abs(g.constant) > ORIGIN_TOL:
                raise ValueError(f"G[{k}](0) = {g.constant} != 0")

    @property
    def m(self) -> int:
        return len(self.space)

    @property
    def q(self) -> int:
        return len(self.G)

    def compiled(self) -> CompiledPolyVector:
        return CompiledPolyVector(self.F)

    def constraint_lie_derivatives(self) -> list[Polynomial]:
        return [g.lie_derivative(self.F) for g in self.G]


@dataclass(frozen=True)
class Subsystem:
    """One block of an interconnected system.

    ``variables`` are global variable ids (own block plus any shared block);
    ``F`` and each ``H[j]`` map a row (global variable id) to a polynomial.
    """

    index: int
    variables: tuple
    F: Mapping[int, Polynomial]
    G: tuple = ()
    H: Mapping[int, Mapping[int, Polynomial]] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        for v, f in self.F.items():
            if abs(f.constant) > ORIGIN_TOL:
                raise ValueError(f"{self.label}: F row {v} nonzero at origin")
        for j, rows in self.H.items():
            for v, h in rows.items():
                if abs(h.constant) > ORIGIN_TOL:
                    raise ValueError(f"{self.label}: H[{j}] row {v} nonzero at origin")

    @property
    def label(self) -> str:
        return self.name or f"S{self.index + 1}"

    @property
    def space(self) -> VarSpace:
        return next(iter(self.F.values())).space

    @property
    def m(self) -> int:
        return len(self.variables)

    def _field(self, include_h: bool, extra: Optional[Mapping[int, Polynomial]] = None) -> list[Polynomial]:
        space = self.space
        out = [space.zero() for _ in range(len(space))]
        for v, f in self.F.items():
            out[v] = f
        if include_h:
            for rows in self.H.values():
                for v, h in rows.items():
                    out[v] = out[v] + h
        if extra:
            for v, u in extra.items():
                out[v] = out[v] + u
        return out

    def isolated_field(self) -> list[Polynomial]:
        """Global-length vector field with only the isolated dynamics F_i."""
        return self._field(False)

    def coupled_field(self, control: Optional[Mapping[int, Polynomial]] = None) -> list[Polynomial]:
        """F_i + sum_j H_ij (+ optional control rows), zero outside the subsystem rows."""
        return self._field(True, control)

    def H_row_sum(self) -> dict[int, Polynomial]:
        out: dict[int, Polynomial] = {}
        for rows in self.H.values():
            for v, h in rows.items():
                out[v] = out[v] + h if v in out else h
        return out


@dataclass(frozen=True)
class InterconnectedSystem:
    space: VarSpace
    subsystems: tuple
    shared: tuple = ()  # global variable ids owned by more than one subsystem

    def __post_init__(self):
        object.__setattr__(self, "subsystems", tuple(self.subsystems))
        covered = set()
        for s in self.subsystems:
            covered.update(s.variables)
        if covered != set(range(len(self.space))):
            missing = sorted(set(range(len(self.space))) - covered)
            raise ValueError(f"subsystems do not cover variables {missing}")

    def __len__(self) -> int:
        return len(self.subsystems)

    def __getitem__(self, i: int) -> Subsystem:
        return self.subsystems[i]

    def owners(self, var: int) -> list[int]:
        return [s.index for s in self.subsystems if var in s.variables]


def neighbors(sys: InterconnectedSystem, i: int) -> set[int]:
    """{i} together with every j whose interaction H_ij is a nonzero polynomial."""
    sub = sys.subsystems[i]
    out = {i}
    for j, rows in sub.H.items():
        if any(not h.is_zero() for h in rows.values()):
            out.add(j)
    return out


def neighborhood_variables(sys: InterconnectedSystem, i: int) -> list[int]:
    vs: set[int] = set()
    for j in neighbors(sys, i):
        vs.update(sys.subsystems[j].variables)
    return sorted(vs)


def assemble(sys: InterconnectedSystem, tol: float = 1e-9) -> PolySystem:
    """Rebuild the global system; shared rows must agree across owners."""
    space = sys.space
    rows: dict[int, Polynomial] = {}
    G: list[Polynomial] = []
    for sub in sys.subsystems:
        full = sub.coupled_field()
        for v in sub.variables:
            if v not in sub.F and not any(v in r for r in sub.H.values()):
                continue
            if v in rows:
                if not rows[v].allclose(full[v], atol=tol):
                    raise DecompositionError(
                        f"shared variable {space.names[v]} has inconsistent dynamics in {sub.label}"
                    )
            else:
                rows[v] = full[v]
        for g in sub.G:
            if not any(g.allclose(h, atol=tol) for h in G):
                G.append(g)
    F = [rows.get(v, space.zero()) for v in range(len(space))]
    return PolySystem(space, tuple(F), tuple(G))


def decompose_node_overlap(
    sys: PolySystem,
    node_partition: Sequence[Iterable[int]],
    reference_block: Iterable[int] = (),
    names: Optional[Sequence[str]] = None,
) -> InterconnectedSystem:
    """Split ``sys`` into one subsystem per block, each extended by the reference block.

    Each monomial of a block's row is assigned by the non-reference blocks it
    touches: none or only its own block goes to F_i, exactly one other block j
    goes to H_ij.  Monomials reaching two foreign blocks are rejected.
    Reference rows are replicated into every subsystem in the same way.
    """
    ref = sorted(set(reference_block))
    blocks = [sorted(set(b)) for b in node_partition]
    owner: dict[int, int] = {}
    for bi, b in enumerate(blocks):
        for v in b:
            if v in owner or v in ref:
                raise DecompositionError(f"variable {sys.space.names[v]} assigned twice")
            owner[v] = bi
    allv = set(owner) | set(ref)
    if allv != set(range(sys.m)):
        raise DecompositionError("partition does not cover all variables")

    subs = []
    for i, b in enumerate(blocks):
        local = sorted(set(b) | set(ref))
        F: dict[int, dict] = {v: {} for v in local}
        H: dict[int, dict[int, dict]] = {}
        for v in local:
            for mono, c in sys.F[v].items():
                foreign = {owner[w] for w in mono.variables() if w in owner and owner[w] != i}
                if not foreign:
                    F[v][mono] = c
                elif len(foreign) == 1:
                    j = foreign.pop()
                    H.setdefault(j, {}).setdefault(v, {})[mono] = c
                else:
                    raise DecompositionError(
                        f"row {sys.space.names[v]}: monomial {mono.render(sys.space)} couples blocks "
                        f"{sorted(foreign | {i})}; only pairwise interactions are supported"
                    )
        localset = set(local)
        G = tuple(g for g in sys.G if g.variables() <= localset and not g.variables() <= set(ref))
        G = G + tuple(g for g in sys.G if g.variables() <= set(ref) and g.variables())
        subs.append(
            Subsystem(
                index=i,
                variables=tuple(local),
                F={v: Polynomial(sys.space, t) for v, t in F.items()},
                G=G,
                H={
                    j: {v: Polynomial(sys.space, t) for v, t in rows.items()}
                    for j, rows in sorted(H.items())
                },
                name=names[i] if names else "",
            )
        )
    return InterconnectedSystem(sys.space, tuple(subs), tuple(ref))


# -- serialization --------------------------------------------------------------


def system_to_dict(sys: InterconnectedSystem) -> dict:
    def rows(d):
        return {sys.space.names[v]: format_poly(p) for v, p in sorted(d.items())}

    return {
        "variables": list(sys.space.names),
        "shared": [sys.space.names[v] for v in sys.shared],
        "subsystems": [
            {
                "name": s.label,
                "variables": [sys.space.names[v] for v in s.variables],
                "F": rows(s.F),
                "G": [format_poly(g) for g in s.G],
                "H": {sys.subsystems[j].label: rows(r) for j, r in s.H.items()},
            }
            for s in sys.subsystems
        ],
    }


def system_from_dict(data: dict) -> InterconnectedSystem:
    space = VarSpace(data["variables"])
    labels = [s["name"] for s in data["subsystems"]]
    subs = []
    for i, s in enumerate(data["subsystems"]):
        F = {space.index(k): parse_poly(v, space) for k, v in s["F"].items()}
        H = {
            labels.index(j): {space.index(k): parse_poly(v, space) for k, v in r.items()}
            for j, r in s["H"].items()
        }
        subs.append(
            Subsystem(
                index=i,
                variables=tuple(space.index(n) for n in s["variables"]),
                F=F,
                G=tuple(parse_poly(g, space) for g in s["G"]),
                H=H,
                name=s["name"],
            )
        )
    return InterconnectedSystem(space, tuple(subs), tuple(space.index(n) for n in data["shared"]))


def save_system(sys: InterconnectedSystem, path) -> None:
    with open(path, "w") as fh:
        json.dump(system_to_dict(sys), fh, indent=1)


def load_system(path) -> InterconnectedSystem:
    with open(path) as fh:
        return system_from_dict(json.load(fh))


def evaluate_field(field_: Sequence[Polynomial], z: np.ndarray) -> np.ndarray:
    return CompiledPolyVector(list(field_))(z)
