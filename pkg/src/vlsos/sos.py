"""Sum-of-squares programs compiled to semidefinite programs.

An :class:`SosProgram` collects unknown polynomials (free or SOS), scalar
decision variables, and constraints of the form ``expr in SOS`` or
``expr == 0`` where ``expr`` is affine in the unknowns.  Compilation
introduces one Gram block per SOS unknown and per SOS constraint (or per
clique when a constraint is given a clique cover) and one equality per
monomial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .poly import ONE, Monomial, Polynomial, VarSpace, monomial_basis
from .sdp import LinearFunctional, SdpOptions, SdpProblem, SdpSolution, SdpStatus, solve

CLEAN_TOL = 1e-8
CHECK_REGULARIZATION = (1e-6, 1e-5)
# equality rows whose constant exceeds this with no decision variable attached are contradictions
_TRIVIAL_TOL = 1e-10

Key = tuple  # (block, i, j) for Gram entries, (-1, k, 0) for scalars


class DegreeMismatch(ValueError):
    """Known monomials fall outside the span of the declared Gram bases."""


def _scalar_key(k: int) -> Key:
    return (-1, k, 0)


class AffinePoly:
    """Polynomial whose coefficients are affine in the program's decision variables."""

    __slots__ = ("space", "const", "lin")

    def __init__(self, space: VarSpace, const: Optional[Polynomial] = None, lin: Optional[dict] = None):
        self.space = space
        self.const = const if const is not None else space.zero()
        self.lin: dict[Monomial, dict[Key, float]] = lin if lin is not None else {}

    @classmethod
    def lift(cls, other, space: VarSpace) -> "AffinePoly":
        if isinstance(other, AffinePoly):
            return other
        if isinstance(other, Polynomial):
            return cls(space, other)
        if isinstance(other, (int, float, np.integer, np.floating)):
            return cls(space, space.const(float(other)))
        raise TypeError(f"cannot lift {type(other)!r}")

    def __add__(self, other):
        o = AffinePoly.lift(other, self.space)
        lin = {m: dict(d) for m, d in self.lin.items()}
        for m, d in o.lin.items():
            tgt = lin.setdefault(m, {})
            for k, c in d.items():
                tgt[k] = tgt.get(k, 0.0) + c
        return AffinePoly(self.space, self.const + o.const, lin)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-AffinePoly.lift(other, self.space))

    def __rsub__(self, other):
        return AffinePoly.lift(other, self.space) + (-self)

    def rescale(self, r) -> "AffinePoly":
        """Substitute z -> diag(r) z in every coefficient polynomial."""
        lin = {}
        for m, d in self.lin.items():
            f = 1.0
            for v, e in m:
                f *= r.get(v, 1.0) ** e
            lin[m] = {k: c * f for k, c in d.items()}
        return AffinePoly(self.space, self.const.rescale(r), lin)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.integer, np.floating)):
            s = float(other)
            return AffinePoly(
                self.space,
                self.const.scale(s),
                {m: {k: c * s for k, c in d.items()} for m, d in self.lin.items()},
            )
        if isinstance(other, AffinePoly):
            if other.lin and not self.lin:
                return other * self.const
            if other.lin:
                raise TypeError("product of two unknown polynomials is not affine")
            other = other.const
        if not isinstance(other, Polynomial):
            return NotImplemented
        lin: dict[Monomial, dict[Key, float]] = {}
        oitems = list(other.items())
        for m, d in self.lin.items():
            for m2, c2 in oitems:
                tgt = lin.setdefault(m * m2, {})
                for k, c in d.items():
                    tgt[k] = tgt.get(k, 0.0) + c * c2
        return AffinePoly(self.space, self.const * other, lin)

    __rmul__ = __mul__

    def monomials(self) -> set[Monomial]:
        out = set(m for m, _ in self.const.items())
        for m, d in self.lin.items():
            if any(d.values()):
                out.add(m)
        return out

    @property
    def degree(self) -> int:
        return max((m.degree for m in self.monomials()), default=-1)

    def variables(self) -> frozenset[int]:
        out: set[int] = set()
        for m in self.monomials():
            out.update(m.variables())
        return frozenset(out)


class UnknownPoly(AffinePoly):
    """An unknown polynomial: free coefficients on a basis, or SOS via a Gram block."""

    __slots__ = ("basis", "is_sos", "block", "keys", "name")

    def __init__(self, space, basis, is_sos, block, keys, lin, name=""):
        super().__init__(space, space.zero(), lin)
        self.basis = list(basis)
        self.is_sos = is_sos
        self.block = block
        self.keys = keys
        self.name = name


@dataclass
class SosConstraint:
    expression: AffinePoly
    kind: str  # "sos" or "zero"
    name: str = ""
    cliques: Optional[list[frozenset[int]]] = None
    gram_blocks: list[tuple[int, list[Monomial]]] = field(default_factory=list)


class SosProgram:
    def __init__(self, space: VarSpace):
        self.space = space
        self.block_dims: list[int] = []
        self.num_scalars = 0
        self.unknowns: list[UnknownPoly] = []
        self.constraints: list[SosConstraint] = []
        self.objective: dict[Key, float] = {}

    # -- decision variables ----------------------------------------------------
    def _new_block(self, n: int) -> int:
        self.block_dims.append(n)
        return len(self.block_dims) - 1

    def new_scalar(self, nonneg: bool = False) -> AffinePoly:
        """A scalar decision variable, as a degree-0 affine polynomial."""
        if nonneg:
            b = self._new_block(1)
            return AffinePoly(self.space, None, {ONE: {(b, 0, 0): 1.0}})
        k = self.num_scalars
        self.num_scalars += 1
        return AffinePoly(self.space, None, {ONE: {_scalar_key(k): 1.0}})

    def new_free_poly(
        self,
        variables: Iterable[int],
        degree: int,
        min_degree: int = 0,
        name: str = "",
        basis: Optional[Sequence[Monomial]] = None,
    ) -> UnknownPoly:
        if basis is None:
            basis = [m for m in monomial_basis(variables, degree) if m.degree >= min_degree]
        keys = []
        lin = {}
        for m in basis:
            k = _scalar_key(self.num_scalars)
            self.num_scalars += 1
            keys.append(k)
            lin[m] = {k: 1.0}
        u = UnknownPoly(self.space, basis, False, None, keys, lin, name)
        self.unknowns.append(u)
        return u

    def new_sos_poly(self, variables: Iterable[int], degree: int, name: str = "") -> UnknownPoly:
        if degree % 2:
            raise ValueError("SOS unknowns need even degree")
        basis = monomial_basis(variables, degree // 2)
        b = self._new_block(len(basis))
        lin = _gram_lin(basis, b)
        u = UnknownPoly(self.space, basis, True, b, None, lin, name)
        self.unknowns.append(u)
        return u

    # -- constraints -----------------------------------------------------------
    def add_sos(self, expr, name: str = "", cliques: Optional[Sequence[Iterable[int]]] = None) -> SosConstraint:
        expr = AffinePoly.lift(expr, self.space)
        c = SosConstraint(expr, "sos", name, [frozenset(q) for q in cliques] if cliques else None)
        self.constraints.append(c)
        return c

    def add_zero(self, expr, name: str = "") -> SosConstraint:
        expr = AffinePoly.lift(expr, self.space)
        c = SosConstraint(expr, "zero", name)
        self.constraints.append(c)
        return c

    def minimize(self, expr) -> None:
        self._set_objective(expr, 1.0)

    def maximize(self, expr) -> None:
        self._set_objective(expr, -1.0)

    def _set_objective(self, expr, sign: float) -> None:
        expr = AffinePoly.lift(expr, self.space)
        if expr.degree > 0:
            raise ValueError("objective must be a scalar (degree-0) expression")
        self.objective = {k: sign * c for k, c in expr.lin.get(ONE, {}).items()}

    # -- compilation -----------------------------------------------------------
    def compile(self) -> SdpProblem:
        """Build the SDP.  Gram blocks for SOS constraints are (re)created here."""
        block_dims = list(self.block_dims)
        rows: list[tuple[LinearFunctional, float]] = []
        for con in self.constraints:
            expr = con.expression
            con.gram_blocks = []
            if con.kind == "sos":
                deg = expr.degree
                if deg < 0:
                    continue
                half = (deg + 1) // 2
                present = expr.variables()
                cliques = con.cliques or [present]
                gram_lin: dict[Monomial, dict[Key, float]] = {}
                for q in cliques:
                    vs = sorted(set(q) & present)
                    basis = monomial_basis(vs, half)
                    b = len(block_dims)
                    block_dims.append(len(basis))
                    con.gram_blocks.append((b, basis))
                    for m, d in _gram_lin(basis, b).items():
                        gram_lin.setdefault(m, {}).update(d)
                span = set(gram_lin)
                for m, c in expr.const.items():
                    if m not in span and not expr.lin.get(m) and abs(c) > _TRIVIAL_TOL:
                        raise DegreeMismatch(
                            f"constraint {con.name!r}: monomial {m.render(self.space) or '1'} outside Gram span"
                        )
                rows.extend(_match_rows(expr, gram_lin))
            else:
                rows.extend(_match_rows(expr, {}))
        problem = SdpProblem(block_dims, self.num_scalars)
        for f, rhs in rows:
            if f.is_empty():
                if abs(rhs) > _TRIVIAL_TOL:
                    # contradictory constant row: keep it so the SDP reports infeasibility
                    problem.constraints.append((f, rhs))
                continue
            problem.constraints.append((f, rhs))
        obj = LinearFunctional()
        for k, c in self.objective.items():
            _add_key(obj, k, c)
        problem.objective = obj
        return problem

    def solve(self, options: Optional[SdpOptions] = None) -> "SosSolution":
        problem = self.compile()
        trivial_bad = any(f.is_empty() for f, _ in problem.constraints)
        if trivial_bad:
            sdp = SdpSolution(SdpStatus.INFEASIBLE, [], np.zeros(problem.num_scalar_vars))
            return SosSolution(self, sdp, problem)
        sdp = solve(problem, options)
        return SosSolution(self, sdp, problem)


def _gram_lin(basis: Sequence[Monomial], block: int) -> dict[Monomial, dict[Key, float]]:
    lin: dict[Monomial, dict[Key, float]] = {}
    n = len(basis)
    for i in range(n):
        for j in range(i, n):
            m = basis[i] * basis[j]
            lin.setdefault(m, {})[(block, i, j)] = 1.0 if i == j else 2.0
    return lin


def _add_key(f: LinearFunctional, k: Key, c: float) -> None:
    b, i, j = k
    if b < 0:
        f.add_scalar(i, c)
    elif i == j:
        f.add_block(b, i, j, c)
    else:
        # LinearFunctional counts an off-diagonal coefficient twice
        f.add_block(b, i, j, 0.5 * c)


def _match_rows(expr: AffinePoly, gram_lin: dict) -> list[tuple[LinearFunctional, float]]:
    """Rows of ``expr - gram == 0``, one per monomial, in canonical order."""
    monos = set(expr.monomials()) | set(gram_lin)
    rows = []
    for m in sorted(monos, key=Monomial.sort_key):
        f = LinearFunctional()
        for k, c in expr.lin.get(m, {}).items():
            if c:
                _add_key(f, k, c)
        for k, c in gram_lin.get(m, {}).items():
            _add_key(f, k, -c)
        rows.append((f, -expr.const.coefficient(m)))
    return rows


class SosSolution:
    def __init__(self, program: SosProgram, sdp: SdpSolution, problem: SdpProblem):
        self.program = program
        self.sdp = sdp
        self.problem = problem

    @property
    def status(self) -> SdpStatus:
        return self.sdp.status

    @property
    def feasible(self) -> bool:
        return self.sdp.status is SdpStatus.OPTIMAL

    def __bool__(self) -> bool:
        return self.feasible

    def key_value(self, k: Key) -> float:
        b, i, j = k
        if b < 0:
            return float(self.sdp.scalar_values[i])
        return float(self.sdp.block_values[b][i, j])

    def value(self, expr, clean: float = 0.0) -> Polynomial:
        """Evaluate an affine expression (e.g. an unknown) at the solution."""
        expr = AffinePoly.lift(expr, self.program.space)
        acc: dict[Monomial, float] = {}
        for m, d in expr.lin.items():
            s = 0.0
            for k, c in d.items():
                s += c * self.key_value(k)
            acc[m] = s
        p = Polynomial(self.program.space, acc) + expr.const
        return p.threshold(clean) if clean else p

    def scalar(self, expr) -> float:
        return self.value(expr).constant

    def gram(self, con: SosConstraint) -> list[tuple[list[Monomial], np.ndarray]]:
        return [(basis, self.sdp.block_values[b]) for b, basis in con.gram_blocks]


# -- standalone checks ---------------------------------------------------------


@dataclass
class SosCheck:
    is_sos: bool
    factors: list[Polynomial]
    basis: list[Monomial]
    gram: Optional[np.ndarray]
    status: SdpStatus

    def __bool__(self) -> bool:
        return self.is_sos


def gram_factors(space: VarSpace, basis: Sequence[Monomial], Q: np.ndarray, rel_cut: float = 1e-12) -> list[Polynomial]:
    """Polynomials H_k with sum H_k^2 = b^T Q b, from the eigendecomposition of Q."""
    w, U = np.linalg.eigh(0.5 * (Q + Q.T))
    top = max(float(w.max(initial=0.0)), 0.0)
    out = []
    for lam, u in zip(w[::-1], U.T[::-1]):
        if lam <= rel_cut * top or lam <= 0:
            continue
        r = math.sqrt(lam)
        out.append(Polynomial(space, {m: r * c for m, c in zip(basis, u)}))
    return out


def check_sos(p: Polynomial, options: Optional[SdpOptions] = None) -> SosCheck:
    """Decide (numerically) whether ``p`` is a sum of squares."""
    if p.degree % 2 and not p.is_zero():
        raise ValueError("SOS check needs an even-degree polynomial")
    prog = SosProgram(p.space)
    con = prog.add_sos(p, name="check")
    sol = prog.solve(options)
    if sol.status in (SdpStatus.NUMERICAL_FAILURE, SdpStatus.MAX_ITER):
        # low-rank Gram matrices sit on the cone boundary where the default
        # regularization stalls; retry with stronger ones
        for reg in CHECK_REGULARIZATION:
            sol = prog.solve(replace(options or SdpOptions(), regularization=reg))
            if sol.status not in (SdpStatus.NUMERICAL_FAILURE, SdpStatus.MAX_ITER):
                break
    if not sol.feasible:
        return SosCheck(False, [], [], None, sol.status)
    if not con.gram_blocks:
        return SosCheck(True, [], [], None, sol.status)
    basis, Q = sol.gram(con)[0]
    return SosCheck(True, gram_factors(p.space, basis, Q), basis, Q, sol.status)


@dataclass
class PutinarCertificate:
    sigma0: Polynomial
    sigmas: list[Polynomial]
    lambdas: list[Polynomial]

    def residual(self, p: Polynomial, ineqs: Sequence[Polynomial], eqs: Sequence[Polynomial]) -> Polynomial:
        r = p - self.sigma0
        for s, g in zip(self.sigmas, ineqs):
            r = r - s * g
        for lam, h in zip(self.lambdas, eqs):
            r = r - lam * h
        return r


def putinar_certificate(
    p: Polynomial,
    ineqs: Sequence[Polynomial] = (),
    eqs: Sequence[Polynomial] = (),
    sigma_degree: Union[int, Sequence[int]] = 2,
    lambda_degree: Optional[Union[int, Sequence[int]]] = None,
    options: Optional[SdpOptions] = None,
) -> Optional[PutinarCertificate]:
    """Search ``p = sigma0 + sum sigma_j g_j + sum lambda_k h_k``.

    Returns ``None`` when no certificate exists at the requested degrees,
    which does not prove that ``p`` fails to be positive on the set.
    """
    space = p.space
    allvars = set(p.variables())
    for g in list(ineqs) + list(eqs):
        allvars |= g.variables()
    top = max([p.degree] + [g.degree for g in ineqs] + [h.degree for h in eqs] + [0])
    sdeg = [sigma_degree] * len(ineqs) if isinstance(sigma_degree, int) else list(sigma_degree)
    if lambda_degree is None:
        ldeg = [max(top - h.degree, 0) for h in eqs]
    elif isinstance(lambda_degree, int):
        ldeg = [lambda_degree] * len(eqs)
    else:
        ldeg = list(lambda_degree)
    prog = SosProgram(space)
    sig = [prog.new_sos_poly(allvars, d, name=f"sigma{j+1}") for j, d in enumerate(sdeg)]
    lam = [prog.new_free_poly(allvars, d, name=f"lambda{k+1}") for k, d in enumerate(ldeg)]
    expr = AffinePoly.lift(p, space)
    for s, g in zip(sig, ineqs):
        expr = expr - s * g
    for l, h in zip(lam, eqs):
        expr = expr - l * h
    con = prog.add_sos(expr, name="sigma0")
    sol = prog.solve(options)
    if not sol.feasible:
        return None
    sigmas = [sol.value(s) for s in sig]
    lambdas = [sol.value(l) for l in lam]
    sigma0 = sol.value(expr)
    return PutinarCertificate(sigma0, sigmas, lambdas)
