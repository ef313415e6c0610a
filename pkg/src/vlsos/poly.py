"""Sparse multivariate polynomials with float coefficients.

Polynomials live in a :class:`VarSpace` (an ordered tuple of variable names).
Terms are stored as ``{Monomial: coefficient}`` in graded-lexicographic order,
and coefficients with magnitude below :data:`DROP_TOL` are discarded.

Text format used in certificate and system files::

    2.5*z1^2*z2 - 3*z3 + 1
"""

from __future__ import annotations

import math
import re
from itertools import combinations_with_replacement
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

DROP_TOL = 1e-12

Scalar = Union[int, float]


class VarSpaceMismatch(ValueError):
    pass


class VarSpace:
    """An ordered, immutable set of named variables with dense ids 0..m-1."""

    __slots__ = ("names", "_index")

    def __init__(self, names: Iterable[str]):
        names = tuple(names)
        if len(set(names)) != len(names):
            raise ValueError("variable names must be unique")
        for n in names:
            if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", n):
                raise ValueError(f"invalid variable name {n!r}")
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        return isinstance(other, VarSpace) and self.names == other.names

    def __hash__(self) -> int:
        return hash(self.names)

    def __repr__(self) -> str:
        return f"VarSpace({list(self.names)})"

    def index(self, var: Union[str, int]) -> int:
        if isinstance(var, (int, np.integer)):
            if not 0 <= var < len(self.names):
                raise IndexError(f"variable id {var} out of range")
            return int(var)
        return self._index[var]

    def var(self, var: Union[str, int]) -> "Polynomial":
        return Polynomial(self, {Monomial(((self.index(var), 1),)): 1.0})

    def vars(self) -> list["Polynomial"]:
        return [self.var(i) for i in range(len(self))]

    def zero(self) -> "Polynomial":
        return Polynomial(self, {})

    def const(self, c: Scalar) -> "Polynomial":
        return Polynomial(self, {Monomial(): float(c)})


class Monomial(tuple):
    """Sorted tuple of ``(var_id, exponent)`` pairs with positive exponents."""

    __slots__ = ()

    def __new__(cls, pairs: Iterable[tuple[int, int]] = ()):
        return super().__new__(cls, pairs)

    @classmethod
    def from_exponents(cls, exps: Union[Mapping[int, int], Sequence[int]]) -> "Monomial":
        items = exps.items() if isinstance(exps, Mapping) else enumerate(exps)
        pairs = []
        for v, e in items:
            if e < 0:
                raise ValueError("negative exponent")
            if e:
                pairs.append((int(v), int(e)))
        pairs.sort()
        return cls(pairs)

    @property
    def degree(self) -> int:
        return sum(e for _, e in self)

    def exponent(self, var: int) -> int:
        for v, e in self:
            if v == var:
                return e
        return 0

    def variables(self) -> frozenset[int]:
        return frozenset(v for v, _ in self)

    def __mul__(self, other: "Monomial") -> "Monomial":
        if not self:
            return other
        if not other:
            return self
        out = dict(self)
        for v, e in other:
            out[v] = out.get(v, 0) + e
        return Monomial(sorted(out.items()))

    def dense(self, m: int) -> np.ndarray:
        a = np.zeros(m, dtype=np.int64)
        for v, e in self:
            a[v] = e
        return a

    def sort_key(self):
        # graded lex: lower degree first; within a degree, x1 > x2 > ...
        return (self.degree, tuple((v, -e) for v, e in self))

    def render(self, space: VarSpace) -> str:
        parts = []
        for v, e in self:
            parts.append(space.names[v] if e == 1 else f"{space.names[v]}^{e}")
        return "*".join(parts)


ONE = Monomial()


def monomial_basis(variables: Iterable[int], max_degree: int) -> list[Monomial]:
    """All monomials in ``variables`` of total degree <= max_degree, graded-lex order."""
    if max_degree < 0:
        raise ValueError("max_degree must be nonnegative")
    vs = sorted(set(int(v) for v in variables))
    out = []
    for d in range(max_degree + 1):
        for combo in combinations_with_replacement(vs, d):
            exps: dict[int, int] = {}
            for v in combo:
                exps[v] = exps.get(v, 0) + 1
            out.append(Monomial.from_exponents(exps))
    out.sort(key=Monomial.sort_key)
    return out


class Polynomial:
    """Immutable sparse polynomial over a :class:`VarSpace`."""

    __slots__ = ("space", "_terms")

    def __init__(self, space: VarSpace, terms: Mapping[Monomial, float] = None, *, drop_tol: float = DROP_TOL):
        self.space = space
        items = []
        for mono, c in (terms or {}).items():
            c = float(c)
            if abs(c) > drop_tol:
                if not isinstance(mono, Monomial):
                    mono = Monomial(mono)
                items.append((mono, c))
        items.sort(key=lambda t: t[0].sort_key())
        self._terms = dict(items)

    # -- construction helpers -------------------------------------------------
    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other.space != self.space:
                raise VarSpaceMismatch(f"{self.space!r} vs {other.space!r}")
            return other
        if isinstance(other, (int, float, np.integer, np.floating)):
            return self.space.const(float(other))
        return NotImplemented

    # -- accessors ------------------------------------------------------------
    @property
    def terms(self) -> Mapping[Monomial, float]:
        return dict(self._terms)

    def items(self):
        return self._terms.items()

    def __len__(self) -> int:
        return len(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def coefficient(self, mono: Monomial) -> float:
        return self._terms.get(mono, 0.0)

    @property
    def constant(self) -> float:
        return self._terms.get(ONE, 0.0)

    @property
    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        return max((m.degree for m in self._terms), default=-1)

    def variables(self) -> frozenset[int]:
        out: set[int] = set()
        for m in self._terms:
            out.update(v for v, _ in m)
        return frozenset(out)

    def coeff_norm(self) -> float:
        return math.sqrt(sum(c * c for c in self._terms.values()))

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        acc = dict(self._terms)
        for m, c in other._terms.items():
            acc[m] = acc.get(m, 0.0) + c
        return Polynomial(self.space, acc)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.space, {m: -c for m, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return other + (-self)

    def scale(self, s: Scalar) -> "Polynomial":
        s = float(s)
        return Polynomial(self.space, {m: c * s for m, c in self._terms.items()})

    def __mul__(self, other):
        if isinstance(other, (int, float, np.integer, np.floating)):
            return self.scale(other)
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        acc: dict[Monomial, float] = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                m = m1 * m2
                acc[m] = acc.get(m, 0.0) + c1 * c2
        return Polynomial(self.space, acc)

    __rmul__ = __mul__

    def __truediv__(self, s: Scalar) -> "Polynomial":
        return self.scale(1.0 / float(s))

    def __pow__(self, n: int) -> "Polynomial":
        if not isinstance(n, (int, np.integer)) or n < 0:
            raise ValueError("power must be a nonnegative integer")
        result = self.space.const(1.0)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base
            n >>= 1
        return result

    def __eq__(self, other) -> bool:
        if isinstance(other, (int, float)):
            other = self.space.const(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.space == other.space and self._terms == other._terms

    __hash__ = None

    def allclose(self, other: "Polynomial", atol: float = 1e-9, rtol: float = 0.0) -> bool:
        other = self._coerce(other)
        scale = max(self.max_abs_coeff(), other.max_abs_coeff())
        diff = self - other
        return diff.max_abs_coeff() <= atol + rtol * scale

    def rescale(self, r: Mapping[int, float]) -> "Polynomial":
        """p(D z) for the diagonal map D = diag(r); missing entries are 1."""
        out = {}
        for m, c in self._terms.items():
            for v, e in m:
                c *= r.get(v, 1.0) ** e
            out[m] = c
        return Polynomial(self.space, out)

    def threshold(self, tol: float) -> "Polynomial":
        """Drop terms with |coefficient| <= tol."""
        return Polynomial(self.space, self._terms, drop_tol=tol)

    # -- calculus -------------------------------------------------------------
    def diff(self, var: Union[str, int]) -> "Polynomial":
        v = self.space.index(var)
        acc: dict[Monomial, float] = {}
        for m, c in self._terms.items():
            e = m.exponent(v)
            if e == 0:
                continue
            pairs = [(w, f - 1 if w == v else f) for w, f in m]
            nm = Monomial((w, f) for w, f in pairs if f)
            acc[nm] = acc.get(nm, 0.0) + c * e
        return Polynomial(self.space, acc)

    def gradient(self) -> list["Polynomial"]:
        return [self.diff(i) for i in range(len(self.space))]

    def lie_derivative(self, field: Sequence["Polynomial"]) -> "Polynomial":
        """grad(self) . field, skipping variables that do not occur in self."""
        if len(field) != len(self.space):
            raise VarSpaceMismatch("vector field length differs from variable space")
        out = self.space.zero()
        for v in sorted(self.variables()):
            out = out + self.diff(v) * field[v]
        return out

    # -- evaluation -----------------------------------------------------------
    def evaluate(self, point: Sequence[float]) -> float:
        point = np.asarray(point, dtype=float)
        if point.shape != (len(self.space),):
            raise VarSpaceMismatch(f"point has shape {point.shape}, expected ({len(self.space)},)")
        total = 0.0
        for m, c in self._terms.items():
            t = c
            for v, e in m:
                t *= point[v] ** e
            total += t
        return float(total)

    __call__ = evaluate

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """Vectorized evaluation at the rows of an (N, m) array."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != len(self.space):
            raise VarSpaceMismatch("points have wrong dimension")
        out = np.zeros(points.shape[0])
        for m, c in self._terms.items():
            t = np.full(points.shape[0], c)
            for v, e in m:
                t = t * points[:, v] ** e
            out += t
        return out

    # -- composition ----------------------------------------------------------
    def substitute(self, var: Union[str, int], q: "Polynomial") -> "Polynomial":
        """Replace variable ``var`` by the polynomial ``q``."""
        q = self._coerce(q)
        v = self.space.index(var)
        powers: dict[int, Polynomial] = {}
        out = self.space.zero()
        acc: dict[Monomial, float] = {}
        for m, c in self._terms.items():
            e = m.exponent(v)
            rest = Monomial((w, f) for w, f in m if w != v)
            if e == 0:
                acc[rest] = acc.get(rest, 0.0) + c
                continue
            if e not in powers:
                powers[e] = q ** e
            out = out + powers[e] * Polynomial(self.space, {rest: c})
        return out + Polynomial(self.space, acc)

    def substitute_all(self, mapping: Mapping[int, "Polynomial"]) -> "Polynomial":
        """Simultaneous substitution of several variables."""
        cache: dict[tuple[int, int], Polynomial] = {}
        out: dict[Monomial, float] = {}
        result = self.space.zero()
        for m, c in self._terms.items():
            keep = []
            factor = None
            for v, e in m:
                if v in mapping:
                    key = (v, e)
                    if key not in cache:
                        cache[key] = mapping[v] ** e
                    factor = cache[key] if factor is None else factor * cache[key]
                else:
                    keep.append((v, e))
            if factor is None:
                mono = Monomial(keep)
                out[mono] = out.get(mono, 0.0) + c
            else:
                result = result + factor * Polynomial(self.space, {Monomial(keep): c})
        return result + Polynomial(self.space, out)

    def embed(self, space: VarSpace) -> "Polynomial":
        """Re-express in a larger space containing all variable names used here."""
        idx = [space.index(n) for n in self.space.names]
        acc = {}
        for m, c in self._terms.items():
            acc[Monomial(sorted((idx[v], e) for v, e in m))] = c
        return Polynomial(space, acc)

    # -- text -----------------------------------------------------------------
    def __str__(self) -> str:
        return format_poly(self)

    def __repr__(self) -> str:
        return f"Polynomial({format_poly(self)!r})"


def format_poly(p: Polynomial, precision: int = 17) -> str:
    if p.is_zero():
        return "0"
    chunks = []
    for i, (m, c) in enumerate(p.items()):
        sign = "-" if c < 0 else "+"
        mag = abs(c)
        body = m.render(p.space)
        num = f"{mag:.{precision}g}"
        if not body:
            term = num
        elif num == "1":
            term = body
        else:
            term = f"{num}*{body}"
        if i == 0:
            chunks.append(("-" if sign == "-" else "") + term)
        else:
            chunks.append(f" {sign} {term}")
    return "".join(chunks)


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*^]))"
)


def parse_poly(text: str, space: VarSpace) -> Polynomial:
    """Parse the canonical text form produced by :func:`format_poly`."""
    tokens = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        mt = _TOKEN.match(text, pos)
        if not mt or mt.end() == pos:
            raise ValueError(f"cannot parse polynomial at {text[pos:]!r}")
        pos = mt.end()
        kind = mt.lastgroup
        tokens.append((kind, mt.group(kind)))
    acc: dict[Monomial, float] = {}
    i = 0
    n = len(tokens)
    if n == 1 and tokens[0] == ("num", "0"):
        return space.zero()
    while i < n:
        sign = 1.0
        while i < n and tokens[i][0] == "op" and tokens[i][1] in "+-":
            if tokens[i][1] == "-":
                sign = -sign
            i += 1
        coef = 1.0
        exps: dict[int, int] = {}
        expect_factor = True
        while i < n and expect_factor:
            kind, val = tokens[i]
            if kind == "num":
                coef *= float(val)
                i += 1
            elif kind == "name":
                v = space.index(val)
                i += 1
                e = 1
                if i < n and tokens[i] == ("op", "^"):
                    if i + 1 >= n or tokens[i + 1][0] != "num":
                        raise ValueError("exponent expected after '^'")
                    e = int(tokens[i + 1][1])
                    i += 2
                exps[v] = exps.get(v, 0) + e
            else:
                raise ValueError(f"unexpected token {val!r}")
            if i < n and tokens[i] == ("op", "*"):
                i += 1
            else:
                expect_factor = False
        mono = Monomial.from_exponents(exps)
        acc[mono] = acc.get(mono, 0.0) + sign * coef
    return Polynomial(space, acc)


class CompiledPolyVector:
    """Fast batched evaluation of a list of polynomials sharing one space."""

    def __init__(self, polys: Sequence[Polynomial]):
        if not polys:
            raise ValueError("empty polynomial list")
        self.m = len(polys[0].space)
        monos: dict[Monomial, int] = {}
        for p in polys:
            for mono in p._terms:
                monos.setdefault(mono, len(monos))
        self.exponents = np.zeros((len(monos), self.m), dtype=np.int64)
        for mono, k in monos.items():
            for v, e in mono:
                self.exponents[k, v] = e
        self.coeffs = np.zeros((len(polys), len(monos)))
        for r, p in enumerate(polys):
            for mono, c in p._terms.items():
                self.coeffs[r, monos[mono]] = c
        self.max_exp = int(self.exponents.max(initial=0))

    def monomials(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            out = np.ones(self.exponents.shape[0])
            for v in range(self.m):
                col = self.exponents[:, v]
                nz = col > 0
                if nz.any():
                    out[nz] *= x[v] ** col[nz]
            return out
        out = np.ones((x.shape[0], self.exponents.shape[0]))
        for v in range(self.m):
            col = self.exponents[:, v]
            nz = np.nonzero(col)[0]
            if nz.size:
                out[:, nz] *= x[:, v : v + 1] ** col[nz]
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        mons = self.monomials(x)
        if mons.ndim == 1:
            return self.coeffs @ mons
        return mons @ self.coeffs.T
