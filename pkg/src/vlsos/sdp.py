"""Small dense semidefinite programs.

Standard form handled here::

    minimize    <C, X> + c_s . s
    subject to  <A_k, X> + a_k . s = b_k      k = 1..K
                X = diag(X_1, ..., X_B),  X_b >= 0 (PSD)
                s free

Coefficient matrices are symmetric and stored as upper-triangle triplets:
an entry ``(b, i, j, v)`` with ``i <= j`` means ``A[b][i, j] = A[b][j, i] = v``,
so an off-diagonal entry contributes ``2 v X_ij`` to the inner product.

The interior-point work is delegated to Clarabel (a primal-dual
interior-point method on a homogeneous embedding, which is what makes the
``Infeasible`` status trustworthy).  Blocks of size one are passed as
nonnegative orthant entries.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import clarabel
import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


class SdpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    MAX_ITER = "MaxIter"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class LinearFunctional:
    """Sparse linear functional over PSD blocks and free scalars.

    ``block_terms`` maps ``(block, i, j)`` with ``i <= j`` to a coefficient,
    ``scalar_terms`` maps scalar index to a coefficient.
    """

    block_terms: dict = field(default_factory=dict)
    scalar_terms: dict = field(default_factory=dict)

    def add_block(self, b: int, i: int, j: int, v: float) -> None:
        if i > j:
            i, j = j, i
        key = (b, i, j)
        self.block_terms[key] = self.block_terms.get(key, 0.0) + v

    def add_scalar(self, k: int, v: float) -> None:
        self.scalar_terms[k] = self.scalar_terms.get(k, 0.0) + v

    def is_empty(self) -> bool:
        return not any(self.block_terms.values()) and not any(self.scalar_terms.values())


@dataclass
class SdpProblem:
    block_dims: list[int]
    num_scalar_vars: int
    constraints: list[tuple[LinearFunctional, float]] = field(default_factory=list)
    objective: LinearFunctional = field(default_factory=LinearFunctional)

    def validate(self) -> None:
        nb = len(self.block_dims)
        funcs = [f for f, _ in self.constraints] + [self.objective]
        for f in funcs:
            for b, i, j in f.block_terms:
                if not (0 <= b < nb and 0 <= i <= j < self.block_dims[b]):
                    raise ValueError(f"block entry {(b, i, j)} out of range")
            for k in f.scalar_terms:
                if not 0 <= k < self.num_scalar_vars:
                    raise ValueError(f"scalar index {k} out of range")

    def dump(self) -> str:
        """Plain-text sparse triplet dump (see README, "SDP dump format")."""
        lines = [
            f"blocks {' '.join(map(str, self.block_dims))}",
            f"scalars {self.num_scalar_vars}",
            f"constraints {len(self.constraints)}",
        ]

        def emit(tag, f):
            for (b, i, j), v in sorted(f.block_terms.items()):
                if v:
                    lines.append(f"{tag} X {b} {i} {j} {v!r}")
            for k, v in sorted(f.scalar_terms.items()):
                if v:
                    lines.append(f"{tag} s {k} {v!r}")

        emit("obj", self.objective)
        for r, (f, rhs) in enumerate(self.constraints):
            lines.append(f"rhs {r} {rhs!r}")
            emit(f"c{r}", f)
        return "\n".join(lines) + "\n"


@dataclass
class SdpOptions:
    gap_tol: float = 1e-8
    feas_tol: float = 1e-8
    max_iter: int = 200
    verbose: bool = False
    regularization: Optional[float] = None  # static KKT regularization; None keeps the solver default


@dataclass
class SdpSolution:
    status: SdpStatus
    block_values: list[np.ndarray]
    scalar_values: np.ndarray
    primal_objective: float = math.nan
    dual_objective: float = math.nan
    duality_gap: float = math.nan
    max_constraint_violation: float = math.nan
    iterations: int = 0
    solve_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status is SdpStatus.OPTIMAL

    def min_eigenvalues(self) -> list[float]:
        return [float(np.linalg.eigvalsh(X)[0]) if X.size else 0.0 for X in self.block_values]


class _Layout:
    """Column layout of the flattened decision vector."""

    def __init__(self, block_dims: Sequence[int], num_scalars: int):
        self.block_dims = list(block_dims)
        self.offsets = []
        off = 0
        for n in self.block_dims:
            self.offsets.append(off)
            off += n * (n + 1) // 2
        self.scalar_offset = off
        self.n = off + num_scalars

    def col(self, b: int, i: int, j: int) -> int:
        # Clarabel svec: upper triangle, column-major
        return self.offsets[b] + j * (j + 1) // 2 + i

    def scale(self, i: int, j: int) -> float:
        # <A, X> coefficient on the svec entry x_ij (x_ij = sqrt2 X_ij off-diagonal)
        return 1.0 if i == j else SQRT2


def _functional_row(f: LinearFunctional, lay: _Layout):
    cols, vals = [], []
    for (b, i, j), v in f.block_terms.items():
        if v:
            cols.append(lay.col(b, i, j))
            vals.append(v * lay.scale(i, j))
    for k, v in f.scalar_terms.items():
        if v:
            cols.append(lay.scalar_offset + k)
            vals.append(v)
    return cols, vals


def _unpack_block(vec: np.ndarray, n: int) -> np.ndarray:
    X = np.zeros((n, n))
    k = 0
    for j in range(n):
        for i in range(j + 1):
            if i == j:
                X[i, i] = vec[k]
            else:
                X[i, j] = X[j, i] = vec[k] / SQRT2
            k += 1
    return X


_STATUS_MAP = {
    "Solved": SdpStatus.OPTIMAL,
    "PrimalInfeasible": SdpStatus.INFEASIBLE,
    "AlmostPrimalInfeasible": SdpStatus.INFEASIBLE,
    "DualInfeasible": SdpStatus.UNBOUNDED,
    "AlmostDualInfeasible": SdpStatus.UNBOUNDED,
    "MaxIterations": SdpStatus.MAX_ITER,
    "MaxTime": SdpStatus.MAX_ITER,
}


def solve(problem: SdpProblem, options: Optional[SdpOptions] = None) -> SdpSolution:
    """Solve ``problem``; never raises on solver trouble, reports it in ``status``."""
    opts = options or SdpOptions()
    problem.validate()
    lay = _Layout(problem.block_dims, problem.num_scalar_vars)

    rows, cols, vals = [], [], []
    b_eq = np.zeros(len(problem.constraints))
    for r, (f, rhs) in enumerate(problem.constraints):
        c, v = _functional_row(f, lay)
        rows.extend([r] * len(c))
        cols.extend(c)
        vals.extend(v)
        b_eq[r] = rhs
    m_eq = len(problem.constraints)

    # cone rows: -x_block + s = 0
    cone_rows, cone_cols = [], []
    cones: list = []
    if m_eq:
        cones.append(clarabel.ZeroConeT(m_eq))
    r = m_eq
    nonneg_cols = [lay.offsets[b] for b, n in enumerate(problem.block_dims) if n == 1]
    if nonneg_cols:
        for c in nonneg_cols:
            cone_rows.append(r)
            cone_cols.append(c)
            r += 1
        cones.append(clarabel.NonnegativeConeT(len(nonneg_cols)))
    psd_slices = []
    for b, n in enumerate(problem.block_dims):
        if n <= 1:
            continue
        size = n * (n + 1) // 2
        psd_slices.append((b, r - m_eq, size))
        for k in range(size):
            cone_rows.append(r)
            cone_cols.append(lay.offsets[b] + k)
            r += 1
        cones.append(clarabel.PSDTriangleConeT(n))

    rows.extend(cone_rows)
    cols.extend(cone_cols)
    vals.extend([-1.0] * len(cone_rows))
    A = sp.csc_matrix((vals, (rows, cols)), shape=(r, lay.n))
    b = np.concatenate([b_eq, np.zeros(r - m_eq)])

    q = np.zeros(lay.n)
    oc, ov = _functional_row(problem.objective, lay)
    for c, v in zip(oc, ov):
        q[c] += v
    P = sp.csc_matrix((lay.n, lay.n))

    settings = clarabel.DefaultSettings()
    settings.verbose = opts.verbose
    settings.max_iter = opts.max_iter
    settings.tol_gap_abs = opts.gap_tol
    settings.tol_gap_rel = opts.gap_tol
    settings.tol_feas = opts.feas_tol * 0.1
    settings.tol_ktratio = 1e-7
    if opts.regularization is not None:
        settings.static_regularization_constant = opts.regularization
    # keep runs reproducible
    settings.presolve_enable = True
    try:
        solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
        res = solver.solve()
    except (KeyboardInterrupt, SystemExit):
        raise
    except BaseException as exc:  # the solver raises a Rust panic on factorization errors
        log.warning("solver aborted: %s", exc)
        return SdpSolution(
            SdpStatus.NUMERICAL_FAILURE,
            [np.zeros((n, n)) for n in problem.block_dims],
            np.full(problem.num_scalar_vars, np.nan),
        )

    status_name = str(res.status).split(".")[-1]
    status = _STATUS_MAP.get(status_name, SdpStatus.NUMERICAL_FAILURE)
    x = np.asarray(res.x, dtype=float)
    s = np.asarray(res.s, dtype=float)

    blocks: list[np.ndarray] = []
    s_cone = s[m_eq:]
    nn_i = 0
    psd_iter = iter(psd_slices)
    for bi, n in enumerate(problem.block_dims):
        if n == 0:
            blocks.append(np.zeros((0, 0)))
        elif n == 1:
            blocks.append(np.array([[max(s_cone[nn_i], 0.0)]]))
            nn_i += 1
        else:
            _, off, size = next(psd_iter)
            blocks.append(_unpack_block(s_cone[off : off + size], n))
    scalars = x[lay.scalar_offset :].copy()

    sol = SdpSolution(
        status=status,
        block_values=blocks,
        scalar_values=scalars,
        iterations=int(res.iterations),
        solve_time=float(res.solve_time),
    )
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(s))):
        sol.status = SdpStatus.NUMERICAL_FAILURE if status is SdpStatus.OPTIMAL else status
        return sol
    if status in (SdpStatus.OPTIMAL, SdpStatus.MAX_ITER, SdpStatus.NUMERICAL_FAILURE):
        xs = x.copy()
        for bi, n in enumerate(problem.block_dims):
            X = blocks[bi]
            for j in range(n):
                for i in range(j + 1):
                    xs[lay.col(bi, i, j)] = X[i, j] * lay.scale(i, j)
        viol = np.abs(A[:m_eq] @ xs - b_eq) if m_eq else np.zeros(0)
        sol.max_constraint_violation = float(viol.max(initial=0.0))
        # the solver's own objective pair is what its gap tolerance was enforced on
        sol.primal_objective = float(res.obj_val)
        sol.dual_objective = float(res.obj_val_dual)
        sol.duality_gap = abs(sol.primal_objective - sol.dual_objective)
        if status is SdpStatus.OPTIMAL:
            scale = 1.0 + float(np.abs(b_eq).max(initial=0.0))
            if sol.max_constraint_violation > opts.feas_tol * scale:
                log.debug("solution violates constraints by %.3g; downgrading", sol.max_constraint_violation)
                sol.status = SdpStatus.NUMERICAL_FAILURE
            elif sol.duality_gap > opts.gap_tol * (1.0 + abs(sol.primal_objective)):
                sol.status = SdpStatus.NUMERICAL_FAILURE
    return sol


class BisectionInfeasible(Exception):
    """The check failed at the permissive endpoint of the interval."""


@dataclass
class BisectResult:
    value: float
    payload: object
    calls: int


def bisect_search(
    check: Callable[[float], object],
    lo: float,
    hi: float,
    tol: float,
    *,
    minimize: bool = True,
    permissive_payload: object = None,
) -> BisectResult:
    """Locate the feasibility threshold of a monotone ``check``.

    With ``minimize=True`` the check is assumed feasible on ``[t*, hi]`` and the
    smallest feasible value is sought; otherwise it is feasible on ``[lo, t*]``
    and the largest feasible value is sought.  Only midpoints are probed, so a
    run costs ``ceil(log2((hi - lo) / tol))`` calls; the permissive endpoint is
    evaluated afterwards only if no midpoint succeeded and ``permissive_payload``
    (a result the caller already holds for that endpoint) is not given.
    The returned value is always one at which ``check`` succeeded.
    Raises :class:`BisectionInfeasible` when the permissive endpoint fails.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    if tol <= 0:
        raise ValueError("tol must be positive")
    permissive, strict = (hi, lo) if minimize else (lo, hi)
    steps = max(0, math.ceil(math.log2((hi - lo) / tol)))
    good, bad = permissive, strict
    good_payload, found = None, False
    calls = 0
    for _ in range(steps):
        mid = 0.5 * (good + bad)
        calls += 1
        res = check(mid)
        if res:
            good, good_payload, found = mid, res, True
        else:
            bad = mid
    if found:
        return BisectResult(good, good_payload, calls)
    if permissive_payload is None:
        calls += 1
        permissive_payload = check(permissive)
        if not permissive_payload:
            raise BisectionInfeasible(f"check fails at permissive endpoint {permissive}")
    return BisectResult(permissive, permissive_payload, calls)


def bisect(check: Callable[[float], object], lo: float, hi: float, tol: float, *, minimize: bool = True) -> float:
    return bisect_search(check, lo, hi, tol, minimize=minimize).value
