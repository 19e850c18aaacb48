"""Small conic modelling layer over Clarabel (and HiGHS for pure LPs).

A :class:`ConicProblem` holds named real variable blocks with a convex
quadratic objective. Each constraint restricts an affine expression
``A[:, cols] @ x[cols] + c`` to one of the cones ``zero``, ``nonneg``, ``soc``
or ``exp`` (``exp(x) <= z``). Complex variables are lifted to interleaved
(re, im) real pairs; see :func:`complex_rows`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

__all__ = [
    "ConicProblem",
    "ConicSolution",
    "Status",
    "complex_rows",
    "solve",
    "FEAS_TOL",
    "OPT_TOL",
    "MAX_ITER",
]

FEAS_TOL = 1e-7
OPT_TOL = 1e-6
MAX_ITER = 200


class Status:
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ITERATION_LIMIT = "IterationLimit"
    NUMERICAL_TROUBLE = "NumericalTrouble"


def complex_rows(coef):
    """Real rows of ``z = coef @ v`` for complex ``v`` stored as (re, im) pairs.

    ``coef`` has shape (r, n) (or (n,)); the result has shape (2r, 2n) with the
    real parts of ``z`` in rows ``0..r-1`` and imaginary parts after.
    """
    c = np.atleast_2d(np.asarray(coef, dtype=complex))
    r, n = c.shape
    out = np.empty((2 * r, 2 * n))
    out[:r, 0::2] = c.real
    out[:r, 1::2] = -c.imag
    out[r:, 0::2] = c.imag
    out[r:, 1::2] = c.real
    return out


@dataclass
class _Block:
    kind: str  # "zero", "nonneg", "soc", "exp"
    cols: np.ndarray
    mat: np.ndarray
    const: np.ndarray
    tag: str = ""


@dataclass
class ConicProblem:
    n: int = 0
    variables: dict = field(default_factory=dict)
    lower: list = field(default_factory=list)
    upper: list = field(default_factory=list)
    q: np.ndarray = field(default_factory=lambda: np.zeros(0))
    quad: list = field(default_factory=list)  # (rows, cols, vals) of P in 0.5 x'Px
    const_obj: float = 0.0
    blocks: list = field(default_factory=list)

    def add_variable(self, name, size, lb=-np.inf, ub=np.inf):
        """Declare a real block; returns its global index array."""
        if name in self.variables:
            raise ValueError(f"duplicate variable {name!r}")
        idx = np.arange(self.n, self.n + size)
        self.variables[name] = idx
        self.n += size
        self.lower.extend(np.broadcast_to(np.asarray(lb, float), (size,)).tolist())
        self.upper.extend(np.broadcast_to(np.asarray(ub, float), (size,)).tolist())
        self.q = np.concatenate([self.q, np.zeros(size)])
        return idx

    def add_linear_objective(self, cols, coef):
        np.add.at(self.q, np.asarray(cols), np.asarray(coef, float))

    def add_sum_squares(self, cols, weight=1.0):
        """Add ``sum(weight * x[cols]**2)`` to the objective."""
        cols = np.asarray(cols)
        w = np.broadcast_to(np.asarray(weight, float), cols.shape)
        self.quad.append((cols, cols, 2.0 * w))

    def add_quadratic_objective(self, cols, Q):
        """Add ``x[cols]' Q x[cols]`` (Q symmetric PSD)."""
        cols = np.asarray(cols)
        Q = np.asarray(Q, float)
        r, c = np.meshgrid(cols, cols, indexing="ij")
        self.quad.append((r.ravel(), c.ravel(), 2.0 * Q.ravel()))

    def _add(self, kind, cols, mat, const, tag):
        cols = np.asarray(cols, dtype=int)
        mat = np.atleast_2d(np.asarray(mat, float))
        const = np.atleast_1d(np.asarray(const, float))
        if mat.shape != (const.size, cols.size):
            raise ValueError(f"{tag or kind}: matrix {mat.shape} vs "
                             f"({const.size}, {cols.size})")
        self.blocks.append(_Block(kind, cols, mat, const, tag))

    def add_eq(self, cols, mat, const, tag=""):
        """``mat @ x[cols] + const == 0``."""
        self._add("zero", cols, mat, const, tag)

    def add_ge(self, cols, mat, const, tag=""):
        """``mat @ x[cols] + const >= 0`` elementwise."""
        self._add("nonneg", cols, mat, const, tag)

    def add_le(self, cols, mat, rhs, tag=""):
        """``mat @ x[cols] <= rhs``."""
        self._add("nonneg", cols, -np.atleast_2d(mat), np.atleast_1d(rhs), tag)

    def add_soc(self, cols, mat, const, tag=""):
        """``e = mat @ x[cols] + const`` with ``e[0] >= ||e[1:]||``."""
        self._add("soc", cols, mat, const, tag)

    def add_rotated_quad(self, cols, U, u0, a, a0, tag=""):
        """Convex quadratic ``||U x + u0||^2 <= a' x + a0`` as a second-order cone."""
        U = np.atleast_2d(np.asarray(U, float)).reshape(-1, len(cols))
        u0 = np.asarray(u0, float).reshape(-1)
        a = np.asarray(a, float).reshape(1, -1)
        mat = np.vstack([a, 2.0 * U, a])
        const = np.concatenate([[a0 + 1.0], 2.0 * u0, [a0 - 1.0]])
        self._add("soc", cols, mat, const, tag)

    def add_exp(self, cols, ax, bx, az, bz, tag=""):
        """``exp(ax @ x + bx) <= az @ x + bz``."""
        mat = np.vstack([np.reshape(ax, (1, -1)), np.zeros((1, len(cols))),
                         np.reshape(az, (1, -1))])
        self._add("exp", cols, mat, [bx, 1.0, bz], tag)

    # --- evaluation helpers -------------------------------------------------

    def objective_value(self, x):
        val = float(self.q @ x) + self.const_obj
        for r, c, v in self.quad:
            val += 0.5 * float(np.sum(v * x[r] * x[c]))
        return val

    def violations(self, x):
        """Per-block scaled violation, keyed by block tag."""
        out = []
        lb, ub = np.asarray(self.lower), np.asarray(self.upper)
        scale = 1.0 + np.abs(x)
        v = np.maximum(0, np.maximum(lb - x, x - ub)) / scale
        out.append(("bounds", float(v.max(initial=0.0))))
        for blk in self.blocks:
            e = blk.mat @ x[blk.cols] + blk.const
            s = 1.0 + np.max(np.abs(e), initial=0.0)
            if blk.kind == "zero":
                viol = np.max(np.abs(e) / (1.0 + np.abs(e)), initial=0.0)
                s = 1.0
            elif blk.kind == "nonneg":
                viol = np.max(np.maximum(-e, 0.0) / (1.0 + np.abs(e)), initial=0.0)
                s = 1.0
            elif blk.kind == "soc":
                viol = max(0.0, float(np.linalg.norm(e[1:]) - e[0]))
            else:
                ex = math.exp(min(e[0], 700.0))
                s = 1.0 + max(abs(e[2]), ex)
                viol = max(0.0, ex - e[2])
            out.append((blk.tag or blk.kind, float(viol) / s))
        return out

    def max_violation(self, x):
        return max(v for _, v in self.violations(x))

    def dump(self):
        """Self-describing JSON text (variables, objective, cones, coefficients)."""
        return json.dumps({
            "n": self.n,
            "variables": {k: [int(v[0]), int(v[-1]) + 1] for k, v in self.variables.items()},
            "lower": [None if math.isinf(v) else v for v in self.lower],
            "upper": [None if math.isinf(v) else v for v in self.upper],
            "q": self.q.tolist(),
            "quad": [[r.tolist(), c.tolist(), v.tolist()] for r, c, v in self.quad],
            "blocks": [{"kind": b.kind, "tag": b.tag, "cols": b.cols.tolist(),
                        "mat": b.mat.tolist(), "const": b.const.tolist()}
                       for b in self.blocks],
        }, sort_keys=True)

    @classmethod
    def load(cls, text):
        d = json.loads(text)
        p = cls()
        p.n = d["n"]
        p.variables = {k: np.arange(a, b) for k, (a, b) in d["variables"].items()}
        p.lower = [-np.inf if v is None else v for v in d["lower"]]
        p.upper = [np.inf if v is None else v for v in d["upper"]]
        p.q = np.array(d["q"], float)
        p.quad = [(np.array(r, int), np.array(c, int), np.array(v, float))
                  for r, c, v in d["quad"]]
        p.blocks = [_Block(b["kind"], np.array(b["cols"], int),
                           np.array(b["mat"], float).reshape(len(b["const"]), len(b["cols"])),
                           np.array(b["const"], float), b["tag"]) for b in d["blocks"]]
        return p


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray
    objective: float
    max_violation: float
    iterations: int = 0
    info: str = ""

    @property
    def ok(self):
        return self.status == Status.OPTIMAL

    def value(self, problem, name):
        return self.x[problem.variables[name]]


def _bound_blocks(problem):
    lb, ub = np.asarray(problem.lower), np.asarray(problem.upper)
    blocks = []
    fixed = np.isfinite(lb) & (lb == ub)
    i = np.flatnonzero(fixed)
    if i.size:
        blocks.append(_Block("zero", i, np.eye(i.size), -lb[i], "fixed"))
    i = np.flatnonzero(np.isfinite(lb) & ~fixed)
    if i.size:
        blocks.append(_Block("nonneg", i, np.eye(i.size), -lb[i], "lower"))
    i = np.flatnonzero(np.isfinite(ub) & ~fixed)
    if i.size:
        blocks.append(_Block("nonneg", i, -np.eye(i.size), ub[i], "upper"))
    return blocks


def _csc(rows, cols, vals, shape):
    """CSC matrix from triplets (duplicates summed) without a COO round trip."""
    m, n = shape
    if rows.size:
        key = cols.astype(np.int64) * m + rows
        order = np.argsort(key, kind="stable")
        key, vals = key[order], vals[order]
        uniq, start = np.unique(key, return_index=True)
        data = np.add.reduceat(vals, start)
        r, c = uniq % m, uniq // m
    else:
        data, r, c = np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(c, minlength=n), out=indptr[1:])
    return sp.csc_matrix((data, r.astype(np.int64), indptr), shape=shape)


_CONE_ORDER = {"zero": 0, "nonneg": 1, "soc": 2, "exp": 3}


def _assemble(problem, blocks):
    """Clarabel data ``(P, A, b, cones, layout)``; ``layout`` lists
    ``(kind, start, size)`` per block in row order."""
    blocks = sorted(blocks, key=lambda b: _CONE_ORDER[b.kind])
    rows, cols, vals, b = [], [], [], []
    cones, layout = [], []
    r0 = 0
    for blk in blocks:
        m = blk.const.size
        rr, cc = np.nonzero(blk.mat)
        rows.append(rr + r0)
        cols.append(blk.cols[cc])
        vals.append(-blk.mat[rr, cc])
        b.append(blk.const)
        if blk.kind == "zero":
            cones.append(clarabel.ZeroConeT(m))
        elif blk.kind == "nonneg":
            cones.append(clarabel.NonnegativeConeT(m))
        elif blk.kind == "soc":
            cones.append(clarabel.SecondOrderConeT(m))
        else:
            cones.append(clarabel.ExponentialConeT())
        layout.append((blk.kind, r0, m))
        r0 += m
    cat = lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt)
    A = _csc(cat(rows, np.int64), cat(cols, np.int64), cat(vals, float), (r0, problem.n))
    if problem.quad:
        qr = np.concatenate([r for r, _, _ in problem.quad]).astype(np.int64)
        qc = np.concatenate([c for _, c, _ in problem.quad]).astype(np.int64)
        qv = np.concatenate([v for _, _, v in problem.quad]).astype(float)
        # symmetrize the lower-triangular entries onto the upper triangle
        lo = qr > qc
        qr[lo], qc[lo] = qc[lo].copy(), qr[lo].copy()
        P = _csc(qr, qc, qv, (problem.n, problem.n))
    else:
        P = sp.csc_matrix((np.zeros(0), np.zeros(0, np.int64),
                           np.zeros(problem.n + 1, np.int64)), shape=(problem.n, problem.n))
    return P, A, cat(b, float), cones, layout


def _cone_violation(A, b, layout, x):
    """Largest scaled cone violation of ``s = b - A x`` (see ``violations``)."""
    e = b - A @ x
    worst = 0.0
    lin = np.zeros(e.size, bool)
    sign = np.zeros(e.size)
    for kind, start, m in layout:
        if kind == "zero":
            lin[start:start + m] = True
            sign[start:start + m] = 1.0
        elif kind == "nonneg":
            lin[start:start + m] = True
            sign[start:start + m] = -1.0
        elif kind == "soc":
            seg = e[start:start + m]
            v = float(np.linalg.norm(seg[1:]) - seg[0])
            if v > 0:
                worst = max(worst, v / (1.0 + np.max(np.abs(seg))))
        else:
            seg = e[start:start + m]
            ex = math.exp(min(seg[0], 700.0))
            v = ex - seg[2]
            if v > 0:
                worst = max(worst, v / (1.0 + max(abs(seg[2]), ex)))
    if lin.any():
        el = e[lin]
        v = np.where(sign[lin] > 0, np.abs(el), np.maximum(-el, 0.0)) / (1.0 + np.abs(el))
        worst = max(worst, float(v.max()))
    return worst


def _clarabel(problem, blocks, feas_tol, opt_tol, max_iter):
    P, A, b, cones, layout = _assemble(problem, blocks)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_feas = min(1e-8, feas_tol)
    settings.tol_gap_abs = min(1e-8, opt_tol)
    settings.tol_gap_rel = min(1e-8, opt_tol)
    solver = clarabel.DefaultSolver(P, problem.q, A, b, cones, settings)
    sol = solver.solve()
    return str(sol.status), np.array(sol.x), int(sol.iterations), (A, b, layout)


def _highs(problem, blocks):
    A_ub, b_ub, A_eq, b_eq = [], [], [], []
    for blk in blocks:
        row = np.zeros((blk.const.size, problem.n))
        row[:, blk.cols] = blk.mat
        if blk.kind == "zero":
            A_eq.append(row)
            b_eq.append(-blk.const)
        else:
            A_ub.append(-row)
            b_ub.append(blk.const)
    bounds = [(None if math.isinf(lo) else lo, None if math.isinf(hi) else hi)
              for lo, hi in zip(problem.lower, problem.upper)]
    res = linprog(problem.q,
                  A_ub=np.vstack(A_ub) if A_ub else None,
                  b_ub=np.concatenate(b_ub) if b_ub else None,
                  A_eq=np.vstack(A_eq) if A_eq else None,
                  b_eq=np.concatenate(b_eq) if b_eq else None,
                  bounds=bounds, method="highs")
    status = {0: "Solved", 1: "MaxIterations", 2: "PrimalInfeasible"}.get(res.status, "Failed")
    x = res.x if res.x is not None else np.full(problem.n, np.nan)
    return status, np.asarray(x, float), int(getattr(res, "nit", 0) or 0)


def _finish(problem, status, x, iters, feas_tol, info="", check=None):
    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return ConicSolution(Status.INFEASIBLE, x, math.nan, math.inf, iters, info)
    if not np.all(np.isfinite(x)):
        return ConicSolution(Status.NUMERICAL_TROUBLE, x, math.nan, math.inf, iters, info)
    if check is not None:
        A, b, layout = check
        lb, ub = np.asarray(problem.lower), np.asarray(problem.upper)
        viol = max(_cone_violation(A, b, layout, x),
                   float(np.max(np.maximum(0, np.maximum(lb - x, x - ub)) / (1.0 + np.abs(x)),
                                initial=0.0)))
    else:
        viol = problem.max_violation(x)
    obj = problem.objective_value(x)
    if status == "MaxIterations":
        code = Status.ITERATION_LIMIT
    elif status in ("Solved", "AlmostSolved") and viol <= feas_tol:
        code = Status.OPTIMAL
    else:
        code = Status.NUMERICAL_TROUBLE
        info = info or f"solver status {status}, violation {viol:.3g}"
    return ConicSolution(code, x, obj, viol, iters, info)


def _exp_cut(blk, x0):
    """Tangent of exp at ``x0`` as a linear cut ``z >= e^x0 (1 + x - x0)``."""
    ax, az = blk.mat[0], blk.mat[2]
    bx, bz = blk.const[0], blk.const[2]
    g = math.exp(x0)
    return _Block("nonneg", blk.cols, (az - g * ax)[None, :],
                  np.array([bz - g * (1.0 + bx - x0)]), blk.tag)


def solve(problem, feas_tol=FEAS_TOL, opt_tol=OPT_TOL, max_iter=MAX_ITER,
          exp_mode="native", max_cut_rounds=60):
    """Solve ``problem``; deterministic for identical input.

    ``exp_mode="cuts"`` replaces each exponential constraint with tangent
    outer cuts, refined at the current iterate until the exponential
    constraints hold to ``feas_tol``.
    """
    blocks = _bound_blocks(problem) + list(problem.blocks)
    has_cone = any(b.kind in ("soc", "exp") for b in blocks)
    if not has_cone and not problem.quad:
        status, x, iters = _highs(problem, blocks)
        return _finish(problem, status, x, iters, feas_tol)
    if exp_mode == "native" or not any(b.kind == "exp" for b in blocks):
        status, x, iters, check = _clarabel(problem, blocks, feas_tol, opt_tol, max_iter)
        return _finish(problem, status, x, iters, feas_tol, check=check)
    if exp_mode != "cuts":
        raise ValueError(f"unknown exp_mode {exp_mode!r}")

    exp_blocks = [b for b in blocks if b.kind == "exp"]
    base = [b for b in blocks if b.kind != "exp"]
    cuts = [_exp_cut(b, x0) for b in exp_blocks for x0 in (-4.0, 0.0, 4.0)]
    total = 0
    for _ in range(max_cut_rounds):
        status, x, iters, _ = _clarabel(problem, base + cuts, feas_tol, opt_tol, max_iter)
        total += iters
        if status not in ("Solved", "AlmostSolved") or not np.all(np.isfinite(x)):
            return _finish(problem, status, x, total, feas_tol, "cut loop")
        worst = 0.0
        for blk in exp_blocks:
            e = blk.mat @ x[blk.cols] + blk.const
            ex = math.exp(min(e[0], 700.0))
            gap = (ex - e[2]) / (1.0 + max(abs(e[2]), ex))
            worst = max(worst, gap)
            if gap > 0.1 * feas_tol:
                cuts.append(_exp_cut(blk, e[0]))
        if worst <= 0.1 * feas_tol:
            return _finish(problem, status, x, total, feas_tol)
    return ConicSolution(Status.ITERATION_LIMIT, x, problem.objective_value(x),
                         problem.max_violation(x), total, "cut rounds exhausted")
