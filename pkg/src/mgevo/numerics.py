"""Execution of multigrid programs and the right-preconditioned BiCGSTAB solver."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from mgevo import _kernels
from mgevo.grammar import DerivationTree
from mgevo.grid import GridFunction, GridLevel, StencilOperator, apply_operator
from mgevo.problem import OperatorHierarchy, ProblemInstance, build_hierarchy, build_rhs
from mgevo.semantics import (CORRECT, RESIDUAL, RESTRICT, SMOOTH, SOLVE, ZERO,
                             MultigridProgram, evaluate_semantics, program_cost)

log = logging.getLogger(__name__)

COARSE_RTOL = 1e-10
COARSE_MAXITER = 200
SEARCH_CAP = 10_000
BENCHMARK_CAP = 20_000
DIVERGENCE_FACTOR = 1e10
BREAKDOWN = 1e-300


class DivergenceError(ArithmeticError):
    """Raised when a preconditioner application produces NaN/Inf or a singular block."""


def block_inverses(op: StencilOperator, shape: tuple[int, int]) -> np.ndarray:
    """Inverted diagonal blocks of ``op`` for ``a x b`` tiles anchored at (0, 0).

    Returns an array ``(a*b, a*b, nbi, nbj)`` (block entry first, tile last);
    slots outside the unknown set get identity rows so their (zero)
    right-hand sides stay zero.
    """
    a, b = shape
    lv = op.level
    n = lv.n
    i0, i1 = lv.x_range
    cc, rc, od = op.scaled
    nbi = -(-(n + 1) // a)
    nbj = -(-(n + 1) // b)
    P, Q = np.meshgrid(np.arange(nbi), np.arange(nbj), indexing="ij")
    m = a * b
    D = np.zeros((nbi, nbj, m, m), dtype=np.complex128)
    for k in range(m):
        di, dj = divmod(k, b)
        I, J = P * a + di, Q * b + dj
        valid = (I >= i0) & (I <= i1) & (J >= 1) & (J <= n - 1)
        robin = ((I == 0) & (i0 == 0)) | ((I == n) & (i1 == n))
        D[..., k, k] = np.where(valid, np.where(robin, rc, cc), 1.0)
        for kk in range(m):
            ei, ej = divmod(kk, b)
            if abs(ei - di) + abs(ej - dj) != 1:
                continue
            I2, J2 = P * a + ei, Q * b + ej
            valid2 = valid & (I2 >= i0) & (I2 <= i1) & (J2 >= 1) & (J2 <= n - 1)
            coef = np.where(robin & (ei != di), 2.0 * od, od)
            D[..., k, kk] = np.where(valid2, coef, 0.0)
    try:
        inv = np.linalg.inv(D)
    except np.linalg.LinAlgError:
        raise DivergenceError(f"singular {a}x{b} block on level {lv.index}") from None
    if not np.all(np.isfinite(inv)):
        raise DivergenceError(f"singular {a}x{b} block on level {lv.index}")
    return np.ascontiguousarray(inv.transpose(2, 3, 0, 1))


def _cached_inverse(H: OperatorHierarchy, level: int, shape) -> np.ndarray:
    key = ("blockinv", level, tuple(shape))
    inv = H._cache.get(key)
    if inv is None:
        inv = block_inverses(H.M[level], tuple(shape))
        H._cache[key] = inv
    return inv


_OPS = {RESIDUAL: 0, SMOOTH: 1, RESTRICT: 2, ZERO: 3, SOLVE: 4, CORRECT: 5}


class ProgramExecutor:
    """Bind a program to a hierarchy and apply it as a preconditioner.

    The instruction list is lowered to flat arrays interpreted by a compiled
    kernel.  Registers are allocated once; :meth:`apply` is not re-entrant.
    """

    def __init__(self, prog: MultigridProgram, H: OperatorHierarchy,
                 coarse_rtol: float = COARSE_RTOL, coarse_maxiter: int = COARSE_MAXITER):
        if prog.depth != H.depth:
            raise ValueError(f"program depth {prog.depth} does not match hierarchy depth {H.depth}")
        self.prog = prog
        self.H = H
        self.coarse_rtol = float(coarse_rtol)
        self.coarse_maxiter = int(coarse_maxiter)
        self.u = tuple(np.zeros(lv.shape, dtype=np.complex128) for lv in H.levels)
        self.f = tuple(np.zeros(lv.shape, dtype=np.complex128) for lv in H.levels)
        self.r = tuple(np.zeros(lv.shape, dtype=np.complex128) for lv in H.levels)
        self.levels = (
            np.array([lv.x_range[0] for lv in H.levels], dtype=np.int64),
            np.array([lv.x_range[1] for lv in H.levels], dtype=np.int64),
            np.array([op.scaled[0] for op in H.M], dtype=np.complex128),
            np.array([op.scaled[1] for op in H.M], dtype=np.complex128),
            np.array([op.scaled[2] for op in H.M], dtype=np.complex128),
        )
        m = len(prog.instructions)
        ops = np.empty(m, dtype=np.int64)
        lvs = np.empty(m, dtype=np.int64)
        oms = np.empty(m, dtype=np.float64)
        rbs = np.zeros(m, dtype=np.int64)
        bas = np.ones(m, dtype=np.int64)
        bbs = np.ones(m, dtype=np.int64)
        ioff = np.zeros(m, dtype=np.int64)
        chunks, offset, seen = [], 0, {}
        for k, ins in enumerate(prog.instructions):
            ops[k], lvs[k], oms[k] = _OPS[ins.op], ins.level, ins.omega
            rbs[k] = int(ins.red_black)
            bas[k], bbs[k] = ins.block
            if ins.op == SMOOTH and ins.block != (1, 1):
                key = (ins.level, tuple(ins.block))
                if key not in seen:
                    inv = _cached_inverse(H, ins.level, ins.block).ravel()
                    seen[key] = offset
                    chunks.append(inv)
                    offset += inv.size
                ioff[k] = seen[key]
        inv_buf = np.concatenate(chunks) if chunks else np.zeros(1, dtype=np.complex128)
        self.code = (ops, lvs, oms, rbs, bas, bbs, ioff, inv_buf)
        self.coarse_iterations = 0

    def kernel_args(self) -> tuple:
        """Arguments shared by the compiled interpreter and the fused solver."""
        return (self.u, self.f, self.r) + self.levels + self.code + (
            self.coarse_rtol, self.coarse_maxiter)

    def apply(self, rhs: np.ndarray) -> np.ndarray:
        """Run the program with ``u_0 = 0`` and ``f_0 = rhs``; return a new ``u_0``."""
        self.u[0][:] = 0.0
        self.f[0][:] = rhs
        self.coarse_iterations += _kernels.run_code(*self.kernel_args())
        out = self.u[0].copy()
        if not np.isfinite(_kernels.cnorm(out)):
            raise DivergenceError("preconditioner produced a non-finite value")
        return out

    __call__ = apply


def run_program(prog: MultigridProgram, H: OperatorHierarchy, rhs) -> GridFunction:
    """One application of ``prog`` to ``rhs`` (a finest-level field) from a zero guess."""
    values = rhs.values if isinstance(rhs, GridFunction) else np.asarray(rhs)
    return GridFunction(H.levels[0], ProgramExecutor(prog, H).apply(values))


def jacobi_sweep(M: StencilOperator, u: GridFunction, r: GridFunction, omega: float,
                 blocks: tuple[int, int] = (1, 1), red_black: bool = False) -> GridFunction:
    """One (block) Jacobi sweep ``u + omega D^-1 r``; with ``red_black`` the second
    colour sees the defect refreshed after the first (Gauss-Seidel ordering).

    ``r`` must be the current defect ``f - M u``.
    """
    if not (M.level == u.level == r.level):
        raise ValueError("operator and fields live on different levels")
    uu = np.array(u.values)
    rr = np.where(M.level.unknown_mask(), r.values, 0)
    f = rr + apply_operator(M, u).values
    i0, i1 = M.level.x_range
    if tuple(blocks) == (1, 1):
        _kernels.point_smooth(uu, f, rr, i0, i1, *M.scaled, omega, red_black)
    else:
        inv = block_inverses(M, tuple(blocks))
        _kernels.block_smooth(uu, f, rr, i0, i1, *M.scaled, omega, red_black,
                              blocks[0], blocks[1], inv)
    return GridFunction(M.level, uu)


def coarse_solve(M_coarsest: StencilOperator, rhs: GridFunction,
                 rtol: float = COARSE_RTOL, maxiter: int = COARSE_MAXITER) -> tuple[GridFunction, int, float]:
    """Unpreconditioned BiCGSTAB from zero; returns ``(solution, iterations, rel. residual)``."""
    x = np.zeros(rhs.level.shape, dtype=np.complex128)
    i0, i1 = rhs.level.x_range
    its, rel = _kernels.coarse_bicgstab(np.array(rhs.values), x, i0, i1, *M_coarsest.scaled,
                                        rtol, maxiter)
    return GridFunction(rhs.level, x), int(its), float(rel)


@dataclass
class SolveReport:
    iterations: int
    converged: bool
    final_relative_residual: float
    work_units_per_iteration: Optional[float] = None
    wall_time_total: Optional[float] = None
    wall_time_per_iteration: Optional[float] = None
    k: Optional[float] = None
    l_max: Optional[int] = None
    restarts: int = 0

    CSV_HEADER = ("k", "l_max", "iterations", "converged", "rel_residual",
                  "work_units_per_iter", "wall_ms_per_iter")

    def csv_row(self) -> list:
        wall = "" if self.wall_time_per_iteration is None else f"{1e3 * self.wall_time_per_iteration:.6g}"
        work = "" if self.work_units_per_iteration is None else f"{self.work_units_per_iteration:.10g}"
        return [
            "" if self.k is None else f"{self.k:g}",
            "" if self.l_max is None else self.l_max,
            self.iterations, int(self.converged), f"{self.final_relative_residual:.6e}",
            work, wall,
        ]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.CSV_HEADER)
        w.writerow(self.csv_row())
        return buf.getvalue()

    def as_dict(self) -> dict:
        return asdict(self)


def _as_array(x):
    return x.values if isinstance(x, GridFunction) else np.asarray(x, dtype=np.complex128)


def _dot(a, b):
    return _kernels.cdot(a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1))


def _norm(a):
    return _kernels.cnorm(a.reshape(a.shape[0], -1))


def bicgstab(apply_A: Callable, apply_precond: Optional[Callable], f, tol: float,
             cap: int, x0=None) -> tuple:
    """Right-preconditioned BiCGSTAB with conjugated inner products.

    ``apply_A`` and ``apply_precond`` map arrays to new arrays; ``None`` means no
    preconditioner.  Stops when ``||r|| / ||r0|| < tol`` or after ``cap``
    iterations.  A breakdown (``|rho|`` or ``|t.t|`` below 1e-300) restarts once
    from the current iterate; a second breakdown, a vanishing ``rhat.q`` or
    ``omega`` (e.g. a zero preconditioner), a non-finite value or a residual
    growth beyond 1e10 ends the solve as not converged.
    """
    wrap = isinstance(f, GridFunction)
    level = f.level if wrap else None
    b = np.array(_as_array(f))
    precond = apply_precond if apply_precond is not None else (lambda v: np.array(v))
    x = np.zeros_like(b) if x0 is None else np.array(_as_array(x0))
    t_start = time.perf_counter()

    def finish(it, converged, rel, restarts):
        total = time.perf_counter() - t_start
        rep = SolveReport(it, converged, float(rel), wall_time_total=total,
                          wall_time_per_iteration=total / it if it else 0.0, restarts=restarts)
        return (GridFunction(level, x) if wrap else x), rep

    r = b - apply_A(x) if x0 is not None else b.copy()
    r0norm = _norm(r)
    if r0norm == 0.0:
        return finish(0, True, 0.0, 0)
    restarts = 0
    it = 0
    rel = 1.0

    def reset():
        rhat = r.copy()
        return rhat, 1.0 + 0j, 1.0 + 0j, 1.0 + 0j, np.zeros_like(b), np.zeros_like(b)

    rhat, rho_old, alpha, omega, p, q = reset()
    while it < cap:
        it += 1
        rho = _dot(rhat, r)
        if abs(rho) < BREAKDOWN:
            if restarts:
                return finish(it, False, rel, restarts)
            restarts += 1
            r = b - apply_A(x)
            rhat, rho_old, alpha, omega, p, q = reset()
            it -= 1
            continue
        beta = (rho / rho_old) * (alpha / omega)
        p = r + beta * (p - omega * q)
        try:
            y = precond(p)
            q = apply_A(y)
            sigma = _dot(rhat, q)
            if abs(sigma) < BREAKDOWN or not np.isfinite(sigma):
                return finish(it, False, rel, restarts)
            alpha = rho / sigma
            h = x + alpha * y
            s = r - alpha * q
            if _norm(s) / r0norm < tol:
                x = h
                return finish(it, True, _norm(s) / r0norm, restarts)
            z = precond(s)
        except DivergenceError:
            return finish(it, False, rel, restarts)
        t = apply_A(z)
        tt = _dot(t, t)
        if abs(tt) < BREAKDOWN:
            if restarts:
                return finish(it, False, rel, restarts)
            restarts += 1
            x = h
            r = b - apply_A(x)
            rhat, rho_old, alpha, omega, p, q = reset()
            continue
        omega = _dot(t, s) / tt
        if abs(omega) < BREAKDOWN:
            x = h
            return finish(it, False, _norm(s) / r0norm, restarts)
        x = h + omega * z
        r = s - omega * t
        rho_old = rho
        rel = _norm(r) / r0norm
        if not np.isfinite(rel) or rel > DIVERGENCE_FACTOR:
            return finish(it, False, rel, restarts)
        if rel < tol:
            return finish(it, True, rel, restarts)
    return finish(it, False, rel, restarts)


def fused_bicgstab(ex: ProgramExecutor, A: StencilOperator, f, tol: float,
                   cap: int) -> tuple[np.ndarray, SolveReport]:
    """Compiled equivalent of ``bicgstab(A, ex, f, tol, cap)`` from a zero guess."""
    b = np.ascontiguousarray(_as_array(f), dtype=np.complex128)
    x = np.zeros_like(b)
    i0, i1 = A.level.x_range
    t0 = time.perf_counter()
    its, ok, rel, restarts = _kernels.preconditioned_bicgstab(
        b, x, i0, i1, *A.scaled, *ex.kernel_args(), float(tol), int(cap),
        BREAKDOWN, DIVERGENCE_FACTOR)
    total = time.perf_counter() - t0
    rep = SolveReport(int(its), bool(ok), float(rel), wall_time_total=total,
                      wall_time_per_iteration=total / its if its else 0.0,
                      restarts=int(restarts))
    return x, rep


_HIERARCHIES: dict = {}


def hierarchy_for(p: ProblemInstance) -> OperatorHierarchy:
    """Memoised :func:`build_hierarchy` (block inverses are cached on the result)."""
    H = _HIERARCHIES.get(p)
    if H is None:
        if len(_HIERARCHIES) > 8:
            _HIERARCHIES.clear()
        H = _HIERARCHIES[p] = build_hierarchy(p)
    return H


def _operator_fn(op: StencilOperator):
    out_shape = op.level.shape
    i0, i1 = op.level.x_range
    cc, rc, od = op.scaled

    def apply(v):
        out = np.empty(out_shape, dtype=np.complex128)
        _kernels.apply_stencil(v, out, i0, i1, cc, rc, od)
        return out
    return apply


def solve_instance(prog: Union[MultigridProgram, DerivationTree], p: ProblemInstance,
                   mode: str = "work-units", repeats: int = 1, cap: int = SEARCH_CAP) -> SolveReport:
    """Solve the instance ``p`` with BiCGSTAB preconditioned by ``prog``.

    ``mode`` is ``"work-units"`` (deterministic, default) or ``"wall-clock"``;
    the latter repeats the solve ``repeats`` times and averages the time.
    """
    if mode not in ("work-units", "wall-clock"):
        raise ValueError(f"unknown mode {mode!r}")
    if isinstance(prog, DerivationTree):
        prog = evaluate_semantics(prog, p.l_max)
    H = hierarchy_for(p)
    try:
        ex = ProgramExecutor(prog, H)
    except DivergenceError:
        return SolveReport(0, False, float("inf"), program_cost(prog, p), k=p.k, l_max=p.l_max)
    rhs = build_rhs(p).values
    runs = repeats if mode == "wall-clock" else 1
    times = []
    rep = None
    for _ in range(max(runs, 1)):
        rep = fused_bicgstab(ex, H.A, rhs, p.target_reduction, cap)[1]
        times.append(rep.wall_time_total)
    rep.work_units_per_iteration = program_cost(prog, p)
    rep.k, rep.l_max = p.k, p.l_max
    if mode == "wall-clock":
        rep.wall_time_total = float(np.mean(times))
        rep.wall_time_per_iteration = rep.wall_time_total / rep.iterations if rep.iterations else 0.0
    else:
        rep.wall_time_total = rep.wall_time_per_iteration = None
    return rep


def multigrid_iteration(prog: MultigridProgram, H: OperatorHierarchy, f: np.ndarray,
                        cycles: int, A: Optional[StencilOperator] = None) -> list[float]:
    """Use ``prog`` as a stationary iteration ``u <- u + B (f - A u)``; return the
    residual norms ``||f - A u||`` after each cycle (entry 0 is the initial one)."""
    A = A if A is not None else H.M[0]
    apply_A = _operator_fn(A)
    ex = ProgramExecutor(prog, H)
    u = np.zeros_like(f)
    history = [float(_norm(f))]
    for _ in range(cycles):
        r = f - apply_A(u)
        u = u + ex(r)
        history.append(float(_norm(f - apply_A(u))))
    return history
