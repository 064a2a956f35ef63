"""Numba kernels for the five-point stencil, smoothers, transfers and reductions.

All kernels work on ``(n + 1, n + 1)`` complex arrays indexed ``[i, j]`` with
``i`` along x and ``j`` along y.  Rows ``j = 0`` and ``j = n`` are Dirichlet
nodes and are never read as unknowns.  Columns ``i0 .. i1`` (inclusive) are
the active x-range: ``0 .. n`` for Robin boundaries, ``1 .. n - 1`` when the
x-boundaries are Dirichlet as well.

Loops are sequential with a fixed traversal order, so every result (including
the reductions) is bit-identical between runs.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _row_coefs(i, n, i0, i1, cc, rc, od):
    # (diagonal, west coef, east coef, west index, east index) for column i.
    # Dirichlet neighbours get a zero coefficient; Robin rows double the inward one.
    zero = 0.0j * od
    if i == 0 and i0 == 0:
        return rc, zero, 2.0 * od, 0, 1
    if i == n and i1 == n:
        return rc, 2.0 * od, zero, n - 1, n
    cw = od if i - 1 >= i0 else zero
    ce = od if i + 1 <= i1 else zero
    return cc, cw, ce, i - 1, i + 1


@njit(cache=True, inline="always")
def _stencil_at(u, i, j, n, d, cw, ce, iw, ie, od):
    v = d * u[i, j] + cw * u[iw, j] + ce * u[ie, j]
    if j > 1:
        v += od * u[i, j - 1]
    if j < n - 1:
        v += od * u[i, j + 1]
    return v


@njit(cache=True)
def apply_stencil(u, out, i0, i1, cc, rc, od):
    n = u.shape[0] - 1
    out[:, :] = 0.0
    for i in range(i0, i1 + 1):
        d, cw, ce, iw, ie = _row_coefs(i, n, i0, i1, cc, rc, od)
        out[i, 1] = _stencil_at(u, i, 1, n, d, cw, ce, iw, ie, od)
        # branch-free interior of the column
        if i0 < i < i1:
            for j in range(2, n - 1):
                out[i, j] = cc * u[i, j] + od * (u[i - 1, j] + u[i + 1, j]
                                                 + u[i, j - 1] + u[i, j + 1])
        else:
            for j in range(2, n - 1):
                out[i, j] = (d * u[i, j] + cw * u[iw, j] + ce * u[ie, j]
                             + od * (u[i, j - 1] + u[i, j + 1]))
        if n - 1 > 1:
            out[i, n - 1] = _stencil_at(u, i, n - 1, n, d, cw, ce, iw, ie, od)


@njit(cache=True)
def residual(u, f, out, i0, i1, cc, rc, od):
    n = u.shape[0] - 1
    apply_stencil(u, out, i0, i1, cc, rc, od)
    for i in range(i0, i1 + 1):
        for j in range(1, n):
            out[i, j] = f[i, j] - out[i, j]


@njit(cache=True)
def point_smooth(u, f, r, i0, i1, cc, rc, od, omega, red_black):
    """Pointwise Jacobi update, or red-black Gauss-Seidel when ``red_black``.

    ``r`` must hold ``f - M u`` on entry.  The red half-sweep uses it directly,
    the black half-sweep recomputes the residual from the updated red values.
    """
    n = u.shape[0] - 1
    if not red_black:
        for i in range(i0, i1 + 1):
            dinv = omega / _row_coefs(i, n, i0, i1, cc, rc, od)[0]
            for j in range(1, n):
                u[i, j] += dinv * r[i, j]
        return
    for i in range(i0, i1 + 1):
        dinv = omega / _row_coefs(i, n, i0, i1, cc, rc, od)[0]
        for j in range(1 + (i + 1) % 2, n, 2):
            u[i, j] += dinv * r[i, j]
    for i in range(i0, i1 + 1):
        d, cw, ce, iw, ie = _row_coefs(i, n, i0, i1, cc, rc, od)
        dinv = omega / d
        j = 1 + i % 2
        if j == 1:
            u[i, 1] += dinv * (f[i, 1] - _stencil_at(u, i, 1, n, d, cw, ce, iw, ie, od))
            j = 3
        last = n - 1 if (n - 1 - j) % 2 == 0 else n - 2
        if last == n - 1:
            last -= 2
        # interior points of the column, edges handled separately
        if i0 < i < i1:
            for jj in range(j, last + 1, 2):
                u[i, jj] += dinv * (f[i, jj] - cc * u[i, jj]
                                    - od * (u[i - 1, jj] + u[i + 1, jj]
                                            + u[i, jj - 1] + u[i, jj + 1]))
        else:
            for jj in range(j, last + 1, 2):
                u[i, jj] += dinv * (f[i, jj] - _stencil_at(u, i, jj, n, d, cw, ce, iw, ie, od))
        if (n - 1 - (1 + i % 2)) % 2 == 0 and n - 1 > 1:
            u[i, n - 1] += dinv * (f[i, n - 1]
                                   - _stencil_at(u, i, n - 1, n, d, cw, ce, iw, ie, od))


@njit(cache=True)
def _block_pass(u, r, inv, a, b, omega, colour, red_black):
    # u[slot k of tile] += omega * sum_kk inv[k, kk, tile] * r[slot kk of tile]
    n = u.shape[0] - 1
    nbi = inv.shape[2]
    nbj = inv.shape[3]
    for di in range(a):
        for dj in range(b):
            k = di * b + dj
            for ei in range(a):
                for ej in range(b):
                    kk = ei * b + ej
                    for p in range(nbi):
                        i = p * a + di
                        ii = p * a + ei
                        if i > n or ii > n:
                            break
                        q0 = (colour + p) % 2 if red_black else 0
                        step = 2 if red_black else 1
                        for q in range(q0, nbj, step):
                            j = q * b + dj
                            jj = q * b + ej
                            if j > n or jj > n:
                                break
                            u[i, j] += omega * (inv[k, kk, p, q] * r[ii, jj])


@njit(cache=True)
def _block_tiles(u, r, inv, i0, i1, a, b, omega, colour, red_black):
    # tile by tile; faster than _block_pass for larger blocks
    n = u.shape[0] - 1
    m = a * b
    loc = np.empty(m, dtype=np.complex128)
    for p in range(inv.shape[2]):
        ilo = p * a
        for q in range(inv.shape[3]):
            if red_black and (p + q) % 2 != colour:
                continue
            jlo = q * b
            inside = ilo >= i0 and ilo + a - 1 <= i1 and jlo >= 1 and jlo + b - 1 <= n - 1
            for di in range(a):
                for dj in range(b):
                    i = ilo + di
                    j = jlo + dj
                    if inside or (i <= n and j <= n):
                        loc[di * b + dj] = r[i, j]
                    else:
                        loc[di * b + dj] = 0.0
            for di in range(a):
                i = ilo + di
                if i > n:
                    break
                for dj in range(b):
                    j = jlo + dj
                    if j > n:
                        break
                    k = di * b + dj
                    acc = 0.0j
                    for kk in range(m):
                        acc += inv[k, kk, p, q] * loc[kk]
                    u[i, j] += omega * acc


@njit(cache=True)
def block_smooth(u, f, r, i0, i1, cc, rc, od, omega, red_black, a, b, inv):
    """Block Jacobi with ``a x b`` tiles anchored at node (0, 0).

    ``inv[k, kk, p, q]`` is entry ``(k, kk)`` of the inverted diagonal block
    of tile ``(p, q)``, local slots in row-major order (``di * b + dj``).
    Slots outside the unknown set carry identity rows and ``r`` must be zero
    there, so they receive exact zeros.  With ``red_black`` the tiles are
    coloured like a checkerboard and ``r`` is overwritten with the defect
    after the first colour.
    """
    for colour in range(2 if red_black else 1):
        if colour == 1:
            residual(u, f, r, i0, i1, cc, rc, od)
        if a * b <= 4:
            _block_pass(u, r, inv, a, b, omega, colour, red_black)
        else:
            _block_tiles(u, r, inv, i0, i1, a, b, omega, colour, red_black)


@njit(cache=True)
def restrict_fw(fine, coarse, i0f, i1f, i0c, i1c):
    """Full weighting; weights falling outside the active x-range are dropped."""
    nc = coarse.shape[0] - 1
    coarse[:, :] = 0.0
    for ic in range(i0c, i1c + 1):
        i = 2 * ic
        if i - 1 >= i0f and i + 1 <= i1f:
            for jc in range(1, nc):
                j = 2 * jc
                coarse[ic, jc] = (4.0 * fine[i, j]
                                  + 2.0 * (fine[i - 1, j] + fine[i + 1, j]
                                           + fine[i, j - 1] + fine[i, j + 1])
                                  + (fine[i - 1, j - 1] + fine[i + 1, j - 1]
                                     + fine[i - 1, j + 1] + fine[i + 1, j + 1])) / 16.0
            continue
        for jc in range(1, nc):
            acc = 0.0j
            for di in range(-1, 2):
                ii = i + di
                if ii < i0f or ii > i1f:
                    continue
                wi = 2.0 - abs(di)
                for dj in range(-1, 2):
                    acc += wi * (2.0 - abs(dj)) * fine[ii, 2 * jc + dj]
            coarse[ic, jc] = acc / 16.0


@njit(cache=True)
def prolong_add(coarse, fine, omega, i0c, i1c, i0f, i1f):
    """``fine += omega * P coarse`` with bilinear interpolation.

    Coarse values outside the unknown set are read as zero, so fine nodes
    outside ``i0f .. i1f`` or on Dirichlet rows receive exact zeros.
    """
    nc = coarse.shape[0] - 1
    t = np.zeros_like(coarse)
    for ic in range(i0c, i1c + 1):
        for jc in range(1, nc):
            t[ic, jc] = coarse[ic, jc]
    for ic in range(nc + 1):
        for jc in range(nc + 1):
            fine[2 * ic, 2 * jc] += omega * t[ic, jc]
        for jc in range(nc):
            fine[2 * ic, 2 * jc + 1] += omega * (0.5 * (t[ic, jc] + t[ic, jc + 1]))
    for ic in range(nc):
        for jc in range(nc + 1):
            fine[2 * ic + 1, 2 * jc] += omega * (0.5 * (t[ic, jc] + t[ic + 1, jc]))
        for jc in range(nc):
            fine[2 * ic + 1, 2 * jc + 1] += omega * (0.25 * (t[ic, jc] + t[ic + 1, jc]
                                                             + t[ic, jc + 1] + t[ic + 1, jc + 1]))


@njit(cache=True)
def cdot(a, b):
    """Conjugated inner product ``sum(conj(a) * b)`` in row-major order."""
    acc = 0.0j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            acc += a[i, j].conjugate() * b[i, j]
    return acc


@njit(cache=True)
def cnorm(a):
    acc = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            acc += a[i, j].real * a[i, j].real + a[i, j].imag * a[i, j].imag
    return np.sqrt(acc)


@njit(cache=True)
def coarse_bicgstab(f, x, i0, i1, cc, rc, od, rtol, maxiter):
    """Unpreconditioned BiCGSTAB from a zero guess; returns (iterations, rel. residual).

    ``x`` receives the best iterate seen.
    """
    n = f.shape[0] - 1
    x[:, :] = 0.0
    bnorm = cnorm(f)
    if bnorm == 0.0:
        return 0, 0.0
    r = f.copy()
    rhat = f.copy()
    p = np.zeros_like(f)
    v = np.zeros_like(f)
    s = np.zeros_like(f)
    t = np.zeros_like(f)
    best = x.copy()
    best_res = 1.0
    rho_old = 1.0 + 0.0j
    alpha = 1.0 + 0.0j
    w = 1.0 + 0.0j
    for it in range(1, maxiter + 1):
        rho = cdot(rhat, r)
        if abs(rho) < 1e-300:
            break
        beta = (rho / rho_old) * (alpha / w)
        for i in range(n + 1):
            for j in range(n + 1):
                p[i, j] = r[i, j] + beta * (p[i, j] - w * v[i, j])
        apply_stencil(p, v, i0, i1, cc, rc, od)
        den = cdot(rhat, v)
        if abs(den) < 1e-300:
            break
        alpha = rho / den
        for i in range(n + 1):
            for j in range(n + 1):
                s[i, j] = r[i, j] - alpha * v[i, j]
        snorm = cnorm(s) / bnorm
        if snorm < rtol:
            for i in range(n + 1):
                for j in range(n + 1):
                    x[i, j] += alpha * p[i, j]
            return it, snorm
        apply_stencil(s, t, i0, i1, cc, rc, od)
        tt = cdot(t, t)
        if abs(tt) < 1e-300:
            break
        w = cdot(t, s) / tt
        for i in range(n + 1):
            for j in range(n + 1):
                x[i, j] += alpha * p[i, j] + w * s[i, j]
                r[i, j] = s[i, j] - w * t[i, j]
        rho_old = rho
        rel = cnorm(r) / bnorm
        if rel < best_res:
            best_res = rel
            best[:, :] = x
        if rel < rtol:
            return it, rel
        if not np.isfinite(rel):
            break
    x[:, :] = best
    return maxiter, best_res


# -- whole-program execution ------------------------------------------------------
#
# A program is a set of parallel arrays (op, level, omega, red_black, a, b,
# inverse offset).  Registers are tuples of per-level arrays.  Block inverses
# live in one flat buffer and are reshaped per instruction.

@njit(cache=True)
def run_code(u, f, r, i0s, i1s, ccs, rcs, ods, ops, lvs, oms, rbs, bas, bbs, ioff,
             inv_buf, coarse_rtol, coarse_maxiter):
    """Execute the program on the registers; ``u[0]`` must be zero and ``f[0]``
    the input.  Returns the total number of coarse-solver iterations."""
    coarse_its = 0
    for k in range(ops.shape[0]):
        op = ops[k]
        lv = lvs[k]
        i0 = i0s[lv]
        i1 = i1s[lv]
        if op == 0:
            residual(u[lv], f[lv], r[lv], i0, i1, ccs[lv], rcs[lv], ods[lv])
        elif op == 1:
            a = bas[k]
            b = bbs[k]
            if a == 1 and b == 1:
                point_smooth(u[lv], f[lv], r[lv], i0, i1, ccs[lv], rcs[lv], ods[lv],
                             oms[k], rbs[k] != 0)
            else:
                n = u[lv].shape[0] - 1
                nbi = (n + a) // a
                nbj = (n + b) // b
                m = a * b
                size = nbi * nbj * m * m
                inv = inv_buf[ioff[k]:ioff[k] + size].reshape((m, m, nbi, nbj))
                block_smooth(u[lv], f[lv], r[lv], i0, i1, ccs[lv], rcs[lv], ods[lv],
                             oms[k], rbs[k] != 0, a, b, inv)
        elif op == 2:
            restrict_fw(r[lv], f[lv + 1], i0, i1, i0s[lv + 1], i1s[lv + 1])
        elif op == 3:
            u[lv][:, :] = 0.0
        elif op == 4:
            its, _ = coarse_bicgstab(f[lv], u[lv], i0, i1, ccs[lv], rcs[lv], ods[lv],
                                     coarse_rtol, coarse_maxiter)
            coarse_its += its
        else:
            prolong_add(u[lv + 1], u[lv], oms[k], i0s[lv + 1], i1s[lv + 1], i0, i1)
    return coarse_its


@njit(cache=True)
def _precondition(v, out, u, f, r, i0s, i1s, ccs, rcs, ods, ops, lvs, oms, rbs, bas, bbs,
                  ioff, inv_buf, coarse_rtol, coarse_maxiter):
    u[0][:, :] = 0.0
    f[0][:, :] = v
    run_code(u, f, r, i0s, i1s, ccs, rcs, ods, ops, lvs, oms, rbs, bas, bbs, ioff,
             inv_buf, coarse_rtol, coarse_maxiter)
    out[:, :] = u[0]
    return np.isfinite(cnorm(out))


@njit(cache=True)
def preconditioned_bicgstab(b, x, ai0, ai1, acc, arc, aod, u, f, r, i0s, i1s, ccs, rcs, ods,
                            ops, lvs, oms, rbs, bas, bbs, ioff, inv_buf, coarse_rtol,
                            coarse_maxiter, tol, cap, breakdown, divergence):
    """Right-preconditioned BiCGSTAB from a zero guess with the program as
    preconditioner.  Mirrors ``numerics.bicgstab``.

    Returns ``(iterations, converged, relative residual, restarts)``; ``x``
    receives the final iterate.
    """
    n = b.shape[0] - 1
    x[:, :] = 0.0
    r0norm = cnorm(b)
    if r0norm == 0.0:
        return 0, True, 0.0, 0
    res = b.copy()
    rhat = b.copy()
    p = np.zeros_like(b)
    q = np.zeros_like(b)
    y = np.zeros_like(b)
    h = np.zeros_like(b)
    s = np.zeros_like(b)
    z = np.zeros_like(b)
    t = np.zeros_like(b)
    rho_old = 1.0 + 0.0j
    alpha = 1.0 + 0.0j
    omega = 1.0 + 0.0j
    restarts = 0
    rel = 1.0
    it = 0
    while it < cap:
        it += 1
        rho = cdot(rhat, res)
        if abs(rho) < breakdown:
            if restarts > 0:
                return it, False, rel, restarts
            restarts += 1
            apply_stencil(x, t, ai0, ai1, acc, arc, aod)
            for i in range(n + 1):
                for j in range(n + 1):
                    res[i, j] = b[i, j] - t[i, j]
                    rhat[i, j] = res[i, j]
                    p[i, j] = 0.0
                    q[i, j] = 0.0
            rho_old = 1.0 + 0.0j
            alpha = 1.0 + 0.0j
            omega = 1.0 + 0.0j
            it -= 1
            continue
        beta = (rho / rho_old) * (alpha / omega)
        for i in range(n + 1):
            for j in range(n + 1):
                p[i, j] = res[i, j] + beta * (p[i, j] - omega * q[i, j])
        if not _precondition(p, y, u, f, r, i0s, i1s, ccs, rcs, ods, ops, lvs, oms, rbs,
                             bas, bbs, ioff, inv_buf, coarse_rtol, coarse_maxiter):
            return it, False, rel, restarts
        apply_stencil(y, q, ai0, ai1, acc, arc, aod)
        sigma = cdot(rhat, q)
        if abs(sigma) < breakdown or not np.isfinite(abs(sigma)):
            return it, False, rel, restarts
        alpha = rho / sigma
        for i in range(n + 1):
            for j in range(n + 1):
                h[i, j] = x[i, j] + alpha * y[i, j]
                s[i, j] = res[i, j] - alpha * q[i, j]
        srel = cnorm(s) / r0norm
        if srel < tol:
            x[:, :] = h
            return it, True, srel, restarts
        if not _precondition(s, z, u, f, r, i0s, i1s, ccs, rcs, ods, ops, lvs, oms, rbs,
                             bas, bbs, ioff, inv_buf, coarse_rtol, coarse_maxiter):
            return it, False, rel, restarts
        apply_stencil(z, t, ai0, ai1, acc, arc, aod)
        tt = cdot(t, t)
        if abs(tt) < breakdown:
            if restarts > 0:
                return it, False, rel, restarts
            restarts += 1
            x[:, :] = h
            apply_stencil(x, t, ai0, ai1, acc, arc, aod)
            for i in range(n + 1):
                for j in range(n + 1):
                    res[i, j] = b[i, j] - t[i, j]
                    rhat[i, j] = res[i, j]
                    p[i, j] = 0.0
                    q[i, j] = 0.0
            rho_old = 1.0 + 0.0j
            alpha = 1.0 + 0.0j
            omega = 1.0 + 0.0j
            continue
        omega = cdot(t, s) / tt
        if abs(omega) < breakdown:
            x[:, :] = h
            return it, False, srel, restarts
        for i in range(n + 1):
            for j in range(n + 1):
                x[i, j] = h[i, j] + omega * z[i, j]
                res[i, j] = s[i, j] - omega * t[i, j]
        rho_old = rho
        rel = cnorm(res) / r0norm
        if not np.isfinite(rel) or rel > divergence:
            return it, False, rel, restarts
        if rel < tol:
            return it, True, rel, restarts
    return it, False, rel, restarts
