"""Compiled stencil kernels for cell-centred grids with one ghost layer.

All arrays are padded: an interior of ``n`` cells per axis is stored in an
array of ``n + 2`` entries per axis. Masks are ``uint8`` arrays of the padded
shape; a cell is updated only where its mask entry is nonzero, ghost entries
are always zero.

Every kernel exists in a serial and a thread-parallel flavour. Parallelism is
over the outermost interior axis only, and within one colour of a red-black
sweep, so results do not depend on the thread count.
"""

import numba
import numpy as np
from numba import njit, prange


@njit(cache=True)
def fill_ghosts_2d(a):
    n0, n1 = a.shape
    for j in range(n1):
        a[0, j] = a[1, j]
        a[n0 - 1, j] = a[n0 - 2, j]
    for i in range(n0):
        a[i, 0] = a[i, 1]
        a[i, n1 - 1] = a[i, n1 - 2]


@njit(cache=True)
def fill_ghosts_3d(a):
    n0, n1, n2 = a.shape
    for j in range(n1):
        for k in range(n2):
            a[0, j, k] = a[1, j, k]
            a[n0 - 1, j, k] = a[n0 - 2, j, k]
    for i in range(n0):
        for k in range(n2):
            a[i, 0, k] = a[i, 1, k]
            a[i, n1 - 1, k] = a[i, n1 - 2, k]
    for i in range(n0):
        for j in range(n1):
            a[i, j, 0] = a[i, j, 1]
            a[i, j, n2 - 1] = a[i, j, n2 - 2]


# ---------------------------------------------------------------------------
# forward (Allen-Cahn) operator
#   A(u) = ct*u - s*eps*D(u) + (s/eps)*(u^3 - u)
# ---------------------------------------------------------------------------


def _fwd_smooth_2d(u, f, mask, ct, s, eps, inv_h2, sweeps):
    n0 = u.shape[0] - 2
    n1 = u.shape[1] - 2
    lap = s * eps * inv_h2
    diag = ct + 4.0 * lap
    sc = s / eps
    for _ in range(sweeps):
        for color in range(2):
            for i in prange(1, n0 + 1):
                j0 = 1 + (i + 1 + color) % 2
                for j in range(j0, n1 + 1, 2):
                    if mask[i, j]:
                        u0 = u[i, j]
                        nb = u[i - 1, j] + u[i + 1, j] + u[i, j - 1] + u[i, j + 1]
                        g = diag * u0 - lap * nb + sc * (u0 * u0 * u0 - u0) - f[i, j]
                        gp = diag + sc * (3.0 * u0 * u0 - 1.0)
                        if gp <= 0.0:
                            gp = diag + 2.0 * sc
                        u[i, j] = u0 - g / gp
            fill_ghosts_2d(u)


def _fwd_smooth_3d(u, f, mask, ct, s, eps, inv_h2, sweeps):
    n0 = u.shape[0] - 2
    n1 = u.shape[1] - 2
    n2 = u.shape[2] - 2
    lap = s * eps * inv_h2
    diag = ct + 6.0 * lap
    sc = s / eps
    for _ in range(sweeps):
        for color in range(2):
            for i in prange(1, n0 + 1):
                for j in range(1, n1 + 1):
                    k0 = 1 + (i + j + color) % 2
                    for k in range(k0, n2 + 1, 2):
                        if mask[i, j, k]:
                            u0 = u[i, j, k]
                            nb = (u[i - 1, j, k] + u[i + 1, j, k] + u[i, j - 1, k]
                                  + u[i, j + 1, k] + u[i, j, k - 1] + u[i, j, k + 1])
                            g = diag * u0 - lap * nb + sc * (u0 * u0 * u0 - u0) - f[i, j, k]
                            gp = diag + sc * (3.0 * u0 * u0 - 1.0)
                            if gp <= 0.0:
                                gp = diag + 2.0 * sc
                            u[i, j, k] = u0 - g / gp
            fill_ghosts_3d(u)


def _fwd_apply_2d(u, out, mask, ct, s, eps, inv_h2):
    n0 = u.shape[0] - 2
    n1 = u.shape[1] - 2
    lap = s * eps * inv_h2
    diag = ct + 4.0 * lap
    sc = s / eps
    for i in prange(n0 + 2):
        for j in range(n1 + 2):
            out[i, j] = 0.0
    for i in prange(1, n0 + 1):
        for j in range(1, n1 + 1):
            if mask[i, j]:
                u0 = u[i, j]
                nb = u[i - 1, j] + u[i + 1, j] + u[i, j - 1] + u[i, j + 1]
                out[i, j] = diag * u0 - lap * nb + sc * (u0 * u0 * u0 - u0)


def _fwd_apply_3d(u, out, mask, ct, s, eps, inv_h2):
    n0 = u.shape[0] - 2
    n1 = u.shape[1] - 2
    n2 = u.shape[2] - 2
    lap = s * eps * inv_h2
    diag = ct + 6.0 * lap
    sc = s / eps
    for i in prange(n0 + 2):
        for j in range(n1 + 2):
            for k in range(n2 + 2):
                out[i, j, k] = 0.0
    for i in prange(1, n0 + 1):
        for j in range(1, n1 + 1):
            for k in range(1, n2 + 1):
                if mask[i, j, k]:
                    u0 = u[i, j, k]
                    nb = (u[i - 1, j, k] + u[i + 1, j, k] + u[i, j - 1, k]
                          + u[i, j + 1, k] + u[i, j, k - 1] + u[i, j, k + 1])
                    out[i, j, k] = diag * u0 - lap * nb + sc * (u0 * u0 * u0 - u0)


def _fwd_residual_2d(u, f, out, mask, ct, s, eps, inv_h2):
    n0 = u.shape[0] - 2
    n1 = u.shape[1] - 2
    lap = s * eps * inv_h2
    diag = ct + 4.0 * lap
    sc = s / eps
    rmax = 0.0
    for i in range(n0 + 2):
        for j in range(n1 + 2):
            out[i, j] = 0.0
    for i in range(1, n0 + 1):
        for j in range(1, n1 + 1):
            if mask[i, j]:
                u0 = u[i, j]
                nb = u[i - 1, j] + u[i + 1, j] + u[i, j - 1] + u[i, j + 1]
                r = f[i, j] - (diag * u0 - lap * nb + sc * (u0 * u0 * u0 - u0))
                out[i, j] = r
                if abs(r) > rmax:
                    rmax = abs(r)
    return rmax


def _fwd_residual_3d(u, f, out, mask, ct, s, eps, inv_h2):
    n0 = u.shape[0] - 2
    n1 = u.shape[1] - 2
    n2 = u.shape[2] - 2
    lap = s * eps * inv_h2
    diag = ct + 6.0 * lap
    sc = s / eps
    rmax = 0.0
    for i in range(n0 + 2):
        for j in range(n1 + 2):
            for k in range(n2 + 2):
                out[i, j, k] = 0.0
    for i in range(1, n0 + 1):
        for j in range(1, n1 + 1):
            for k in range(1, n2 + 1):
                if mask[i, j, k]:
                    u0 = u[i, j, k]
                    nb = (u[i - 1, j, k] + u[i + 1, j, k] + u[i, j - 1, k]
                          + u[i, j + 1, k] + u[i, j, k - 1] + u[i, j, k + 1])
                    r = f[i, j, k] - (diag * u0 - lap * nb + sc * (u0 * u0 * u0 - u0))
                    out[i, j, k] = r
                    if abs(r) > rmax:
                        rmax = abs(r)
    return rmax


# ---------------------------------------------------------------------------
# adjoint operator
#   B(p) = it*p - s*D(p) + s*ie2*(3 phi^2 - 1)*p
# ---------------------------------------------------------------------------


def _adj_smooth_2d(p, f, phi, mask, it, s, ie2, inv_h2, sweeps):
    n0 = p.shape[0] - 2
    n1 = p.shape[1] - 2
    lap = s * inv_h2
    diag = it + 4.0 * lap
    sc = s * ie2
    for _ in range(sweeps):
        for color in range(2):
            for i in prange(1, n0 + 1):
                j0 = 1 + (i + 1 + color) % 2
                for j in range(j0, n1 + 1, 2):
                    if mask[i, j]:
                        nb = p[i - 1, j] + p[i + 1, j] + p[i, j - 1] + p[i, j + 1]
                        ph = phi[i, j]
                        p[i, j] = (f[i, j] + lap * nb) / (diag + sc * (3.0 * ph * ph - 1.0))
            fill_ghosts_2d(p)


def _adj_smooth_3d(p, f, phi, mask, it, s, ie2, inv_h2, sweeps):
    n0 = p.shape[0] - 2
    n1 = p.shape[1] - 2
    n2 = p.shape[2] - 2
    lap = s * inv_h2
    diag = it + 6.0 * lap
    sc = s * ie2
    for _ in range(sweeps):
        for color in range(2):
            for i in prange(1, n0 + 1):
                for j in range(1, n1 + 1):
                    k0 = 1 + (i + j + color) % 2
                    for k in range(k0, n2 + 1, 2):
                        if mask[i, j, k]:
                            nb = (p[i - 1, j, k] + p[i + 1, j, k] + p[i, j - 1, k]
                                  + p[i, j + 1, k] + p[i, j, k - 1] + p[i, j, k + 1])
                            ph = phi[i, j, k]
                            p[i, j, k] = (f[i, j, k] + lap * nb) / (diag + sc * (3.0 * ph * ph - 1.0))
            fill_ghosts_3d(p)


def _adj_residual_2d(p, f, phi, out, mask, it, s, ie2, inv_h2):
    n0 = p.shape[0] - 2
    n1 = p.shape[1] - 2
    lap = s * inv_h2
    diag = it + 4.0 * lap
    sc = s * ie2
    rmax = 0.0
    for i in range(n0 + 2):
        for j in range(n1 + 2):
            out[i, j] = 0.0
    for i in range(1, n0 + 1):
        for j in range(1, n1 + 1):
            if mask[i, j]:
                nb = p[i - 1, j] + p[i + 1, j] + p[i, j - 1] + p[i, j + 1]
                ph = phi[i, j]
                r = f[i, j] - ((diag + sc * (3.0 * ph * ph - 1.0)) * p[i, j] - lap * nb)
                out[i, j] = r
                if abs(r) > rmax:
                    rmax = abs(r)
    return rmax


def _adj_residual_3d(p, f, phi, out, mask, it, s, ie2, inv_h2):
    n0 = p.shape[0] - 2
    n1 = p.shape[1] - 2
    n2 = p.shape[2] - 2
    lap = s * inv_h2
    diag = it + 6.0 * lap
    sc = s * ie2
    rmax = 0.0
    for i in range(n0 + 2):
        for j in range(n1 + 2):
            for k in range(n2 + 2):
                out[i, j, k] = 0.0
    for i in range(1, n0 + 1):
        for j in range(1, n1 + 1):
            for k in range(1, n2 + 1):
                if mask[i, j, k]:
                    nb = (p[i - 1, j, k] + p[i + 1, j, k] + p[i, j - 1, k]
                          + p[i, j + 1, k] + p[i, j, k - 1] + p[i, j, k + 1])
                    ph = phi[i, j, k]
                    r = f[i, j, k] - ((diag + sc * (3.0 * ph * ph - 1.0)) * p[i, j, k] - lap * nb)
                    out[i, j, k] = r
                    if abs(r) > rmax:
                        rmax = abs(r)
    return rmax


# ---------------------------------------------------------------------------
# transfer operators
# ---------------------------------------------------------------------------


def _restrict_2d(fine, coarse):
    n0 = coarse.shape[0] - 2
    n1 = coarse.shape[1] - 2
    for i in prange(1, n0 + 1):
        fi = 2 * i - 1
        for j in range(1, n1 + 1):
            fj = 2 * j - 1
            coarse[i, j] = 0.25 * (fine[fi, fj] + fine[fi + 1, fj]
                                   + fine[fi, fj + 1] + fine[fi + 1, fj + 1])
    fill_ghosts_2d(coarse)


def _restrict_3d(fine, coarse):
    n0 = coarse.shape[0] - 2
    n1 = coarse.shape[1] - 2
    n2 = coarse.shape[2] - 2
    for i in prange(1, n0 + 1):
        fi = 2 * i - 1
        for j in range(1, n1 + 1):
            fj = 2 * j - 1
            for k in range(1, n2 + 1):
                fk = 2 * k - 1
                coarse[i, j, k] = 0.125 * (
                    fine[fi, fj, fk] + fine[fi + 1, fj, fk]
                    + fine[fi, fj + 1, fk] + fine[fi + 1, fj + 1, fk]
                    + fine[fi, fj, fk + 1] + fine[fi + 1, fj, fk + 1]
                    + fine[fi, fj + 1, fk + 1] + fine[fi + 1, fj + 1, fk + 1])
    fill_ghosts_3d(coarse)


def _prolong_2d(coarse, fine, mask, accumulate):
    # coarse must carry valid ghosts; odd fine index = low child of its parent
    n0 = fine.shape[0] - 2
    n1 = fine.shape[1] - 2
    for i in prange(1, n0 + 1):
        ci = (i + 1) // 2
        oi = ci - 1 if i % 2 == 1 else ci + 1
        for j in range(1, n1 + 1):
            if mask[i, j]:
                cj = (j + 1) // 2
                oj = cj - 1 if j % 2 == 1 else cj + 1
                v = (0.5625 * coarse[ci, cj] + 0.1875 * (coarse[oi, cj] + coarse[ci, oj])
                     + 0.0625 * coarse[oi, oj])
                if accumulate:
                    fine[i, j] += v
                else:
                    fine[i, j] = v


def _prolong_3d(coarse, fine, mask, accumulate):
    n0 = fine.shape[0] - 2
    n1 = fine.shape[1] - 2
    n2 = fine.shape[2] - 2
    for i in prange(1, n0 + 1):
        ci = (i + 1) // 2
        oi = ci - 1 if i % 2 == 1 else ci + 1
        for j in range(1, n1 + 1):
            cj = (j + 1) // 2
            oj = cj - 1 if j % 2 == 1 else cj + 1
            for k in range(1, n2 + 1):
                if mask[i, j, k]:
                    ck = (k + 1) // 2
                    ok = ck - 1 if k % 2 == 1 else ck + 1
                    v = (0.421875 * coarse[ci, cj, ck]
                         + 0.140625 * (coarse[oi, cj, ck] + coarse[ci, oj, ck] + coarse[ci, cj, ok])
                         + 0.046875 * (coarse[oi, oj, ck] + coarse[oi, cj, ok] + coarse[ci, oj, ok])
                         + 0.015625 * coarse[oi, oj, ok])
                    if accumulate:
                        fine[i, j, k] += v
                    else:
                        fine[i, j, k] = v


_PY_KERNELS = {
    ("fwd_smooth", 2): _fwd_smooth_2d,
    ("fwd_smooth", 3): _fwd_smooth_3d,
    ("fwd_apply", 2): _fwd_apply_2d,
    ("fwd_apply", 3): _fwd_apply_3d,
    ("fwd_residual", 2): _fwd_residual_2d,
    ("fwd_residual", 3): _fwd_residual_3d,
    ("adj_smooth", 2): _adj_smooth_2d,
    ("adj_smooth", 3): _adj_smooth_3d,
    ("adj_residual", 2): _adj_residual_2d,
    ("adj_residual", 3): _adj_residual_3d,
    ("restrict", 2): _restrict_2d,
    ("restrict", 3): _restrict_3d,
    ("prolong", 2): _prolong_2d,
    ("prolong", 3): _prolong_3d,
}

_SERIAL = {key: njit(cache=True)(fn) for key, fn in _PY_KERNELS.items()}
_PARALLEL = {}
_threads = 1


def set_threads(n):
    """Select the number of worker threads used by the parallel kernels.

    ``n == 1`` selects the serial kernels, which avoid thread-pool overhead.
    """
    global _threads
    n = int(n)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    if n > 1:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    _threads = n


def get_threads():
    return _threads


def kernel(name, dim):
    """Return the compiled kernel ``name`` for dimension ``dim``."""
    key = (name, dim)
    if _threads == 1:
        return _SERIAL[key]
    fn = _PARALLEL.get(key)
    if fn is None:
        fn = _PARALLEL[key] = njit(parallel=True)(_PY_KERNELS[key])
    return fn


def fill_ghosts(a):
    """Mirror the outermost interior layer into the ghost layer (Neumann)."""
    if a.ndim == 2:
        fill_ghosts_2d(a)
    else:
        fill_ghosts_3d(a)


def full_mask(shape):
    m = np.zeros(shape, dtype=np.uint8)
    m[(slice(1, -1),) * len(shape)] = 1
    return m
