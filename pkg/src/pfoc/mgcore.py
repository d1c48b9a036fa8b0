"""Geometric multigrid for the implicit forward and adjoint time-step systems.

The forward system at each time step is, for BDF2,

    eps*(u - 4/3 phi_n + 1/3 phi_nm1)/tau
        = 2/3 * (eps*D(u) - (u**3 - u)/eps + eta + lam)

and for BDF1 the same with history coefficients (-1, 0) and scale 1. The
adjoint system, solved backwards in time, is

    (p - 4/3 p_next + 1/3 p_next2)/tau = 2/3 * (D(p) - (3 phi**2 - 1)/eps**2 * p)

Both are solved with red-black Gauss-Seidel smoothed V-cycles: the forward
one with the full approximation scheme (one scalar Newton step per cell
visit), the adjoint one with the linear correction scheme.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import ConvergenceError, NumericalError, StructuralError
from .mesh import GridHierarchy, ScalarField


def bdf_coefficients(order: int):
    """History coefficients ``(a1, a2)`` and right-hand-side scale."""
    if order == 2:
        return -4.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0
    if order == 1:
        return -1.0, 0.0, 1.0
    raise ValueError(f"BDF order must be 1 or 2, got {order}")


@dataclass
class ForwardOperatorSpec:
    """One implicit Allen-Cahn step on the grid of ``phi_n``."""

    eps: float
    tau: float
    eta: ScalarField
    lam: float
    phi_n: ScalarField
    phi_nm1: Optional[ScalarField] = None
    order: int = 2

    def __post_init__(self):
        if not (self.eps > 0 and self.tau > 0):
            raise ValueError("eps and tau must be positive")
        if self.order == 2 and self.phi_nm1 is None:
            raise StructuralError("BDF2 step needs two history fields")
        for fld in (self.eta, self.phi_nm1):
            if fld is not None and fld.grid != self.phi_n.grid:
                raise StructuralError("operator fields must share one grid")

    @property
    def grid(self):
        return self.phi_n.grid

    @property
    def scale(self) -> float:
        return bdf_coefficients(self.order)[2]

    def history_rhs(self) -> np.ndarray:
        """Padded right-hand side without the ``s*lam`` term."""
        a1, a2, s = bdf_coefficients(self.order)
        ct = self.eps / self.tau
        f = -ct * a1 * self.phi_n.data + s * self.eta.data
        if a2:
            f = f - ct * a2 * self.phi_nm1.data
        return f

    def rhs(self) -> np.ndarray:
        return self.history_rhs() + self.scale * self.lam


@dataclass
class AdjointOperatorSpec:
    """One implicit backward adjoint step around the frozen state ``phi``."""

    eps: float
    tau: float
    phi: ScalarField
    p_next: ScalarField
    p_next2: Optional[ScalarField] = None
    order: int = 2

    def __post_init__(self):
        if not (self.eps > 0 and self.tau > 0):
            raise ValueError("eps and tau must be positive")
        if self.order == 2 and self.p_next2 is None:
            raise StructuralError("BDF2 step needs two history fields")
        for fld in (self.p_next, self.p_next2):
            if fld is not None and fld.grid != self.phi.grid:
                raise StructuralError("operator fields must share one grid")

    @property
    def grid(self):
        return self.phi.grid

    @property
    def scale(self) -> float:
        return bdf_coefficients(self.order)[2]

    def rhs(self) -> np.ndarray:
        a1, a2, _ = bdf_coefficients(self.order)
        f = -a1 * self.p_next.data
        if a2:
            f = f - a2 * self.p_next2.data
        return f / self.tau


@dataclass
class CycleConfig:
    pre_sweeps: int = 2
    post_sweeps: int = 2
    coarsest_level: int = 0
    coarse_sweeps: int = 50
    tol: float = 1e-11
    max_cycles: int = 50

    def __post_init__(self):
        if self.pre_sweeps < 1 or self.post_sweeps < 1:
            raise ValueError("pre- and post-smoothing sweep counts must be >= 1")
        if not self.tol > 0:
            raise ValueError("residual tolerance must be positive")
        if self.max_cycles < 1:
            raise ValueError("max_cycles must be >= 1")


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        loc = tuple(int(i) - 1 for i in np.argwhere(~np.isfinite(arr))[0])
        raise NumericalError(f"non-finite value after {what}", loc)


class _Level:
    __slots__ = ("grid", "dim", "inv_h2", "mask", "partial", "active", "u", "f", "r",
                 "tmp", "native", "covered", "uncovered", "halo", "phi")

    def __init__(self, grid, mask=None):
        self.grid = grid
        self.dim = grid.dim
        self.inv_h2 = 1.0 / grid.h ** 2
        shape = grid.padded_shape
        if mask is None:
            self.mask = kernels.full_mask(shape)
            self.partial = False
        else:
            mask = np.asarray(mask, bool)
            self.mask = np.zeros(shape, np.uint8)
            self.mask[(slice(1, -1),) * self.dim] = mask
            self.partial = not mask.all()
        self.active = int(self.mask.sum())
        self.u = np.zeros(shape)
        self.f = np.zeros(shape)
        self.r = np.zeros(shape)
        self.tmp = np.zeros(shape)
        self.native = None
        self.covered = None
        self.uncovered = None
        self.halo = None
        self.phi = None
        if self.partial:
            self.halo = _halo_mask(self.mask)


def _halo_mask(mask):
    """Inactive interior cells face-adjacent to an active cell."""
    m = mask.astype(bool)
    d = m.ndim
    dil = m.copy()
    inner = (slice(1, -1),) * d
    for ax in range(d):
        for shift in (1, -1):
            dil[inner] |= np.roll(m, shift, axis=ax)[inner]
    halo = dil & ~m
    out = np.zeros(m.shape, np.uint8)
    out[inner] = halo[inner]
    return out


class Multigrid:
    """V-cycle engine over a list of grids, coarsest first.

    Parameters
    ----------
    grids : list of UniformGrid
        Levels used by the cycle, coarsest first.
    kind : {"forward", "adjoint"}
    cfg : CycleConfig
    eps, tau : float
    order : int
        BDF order of the step (sets the right-hand-side scale).
    masks : dict, optional
        ``{level_index: bool array}`` of active cells for partially refined
        levels. Levels without an entry are fully active. A partially
        refined level takes patch-boundary ghosts by interpolation from the
        level below.
    """

    def __init__(self, grids, kind, cfg, eps, tau, order=2, masks=None):
        if len(grids) < 2:
            raise StructuralError("multigrid cycle needs at least two grid levels")
        if kind not in ("forward", "adjoint"):
            raise ValueError(kind)
        self.kind = kind
        self.cfg = cfg
        self.eps = eps
        self.tau = tau
        masks = masks or {}
        self.levels = [_Level(g, masks.get(i)) for i, g in enumerate(grids)]
        self.dim = grids[0].dim
        self.cell_updates = 0
        self.cycles = 0
        self._link_coverage()
        self._k = {name: kernels.kernel(name, self.dim) for name in (
            "fwd_smooth", "fwd_apply", "fwd_residual", "adj_smooth", "adj_residual",
            "restrict", "prolong")}
        self.set_order(order)

    def _link_coverage(self):
        inner = (slice(1, -1),) * self.dim
        for lo, hi in zip(self.levels, self.levels[1:]):
            if not hi.partial:
                continue
            hm = hi.mask[inner].astype(bool)
            cov = hm.reshape([s for n in lo.grid.shape for s in (n, 2)]).any(axis=tuple(range(1, 2 * self.dim, 2)))
            lo.covered = np.zeros(lo.grid.padded_shape, bool)
            lo.covered[inner] = cov
            lo.uncovered = lo.mask.astype(bool) & ~lo.covered
            lo.native = np.zeros(lo.grid.padded_shape)

    @property
    def top(self) -> _Level:
        return self.levels[-1]

    def set_order(self, order):
        self.order = order
        self.scale = {1: 1.0, 2: 2.0 / 3.0}[order]

    # -- per-level primitives ------------------------------------------------

    def _smooth(self, lv, sweeps):
        if self.kind == "forward":
            self._k["fwd_smooth"](lv.u, lv.f, lv.mask, self.eps / self.tau, self.scale,
                                  self.eps, lv.inv_h2, sweeps)
        else:
            self._k["adj_smooth"](lv.u, lv.f, lv.phi, lv.mask, 1.0 / self.tau, self.scale,
                                  1.0 / self.eps ** 2, lv.inv_h2, sweeps)
        self.cell_updates += lv.active * sweeps

    def _residual(self, lv) -> float:
        if self.kind == "forward":
            return self._k["fwd_residual"](lv.u, lv.f, lv.r, lv.mask, self.eps / self.tau,
                                           self.scale, self.eps, lv.inv_h2)
        return self._k["adj_residual"](lv.u, lv.f, lv.phi, lv.r, lv.mask, 1.0 / self.tau,
                                       self.scale, 1.0 / self.eps ** 2, lv.inv_h2)

    def _fill_halo(self, i):
        lv = self.levels[i]
        if lv.partial:
            self._k["prolong"](self.levels[i - 1].u, lv.u, lv.halo, False)

    # -- cycles --------------------------------------------------------------

    def _fas(self, i):
        lv = self.levels[i]
        cfg = self.cfg
        if i == 0:
            self._smooth(lv, cfg.coarse_sweeps)
            return
        lo = self.levels[i - 1]
        self._fill_halo(i)
        self._smooth(lv, cfg.pre_sweeps)
        self._residual(lv)
        if lo.covered is None:
            self._k["restrict"](lv.u, lo.u)
        else:
            self._k["restrict"](lv.u, lo.tmp)
            np.copyto(lo.u, lo.tmp, where=lo.covered)
            kernels.fill_ghosts(lo.u)
        self._k["fwd_apply"](lo.u, lo.f, lo.mask, self.eps / self.tau, self.scale, self.eps,
                             lo.inv_h2)
        self._k["restrict"](lv.r, lo.tmp)
        lo.f += lo.tmp
        if lo.covered is not None:
            np.copyto(lo.f, lo.native, where=lo.uncovered)
        ubar = lo.u.copy()
        self._fas(i - 1)
        np.subtract(lo.u, ubar, out=lo.tmp)
        self._k["prolong"](lo.tmp, lv.u, lv.mask, True)
        kernels.fill_ghosts(lv.u)
        self._fill_halo(i)
        self._smooth(lv, cfg.post_sweeps)

    def _cs(self, i):
        lv = self.levels[i]
        cfg = self.cfg
        if i == 0:
            self._smooth(lv, cfg.coarse_sweeps)
            return
        lo = self.levels[i - 1]
        self._smooth(lv, cfg.pre_sweeps)
        self._residual(lv)
        self._k["restrict"](lv.r, lo.f)
        lo.u.fill(0.0)
        self._cs(i - 1)
        self._k["prolong"](lo.u, lv.u, lv.mask, True)
        kernels.fill_ghosts(lv.u)
        self._smooth(lv, cfg.post_sweeps)

    def cycle(self):
        """Run one V-cycle from the top level."""
        if self.kind == "forward":
            self._fas(len(self.levels) - 1)
        else:
            self._cs(len(self.levels) - 1)
        self.cycles += 1

    # -- composite bookkeeping ----------------------------------------------

    def sync(self, down_to=0):
        """Overwrite covered coarse cells with the restriction of finer data."""
        for i in range(len(self.levels) - 1, max(down_to, 0), -1):
            lv, lo = self.levels[i], self.levels[i - 1]
            if lo.covered is None:
                self._k["restrict"](lv.u, lo.u)
            else:
                self._k["restrict"](lv.u, lo.tmp)
                np.copyto(lo.u, lo.tmp, where=lo.covered)
                kernels.fill_ghosts(lo.u)
        for i in range(max(down_to, 0) + 1, len(self.levels)):
            self._fill_halo(i)

    def composite_levels(self):
        """Indices of levels that own leaf cells (equations of their own)."""
        out = []
        for i, lv in enumerate(self.levels):
            if i == len(self.levels) - 1 or lv.covered is not None:
                out.append(i)
        return out

    def residual_norm(self) -> float:
        """Infinity norm of the residual over all leaf cells."""
        leafs = self.composite_levels()
        if len(leafs) > 1:
            self.sync(leafs[0])
        rmax = 0.0
        for i in leafs:
            lv = self.levels[i]
            r = self._residual(lv)
            if lv.covered is not None:
                r = float(np.abs(lv.r[lv.uncovered]).max(initial=0.0))
            rmax = max(rmax, r)
        return rmax

    def solve(self, tol=None, max_cycles=None):
        """Cycle until the composite residual norm drops below ``tol``.

        Returns ``(cycles, history)`` where ``history[0]`` is the initial
        residual norm.
        """
        tol = self.cfg.tol if tol is None else tol
        max_cycles = self.cfg.max_cycles if max_cycles is None else max_cycles
        history = [self.residual_norm()]
        if not np.isfinite(history[0]):
            raise NumericalError("non-finite initial residual")
        k = 0
        while history[-1] >= tol:
            if k >= max_cycles:
                raise ConvergenceError(
                    f"{self.kind} multigrid did not reach {tol:g} in {max_cycles} cycles "
                    f"(last residual {history[-1]:.3e})", history)
            self.cycle()
            k += 1
            history.append(self.residual_norm())
            if not np.isfinite(history[-1]):
                _check_finite(self.top.u, f"{self.kind} V-cycle {k}")
                raise NumericalError(f"non-finite residual after {self.kind} V-cycle {k}")
        return k, history

    def set_phi(self, phi_top: np.ndarray):
        """Install the frozen adjoint coefficient and restrict it downwards."""
        self.top.phi = phi_top
        for i in range(len(self.levels) - 1, 0, -1):
            lo = self.levels[i - 1]
            if lo.phi is None or lo.phi is self.levels[i].phi:
                lo.phi = np.zeros(lo.grid.padded_shape)
            self._k["restrict"](self.levels[i].phi, lo.phi)


# ---------------------------------------------------------------------------
# public single-operation API
# ---------------------------------------------------------------------------


def _full(grid):
    return kernels.full_mask(grid.padded_shape)


def _fwd_args(op, grid):
    return op.eps / op.tau, op.scale, op.eps, 1.0 / grid.h ** 2


def _adj_args(op, grid):
    return 1.0 / op.tau, op.scale, 1.0 / op.eps ** 2, 1.0 / grid.h ** 2


def forward_residual(u: ScalarField, op: ForwardOperatorSpec) -> ScalarField:
    """Cellwise ``RHS(u) - LHS(u)`` of the forward step system."""
    if u.grid != op.grid:
        raise StructuralError("state and operator live on different grids")
    out = ScalarField(u.grid, name="residual")
    kernels.kernel("fwd_residual", u.grid.dim)(u.data, op.rhs(), out.data, _full(u.grid),
                                               *_fwd_args(op, u.grid))
    return out


def adjoint_residual(p: ScalarField, op: AdjointOperatorSpec) -> ScalarField:
    """Cellwise ``RHS(p) - LHS(p)`` of the backward adjoint step system."""
    if p.grid != op.grid:
        raise StructuralError("adjoint and operator live on different grids")
    out = ScalarField(p.grid, name="residual")
    kernels.kernel("adj_residual", p.grid.dim)(p.data, op.rhs(), op.phi.data, out.data,
                                               _full(p.grid), *_adj_args(op, p.grid))
    return out


def smooth_forward(u: ScalarField, op: ForwardOperatorSpec, sweeps: int) -> ScalarField:
    """Red-black nonlinear Gauss-Seidel sweeps, one Newton step per cell."""
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    out = u.copy().fill_ghosts()
    kernels.kernel("fwd_smooth", u.grid.dim)(out.data, op.rhs(), _full(u.grid),
                                             *_fwd_args(op, u.grid), sweeps)
    _check_finite(out.data, "forward smoothing")
    return out


def smooth_adjoint(p: ScalarField, op: AdjointOperatorSpec, sweeps: int) -> ScalarField:
    """Red-black Gauss-Seidel sweeps on the linear adjoint system."""
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    out = p.copy().fill_ghosts()
    phi = op.phi.copy().fill_ghosts()
    kernels.kernel("adj_smooth", p.grid.dim)(out.data, op.rhs(), phi.data, _full(p.grid),
                                             *_adj_args(op, p.grid), sweeps)
    _check_finite(out.data, "adjoint smoothing")
    return out


def _engine(op, hierarchy, cfg, kind):
    top = hierarchy.index_of(op.grid)
    grids = hierarchy.levels[cfg.coarsest_level:top + 1]
    if len(grids) < 2:
        raise StructuralError(
            f"hierarchy between levels {cfg.coarsest_level} and {top} has fewer than two grids")
    mg = Multigrid(grids, kind, cfg, op.eps, op.tau, op.order)
    mg.top.f[...] = op.rhs()
    if kind == "adjoint":
        mg.set_phi(op.phi.copy().fill_ghosts().data)
    return mg


def vcycle_fas(u: ScalarField, op: ForwardOperatorSpec, hierarchy: GridHierarchy,
               cfg: CycleConfig) -> ScalarField:
    """One nonlinear FAS V-cycle for the forward step; returns the new iterate."""
    mg = _engine(op, hierarchy, cfg, "forward")
    mg.top.u[...] = u.copy().fill_ghosts().data
    mg.cycle()
    _check_finite(mg.top.u, "FAS V-cycle")
    return ScalarField(op.grid, mg.top.u.copy(), name=u.name)


def vcycle_linear(p: ScalarField, op: AdjointOperatorSpec, hierarchy: GridHierarchy,
                  cfg: CycleConfig) -> ScalarField:
    """One correction-scheme V-cycle for the adjoint step."""
    mg = _engine(op, hierarchy, cfg, "adjoint")
    mg.top.u[...] = p.copy().fill_ghosts().data
    mg.cycle()
    _check_finite(mg.top.u, "linear V-cycle")
    return ScalarField(op.grid, mg.top.u.copy(), name=p.name)


def solve_to_tolerance(initial: ScalarField, op, hierarchy: GridHierarchy, cfg: CycleConfig):
    """Repeat V-cycles until the residual infinity norm is below ``cfg.tol``.

    Returns
    -------
    tuple
        ``(solution, cycle_count, residual_history)``.

    Raises
    ------
    ConvergenceError
        If ``cfg.max_cycles`` cycles do not reach the tolerance; the
        exception carries the residual history.
    """
    kind = "forward" if isinstance(op, ForwardOperatorSpec) else "adjoint"
    mg = _engine(op, hierarchy, cfg, kind)
    mg.top.u[...] = initial.copy().fill_ghosts().data
    cycles, history = mg.solve()
    return ScalarField(op.grid, mg.top.u.copy(), name=initial.name), cycles, history


def write_residual_history(history, path):
    """CSV with columns ``cycle,residual_inf``."""
    with open(path, "w") as fh:
        fh.write("cycle,residual_inf\n")
        for k, r in enumerate(history):
            fh.write(f"{k},{r:.17g}\n")
    return path
