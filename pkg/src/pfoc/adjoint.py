"""Backward-in-time linear adjoint solve on the storage grid.

The adjoint is marched from ``p(T) = phi(T) - phi_obs`` back to ``t = 0``
with BDF2, using a BDF1 step first. The stored state at the same time
index enters the reaction coefficient ``(3 phi**2 - 1)/eps**2``. Written as
a forward equation in the backward time ``s = T - t``, this is the stable
parabolic problem ``dp/ds = D(p) - (3 phi**2 - 1)/eps**2 * p``.

The BDF1 operator ``1/tau - D + (3 phi**2 - 1)/eps**2`` is indefinite near
the interface once ``tau > eps**2``, and the V-cycle then diverges. In that
case the start-up step is split into ``startup_substeps(tau, eps)`` BDF1
substeps with the state frozen at the first stored index below ``T``, which
keeps the operator as far from singular as the BDF2 steps are.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import StructuralError
from .mesh import GridHierarchy, ScalarField, dump_field
from .mgcore import CycleConfig, Multigrid, bdf_coefficients
from .store import SpaceTimeStore

log = logging.getLogger(__name__)


@dataclass
class AdjointConfig:
    """Parameters of the backward solve.

    ``mean_free`` adds a spatially uniform source at every step that keeps
    ``int p = 0``, starting from the mean-free part of the terminal
    condition. This is the adjoint of the mass-constrained state equation:
    it accounts for the multiplier's response to the control, which the
    plain adjoint ignores. It costs one extra linear solve per step.
    """

    eps: float = 0.1
    T: float = 0.125
    n_steps: int = 10
    cycle: CycleConfig = field(default_factory=CycleConfig)
    snapshot_every: int = 0
    snapshot_dir: Optional[str] = None
    mean_free: bool = False

    @property
    def tau(self) -> float:
        return self.T / self.n_steps


@dataclass
class AdjointLoopState:
    """Backward loop position: ``n`` is the next index to be computed."""

    n: int
    tau: float
    p_next: ScalarField
    p_next2: Optional[ScalarField] = None
    cycles: int = 0


def startup_substeps(tau: float, eps: float) -> int:
    """Number of BDF1 substeps used for the first backward step.

    One step while ``tau <= eps**2``; otherwise enough substeps that each
    satisfies ``tau_sub <= (2/3) eps**2``, the margin the BDF2 steps have
    at their own convexity bound.

    Examples
    --------
    >>> startup_substeps(0.005, 0.1), startup_substeps(0.0125, 0.1)
    (1, 2)
    """
    if tau <= eps * eps:
        return 1
    return math.ceil(1.5 * tau / (eps * eps) - 1e-12)


def terminal_condition(phi_T: ScalarField, phi_obs: ScalarField) -> ScalarField:
    """``p(T) = phi(T) - phi_obs`` on the storage grid."""
    if phi_T.grid != phi_obs.grid:
        raise StructuralError("final state and target live on different grids")
    return ScalarField(phi_T.grid, phi_T.data - phi_obs.data, name="p_T")


def solve_adjoint(store: SpaceTimeStore, hierarchy: GridHierarchy, cfg: AdjointConfig,
                  phi_obs_storage: ScalarField, p_terminal: Optional[ScalarField] = None):
    """March the adjoint from ``T`` to 0, writing ``p`` at every step into ``store``.

    Only levels at and below the storage level are used.

    Parameters
    ----------
    phi_obs_storage : ScalarField
        Target state on the storage grid.
    p_terminal : ScalarField, optional
        Overrides the terminal condition (used by linearity checks).

    Returns
    -------
    AdjointLoopState
        Final loop state with the total V-cycle count.
    """
    S = hierarchy.storage_level
    if store.grid != hierarchy[S]:
        raise StructuralError("store is not on the hierarchy's storage level")
    store.require("phi")
    nt = store.n_steps
    coarse = cfg.cycle.coarsest_level
    mg = Multigrid(hierarchy.levels[coarse:S + 1], "adjoint", cfg.cycle, cfg.eps, cfg.tau)
    if p_terminal is None:
        p_terminal = terminal_condition(store.get("phi", nt), phi_obs_storage)
    p_terminal = p_terminal.copy().fill_ghosts()
    inner = (slice(1, -1),) * p_terminal.grid.dim
    if cfg.mean_free:
        p_terminal.data[...] -= p_terminal.data[inner].mean()
    state = AdjointLoopState(nt - 1, cfg.tau, p_terminal)
    store.set("p", nt, state.p_next)
    snap_dir = Path(cfg.snapshot_dir) if cfg.snapshot_every and cfg.snapshot_dir else None
    m = startup_substeps(cfg.tau, cfg.eps)
    if m > 1:
        log.info("adjoint start-up step split into %d BDF1 substeps (tau=%.4g > eps^2=%.4g)",
                 m, cfg.tau, cfg.eps ** 2)
        sub = Multigrid(hierarchy.levels[coarse:S + 1], "adjoint", cfg.cycle, cfg.eps, cfg.tau / m, order=1)
    for n in range(nt - 1, -1, -1):
        phi_n = store.get("phi", n).data
        if n == nt - 1:
            p = state.p_next
            for _ in range(m):
                p = _backward_step(sub if m > 1 else mg, 1, phi_n, p, None, state, cfg, hierarchy[S], n)
        else:
            p = _backward_step(mg, 2, phi_n, state.p_next, state.p_next2, state, cfg, hierarchy[S], n)
        store.set("p", n, p)
        state.p_next2, state.p_next = state.p_next, p
        state.n = n - 1
        if snap_dir is not None and n % cfg.snapshot_every == 0:
            snap_dir.mkdir(parents=True, exist_ok=True)
            dump_field(p, snap_dir / f"p_{n:05d}.txt", n * cfg.tau)
    return state


def _backward_step(mg, order, phi, p1, p2, state, cfg, grid, n) -> ScalarField:
    """One BDF step of ``mg``'s time step size, optionally projected to zero mean."""
    a1, a2, _ = bdf_coefficients(order)
    top = mg.top
    mg.set_order(order)
    mg.set_phi(phi)
    rhs = -a1 * p1.data
    if order == 2:
        rhs = rhs - a2 * p2.data
    top.f[...] = rhs / mg.tau
    top.u[...] = p1.data
    k, _ = mg.solve()
    state.cycles += k
    p = ScalarField(grid, top.u.copy(), name=f"p[{n}]")
    if cfg.mean_free:
        inner = (slice(1, -1),) * grid.dim
        top.f[...] = 1.0
        top.u[...] = 0.0
        k, _ = mg.solve()
        state.cycles += k
        mu = -p.data[inner].sum() / top.u[inner].sum()
        p.data[...] += mu * top.u
    return p
