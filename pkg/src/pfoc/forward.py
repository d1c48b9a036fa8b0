"""Forward time integration of the volume-constrained Allen-Cahn equation.

Each step solves the implicit BDF system (BDF1 for the first step) with FAS
multigrid, inside a secant iteration on the spatially uniform multiplier
``lam`` that enforces the prescribed mass. States are restricted to the
storage grid after each step; the final state is also kept at solve-level
resolution.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .amr import AMRConfig, CompositeField, RefinementMap, build_map, level_rhs_coefficients, regrid, render_levels
from .errors import ConfigurationError, ConstraintError, DegenerateSecantError, StateError, StructuralError
from .mesh import GridHierarchy, ScalarField, dump_field, integrate, prolong_to_level, restrict_to_level
from .mgcore import CycleConfig, Multigrid
from .store import SpaceTimeStore

log = logging.getLogger(__name__)


@dataclass
class ForwardConfig:
    """Parameters of the forward solve.

    Attributes
    ----------
    eps : float
        Interface width.
    T : float
        End time.
    n_steps : int
        Number of uniform time steps, ``tau = T / n_steps``.
    tol_lambda : float
        Stop the multiplier iteration once consecutive values differ by
        less than this.
    max_lambda_iter : int
        Maximum number of nonlinear solves per step in the multiplier
        iteration.
    constrain : bool
        Enforce the mass constraint. Without it ``lam = 0``.
    lambda_schedule : ndarray, optional
        Prescribed multiplier per step (index ``n`` is used by the step
        producing ``phi[n]``). Replaces the secant iteration; used to
        linearize around a fixed multiplier history.
    overshoot : float
        Allowed excursion of ``|phi|`` beyond 1 before a step is flagged.
    """

    eps: float = 0.1
    T: float = 0.125
    n_steps: int = 10
    tol_lambda: float = 0.01
    max_lambda_iter: int = 20
    constrain: bool = True
    overshoot: float = 0.1
    cycle: CycleConfig = field(default_factory=CycleConfig)
    amr: AMRConfig = field(default_factory=AMRConfig)
    snapshot_every: int = 0
    snapshot_dir: Optional[str] = None
    lambda_schedule: Optional[np.ndarray] = None

    def __post_init__(self):
        if not (self.eps > 0 and self.T > 0):
            raise ConfigurationError("eps and T must be positive")
        if self.n_steps < 1:
            raise ConfigurationError("n_steps must be >= 1")
        if not self.tol_lambda > 0 or self.max_lambda_iter < 2:
            raise ConfigurationError("tol_lambda must be positive and max_lambda_iter >= 2")

    @property
    def tau(self) -> float:
        return self.T / self.n_steps


@dataclass
class LambdaIterState:
    """Last two multiplier iterates and the masses they produced."""

    lam: float = math.nan
    lam_prev: float = math.nan
    mass: float = math.nan
    mass_prev: float = math.nan
    count: int = 0
    tol: float = 0.01
    max_iter: int = 20

    def record(self, lam: float, mass: float):
        self.lam_prev, self.mass_prev = self.lam, self.mass
        self.lam, self.mass = lam, mass
        self.count += 1


def lambda_perturbation(lam: float) -> float:
    return 1e-8 * max(1.0, abs(lam))


def lambda_update(state: LambdaIterState, M_target: float, mass_current: float) -> float:
    """Secant step towards ``mass(lam) = M_target``.

    Raises
    ------
    DegenerateSecantError
        If the two most recent masses coincide.
    """
    if state.count < 2:
        raise StateError("secant update needs two completed multiplier iterates")
    denom = mass_current - state.mass_prev
    if denom == 0.0:
        raise DegenerateSecantError(f"identical masses for lam={state.lam_prev!r} and lam={state.lam!r}")
    return state.lam + (state.lam - state.lam_prev) * (M_target - mass_current) / denom


@dataclass
class TimeLoopState:
    """Progress of one forward run.

    ``hist_n`` and ``hist_nm1`` map hierarchy levels to padded arrays of the
    two most recent states. Without refinement only the solve level is
    kept; with refinement every level from storage to solve is kept and
    holds valid values on its active cells.
    """

    n: int
    tau: float
    n_steps: int
    eps: float
    hist_n: dict
    hist_nm1: Optional[dict]
    mass0: float
    mass_obs: float
    top: int
    lam: np.ndarray = None
    eta_iter: int = 0
    warm: tuple = ()
    rmap: Optional[RefinementMap] = None
    engine: Optional[Multigrid] = None
    lambda_counts: list = field(default_factory=list)
    mass_errors: list = field(default_factory=list)
    cycles: int = 0
    solves: int = 0
    overshoot_steps: list = field(default_factory=list)
    max_active_fine: int = 0

    def __post_init__(self):
        if self.lam is None:
            self.lam = np.full(self.n_steps + 1, np.nan)

    @property
    def T(self) -> float:
        return self.tau * self.n_steps

    def mass_target(self, t: float) -> float:
        return self.mass0 + (t / self.T) * (self.mass_obs - self.mass0)

    def render(self, hist=None) -> dict:
        hist = self.hist_n if hist is None else hist
        if self.rmap is None:
            return hist
        return {lev: f.data for lev, f in render_levels(hist, self.rmap).items()}

    def phi_solve(self, hierarchy: GridHierarchy) -> ScalarField:
        """Current state rendered on the uniform solve grid."""
        arr = self.render()[self.top]
        return ScalarField(hierarchy[self.top], arr.copy(), name="phi")


def lambda_initial_guesses(state: TimeLoopState, eta_iter: int, cfg: ForwardConfig):
    """Starting pair of multiplier values for the step ``state.n -> state.n + 1``.

    From the third control iteration on, the values converged at this step
    in the previous two accepted iterations are reused. Otherwise, once the
    current step index is at least 3, the values converged at the two
    previous steps are used. In all other cases the cold-start pair
    ``(-2 eps/tau + 1, 2 eps/tau - 1)`` is returned.
    """
    n = state.n
    k = n + 1
    if eta_iter >= 2 and len(state.warm) >= 2:
        a, b = state.warm[-2][k], state.warm[-1][k]
        if np.isfinite(a) and np.isfinite(b):
            return float(a), float(b)
    if n >= 3 and np.isfinite(state.lam[n - 1]) and np.isfinite(state.lam[n]):
        return float(state.lam[n - 1]), float(state.lam[n])
    r = 2.0 * cfg.eps / cfg.tau
    return -r + 1.0, r - 1.0


def _make_engine(hierarchy, cfg, rmap):
    coarse = cfg.cycle.coarsest_level
    grids = hierarchy.levels[coarse:hierarchy.solve_level + 1]
    masks = rmap.engine_masks(coarse) if rmap is not None else None
    return Multigrid(grids, "forward", cfg.cycle, cfg.eps, cfg.tau, 2, masks)


def init_state(phi0: ScalarField, phi_obs: ScalarField, hierarchy: GridHierarchy, cfg: ForwardConfig,
               eta_iter: int = 0, warm=()) -> TimeLoopState:
    """Initial time-loop state from ``phi0`` on the solve level."""
    top = hierarchy.solve_level
    if phi0.grid != hierarchy[top] or phi_obs.grid != hierarchy[top]:
        raise StructuralError("initial and target states must live on the solve level")
    rmap = None
    if cfg.amr.enabled and hierarchy.storage_level < top:
        levels = {lev: restrict_to_level(phi0, hierarchy, lev)
                  for lev in range(hierarchy.storage_level, top + 1)}
        rmap = build_map(levels, hierarchy, cfg.amr)
        hist = CompositeField.from_uniform(phi0, rmap).arrays
    else:
        hist = {top: phi0.copy().fill_ghosts().data}
    state = TimeLoopState(0, cfg.tau, cfg.n_steps, cfg.eps, hist, None, integrate(phi0),
                          integrate(phi_obs), top, eta_iter=eta_iter, warm=tuple(warm), rmap=rmap)
    state.engine = _make_engine(hierarchy, cfg, rmap)
    if rmap is not None:
        state.max_active_fine = rmap.active_cells(top)
    return state


def advance_step(state: TimeLoopState, eta_fine: ScalarField, store: SpaceTimeStore,
                 hierarchy: GridHierarchy, cfg: ForwardConfig) -> TimeLoopState:
    """Advance one step, solving for the multiplier that meets the mass target.

    The nonlinear system is re-solved for each multiplier iterate, starting
    from the previous iterate's solution. The solution accepted is the one
    computed with the last multiplier whose secant successor lies within
    ``tol_lambda``.
    """
    n = state.n
    if n >= state.n_steps:
        raise StateError("time loop already reached the end time")
    if eta_fine.grid != hierarchy[state.top]:
        raise StructuralError("control must be given on the solve level")
    order = 1 if n == 0 else 2
    mg = state.engine
    mg.set_order(order)
    coarse = cfg.cycle.coarsest_level
    top = state.top
    c1, c2, s = level_rhs_coefficients(order, cfg.eps, cfg.tau)
    levels = sorted(state.hist_n)

    eta = {top: eta_fine.copy().fill_ghosts().data}
    for lev in reversed(levels[:-1]):
        eta[lev] = np.zeros(hierarchy[lev].padded_shape)
        kernels.kernel("restrict", hierarchy[lev].dim)(eta[lev + 1], eta[lev])
    base_rhs = {}
    for lev in levels:
        r = c1 * state.hist_n[lev] + s * eta[lev]
        if order == 2:
            r += c2 * state.hist_nm1[lev]
        base_rhs[lev] = r
        mg.levels[lev - coarse].u[...] = state.hist_n[lev]

    base = hierarchy.storage_level
    inner = (slice(1, -1),) * hierarchy[top].dim
    mass_level = base if state.rmap is not None else top
    vol = hierarchy[mass_level].cell_volume

    def solve(lam):
        for lev in levels:
            lv = mg.levels[lev - coarse]
            if lev == top:
                np.add(base_rhs[lev], s * lam, out=lv.f)
            elif lv.native is not None:
                np.add(base_rhs[lev], s * lam, out=lv.native)
                lv.f[...] = lv.native
        k, _ = mg.solve()
        state.cycles += k
        state.solves += 1
        if state.rmap is not None:
            mg.sync(base - coarse)
        return float(mg.levels[mass_level - coarse].u[inner].sum() * vol)

    t_next = (n + 1) * cfg.tau
    target = state.mass_target(t_next)
    if cfg.lambda_schedule is not None:
        lam = float(cfg.lambda_schedule[n + 1])
        mass = solve(lam)
        count = 1
    elif not cfg.constrain:
        lam = 0.0
        mass = solve(lam)
        count = 1
    else:
        l0, l1 = lambda_initial_guesses(state, state.eta_iter, cfg)
        if abs(l1 - l0) < lambda_perturbation(l0):
            l1 = l0 + lambda_perturbation(l0)
        it = LambdaIterState(tol=cfg.tol_lambda, max_iter=cfg.max_lambda_iter)
        it.record(l0, solve(l0))
        it.record(l1, solve(l1))
        while True:
            try:
                new = lambda_update(it, target, it.mass)
            except DegenerateSecantError:
                new = it.lam + lambda_perturbation(it.lam)
                log.debug("step %d: degenerate secant at lam=%g, perturbing", n + 1, it.lam)
            else:
                if abs(new - it.lam) < it.tol:
                    break
            if it.count >= it.max_iter:
                raise ConstraintError(
                    f"multiplier iteration at step {n + 1} did not settle in {it.max_iter} solves "
                    f"(lam={it.lam:.6g}, mass error {abs(it.mass - target):.3e})")
            it.record(new, solve(new))
        lam, mass, count = it.lam, it.mass, it.count

    new_hist = {lev: mg.levels[lev - coarse].u.copy() for lev in levels}
    state.hist_nm1, state.hist_n = state.hist_n, new_hist
    if state.rmap is None and base < top:
        mg.sync(base - coarse)
    store.set("phi", n + 1, mg.levels[base - coarse].u[inner])
    store.lam[n + 1] = lam
    state.lam[n + 1] = lam
    state.lambda_counts.append(count)
    state.mass_errors.append(abs(mass - target) / hierarchy[top].domain_volume)
    peak = float(np.abs(mg.levels[top - coarse].u[inner][mg.levels[top - coarse].mask[inner] > 0]).max())
    if peak > 1.0 + cfg.overshoot:
        state.overshoot_steps.append(n + 1)
        log.warning("step %d: |phi| reaches %.4f, beyond the overshoot bound %.3g", n + 1, peak, cfg.overshoot)
    state.n = n + 1

    if state.rmap is not None and state.n % cfg.amr.regrid_every == 0 and state.n < state.n_steps:
        new_map = regrid([state.hist_n, state.hist_nm1], state.rmap, hierarchy, cfg.amr)
        if new_map != state.rmap:
            state.rmap = new_map
            state.engine = _make_engine(hierarchy, cfg, new_map)
        state.max_active_fine = max(state.max_active_fine, new_map.active_cells(top))
    return state


def _eta_source(eta, hierarchy):
    """Callable ``n -> ScalarField`` of the control on the solve level."""
    top = hierarchy.solve_level
    grid_s = hierarchy.storage
    if isinstance(eta, SpaceTimeStore):
        arr = eta.array("eta")
    else:
        arr = np.asarray(eta)
    zero = arr.shape[1:] == grid_s.shape and not arr.any()

    def get(n):
        if zero:
            return ScalarField(hierarchy[top])
        return prolong_to_level(ScalarField(grid_s, arr[n]), hierarchy, top)
    return get


def solve_forward(phi0: ScalarField, eta, hierarchy: GridHierarchy, cfg: ForwardConfig,
                  phi_obs: ScalarField, eta_iter: int = 0, warm=(),
                  store: Optional[SpaceTimeStore] = None):
    """Run the forward problem over ``(0, T]``.

    Parameters
    ----------
    phi0, phi_obs : ScalarField
        Initial and target states on the solve level. The target only sets
        the prescribed mass.
    eta : SpaceTimeStore or ndarray
        Control on the storage grid, shape ``(n_steps+1, *shape)``.
    eta_iter : int
        Index of the current control iteration (drives multiplier warm starts).
    warm : sequence of ndarray
        Converged multiplier histories of previously accepted iterations.

    Returns
    -------
    store : SpaceTimeStore
        Restricted states at every step, the converged multipliers, and the
        final state at solve-level resolution.
    state : TimeLoopState
    """
    if store is None:
        store = SpaceTimeStore(hierarchy.storage, cfg.n_steps, solve_grid=hierarchy.solve)
    if store.n_steps != cfg.n_steps:
        raise StructuralError("store and configuration disagree on the number of steps")
    if cfg.tau > 1.5 * cfg.eps ** 2 and eta_iter == 0:
        # Beyond this the BDF2 step system is not monotone (eps/tau < s/eps)
        # and the pointwise Newton smoother may stall.
        log.warning("tau=%g exceeds the convexity bound 1.5*eps^2=%g of the implicit step",
                    cfg.tau, 1.5 * cfg.eps ** 2)
    state = init_state(phi0, phi_obs, hierarchy, cfg, eta_iter, warm)
    store.set("phi", 0, restrict_to_level(phi0, hierarchy, hierarchy.storage_level))
    store.lam[0] = 0.0
    eta_at = _eta_source(eta, hierarchy)
    snap_dir = Path(cfg.snapshot_dir) if cfg.snapshot_every and cfg.snapshot_dir else None
    for n in range(cfg.n_steps):
        advance_step(state, eta_at(n + 1), store, hierarchy, cfg)
        if snap_dir is not None and state.n % cfg.snapshot_every == 0:
            snap_dir.mkdir(parents=True, exist_ok=True)
            dump_field(state.phi_solve(hierarchy), snap_dir / f"phi_{state.n:05d}.txt", state.n * cfg.tau)
    store.phi_T_solve = state.phi_solve(hierarchy)
    return store, state


def overshoot_report(state: TimeLoopState) -> dict:
    return {"steps_flagged": list(state.overshoot_steps), "count": len(state.overshoot_steps)}


def write_lambda_history(state: TimeLoopState, path):
    """CSV with columns ``step,lambda_iters,lambda,mass_error``."""
    with open(path, "w") as fh:
        fh.write("step,lambda_iters,lambda,mass_error\n")
        for k, (cnt, err) in enumerate(zip(state.lambda_counts, state.mass_errors), start=1):
            fh.write(f"{k},{cnt},{state.lam[k]:.17g},{err:.6e}\n")
    return path
