"""Steepest-descent optimal control with an adaptive step size.

Each control iteration runs the forward problem, evaluates the objective,
and then decides on the step. If the objective fell, the step grows by
``p_u``, the adjoint is solved and the control is updated. If it did not
fall, the step shrinks by ``p_l`` (never below ``alpha_min``) and the
control is recomputed from the last backup before the forward problem is
solved again.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .adjoint import AdjointConfig, solve_adjoint
from .amr import AMRConfig
from .errors import ConfigurationError, StateError, StructuralError
from .forward import ForwardConfig, solve_forward
from .mesh import GridHierarchy, ScalarField, integrate, restrict_to_level
from .mgcore import CycleConfig
from .store import SpaceTimeStore, accounted_bytes

log = logging.getLogger(__name__)

__all__ = [
    "SpaceTimeStore", "accounted_bytes", "ControlState", "StoppingCriteria", "OptimizeConfig",
    "objective", "gradient_field", "update_control", "adaptive_alpha_step", "optimize",
]


def objective(phi_T: ScalarField, phi_obs: ScalarField, eta_store, theta: float, tau: float) -> float:
    """Fidelity plus regularization.

    ``J = 1/2 int (phi_T - phi_obs)^2 + theta/2 * tau * sum_n int eta_n^2``
    with the time sum over all stored control slots (slot 0 is zero).
    """
    if phi_T.grid != phi_obs.grid:
        raise StructuralError("final state and target live on different grids")
    if not theta > 0:
        raise ConfigurationError("regularization weight theta must be positive")
    diff = ScalarField(phi_T.grid, phi_T.data - phi_obs.data)
    fid = 0.5 * integrate(ScalarField(phi_T.grid, diff.data ** 2))
    if isinstance(eta_store, SpaceTimeStore):
        eta = eta_store.array("eta")
        vol = eta_store.grid.cell_volume
    else:
        eta, vol = eta_store
    reg = 0.5 * theta * tau * vol * float(np.vdot(eta, eta))
    return fid + reg


def gradient_field(eta_n: ScalarField, p_n: ScalarField, theta: float, eps: float) -> ScalarField:
    """Pointwise ``theta * eta_n + p_n / eps``."""
    if eta_n.grid != p_n.grid:
        raise StructuralError("control and adjoint live on different grids")
    return ScalarField(eta_n.grid, theta * eta_n.data + p_n.data / eps, name="gradient")


@dataclass
class StoppingCriteria:
    """Termination tests applied after every accepted iteration.

    ``rel_tol`` compares consecutive accepted objectives: relative to the
    previous value when ``rel_mode == "relative"``, as a plain difference
    when ``rel_mode == "absolute"``.
    """

    abs_tol: Optional[float] = None
    rel_tol: Optional[float] = 1e-4
    max_iter: Optional[int] = 50
    rel_mode: str = "relative"

    def __post_init__(self):
        if self.abs_tol is None and self.rel_tol is None and self.max_iter is None:
            raise ConfigurationError("at least one stopping criterion must be enabled")
        if self.rel_mode not in ("relative", "absolute"):
            raise ConfigurationError(f"rel_mode must be 'relative' or 'absolute', got {self.rel_mode!r}")

    def check(self, J_history) -> Optional[str]:
        if not J_history:
            return None
        J = J_history[-1]
        if self.abs_tol is not None and J < self.abs_tol:
            return "absolute"
        if self.rel_tol is not None and len(J_history) >= 2:
            d = abs(J_history[-2] - J)
            if self.rel_mode == "relative":
                d /= abs(J_history[-2]) if J_history[-2] else 1.0
            if d < self.rel_tol:
                return "relative"
        if self.max_iter is not None and len(J_history) >= self.max_iter:
            return "max_iter"
        return None


@dataclass
class ControlState:
    """Control iterate with backup and step-size bookkeeping.

    ``eta`` has shape ``(n_steps+1, *storage_shape)``. ``grad_backup`` is the
    gradient evaluated at ``backup``, so that a restart can rebuild
    ``backup - alpha * grad_backup`` without a new adjoint solve.
    """

    eta: np.ndarray
    alpha: float = 0.1
    p_l: float = 0.5
    p_u: float = 1.1
    alpha_min: float = 1e-4
    adaptive: bool = True
    backup: Optional[np.ndarray] = None
    grad_backup: Optional[np.ndarray] = None
    J_history: list = field(default_factory=list)
    alpha_history: list = field(default_factory=list)
    iteration: int = 0
    restart: bool = False
    restarts: int = 0
    events: list = field(default_factory=list)

    def __post_init__(self):
        if not self.alpha >= self.alpha_min > 0:
            raise ConfigurationError("need alpha >= alpha_min > 0")
        if not (0 < self.p_l < 1 < self.p_u):
            raise ConfigurationError("need 0 < p_l < 1 < p_u")


def update_control(state: ControlState, p_store: SpaceTimeStore, theta: float, eps: float) -> ControlState:
    """Back up the control, then take ``eta -= alpha * (theta*eta + p/eps)``.

    Slot 0 of the control is not used by the forward solve and is left
    untouched.
    """
    p_store.require("p")
    p = p_store.array("p")
    grad = theta * state.eta + p / eps
    grad[0] = 0.0
    state.backup = state.eta.copy()
    state.grad_backup = grad
    state.eta = state.eta - state.alpha * grad
    return state


def adaptive_alpha_step(state: ControlState, J_new: float):
    """Accept or restart after a forward solve that produced ``J_new``.

    Returns
    -------
    tuple
        ``(decision, state)`` with ``decision`` in ``{"accept", "restart"}``.
        On restart, ``state.eta`` is already rebuilt from the backup with the
        reduced step size.
    """
    if state.iteration == 0 or not state.adaptive:
        grow = state.iteration > 0 and state.adaptive and J_new < state.J_history[-1]
        decision = "accept"
    elif J_new < state.J_history[-1]:
        grow = True
        decision = "accept"
    else:
        if state.backup is None or state.grad_backup is None:
            raise StateError("restart requested but no control backup exists")
        old = state.alpha
        state.alpha = max(state.alpha * state.p_l, state.alpha_min)
        state.eta = state.backup - state.alpha * state.grad_backup
        state.restart = True
        state.restarts += 1
        state.events.append((state.iteration, J_new, old, "restart"))
        return "restart", state
    old = state.alpha
    if grow:
        state.alpha = state.alpha * state.p_u
    state.restart = False
    state.J_history.append(J_new)
    state.alpha_history.append(old)
    state.events.append((state.iteration, J_new, old, "accept"))
    state.iteration += 1
    return decision, state


@dataclass
class OptimizeConfig:
    """Everything needed for one optimal-control run."""

    eps: float = 0.1
    theta: float = 0.01
    T: float = 0.125
    n_steps: int = 10
    alpha0: float = 0.1
    p_l: float = 0.5
    p_u: float = 1.1
    alpha_min: Optional[float] = None
    adaptive: bool = True
    tol_lambda: float = 0.01
    max_lambda_iter: int = 20
    constrain: bool = True
    cycle: CycleConfig = field(default_factory=CycleConfig)
    amr: AMRConfig = field(default_factory=AMRConfig)
    stopping: StoppingCriteria = field(default_factory=StoppingCriteria)
    fidelity_level: str = "solve"
    max_restarts_at_min: int = 3
    mean_free_adjoint: bool = False

    def __post_init__(self):
        if self.alpha_min is None:
            self.alpha_min = 1e-3 * self.alpha0
        if self.fidelity_level not in ("solve", "storage"):
            raise ConfigurationError("fidelity_level must be 'solve' or 'storage'")

    @property
    def tau(self) -> float:
        return self.T / self.n_steps

    def forward(self) -> ForwardConfig:
        return ForwardConfig(self.eps, self.T, self.n_steps, self.tol_lambda, self.max_lambda_iter,
                             self.constrain, cycle=self.cycle, amr=self.amr)

    def adjoint(self) -> AdjointConfig:
        return AdjointConfig(self.eps, self.T, self.n_steps, self.cycle, mean_free=self.mean_free_adjoint)


@dataclass
class OptimizeResult:
    eta: np.ndarray
    J_history: list
    diagnostics: dict
    store: SpaceTimeStore
    control: ControlState


def evaluate(phi0, phi_obs, eta, hierarchy, cfg: OptimizeConfig, eta_iter=0, warm=(), store=None):
    """Forward solve and objective for a given control array."""
    store, fstate = solve_forward(phi0, eta, hierarchy, cfg.forward(), phi_obs, eta_iter, warm, store)
    if cfg.fidelity_level == "solve":
        phi_T, obs = store.phi_T_solve, phi_obs
    else:
        phi_T = store.get("phi", cfg.n_steps)
        obs = restrict_to_level(phi_obs, hierarchy, hierarchy.storage_level)
    J = objective(phi_T, obs, (eta, hierarchy.storage.cell_volume), cfg.theta, cfg.tau)
    return J, store, fstate


def optimize(phi0: ScalarField, phi_obs: ScalarField, cfg: OptimizeConfig, hierarchy: GridHierarchy,
             callback=None) -> OptimizeResult:
    """Run the control iteration until a stopping criterion fires.

    ``callback(event)`` is invoked after every forward solve with a dict
    describing the iteration.
    """
    grid_s = hierarchy.storage
    ctrl = ControlState(np.zeros((cfg.n_steps + 1,) + grid_s.shape), cfg.alpha0, cfg.p_l, cfg.p_u,
                        cfg.alpha_min, cfg.adaptive)
    obs_s = restrict_to_level(phi_obs, hierarchy, hierarchy.storage_level)
    warm = []
    diag = {"forward_cycles": 0, "adjoint_cycles": 0, "forward_solves": 0, "lambda_iters": [],
            "forward_calls": 0, "restarts": 0, "stop_reason": None, "mass_error_max": 0.0,
            "max_active_fine_cells": 0, "overshoot_steps": 0}
    store = SpaceTimeStore(grid_s, cfg.n_steps, solve_grid=hierarchy.solve)
    diag["store_bytes"] = store.store_bytes()
    diag["total_bytes"] = store.total_bytes()
    t0 = time.process_time()
    w0 = time.perf_counter()
    at_min = 0
    while True:
        J, store, fstate = evaluate(phi0, phi_obs, ctrl.eta, hierarchy, cfg, ctrl.iteration, warm, store)
        diag["forward_calls"] += 1
        diag["forward_cycles"] += fstate.cycles
        diag["forward_solves"] += fstate.solves
        diag["max_active_fine_cells"] = max(diag["max_active_fine_cells"], fstate.max_active_fine)
        diag["overshoot_steps"] += len(fstate.overshoot_steps)
        alpha_used = ctrl.alpha
        decision, ctrl = adaptive_alpha_step(ctrl, J)
        event = {"iteration": ctrl.iteration - (decision == "accept"), "J": J, "alpha": alpha_used,
                 "decision": decision, "lambda_iters": list(fstate.lambda_counts),
                 "mass_error_max": max(fstate.mass_errors) if fstate.mass_errors else 0.0}
        log.info("iteration %d: J=%.6e alpha=%.4g %s", event["iteration"], J, alpha_used, decision)
        if decision == "accept":
            at_min = 0
            diag["lambda_iters"].append(list(fstate.lambda_counts))
            diag["mass_error_max"] = max(diag["mass_error_max"], event["mass_error_max"])
            warm = (warm + [fstate.lam.copy()])[-2:]
            if callback:
                callback(event)
            reason = cfg.stopping.check(ctrl.J_history)
            if reason:
                diag["stop_reason"] = reason
                break
            ast = solve_adjoint(store, hierarchy, cfg.adjoint(), obs_s)
            diag["adjoint_cycles"] += ast.cycles
            update_control(ctrl, store, cfg.theta, cfg.eps)
        else:
            diag["restarts"] += 1
            if callback:
                callback(event)
            if alpha_used <= ctrl.alpha_min:
                at_min += 1
                if at_min >= cfg.max_restarts_at_min:
                    diag["stop_reason"] = "stalled_at_alpha_min"
                    ctrl.eta = ctrl.backup.copy()
                    break
    diag["cpu_time"] = time.process_time() - t0
    diag["wall_time"] = time.perf_counter() - w0
    diag["accepted_iterations"] = len(ctrl.J_history)
    diag["J_final"] = ctrl.J_history[-1]
    store.load_field("eta", ctrl.eta)
    return OptimizeResult(ctrl.eta, list(ctrl.J_history), diag, store, ctrl)


def write_J_history(ctrl: ControlState, path):
    """CSV with columns ``iteration,J,alpha,decision`` covering every forward solve."""
    with open(path, "w") as fh:
        fh.write("iteration,J,alpha,decision\n")
        for it, J, alpha, decision in ctrl.events:
            fh.write(f"{it},{J:.17g},{alpha:.17g},{decision}\n")
    return path


def write_diagnostics(diag: dict, path):
    Path(path).write_text(json.dumps(diag, indent=2, default=float) + "\n")
    return path
