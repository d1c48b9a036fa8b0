"""Experiment drivers: optimization runs, refinement studies and solver measurements.

Every driver takes an :class:`~pfoc.config.ExperimentConfig`, writes its
artifacts (CSV tables, JSON diagnostics, field dumps) under an output
directory and returns a summary dictionary holding the same numbers.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .adjoint import AdjointConfig, solve_adjoint
from .amr import AMRConfig
from .config import ExperimentConfig, to_text
from .control import evaluate, optimize, write_diagnostics, write_J_history
from .errors import ConfigurationError, StructuralError
from .forward import ForwardConfig, solve_forward
from .mesh import GridHierarchy, ScalarField, UniformGrid, dump_field, prolong, restrict_to_level
from .mgcore import AdjointOperatorSpec, CycleConfig, ForwardOperatorSpec, solve_to_tolerance, write_residual_history
from .shapes import build_profile

log = logging.getLogger(__name__)


def compute_error_metric(a: ScalarField, b: ScalarField) -> float:
    """Sum of squared differences over interior cells divided by ``N**d``.

    This is the mean squared difference: no cell-volume factor and no
    square root are applied.
    """
    if a.grid != b.grid:
        raise StructuralError(f"error metric needs fields on one grid, got {a.grid.n} and {b.grid.n} cells per axis")
    diff = a.interior - b.interior
    return float(np.sum(diff * diff) / a.grid.num_cells)


def to_grid(field: ScalarField, grid: UniformGrid) -> ScalarField:
    """Prolong ``field`` level by level until it lives on ``grid``."""
    if not field.grid.same_domain(grid) or field.grid.dim != grid.dim:
        raise StructuralError("cannot transfer between different domains")
    if grid.n < field.grid.n or grid.n % field.grid.n:
        raise StructuralError(f"cannot prolong {field.grid.n} cells per axis onto {grid.n}")
    out = field
    while out.grid.n < grid.n:
        out = prolong(out, out.grid.refine())
    return out


def build_hierarchy(cfg: ExperimentConfig, storage_n: Optional[int] = None,
                    solve_n: Optional[int] = None) -> GridHierarchy:
    g = cfg.grid
    storage_n = storage_n or g.storage_n
    solve_n = solve_n or max(g.solve_n, storage_n)
    coarsest = min(g.coarsest_n, storage_n // 2)
    return GridHierarchy.build(g.dim, coarsest, storage_n, solve_n, g.origin, g.extent)


def initial_and_target(cfg: ExperimentConfig, hierarchy: GridHierarchy):
    s0, s1 = cfg.shapes()
    return build_profile(s0, hierarchy.solve, "phi0"), build_profile(s1, hierarchy.solve, "phi_obs")


def probe_steps(times, T: float, n_steps: int):
    """Time-step indices of the probe times; each must fall on a step."""
    tau = T / n_steps
    steps = []
    for t in times:
        k = t / tau
        if abs(k - round(k)) > 1e-8 * max(k, 1.0):
            raise ConfigurationError(f"probe time {t:g} is not a multiple of tau={tau:g}")
        steps.append(int(round(k)))
    return steps


@dataclasses.dataclass
class RunRecord:
    """Outcome of one optimization with fields consistent with the final control."""

    hierarchy: GridHierarchy
    J_history: list
    diagnostics: dict
    phi: np.ndarray
    p: np.ndarray
    eta: np.ndarray
    phi_T_solve: ScalarField
    control: object = None

    def field(self, name: str, step: int) -> ScalarField:
        return ScalarField(self.hierarchy.storage, getattr(self, name)[step], name=f"{name}[{step}]")


def run_optimization(cfg: ExperimentConfig, storage_n: Optional[int] = None, solve_n: Optional[int] = None,
                     n_steps: Optional[int] = None, amr: Optional[AMRConfig] = None, **overrides) -> RunRecord:
    """Optimize, then recompute ``phi`` and ``p`` from the final control.

    The final forward and adjoint solves make the returned fields belong
    to one control iterate even when the loop ended on a rejected attempt.
    """
    hierarchy = build_hierarchy(cfg, storage_n, solve_n)
    phi0, phi_obs = initial_and_target(cfg, hierarchy)
    ocfg = cfg.optimize_config(n_steps=n_steps, amr=amr, **overrides)
    res = optimize(phi0, phi_obs, ocfg, hierarchy)
    J, store, _ = evaluate(phi0, phi_obs, res.eta, hierarchy, ocfg)
    solve_adjoint(store, hierarchy, ocfg.adjoint(), restrict_to_level(phi_obs, hierarchy, hierarchy.storage_level))
    res.diagnostics["J_recomputed"] = J
    return RunRecord(hierarchy, res.J_history, res.diagnostics, store.copy_field("phi"), store.copy_field("p"),
                     res.eta.copy(), store.phi_T_solve, res.control)


def _write_table(path: Path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else f"{v:.10e}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")
    return path


def _error_rows(records: dict, reference: RunRecord, ref_steps, steps_of, names=("phi", "p", "eta")):
    """``{name: {label: [d(t1), d(t2), ...]}}`` against the reference run."""
    grid = reference.hierarchy.storage
    tables = {name: {} for name in names}
    for label, rec in records.items():
        for name in names:
            row = []
            for k_ref, k in zip(ref_steps, steps_of(label)):
                ref_field = reference.field(name, k_ref)
                row.append(compute_error_metric(to_grid(rec.field(name, k), grid), ref_field))
            tables[name][label] = row
    return tables


def _emit_tables(out: Path, prefix: str, tables: dict, times):
    header = ["run"] + [f"t={t:g}" for t in times]
    for name, rows in tables.items():
        _write_table(out / f"{prefix}_{name}.csv", header, [[label] + vals for label, vals in rows.items()])


# ---------------------------------------------------------------- optimize

def _run_optimize(cfg: ExperimentConfig, out: Path) -> dict:
    hierarchy = build_hierarchy(cfg)
    phi0, phi_obs = initial_and_target(cfg, hierarchy)
    ocfg = cfg.optimize_config()
    res = optimize(phi0, phi_obs, ocfg, hierarchy)
    write_J_history(res.control, out / "J_history.csv")
    write_diagnostics(res.diagnostics, out / "diagnostics.json")
    store = res.store
    nt = ocfg.n_steps
    binary = cfg.output.binary
    tau = ocfg.tau
    dump_field(store.phi_T_solve, out / "phi_final_solve.txt", ocfg.T, binary)
    dump_field(store.get("phi", nt), out / "phi_final.txt", ocfg.T, binary)
    dump_field(ScalarField(hierarchy.storage, store.array("eta")[nt]), out / "eta_final.txt", ocfg.T, binary)
    if store.has("p", 0):
        dump_field(store.get("p", 0), out / "p_initial.txt", 0.0, binary)
    every = cfg.output.snapshot_every
    if every:
        snaps = out / "snapshots"
        snaps.mkdir(exist_ok=True)
        for n in range(0, nt + 1, every):
            for name in ("phi", "p", "eta"):
                if store.has(name, n) or name == "eta":
                    fld = ScalarField(hierarchy.storage, store.array(name)[n])
                    dump_field(fld, snaps / f"{name}_{n:05d}.txt", n * tau, binary)
    return {"J_history": list(res.J_history), "diagnostics": res.diagnostics}


# ---------------------------------------------------------------- refinement studies

def _run_convergence_table(cfg: ExperimentConfig, out: Path, cache: Optional[dict] = None) -> dict:
    st = cfg.study
    times = st.probe_times
    bn, bsteps = st.benchmark
    reference = _cached(cache, ("one", bn, bn, bsteps), lambda: run_optimization(cfg, bn, bn, bsteps,
                                                                                 amr=AMRConfig()))
    records, step_map = {}, {}
    for n, steps in st.ladder:
        label = f"{n}^{cfg.grid.dim}/{steps}"
        records[label] = _cached(cache, ("one", n, n, steps),
                                 lambda n=n, steps=steps: run_optimization(cfg, n, n, steps, amr=AMRConfig()))
        step_map[label] = probe_steps(times, cfg.problem.T, steps)
    ref_steps = probe_steps(times, cfg.problem.T, bsteps)
    tables = _error_rows(records, reference, ref_steps, step_map.__getitem__)
    _emit_tables(out, "convergence", tables, times)
    summary = {"tables": tables, "J_final": {label: r.J_history[-1] for label, r in records.items()},
               "iterations": {label: len(r.J_history) for label, r in records.items()},
               "reference_J_final": reference.J_history[-1]}
    (out / "convergence_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _run_two_grid_compare(cfg: ExperimentConfig, out: Path, cache: Optional[dict] = None) -> dict:
    st = cfg.study
    times = st.probe_times
    steps = st.compare_steps
    bn = st.benchmark[0]
    fine, coarse = st.two_grid
    reference = _cached(cache, ("one", bn, bn, steps), lambda: run_optimization(cfg, bn, bn, steps, amr=AMRConfig()))
    one = _cached(cache, ("one", coarse, coarse, steps),
                  lambda: run_optimization(cfg, coarse, coarse, steps, amr=AMRConfig()))
    two = _cached(cache, ("two", coarse, fine, steps, cfg.amr.enabled),
                  lambda: run_optimization(cfg, coarse, fine, steps))
    k = probe_steps(times, cfg.problem.T, steps)
    labels = {f"one_grid_{coarse}": one, f"two_grid_{fine}-{coarse}": two}
    tables = _error_rows(labels, reference, k, lambda label: k)
    _emit_tables(out, "two_grid", tables, times)
    summary = {"tables": tables,
               "J_final": {label: r.J_history[-1] for label, r in labels.items()},
               "max_active_fine_cells": two.diagnostics.get("max_active_fine_cells", 0)}
    (out / "two_grid_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _cached(cache, key, fn):
    if cache is None:
        return fn()
    if key not in cache:
        cache[key] = fn()
    return cache[key]


# ---------------------------------------------------------------- solver measurements

def contraction_rate(history) -> float:
    """Geometric-mean residual reduction per cycle, ``(r_K / r_0)**(1/K)``."""
    if len(history) < 2:
        return 0.0
    return float((history[-1] / history[0]) ** (1.0 / (len(history) - 1)))


def representative_operators(cfg: ExperimentConfig, n: int, step: Optional[int] = None):
    """Forward and adjoint step operators taken from an uncontrolled run on ``n`` cells.

    The forward operator is the BDF2 step producing ``phi[step]`` with the
    converged multiplier of that step; its initial guess is ``phi[step-1]``.
    The adjoint operator is the backward step at ``step`` around the
    stored state, fed by adjoint values from a backward sweep started at
    the true terminal condition.
    """
    hierarchy = build_hierarchy(cfg, n, n)
    phi0, phi_obs = initial_and_target(cfg, hierarchy)
    p = cfg.problem
    nt = p.n_steps
    step = nt // 2 if step is None else step
    if not 2 <= step <= nt - 2:
        raise ConfigurationError("representative step must leave two steps on either side")
    cycle = CycleConfig(p.pre_sweeps, p.post_sweeps, 0, tol=p.residual_tol, max_cycles=p.max_cycles)
    fcfg = ForwardConfig(p.eps, p.T, nt, p.tol_lambda, p.max_lambda_iter, p.constrain, cycle=cycle)
    eta = np.zeros((nt + 1,) + hierarchy.storage.shape)
    store, _ = solve_forward(phi0, eta, hierarchy, fcfg, phi_obs)
    solve_adjoint(store, hierarchy, AdjointConfig(p.eps, p.T, nt, cycle), phi_obs)
    grid = hierarchy.solve
    g = lambda name, k: store.get(name, k).copy().fill_ghosts()
    fwd = ForwardOperatorSpec(p.eps, p.tau, ScalarField(grid), float(store.lam[step]),
                              g("phi", step - 1), g("phi", step - 2), order=2)
    adj = AdjointOperatorSpec(p.eps, p.tau, g("phi", step), g("p", step + 1), g("p", step + 2), order=2)
    guesses = {"forward": g("phi", step - 1), "adjoint": g("p", step + 1)}
    return hierarchy, cycle, fwd, adj, guesses


def _run_mg_rate(cfg: ExperimentConfig, out: Path) -> dict:
    rates = {}
    rows = []
    for n in cfg.study.sizes:
        hierarchy, cycle, fwd, adj, guess = representative_operators(cfg, n)
        for kind, op in (("forward", fwd), ("adjoint", adj)):
            _, k, hist = solve_to_tolerance(guess[kind], op, hierarchy, cycle)
            write_residual_history(hist, out / f"residual_{kind}_{n}.csv")
            rates[f"{kind}_{n}"] = contraction_rate(hist)
            rows.append([kind, n, k, rates[f"{kind}_{n}"], hist[0], hist[-1]])
    _write_table(out / "mg_rate.csv", ["operator", "n", "cycles", "rate", "r0", "r_final"], rows)
    (out / "mg_rate.json").write_text(json.dumps(rates, indent=2) + "\n")
    return {"rates": rates}


def _run_complexity_timing(cfg: ExperimentConfig, out: Path) -> dict:
    st = cfg.study
    rows, points = [], []
    # One untimed iteration first so kernel compilation is not billed to the smallest size.
    warm_cfg = cfg.optimize_config(amr=AMRConfig())
    warm_cfg.stopping = dataclasses.replace(warm_cfg.stopping, abs_tol=None, rel_tol=None, max_iter=1)
    h0 = build_hierarchy(cfg, min(st.sizes), min(st.sizes))
    optimize(*initial_and_target(cfg, h0), warm_cfg, h0)
    for n in st.sizes:
        hierarchy = build_hierarchy(cfg, n, n)
        phi0, phi_obs = initial_and_target(cfg, hierarchy)
        ocfg = cfg.optimize_config(amr=AMRConfig())
        ocfg.adaptive = False
        ocfg.stopping = dataclasses.replace(ocfg.stopping, abs_tol=None, rel_tol=None,
                                            max_iter=st.timing_iterations)
        res = optimize(phi0, phi_obs, ocfg, hierarchy)
        per_iter = res.diagnostics["cpu_time"] / res.diagnostics["forward_calls"]
        dof = hierarchy.solve.num_cells
        rows.append([n, dof, res.diagnostics["forward_calls"], per_iter, res.diagnostics["wall_time"]])
        points.append((dof, per_iter))
    _write_table(out / "complexity_timing.csv", ["n", "dof", "iterations", "cpu_per_iteration", "wall_time"], rows)
    x = np.log([p[0] for p in points])
    y = np.log([p[1] for p in points])
    slope = float(np.polyfit(x, y, 1)[0]) if len(points) > 1 else float("nan")
    summary = {"points": points, "slope": slope}
    (out / "complexity_timing.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _run_alpha_study(cfg: ExperimentConfig, out: Path) -> dict:
    st = cfg.study
    hierarchy = build_hierarchy(cfg)
    phi0, phi_obs = initial_and_target(cfg, hierarchy)
    runs = {}
    base = cfg.optimize_config()

    def stopping(cfg_):
        return dataclasses.replace(cfg_.stopping, abs_tol=None, rel_tol=None, max_iter=st.fixed_iterations)

    fixed = dataclasses.replace(base, adaptive=False)
    fixed.stopping = stopping(fixed)
    runs["fixed"] = optimize(phi0, phi_obs, fixed, hierarchy)
    for p_u, p_l in st.pairs:
        c = dataclasses.replace(base, p_u=p_u, p_l=p_l, adaptive=True)
        c.stopping = stopping(c)
        runs[f"adaptive_{p_u:g}_{p_l:g}"] = optimize(phi0, phi_obs, c, hierarchy)
    rows = []
    for label, res in runs.items():
        for it, J, alpha, decision in res.control.events:
            rows.append([label, it, J, alpha, decision])
    _write_table(out / "alpha_study.csv", ["run", "iteration", "J", "alpha", "decision"], rows)
    target = runs["fixed"].J_history[-1]
    summary = {"fixed_J_final": target, "runs": {}}
    for label, res in runs.items():
        reach = next((k for k, J in enumerate(res.J_history) if J <= target), None)
        summary["runs"][label] = {"J_history": list(res.J_history),
                                  "alpha_history": list(res.control.alpha_history),
                                  "events": [list(e) for e in res.control.events],
                                  "restarts": res.diagnostics["restarts"],
                                  "iterations_to_fixed_J": reach}
    (out / "alpha_study.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# ---------------------------------------------------------------- entry point

def run_experiment(cfg: ExperimentConfig, out_dir=None, cache: Optional[dict] = None) -> dict:
    """Run the experiment named by ``cfg.kind``; artifacts go to ``out_dir``.

    ``cache`` may hold optimization runs shared between the refinement
    studies (keyed by run type, resolutions and step count).
    """
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(to_text(cfg))
    if cfg.run.deterministic:
        kernels.set_threads(1)
    else:
        kernels.set_threads(cfg.run.threads)
    t0 = time.perf_counter()
    runners = {
        "optimize": lambda: _run_optimize(cfg, out),
        "convergence_table": lambda: _run_convergence_table(cfg, out, cache),
        "mg_rate": lambda: _run_mg_rate(cfg, out),
        "complexity_timing": lambda: _run_complexity_timing(cfg, out),
        "alpha_study": lambda: _run_alpha_study(cfg, out),
        "two_grid_compare": lambda: _run_two_grid_compare(cfg, out, cache),
    }
    if cfg.kind not in runners:
        raise ConfigurationError(f"unknown experiment kind {cfg.kind!r}")
    summary = runners[cfg.kind]()
    summary["wall_time"] = time.perf_counter() - t0
    log.info("%s finished in %.1f s; artifacts in %s", cfg.kind, summary["wall_time"], out)
    return summary

