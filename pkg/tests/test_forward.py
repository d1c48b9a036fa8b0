import math

import numpy as np
import pytest

from pfoc.errors import ConfigurationError, ConstraintError, ConvergenceError, DegenerateSecantError, StateError
from pfoc.experiments import compute_error_metric, to_grid
from pfoc.forward import (ForwardConfig, LambdaIterState, TimeLoopState, lambda_initial_guesses,
                          lambda_perturbation, lambda_update, solve_forward, write_lambda_history)
from pfoc.mesh import GridHierarchy, ScalarField, integrate
from pfoc.mgcore import CycleConfig
from pfoc.shapes import build_profile, mass_target

from oracles import dense_newton, forward_rhs, neumann_laplacian


def loop_state(n, eps, T, n_steps, lam=None, eta_iter=0, warm=()):
    s = TimeLoopState(n, T / n_steps, n_steps, eps, {}, None, 0.0, 0.0, 0, eta_iter=eta_iter, warm=warm)
    if lam is not None:
        s.lam[:len(lam)] = lam
    return s


def zero_eta(h, n_steps):
    return np.zeros((n_steps + 1,) + h.storage.shape)


class TestInitialGuesses:
    @pytest.mark.parametrize("eps, T, n_steps, expected", [
        (0.1, 0.125, 160, (-255.0, 255.0)),
        (0.02, 1e-3, 20, (-799.0, 799.0)),
    ])
    def test_cold_start(self, eps, T, n_steps, expected):
        cfg = ForwardConfig(eps, T, n_steps)
        assert cfg.tau * n_steps == pytest.approx(T, rel=1e-15)
        got = lambda_initial_guesses(loop_state(0, eps, T, n_steps), 0, cfg)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_benchmark_step_count(self):
        assert ForwardConfig(0.1, 0.125, 160).tau == pytest.approx(7.8125e-4, rel=1e-15)

    @pytest.mark.parametrize("eta_iter", [0, 1])
    def test_warm_within_iteration_from_step_three(self, eta_iter):
        cfg = ForwardConfig(0.1, 0.125, 10)
        lam = [0.0, 1.5, 1.6, 1.7, 1.8]
        assert lambda_initial_guesses(loop_state(3, 0.1, 0.125, 10, lam, eta_iter), eta_iter, cfg) == (1.6, 1.7)
        s = loop_state(2, 0.1, 0.125, 10, lam, eta_iter)
        assert lambda_initial_guesses(s, eta_iter, cfg) == pytest.approx((-15.0, 15.0))

    def test_previous_two_iterations(self):
        cfg = ForwardConfig(0.1, 0.125, 10)
        l1 = np.arange(11, dtype=float)
        l2 = 10.0 + np.arange(11, dtype=float)
        s = loop_state(4, 0.1, 0.125, 10, [0.0, 9.0, 9.0, 9.0, 9.0], eta_iter=3, warm=(l1, l2))
        assert lambda_initial_guesses(s, 3, cfg) == (5.0, 15.0)
        s = loop_state(0, 0.1, 0.125, 10, eta_iter=2, warm=(l1, l2))
        assert lambda_initial_guesses(s, 2, cfg) == (1.0, 11.0)


class TestSecant:
    def _state(self, lam_prev, lam, m_prev, m):
        s = LambdaIterState()
        s.record(lam_prev, m_prev)
        s.record(lam, m)
        return s

    def test_example(self):
        assert lambda_update(self._state(1.0, 2.0, 6.0, 8.0), 10.0, 8.0) == 3.0

    def test_on_target_unchanged(self):
        assert lambda_update(self._state(1.0, 2.0, 6.0, 8.0), 8.0, 8.0) == 2.0

    def test_degenerate(self):
        with pytest.raises(DegenerateSecantError):
            lambda_update(self._state(1.0, 2.0, 8.0, 8.0), 10.0, 8.0)

    def test_needs_two_iterates(self):
        s = LambdaIterState()
        s.record(1.0, 2.0)
        with pytest.raises(StateError):
            lambda_update(s, 3.0, 2.0)

    def test_linear_mass_solved_in_one_step(self):
        mass = lambda lam: 3.0 * lam - 2.0
        s = self._state(-5.0, 4.0, mass(-5.0), mass(4.0))
        assert mass(lambda_update(s, 7.0, mass(4.0))) == pytest.approx(7.0, rel=1e-15)

    @pytest.mark.parametrize("lam, expected", [(0.0, 1e-8), (0.5, 1e-8), (-300.0, 3e-6)])
    def test_perturbation(self, lam, expected):
        assert lambda_perturbation(lam) == pytest.approx(expected)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(eps=0.0), dict(T=-1.0), dict(n_steps=0),
                                        dict(tol_lambda=0.0), dict(max_lambda_iter=1)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            ForwardConfig(**kwargs)


@pytest.fixture(scope="module")
def h64():
    return GridHierarchy.build(2, 16, 64, 64, 0.0, 4.0)


@pytest.fixture(scope="module")
def benchmark_run(h64, circle_spec, ellipse_spec):
    phi0, obs = build_profile(circle_spec, h64.solve), build_profile(ellipse_spec, h64.solve)
    cfg = ForwardConfig(0.1, 0.125, 10)
    store, state = solve_forward(phi0, zero_eta(h64, 10), h64, cfg, obs)
    return phi0, obs, cfg, store, state


class TestSolveForward:
    def test_pure_phase_stays(self):
        h = GridHierarchy.build(2, 4, 16, 16, 0.0, 4.0)
        one = ScalarField.constant(h.solve, 1.0)
        store, state = solve_forward(one, zero_eta(h, 10), h, ForwardConfig(0.1, 0.125, 10), one)
        # lam settles to 0 within tol_lambda; a uniform lam shifts phi by about lam*s/(eps/tau + 2s/eps).
        assert np.abs(store.lam[1:]).max() < 0.01
        assert np.abs(store.array("phi") - 1.0).max() < 0.01 * (2 / 3) / (0.1 / 0.0125 + (4 / 3) / 0.1)

    def test_mass_constraint_on_benchmark(self, h64, benchmark_run):
        phi0, obs, cfg, store, state = benchmark_run
        vol = h64.solve.domain_volume
        for n in range(cfg.n_steps + 1):
            err = abs(integrate(store.get("phi", n)) - mass_target(phi0, obs, n * cfg.tau, cfg.T)) / vol
            assert err < 1e-3
        assert max(state.mass_errors) < 1e-3
        assert len(state.lambda_counts) == cfg.n_steps

    def test_final_state_kept_at_solve_level(self, h64, benchmark_run):
        store = benchmark_run[3]
        assert store.phi_T_solve.grid == h64.solve
        assert np.array_equal(store.phi_T_solve.interior, store.get("phi", 10).interior)

    def test_deterministic(self, h64, benchmark_run):
        phi0, obs, cfg, store, _ = benchmark_run
        again, _ = solve_forward(phi0, zero_eta(h64, 10), h64, cfg, obs)
        assert np.array_equal(again.array("phi"), store.array("phi"))
        assert np.array_equal(again.lam, store.lam)

    def test_benchmark_profile_bounded(self, benchmark_run):
        cfg, store = benchmark_run[2], benchmark_run[3]
        assert np.abs(store.array("phi")).max() <= 1.0 + cfg.overshoot

    def test_bdf1_then_bdf2_match_dense_newton(self, bench16):
        h, phi0, obs = bench16
        eps, T, nt = 0.1, 0.0125, 2
        cycle = CycleConfig(2, 2, 0, tol=1e-12, max_cycles=60)
        cfg = ForwardConfig(eps, T, nt, cycle=cycle, lambda_schedule=np.array([0.0, 0.4, -0.2]))
        store, _ = solve_forward(phi0, zero_eta(h, nt), h, cfg, obs)
        L = neumann_laplacian(16, 2, h.solve.h)
        u0 = phi0.interior.ravel()
        u1 = dense_newton(forward_rhs(u0, None, 0.0, 0.4, eps, cfg.tau, 1), L, eps, cfg.tau, 1, u0)
        u2 = dense_newton(forward_rhs(u1, u0, 0.0, -0.2, eps, cfg.tau, 2), L, eps, cfg.tau, 2, u1)
        assert np.abs(store.get("phi", 1).interior.ravel() - u1).max() < 1e-9
        assert np.abs(store.get("phi", 2).interior.ravel() - u2).max() < 1e-9

    def test_drift_first_order_in_tau(self, h64, circle_spec):
        phi0 = build_profile(circle_spec, h64.solve)
        drift = []
        for tau in (7.8125e-4, 3.90625e-4):
            store, _ = solve_forward(phi0, zero_eta(h64, 1), h64, ForwardConfig(0.1, tau, 1), phi0)
            drift.append(np.abs(store.get("phi", 1).interior - phi0.interior).max())
        assert 0.4 < drift[1] / drift[0] < 0.6

    def test_unconstrained_stays_bounded(self, h64, circle_spec):
        phi0 = build_profile(circle_spec, h64.solve)
        cfg = ForwardConfig(0.1, 0.125, 10, constrain=False)
        store, state = solve_forward(phi0, zero_eta(h64, 10), h64, cfg, phi0)
        assert np.all(store.lam[1:] == 0.0)
        assert np.abs(store.array("phi")).max() <= 1.0 + cfg.overshoot
        assert state.overshoot_steps == []
        # the unconstrained circle shrinks
        assert integrate(store.get("phi", 10)) < integrate(phi0)

    def test_shrinking_circle_self_convergence(self, circle_spec):
        T = 0.05
        runs = {}
        for n, steps in ((32, 4), (64, 8), (128, 16), (256, 32)):
            h = GridHierarchy.build(2, 16, n, n, 0.0, 4.0)
            phi0 = build_profile(circle_spec, h.solve)
            store, _ = solve_forward(phi0, zero_eta(h, steps), h, ForwardConfig(0.1, T, steps, constrain=False),
                                     phi0)
            runs[n] = store.get("phi", steps)
        ref = runs.pop(256)
        errs = [compute_error_metric(to_grid(runs[n], ref.grid), ref) for n in (32, 64, 128)]
        assert errs[0] > errs[1] > errs[2]

    def test_lambda_iteration_limit(self, h64, circle_spec, ellipse_spec):
        phi0, obs = build_profile(circle_spec, h64.solve), build_profile(ellipse_spec, h64.solve)
        cfg = ForwardConfig(0.1, 0.125, 10, tol_lambda=1e-14, max_lambda_iter=2)
        with pytest.raises(ConstraintError):
            solve_forward(phi0, zero_eta(h64, 10), h64, cfg, obs)

    def test_warm_start_cuts_lambda_iterations(self, h64, benchmark_run):
        phi0, obs, cfg, store, state = benchmark_run
        warm = (store.lam.copy(), store.lam.copy())
        _, again = solve_forward(phi0, zero_eta(h64, 10), h64, cfg, obs, eta_iter=2, warm=warm)
        assert sum(again.lambda_counts) < sum(state.lambda_counts)
        assert max(again.lambda_counts) <= 3

    def test_lambda_history_csv(self, tmp_path, benchmark_run):
        state = benchmark_run[4]
        lines = write_lambda_history(state, tmp_path / "lam.csv").read_text().splitlines()
        assert lines[0] == "step,lambda_iters,lambda,mass_error"
        assert len(lines) == 11
        step, count, lam, err = lines[1].split(",")
        assert step == "1" and int(count) == state.lambda_counts[0] and math.isfinite(float(lam))

    def test_snapshots(self, tmp_path, bench16):
        h, phi0, obs = bench16
        cfg = ForwardConfig(0.1, 0.0125, 4, snapshot_every=2, snapshot_dir=str(tmp_path))
        solve_forward(phi0, zero_eta(h, 4), h, cfg, obs)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["phi_00002.txt", "phi_00004.txt"]

    def test_large_step_warns(self, bench16, caplog):
        h, phi0, obs = bench16
        # Far beyond the bound the pointwise Newton smoother diverges, which is what the warning announces.
        with caplog.at_level("WARNING", logger="pfoc.forward"), pytest.raises(ConvergenceError):
            solve_forward(phi0, zero_eta(h, 10), h, ForwardConfig(0.1, 0.5, 10), obs)
        assert any("convexity bound" in r.message for r in caplog.records)
