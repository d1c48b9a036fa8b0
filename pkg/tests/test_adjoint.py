import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfoc.adjoint import AdjointConfig, solve_adjoint, startup_substeps, terminal_condition
from pfoc.errors import StoreIntegrityError, StructuralError
from pfoc.forward import ForwardConfig, solve_forward
from pfoc.mesh import GridHierarchy, ScalarField, UniformGrid
from pfoc.mgcore import CycleConfig
from pfoc.shapes import build_profile
from pfoc.store import SpaceTimeStore

from oracles import adjoint_matrix, adjoint_rhs, neumann_laplacian

EPS = 0.1
CYCLE = CycleConfig(2, 2, 0, tol=1e-12, max_cycles=60)


def uniform_store(grid, nt, value):
    store = SpaceTimeStore(grid, nt)
    for n in range(nt + 1):
        store.set("phi", n, np.full(grid.shape, value))
    return store


@pytest.mark.parametrize("tau, m", [(0.005, 1), (0.01, 1), (0.0101, 2), (0.0125, 2), (0.02, 3), (0.05, 8)])
def test_startup_substeps(tau, m):
    assert startup_substeps(tau, EPS) == m
    if m > 1:
        assert tau / m <= (2.0 / 3.0) * EPS ** 2 * (1 + 1e-12)


def test_startup_substeps_keep_operator_definite(bench16):
    """At phi = 0 the substep operator stays positive definite where one BDF1 step is not."""
    h, _, _ = bench16
    L = neumann_laplacian(16, 2, h.storage.h)
    zero = np.zeros(256)
    tau = 0.0125
    assert np.linalg.eigvalsh(adjoint_matrix(zero, L, EPS, tau, 1)).min() < 0
    m = startup_substeps(tau, EPS)
    assert np.linalg.eigvalsh(adjoint_matrix(zero, L, EPS, tau / m, 1)).min() > 0


class TestTerminalCondition:
    def test_on_target(self, bench16):
        _, phi0, _ = bench16
        assert np.all(terminal_condition(phi0, phi0).interior == 0.0)

    def test_opposite_phases(self):
        g = UniformGrid(2, 8, 0.0, 4.0)
        p = terminal_condition(ScalarField.constant(g, 1.0), ScalarField.constant(g, -1.0))
        assert np.all(p.interior == 2.0)

    def test_elementwise(self, bench16):
        _, phi0, obs = bench16
        assert np.array_equal(terminal_condition(phi0, obs).interior, phi0.interior - obs.interior)

    def test_grid_mismatch(self, bench16):
        _, phi0, _ = bench16
        with pytest.raises(StructuralError):
            terminal_condition(phi0, ScalarField(UniformGrid(2, 8, 0.0, 4.0)))


class TestSolveAdjoint:
    def test_homogeneous(self, bench16):
        h, _, _ = bench16
        store = uniform_store(h.storage, 6, 0.5)
        zero = ScalarField(h.storage)
        solve_adjoint(store, h, AdjointConfig(EPS, 0.0125, 6, CYCLE), zero, p_terminal=zero)
        assert np.all(store.array("p") == 0.0)

    @pytest.mark.parametrize("nt", [1, 2, 7])
    def test_uniform_pure_phase_recurrence(self, bench16, nt):
        h, _, _ = bench16
        T, c = 0.0125 * nt, 0.8
        tau = T / nt
        store = uniform_store(h.storage, nt, 1.0)
        solve_adjoint(store, h, AdjointConfig(EPS, T, nt, CYCLE), ScalarField(h.storage),
                      p_terminal=ScalarField.constant(h.storage, c))
        # scalar recurrence with reaction coefficient (3*1^2 - 1)/eps^2 = 2/eps^2
        k = 2.0 / EPS ** 2
        ref = np.empty(nt + 1)
        ref[nt] = c
        m = startup_substeps(tau, EPS)
        ref[nt - 1] = c
        for _ in range(m):
            ref[nt - 1] = (ref[nt - 1] * m / tau) / (m / tau + k)
        for n in range(nt - 2, -1, -1):
            ref[n] = ((4.0 / 3.0) * ref[n + 1] - (1.0 / 3.0) * ref[n + 2]) / tau / (1.0 / tau + (2.0 / 3.0) * k)
        p = store.array("p")
        for n in range(nt + 1):
            assert np.ptp(p[n]) < 1e-12
            assert p[n].mean() == pytest.approx(ref[n], rel=1e-12, abs=1e-14)

    def test_matches_dense_backward_march(self, bench16):
        h, phi0, obs = bench16
        rng = np.random.default_rng(3)
        nt, T = 3, 0.0375
        tau = T / nt
        store = SpaceTimeStore(h.storage, nt)
        phis = [np.clip(phi0.interior + 0.2 * rng.standard_normal((16, 16)), -1, 1) for _ in range(nt + 1)]
        for n, a in enumerate(phis):
            store.set("phi", n, a)
        pT = rng.standard_normal((16, 16))
        solve_adjoint(store, h, AdjointConfig(EPS, T, nt, CYCLE), obs, p_terminal=ScalarField(h.storage, pT))
        L = neumann_laplacian(16, 2, h.storage.h)
        ref = {nt: pT.ravel()}
        m = startup_substeps(tau, EPS)
        start = ref[nt]
        for _ in range(m):
            start = np.linalg.solve(adjoint_matrix(phis[nt - 1].ravel(), L, EPS, tau / m, 1),
                                    adjoint_rhs(start, None, tau / m, 1))
        ref[nt - 1] = start
        for n in range(nt - 2, -1, -1):
            A = adjoint_matrix(phis[n].ravel(), L, EPS, tau, 2)
            rhs = adjoint_rhs(ref[n + 1], ref.get(n + 2), tau, 2)
            ref[n] = np.linalg.solve(A, rhs)
        for n in range(nt + 1):
            assert np.abs(store.array("p")[n].ravel() - ref[n]).max() < 1e-9

    def test_default_terminal_condition(self, bench16):
        h, phi0, obs = bench16
        store = SpaceTimeStore(h.storage, 2)
        for n in range(3):
            store.set("phi", n, phi0)
        solve_adjoint(store, h, AdjointConfig(EPS, 0.025, 2, CYCLE), obs)
        assert np.array_equal(store.array("p")[2], phi0.interior - obs.interior)

    def test_missing_state(self, bench16):
        h, phi0, obs = bench16
        store = SpaceTimeStore(h.storage, 4)
        for n in (0, 1, 2, 4):
            store.set("phi", n, phi0)
        with pytest.raises(StoreIntegrityError):
            solve_adjoint(store, h, AdjointConfig(EPS, 0.05, 4, CYCLE), obs)

    def test_store_on_wrong_level(self, bench16):
        h, phi0, obs = bench16
        coarse = SpaceTimeStore(h[1], 2)
        with pytest.raises(StructuralError):
            solve_adjoint(coarse, h, AdjointConfig(EPS, 0.025, 2, CYCLE), obs)


@pytest.fixture(scope="module")
def benchmark_states(circle_spec, ellipse_spec):
    """Uncontrolled forward run on 64^2 solve / 32^2 storage grids."""
    h = GridHierarchy.build(2, 8, 32, 64, 0.0, 4.0)
    phi0, obs = build_profile(circle_spec, h.solve), build_profile(ellipse_spec, h.solve)
    cfg = ForwardConfig(EPS, 0.125, 10)
    store, _ = solve_forward(phi0, np.zeros((11, 32, 32)), h, cfg, obs)
    obs_s = ScalarField(h.storage, build_profile(ellipse_spec, h.storage).interior)
    return h, store, obs_s


@settings(max_examples=8)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_linearity_in_terminal_condition(benchmark_states, a, b):
    h, store, obs = benchmark_states
    rng = np.random.default_rng(11)
    p1, p2 = (ScalarField(h.storage, rng.standard_normal((32, 32))) for _ in range(2))
    cfg = AdjointConfig(EPS, 0.125, 10, CYCLE)
    runs = []
    for term in (p1, p2, ScalarField(h.storage, a * p1.interior + b * p2.interior)):
        solve_adjoint(store, h, cfg, obs, p_terminal=term)
        runs.append(store.copy_field("p"))
    combo = a * runs[0] + b * runs[1]
    assert np.abs(runs[2] - combo).max() <= 1e-9 * (1 + abs(a) + abs(b))


def test_only_storage_levels_used(benchmark_states):
    h, store, obs = benchmark_states
    cfg = AdjointConfig(EPS, 0.125, 10, CYCLE)
    solve_adjoint(store, h, cfg, obs)
    full = store.copy_field("p")
    solve_adjoint(store, h.sub(h.storage_level), cfg, obs)
    assert np.array_equal(store.copy_field("p"), full)
    assert store.get("p", 0).grid == h.storage


def test_adjoint_concentrates_near_interface(benchmark_states):
    h, store, obs = benchmark_states
    solve_adjoint(store, h, AdjointConfig(EPS, 0.125, 10, CYCLE), obs)
    for n in (5, 10):
        p = np.abs(store.array("p")[n])
        phi = store.array("phi")[n]
        band = (np.abs(phi) < 0.99) | (np.abs(obs.interior) < 0.99)
        assert p[band].sum() > 0.9 * p.sum()


def test_mean_free_variant_keeps_zero_mean(benchmark_states):
    h, store, obs = benchmark_states
    solve_adjoint(store, h, AdjointConfig(EPS, 0.125, 10, CYCLE, mean_free=True), obs)
    p = store.array("p")
    for n in range(11):
        assert abs(p[n].mean()) < 1e-10 * max(1.0, np.abs(p[n]).max())


def test_snapshots(tmp_path, bench16):
    h, phi0, obs = bench16
    store = uniform_store(h.storage, 4, 1.0)
    solve_adjoint(store, h, AdjointConfig(EPS, 0.05, 4, CYCLE, snapshot_every=2, snapshot_dir=str(tmp_path)), obs)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["p_00000.txt", "p_00002.txt"]
