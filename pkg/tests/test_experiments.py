import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pfoc.config import apply_overrides, preset
from pfoc.errors import ConfigurationError, StructuralError
from pfoc.experiments import compute_error_metric, contraction_rate, probe_steps, run_experiment, to_grid
from pfoc.mesh import ScalarField, UniformGrid

G8 = UniformGrid(2, 8, 0.0, 4.0)


class TestErrorMetric:
    def test_identical(self, rng):
        a = ScalarField(G8, rng.standard_normal((8, 8)))
        assert compute_error_metric(a, a.copy()) == 0.0

    @pytest.mark.parametrize("c", [0.5, 1.0, -3.0])
    def test_constant_difference(self, c):
        assert compute_error_metric(ScalarField.constant(G8, c), ScalarField(G8)) == pytest.approx(c * c, rel=1e-15)

    def test_large_grid_unit_difference(self):
        g = UniformGrid(2, 1024, 0.0, 4.0)
        assert compute_error_metric(ScalarField.constant(g, 1.0), ScalarField(g)) == pytest.approx(1.0, rel=1e-12)

    def test_against_explicit_sum(self, rng):
        a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        ref = sum((a[i, j] - b[i, j]) ** 2 for i in range(8) for j in range(8)) / 64
        assert compute_error_metric(ScalarField(G8, a), ScalarField(G8, b)) == pytest.approx(ref, rel=1e-13)

    def test_ignores_ghosts(self):
        a, b = ScalarField(G8), ScalarField(G8)
        a.data[0, :] = 5.0
        assert compute_error_metric(a, b) == 0.0

    def test_grid_mismatch(self):
        with pytest.raises(StructuralError):
            compute_error_metric(ScalarField(G8), ScalarField(UniformGrid(2, 16, 0.0, 4.0)))

    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_symmetric_and_grid_independent_for_constants(self, x, y):
        for g in (G8, UniformGrid(3, 4, 0.0, 1.0)):
            a, b = ScalarField.constant(g, x), ScalarField.constant(g, y)
            assert compute_error_metric(a, b) == compute_error_metric(b, a)
            assert compute_error_metric(a, b) == pytest.approx((x - y) ** 2, rel=1e-12, abs=1e-300)


class TestTransfersAndSteps:
    def test_to_grid_preserves_constants_and_mean(self, rng):
        a = ScalarField(G8, rng.standard_normal((8, 8)))
        up = to_grid(a, UniformGrid(2, 32, 0.0, 4.0))
        assert up.grid.n == 32 and up.interior.mean() == pytest.approx(a.interior.mean(), abs=1e-13)
        assert np.allclose(to_grid(ScalarField.constant(G8, 2.0), UniformGrid(2, 64, 0.0, 4.0)).interior, 2.0)
        assert to_grid(a, G8) is a

    @pytest.mark.parametrize("target", [UniformGrid(2, 4, 0.0, 4.0),
                                        UniformGrid(2, 16, 0.0, 2.0), UniformGrid(3, 16, 0.0, 4.0)])
    def test_to_grid_rejects(self, target):
        with pytest.raises(StructuralError):
            to_grid(ScalarField(G8), target)

    def test_probe_steps(self):
        assert probe_steps((0.0125, 0.0625, 0.125), 0.125, 10) == [1, 5, 10]
        assert probe_steps((0.0125, 0.0625, 0.125), 0.125, 80) == [8, 40, 80]
        with pytest.raises(ConfigurationError):
            probe_steps((0.01,), 0.125, 10)

    def test_contraction_rate(self):
        assert contraction_rate([1.0, 0.1, 0.01]) == pytest.approx(0.1)
        assert contraction_rate([1.0]) == 0.0


SMALL = ["grid.coarsest_n=8", "grid.storage_n=32", "grid.solve_n=32"]


@pytest.mark.parametrize("kind, extra, files", [
    ("mg_rate", ["study.sizes=32"], ["mg_rate.csv", "mg_rate.json", "residual_forward_32.csv"]),
    ("complexity_timing", ["study.sizes=16, 32", "study.timing_iterations=2"], ["complexity_timing.csv"]),
    ("alpha_study", ["study.fixed_iterations=3", "study.pairs=1.1:0.5"], ["alpha_study.csv", "alpha_study.json"]),
    ("convergence_table", ["study.ladder=16:10", "study.benchmark=32:20", "problem.max_iter=2"],
     ["convergence_phi.csv", "convergence_p.csv", "convergence_eta.csv", "convergence_summary.json"]),
    ("two_grid_compare", ["study.two_grid=32:16", "study.benchmark=32:10", "study.compare_steps=10",
                          "problem.max_iter=2"], ["two_grid_phi.csv", "two_grid_summary.json"]),
])
def test_experiment_kinds_write_artifacts(tmp_path, kind, extra, files):
    cfg = apply_overrides(preset("table1"), SMALL + [f"experiment.kind={kind}"] + extra)
    summary = run_experiment(cfg, tmp_path)
    assert summary["wall_time"] > 0
    assert (tmp_path / "config.ini").is_file()
    for name in files:
        assert (tmp_path / name).stat().st_size > 0, name
    for path in tmp_path.glob("*.json"):
        json.loads(path.read_text())


def test_convergence_table_values_are_finite(tmp_path):
    cfg = apply_overrides(preset("table1"), SMALL + ["experiment.kind=convergence_table", "study.ladder=16:10",
                                                      "study.benchmark=32:20", "problem.max_iter=2"])
    tables = run_experiment(cfg, tmp_path)["tables"]
    assert set(tables) == {"phi", "p", "eta"}
    for rows in tables.values():
        assert list(rows) == ["16^2/10"]
        assert all(np.isfinite(v) and v >= 0 for v in rows["16^2/10"])
