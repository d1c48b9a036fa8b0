"""Per-time-step storage of state, control and adjoint on the storage grid."""

from __future__ import annotations

import numpy as np

from .errors import StoreIntegrityError, StructuralError
from .mesh import ScalarField, UniformGrid

BYTES_PER_VALUE = 8


def accounted_bytes(dim: int, n_storage: int, n_steps: int, n_fields: int,
                    n_solve: int | None = None) -> int:
    """Bytes needed by a space-time store.

    ``n_fields * n_storage**dim * 8 * (n_steps + 1)`` for the per-step
    fields, plus one solve-level field for the final state when the solve
    grid is finer than the storage grid.
    """
    total = n_fields * n_storage ** dim * BYTES_PER_VALUE * (n_steps + 1)
    if n_solve is not None and n_solve != n_storage:
        total += n_solve ** dim * BYTES_PER_VALUE
    return total


class SpaceTimeStore:
    """Dense per-step fields on the storage grid, steps ``0 .. n_steps``.

    Parameters
    ----------
    grid : UniformGrid
        Storage grid.
    n_steps : int
        Number of time steps ``N_t``; slots ``0..N_t`` are allocated.
    fields : tuple of str
        Names of the stored per-step fields.
    solve_grid : UniformGrid, optional
        Grid of the retained final state used in the fidelity term.

    Notes
    -----
    The control ``eta`` acts on steps ``1..N_t`` (the step that produces
    ``phi[n]`` uses ``eta[n]``); slot 0 is kept at zero so that all fields
    share one index range.
    """

    def __init__(self, grid: UniformGrid, n_steps: int, fields=("phi", "eta", "p"),
                 solve_grid: UniformGrid | None = None):
        if n_steps < 1:
            raise StructuralError("a space-time store needs at least one step")
        self.grid = grid
        self.n_steps = n_steps
        self.solve_grid = solve_grid or grid
        if not self.solve_grid.same_domain(grid):
            raise StructuralError("solve and storage grids cover different domains")
        self._data = {name: np.zeros((n_steps + 1,) + grid.shape) for name in fields}
        self._written = {name: np.zeros(n_steps + 1, bool) for name in fields}
        self.lam = np.full(n_steps + 1, np.nan)
        self.phi_T_solve: ScalarField | None = None

    @property
    def fields(self):
        return tuple(self._data)

    def array(self, name: str) -> np.ndarray:
        """The raw ``(n_steps+1, *shape)`` array of a field (a live view)."""
        return self._data[name]

    def mark_all(self, name: str):
        self._written[name][:] = True

    def set(self, name: str, n: int, value):
        arr = value.interior if isinstance(value, ScalarField) else np.asarray(value)
        if isinstance(value, ScalarField) and value.grid != self.grid:
            raise StructuralError(f"{name}[{n}] is not on the storage grid")
        self._data[name][n] = arr
        self._written[name][n] = True

    def get(self, name: str, n: int) -> ScalarField:
        if not 0 <= n <= self.n_steps:
            raise StoreIntegrityError(f"step {n} outside 0..{self.n_steps}")
        if not self._written[name][n]:
            raise StoreIntegrityError(f"{name} missing at step {n}")
        return ScalarField(self.grid, self._data[name][n], name=f"{name}[{n}]")

    def has(self, name: str, n: int) -> bool:
        return bool(self._written[name][n])

    def require(self, name: str, steps=None):
        steps = range(self.n_steps + 1) if steps is None else steps
        missing = [n for n in steps if not self._written[name][n]]
        if missing:
            raise StoreIntegrityError(f"{name} missing at steps {missing[:5]}{'...' if len(missing) > 5 else ''}")

    def copy_field(self, name: str) -> np.ndarray:
        return self._data[name].copy()

    def load_field(self, name: str, data: np.ndarray):
        if data.shape != self._data[name].shape:
            raise StructuralError(f"shape {data.shape} does not match store field {name}")
        self._data[name][...] = data
        self._written[name][:] = True

    def store_bytes(self) -> int:
        """Accounted bytes of the per-step fields alone."""
        return accounted_bytes(self.grid.dim, self.grid.n, self.n_steps, len(self._data))

    def total_bytes(self) -> int:
        """Per-step fields plus the retained solve-level final state."""
        return accounted_bytes(self.grid.dim, self.grid.n, self.n_steps, len(self._data),
                               self.solve_grid.n)
