"""Cell-centred Cartesian grids, ghost-padded fields and grid transfers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import NumericalError, StructuralError


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class UniformGrid:
    """Uniform grid of ``n**dim`` square/cubic cells.

    Parameters
    ----------
    dim : int
        Spatial dimension, 2 or 3.
    n : int
        Cells per axis, a power of two with ``n >= 2``.
    origin : tuple of float
        Lower corner of the domain.
    extent : float
        Edge length of the (square or cubic) domain.
    """

    dim: int
    n: int
    origin: tuple = (0.0, 0.0)
    extent: float = 1.0

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise StructuralError(f"dimension must be 2 or 3, got {self.dim}")
        if self.n < 2 or not _is_power_of_two(self.n):
            raise StructuralError(f"cells per axis must be a power of two >= 2, got {self.n}")
        origin = tuple(float(o) for o in np.broadcast_to(np.asarray(self.origin, float), (self.dim,)))
        object.__setattr__(self, "origin", origin)
        if not self.extent > 0:
            raise StructuralError("domain extent must be positive")
        object.__setattr__(self, "extent", float(self.extent))

    @property
    def h(self) -> float:
        return self.extent / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def padded_shape(self) -> tuple:
        return (self.n + 2,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.h ** self.dim

    @property
    def num_cells(self) -> int:
        return self.n ** self.dim

    @property
    def domain_volume(self) -> float:
        return self.extent ** self.dim

    def axes(self):
        """Cell-centre coordinates along each axis."""
        return [o + (np.arange(self.n) + 0.5) * self.h for o in self.origin]

    def cell_centers(self):
        """Cell-centre coordinate arrays (``indexing='ij'``)."""
        return np.meshgrid(*self.axes(), indexing="ij")

    def coarsen(self) -> "UniformGrid":
        return UniformGrid(self.dim, self.n // 2, self.origin, self.extent)

    def refine(self) -> "UniformGrid":
        return UniformGrid(self.dim, self.n * 2, self.origin, self.extent)

    def same_domain(self, other: "UniformGrid") -> bool:
        return (self.dim == other.dim and self.extent == other.extent
                and self.origin == other.origin)


class ScalarField:
    """Per-cell values on a :class:`UniformGrid` with one ghost layer.

    ``data`` is the padded array; ``interior`` is a view of the ``n**dim``
    cell values. Ghosts implement homogeneous Neumann boundaries once
    :meth:`fill_ghosts` has been called.
    """

    __slots__ = ("grid", "data", "name")

    def __init__(self, grid: UniformGrid, data=None, name: str = ""):
        self.grid = grid
        self.name = name
        if data is None:
            self.data = np.zeros(grid.padded_shape)
            return
        data = np.asarray(data, dtype=float)
        if data.shape == grid.padded_shape:
            self.data = np.ascontiguousarray(data)
        elif data.shape == grid.shape:
            self.data = np.zeros(grid.padded_shape)
            self.data[(slice(1, -1),) * grid.dim] = data
            self.fill_ghosts()
        else:
            raise StructuralError(f"array of shape {data.shape} does not fit grid {grid.shape}")

    @classmethod
    def from_function(cls, grid, fn, name=""):
        """Sample ``fn(*coords)`` at cell centres."""
        return cls(grid, fn(*grid.cell_centers()), name=name)

    @classmethod
    def constant(cls, grid, value, name=""):
        return cls(grid, np.full(grid.shape, float(value)), name=name)

    @property
    def interior(self) -> np.ndarray:
        return self.data[(slice(1, -1),) * self.grid.dim]

    def fill_ghosts(self) -> "ScalarField":
        kernels.fill_ghosts(self.data)
        return self

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.data.copy(), self.name)

    def __repr__(self):
        return f"ScalarField({self.name!r}, n={self.grid.n}, dim={self.grid.dim})"


class GridHierarchy:
    """Factor-2 stack of grids from coarsest (index 0) to the solve level.

    Parameters
    ----------
    levels : list of UniformGrid
        Coarsest first; each refines its predecessor by two per axis.
    storage_level : int
        Index of the grid used for space-time storage and the adjoint.
    solve_level : int, optional
        Index of the grid for the forward solve; defaults to the finest.
    """

    def __init__(self, levels, storage_level, solve_level=None):
        levels = list(levels)
        if not levels:
            raise StructuralError("hierarchy needs at least one level")
        for a, b in zip(levels, levels[1:]):
            if not (a.same_domain(b) and b.n == 2 * a.n):
                raise StructuralError("adjacent hierarchy levels must differ by a factor of two")
        if solve_level is None:
            solve_level = len(levels) - 1
        if not 0 <= storage_level <= solve_level < len(levels):
            raise StructuralError("need coarsest <= storage level <= solve level")
        self.levels = levels
        self.storage_level = storage_level
        self.solve_level = solve_level

    @classmethod
    def build(cls, dim, coarsest_n, storage_n, solve_n, origin=0.0, extent=1.0):
        if not coarsest_n <= storage_n <= solve_n:
            raise StructuralError("need coarsest_n <= storage_n <= solve_n")
        grids = [UniformGrid(dim, coarsest_n, origin, extent)]
        while grids[-1].n < solve_n:
            grids.append(grids[-1].refine())
        if grids[-1].n != solve_n:
            raise StructuralError("solve_n must be coarsest_n times a power of two")
        ns = [g.n for g in grids]
        if storage_n not in ns:
            raise StructuralError("storage_n must be a hierarchy level")
        return cls(grids, ns.index(storage_n), len(grids) - 1)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> UniformGrid:
        return self.levels[i]

    @property
    def storage(self) -> UniformGrid:
        return self.levels[self.storage_level]

    @property
    def solve(self) -> UniformGrid:
        return self.levels[self.solve_level]

    def index_of(self, grid: UniformGrid) -> int:
        for i, g in enumerate(self.levels):
            if g == grid:
                return i
        raise StructuralError(f"grid with n={grid.n} is not part of the hierarchy")

    def sub(self, top: int) -> "GridHierarchy":
        """Hierarchy truncated at level ``top`` (used by the adjoint)."""
        return GridHierarchy(self.levels[:top + 1], min(self.storage_level, top), top)


def _check_pair(coarse: UniformGrid, fine: UniformGrid):
    if not (coarse.same_domain(fine) and fine.n == 2 * coarse.n):
        raise StructuralError(
            f"grids n={fine.n} and n={coarse.n} are not one factor-2 refinement apart")


def restrict(fine: ScalarField, coarse_grid: UniformGrid) -> ScalarField:
    """Average each block of ``2**dim`` fine cells into its coarse parent."""
    _check_pair(coarse_grid, fine.grid)
    out = ScalarField(coarse_grid, name=fine.name)
    kernels.kernel("restrict", coarse_grid.dim)(fine.data, out.data)
    return out


def prolong(coarse: ScalarField, fine_grid: UniformGrid) -> ScalarField:
    """Bilinear (trilinear) interpolation from cell centres of the coarse grid.

    Beyond the outermost coarse centres the mirrored ghost values are used,
    which extends the field consistently with Neumann boundaries.
    """
    _check_pair(coarse.grid, fine_grid)
    coarse.fill_ghosts()
    out = ScalarField(fine_grid, name=coarse.name)
    mask = kernels.full_mask(fine_grid.padded_shape)
    kernels.kernel("prolong", fine_grid.dim)(coarse.data, out.data, mask, False)
    return out.fill_ghosts()


def prolong_to_level(field: ScalarField, hierarchy: GridHierarchy, target_level: int) -> ScalarField:
    """Apply :func:`prolong` repeatedly up to ``hierarchy[target_level]``."""
    src = hierarchy.index_of(field.grid)
    if target_level < src:
        raise StructuralError("target level lies below the field's level")
    out = field
    for lvl in range(src + 1, target_level + 1):
        out = prolong(out, hierarchy[lvl])
    return out if out is not field else field.copy()


def restrict_to_level(field: ScalarField, hierarchy: GridHierarchy, target_level: int) -> ScalarField:
    src = hierarchy.index_of(field.grid)
    if target_level > src:
        raise StructuralError("target level lies above the field's level")
    out = field
    for lvl in range(src - 1, target_level - 1, -1):
        out = restrict(out, hierarchy[lvl])
    return out if out is not field else field.copy()


def integrate(field: ScalarField) -> float:
    """Midpoint-rule integral ``h**d * sum(interior)``."""
    vals = field.interior
    total = float(vals.sum())
    if not math.isfinite(total):
        bad = np.argwhere(~np.isfinite(vals))
        raise NumericalError("non-finite value in integrand", tuple(bad[0]) if len(bad) else None)
    return field.grid.cell_volume * total


def apply_laplacian(field: ScalarField) -> ScalarField:
    """5-point (2-D) or 7-point (3-D) Laplacian of a ghost-filled field."""
    d = field.grid.dim
    a = field.data
    inner = (slice(1, -1),) * d
    acc = -2.0 * d * a[inner]
    for ax in range(d):
        lo = list(inner)
        hi = list(inner)
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        acc = acc + a[tuple(lo)] + a[tuple(hi)]
    return ScalarField(field.grid, acc / field.grid.h ** 2, name=field.name)


# ---------------------------------------------------------------------------
# field dump format
# ---------------------------------------------------------------------------

_MAGIC = "# pfoc-field v1"


def _header(field: ScalarField, time: float, encoding: str) -> str:
    g = field.grid
    return "\n".join([
        _MAGIC,
        f"dimension {g.dim}",
        "n " + " ".join([str(g.n)] * g.dim),
        "origin " + " ".join(repr(o) for o in g.origin),
        "extent " + " ".join([repr(g.extent)] * g.dim),
        f"time {time!r}",
        f"name {field.name or 'field'}",
        f"data {encoding}",
    ]) + "\n"


def dump_field(field: ScalarField, path, time: float = 0.0, binary: bool = False) -> Path:
    """Write interior values in row-major order after a plain-text header.

    The text variant writes one value per line with 17 significant digits;
    the binary variant appends little-endian float64 values.
    """
    path = Path(path)
    vals = np.ascontiguousarray(field.interior).ravel()
    if binary:
        with open(path, "wb") as fh:
            fh.write(_header(field, time, "binary").encode("ascii"))
            fh.write(vals.astype("<f8").tobytes())
    else:
        with open(path, "w") as fh:
            fh.write(_header(field, time, "text"))
            np.savetxt(fh, vals, fmt="%.17g")
    return path


def load_field(path):
    """Read a dump written by :func:`dump_field`; returns ``(field, time)``."""
    raw = Path(path).read_bytes()
    meta = {}
    pos = 0
    while True:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            if line != _MAGIC:
                raise StructuralError(f"unrecognised field dump header {line!r}")
            continue
        key, _, value = line.partition(" ")
        meta[key] = value
        if key == "data":
            break
    dim = int(meta["dimension"])
    ns = [int(v) for v in meta["n"].split()]
    extents = [float(v) for v in meta["extent"].split()]
    if len(set(ns)) != 1 or len(set(extents)) != 1:
        raise StructuralError("only uniform square/cubic grids are supported")
    grid = UniformGrid(dim, ns[0], tuple(float(v) for v in meta["origin"].split()), extents[0])
    if meta["data"] == "binary":
        vals = np.frombuffer(raw[pos:], dtype="<f8").astype(float)
    else:
        vals = np.array(raw[pos:].split(), dtype=float)
    if vals.size != grid.num_cells:
        raise StructuralError(f"expected {grid.num_cells} values, found {vals.size}")
    field = ScalarField(grid, vals.reshape(grid.shape), name=meta.get("name", ""))
    return field, float(meta.get("time", 0.0))
