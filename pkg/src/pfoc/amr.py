"""Block-structured adaptive refinement of the forward solve above the storage level.

Levels up to and including the storage level are always fully active. Each
finer level activates a union of ``B**d`` cell blocks around the diffuse
interface; a level's active region is nested inside its parent's with a
buffer of one fine block. Data is held in dense per-level arrays, and an
active-cell mask selects where a level owns equations.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, StructuralError
from .mesh import GridHierarchy, ScalarField
from .mgcore import CycleConfig, ForwardOperatorSpec, Multigrid, bdf_coefficients

log = logging.getLogger(__name__)


@dataclass
class AMRConfig:
    enabled: bool = False
    block: int = 8
    threshold: float = 0.19
    regrid_every: int = 5

    def __post_init__(self):
        if self.block < 1 or self.block & (self.block - 1):
            raise ConfigurationError("AMR block size must be a power of two")
        if self.regrid_every < 1:
            raise ConfigurationError("regrid interval must be >= 1 step")
        if self.threshold < 0:
            raise ConfigurationError("refinement threshold must be non-negative")


def _blocks_to_cells(bmask, block):
    out = bmask
    for ax in range(bmask.ndim):
        out = np.repeat(out, block, axis=ax)
    return out


def _cells_to_blocks(cmask, block):
    shape = [s for n in cmask.shape for s in (n // block, block)]
    return cmask.reshape(shape).any(axis=tuple(range(1, 2 * cmask.ndim, 2)))


def _dilate(bmask):
    """Grow a boolean array by one entry in every direction, diagonals included."""
    out = bmask.copy()
    d = bmask.ndim
    n = bmask.shape
    for off in itertools.product((-1, 0, 1), repeat=d):
        if not any(off):
            continue
        dst = tuple(slice(max(o, 0), n[a] + min(o, 0)) for a, o in enumerate(off))
        src = tuple(slice(max(-o, 0), n[a] + min(-o, 0)) for a, o in enumerate(off))
        out[dst] |= bmask[src]
    return out


def flag_interface(phi: ScalarField, threshold: float = 0.19, block: int = 8,
                   dilate: bool = True) -> np.ndarray:
    """Cells in the diffuse interface, ``1 - phi**2 > threshold``.

    With ``dilate`` the flags are rounded up to ``block``-sized blocks and
    grown by one block in every direction; the result is a cell mask.
    """
    raw = (1.0 - phi.interior ** 2) > threshold
    if not dilate:
        return raw
    if any(n % block for n in raw.shape):
        raise ConfigurationError(f"grid of {raw.shape[0]} cells is not divisible into blocks of {block}")
    return _blocks_to_cells(_dilate(_cells_to_blocks(raw, block)), block)


class RefinementMap:
    """Active blocks of every level above ``base`` (the storage level).

    Parameters
    ----------
    hierarchy : GridHierarchy
    block : int
        Block edge length in cells, the same on every level.
    blocks : dict
        ``{level: bool array}`` of active blocks for levels ``base+1 ..
        solve_level``. Missing levels are fully active.
    regrid_every : int
    """

    def __init__(self, hierarchy: GridHierarchy, block: int = 8, blocks=None, regrid_every: int = 5):
        self.hierarchy = hierarchy
        self.block = block
        self.base = hierarchy.storage_level
        self.top = hierarchy.solve_level
        self.regrid_every = regrid_every
        self.blocks = {}
        for lev in range(self.base + 1, self.top + 1):
            n = hierarchy[lev].n
            if n % block:
                raise ConfigurationError(f"level {lev} with {n} cells per axis does not tile into blocks of {block}")
            shape = (n // block,) * hierarchy[lev].dim
            b = None if blocks is None else blocks.get(lev)
            self.blocks[lev] = np.ones(shape, bool) if b is None else np.asarray(b, bool)
            if self.blocks[lev].shape != shape:
                raise StructuralError(f"block mask for level {lev} has shape {self.blocks[lev].shape}")

    @classmethod
    def uniform(cls, hierarchy, block=8, regrid_every=5):
        return cls(hierarchy, block, None, regrid_every)

    def cell_mask(self, level: int) -> np.ndarray:
        if level <= self.base:
            return np.ones(self.hierarchy[level].shape, bool)
        return _blocks_to_cells(self.blocks[level], self.block)

    def active_cells(self, level: int) -> int:
        if level <= self.base:
            return self.hierarchy[level].num_cells
        return int(self.blocks[level].sum()) * self.block ** self.hierarchy.levels[0].dim

    def is_full(self) -> bool:
        return all(b.all() for b in self.blocks.values())

    def is_nested(self) -> bool:
        """Every active cell's parent is active on the level below."""
        for lev in range(self.base + 2, self.top + 1):
            fine = self.cell_mask(lev)
            parent = _cells_to_blocks(fine, 2)
            if (parent & ~self.cell_mask(lev - 1)).any():
                return False
        return True

    def engine_masks(self, coarsest: int) -> dict:
        """Masks for a :class:`Multigrid` whose level 0 is ``coarsest``."""
        out = {}
        for lev, b in self.blocks.items():
            if not b.all():
                out[lev - coarsest] = self.cell_mask(lev)
        return out

    def __eq__(self, other):
        return (isinstance(other, RefinementMap) and self.block == other.block
                and self.blocks.keys() == other.blocks.keys()
                and all(np.array_equal(b, other.blocks[k]) for k, b in self.blocks.items()))

    def to_text(self) -> str:
        """One line per active block: ``level i j [k]``."""
        lines = [f"# refinement map block={self.block} base={self.base} top={self.top}"]
        for lev, b in self.blocks.items():
            for idx in np.argwhere(b):
                lines.append(" ".join(str(int(v)) for v in (lev, *idx)))
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def from_text(cls, text: str, hierarchy: GridHierarchy, regrid_every: int = 5):
        lines = text.splitlines()
        head = dict(kv.split("=") for kv in lines[0].split()[3:])
        block = int(head["block"])
        blocks = {}
        for lev in range(hierarchy.storage_level + 1, hierarchy.solve_level + 1):
            blocks[lev] = np.zeros((hierarchy[lev].n // block,) * hierarchy[lev].dim, bool)
        for line in lines[1:]:
            vals = [int(v) for v in line.split()]
            blocks[vals[0]][tuple(vals[1:])] = True
        return cls(hierarchy, block, blocks, regrid_every)


def build_map(phi_levels, hierarchy: GridHierarchy, cfg: AMRConfig) -> RefinementMap:
    """Construct a nesting-valid map from per-level renderings of ``phi``.

    ``phi_levels[lev]`` is a :class:`ScalarField` on hierarchy level ``lev``
    for every level above the storage level.
    """
    base, top = hierarchy.storage_level, hierarchy.solve_level
    blocks = {}
    for lev in range(top, base, -1):
        b = _cells_to_blocks(flag_interface(phi_levels[lev], cfg.threshold, cfg.block), cfg.block)
        if lev < top:
            b |= _cells_to_blocks(_dilate(blocks[lev + 1]), 2)
        blocks[lev] = b
    rmap = RefinementMap(hierarchy, cfg.block, blocks, cfg.regrid_every)
    if not rmap.is_nested():
        raise StructuralError("refinement map construction violated proper nesting")
    return rmap


def render_levels(arrays: dict, rmap: RefinementMap) -> dict:
    """Uniform per-level renderings of composite data.

    ``arrays[lev]`` are padded arrays whose values are meaningful on active
    cells; inactive cells are filled by interpolation from the rendering of
    the level below.
    """
    out = {rmap.base: ScalarField(rmap.hierarchy[rmap.base], arrays[rmap.base].copy())}
    for lev in range(rmap.base + 1, rmap.top + 1):
        grid = rmap.hierarchy[lev]
        parent = out[lev - 1].fill_ghosts()
        interp = np.zeros(grid.padded_shape)
        kernels.kernel("prolong", grid.dim)(parent.data, interp, kernels.full_mask(grid.padded_shape), False)
        mask = np.zeros(grid.padded_shape, bool)
        mask[(slice(1, -1),) * grid.dim] = rmap.cell_mask(lev)
        out[lev] = ScalarField(grid, np.where(mask, arrays[lev], interp)).fill_ghosts()
    return out


def regrid(arrays_list, rmap: RefinementMap, hierarchy: GridHierarchy, cfg: AMRConfig):
    """Rebuild the refinement map from the current composite solution.

    Parameters
    ----------
    arrays_list : list of dict
        Composite per-level padded arrays (``{level: array}``). The first
        entry is the latest solution and drives the flags; every entry is
        updated in place so that newly activated cells hold the
        interpolation of the parent level.

    Returns
    -------
    RefinementMap
    """
    rendered = render_levels(arrays_list[0], rmap)
    new = build_map(rendered, hierarchy, cfg)
    for arrays in arrays_list:
        ren = rendered if arrays is arrays_list[0] else render_levels(arrays, rmap)
        for lev in range(rmap.base + 1, rmap.top + 1):
            arrays[lev][...] = ren[lev].data
    if new != rmap:
        log.debug("regrid: active fine cells %d -> %d", rmap.active_cells(rmap.top), new.active_cells(new.top))
    return new


@dataclass
class CompositeField:
    """Per-level data of a field on a refined composite grid."""

    rmap: RefinementMap
    arrays: dict

    @classmethod
    def from_uniform(cls, field: ScalarField, rmap: RefinementMap):
        h = rmap.hierarchy
        if field.grid != h[rmap.top]:
            raise StructuralError("composite fields are built from solve-level data")
        arrays = {rmap.top: field.copy().fill_ghosts().data}
        for lev in range(rmap.top, rmap.base, -1):
            coarse = np.zeros(h[lev - 1].padded_shape)
            kernels.kernel("restrict", field.grid.dim)(arrays[lev], coarse)
            arrays[lev - 1] = coarse
        return cls(rmap, arrays)

    def to_uniform(self) -> ScalarField:
        return render_levels(self.arrays, self.rmap)[self.rmap.top]


def vcycle_mlat(u: CompositeField, op: ForwardOperatorSpec, hierarchy: GridHierarchy,
                rmap: RefinementMap, cfg: CycleConfig) -> CompositeField:
    """One FAS V-cycle on the composite grid described by ``rmap``.

    Coefficient fields of ``op`` live on the solve level and are restricted
    to every level that owns equations.
    """
    coarse = cfg.coarsest_level
    grids = hierarchy.levels[coarse:rmap.top + 1]
    mg = Multigrid(grids, "forward", cfg, op.eps, op.tau, op.order, rmap.engine_masks(coarse))
    rhs = CompositeField.from_uniform(ScalarField(op.grid, op.rhs()), rmap).arrays
    for lev in range(rmap.base, rmap.top + 1):
        lv = mg.levels[lev - coarse]
        lv.u[...] = u.arrays[lev]
        lv.f[...] = rhs[lev]
        if lv.native is not None:
            lv.native[...] = rhs[lev]
    mg.cycle()
    mg.sync(rmap.base - coarse)
    return CompositeField(rmap, {lev: mg.levels[lev - coarse].u.copy()
                                 for lev in range(rmap.base, rmap.top + 1)})


def level_rhs_coefficients(order, eps, tau):
    """``(ct*(-a1), ct*(-a2), s)`` used to assemble per-level native right-hand sides."""
    a1, a2, s = bdf_coefficients(order)
    ct = eps / tau
    return -ct * a1, -ct * a2, s
