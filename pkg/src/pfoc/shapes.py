"""Diffuse-interface profiles ``tanh(-F(x)/eps)`` from analytic level sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, StructuralError
from .mesh import ScalarField, UniformGrid, integrate

KINDS = ("circle", "ellipse", "sphere", "ellipsoid", "union_max", "bent_tube_3d")


@dataclass(frozen=True)
class ShapeSpec:
    """Level-set description of a diffuse interface.

    The level-set function is

        F(x) = sum_k w_k * q_k(x)**2 - radius**2,   q = M (x - center)

    with ``M`` the identity unless ``axes`` is given. For ``bent_tube_3d``
    the component ``q[bend_axis]`` is replaced by
    ``q[bend_axis] - bend * q[bend_along]**2``. ``union_max`` takes the
    pointwise maximum of the profiles of ``parts``.

    Examples
    --------
    The circle ``(x-2)^2 + (y-2)^2 - 1`` and the ellipse
    ``(x-2)^2/2 + (y-2)^2 - 1``:

    >>> circle = ShapeSpec("circle", center=(2, 2), radius=1.0, eps=0.1)
    >>> ellipse = ShapeSpec("ellipse", center=(2, 2), radius=1.0, weights=(0.5, 1.0), eps=0.1)
    """

    kind: str
    center: tuple = ()
    radius: float = 1.0
    weights: tuple = ()
    axes: tuple = ()
    bend: float = 0.0
    bend_axis: int = 0
    bend_along: int = 2
    eps: float = 0.1
    parts: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown shape kind {self.kind!r}")
        if not self.eps > 0:
            raise ConfigurationError("interface width eps must be positive")
        if self.kind == "union_max":
            if len(self.parts) != 2:
                raise ConfigurationError("union_max needs exactly two parts")
            return
        if not self.radius > 0:
            raise ConfigurationError("shape radius must be positive")
        dim = len(self.center)
        if dim not in (2, 3):
            raise ConfigurationError("shape center must have 2 or 3 coordinates")
        if self.kind in ("sphere", "ellipsoid", "bent_tube_3d") and dim != 3:
            raise ConfigurationError(f"{self.kind} is a 3-D shape")
        if self.kind in ("circle", "ellipse") and dim != 2:
            raise ConfigurationError(f"{self.kind} is a 2-D shape")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        w = tuple(float(v) for v in self.weights) if self.weights else (1.0,) * dim
        if len(w) != dim or any(not v > 0 for v in w):
            raise ConfigurationError("axis weights must be positive, one per dimension")
        object.__setattr__(self, "weights", w)
        if self.axes:
            m = np.asarray(self.axes, float)
            if m.shape != (dim, dim):
                raise ConfigurationError("axes must be a dim x dim matrix")
            object.__setattr__(self, "axes", tuple(tuple(r) for r in m.tolist()))

    @property
    def dim(self) -> int:
        return self.parts[0].dim if self.kind == "union_max" else len(self.center)

    def with_eps(self, eps: float) -> "ShapeSpec":
        parts = tuple(p.with_eps(eps) for p in self.parts)
        return ShapeSpec(self.kind, self.center, self.radius, self.weights, self.axes,
                         self.bend, self.bend_axis, self.bend_along, eps, parts)

    def level_set(self, *coords):
        """Evaluate ``F`` at the given coordinate arrays."""
        d = [np.asarray(x, float) - c for x, c in zip(coords, self.center)]
        if self.axes:
            d = [sum(a * dj for a, dj in zip(row, d)) for row in self.axes]
        if self.kind == "bent_tube_3d":
            d[self.bend_axis] = d[self.bend_axis] - self.bend * d[self.bend_along] ** 2
        return sum(w * q * q for w, q in zip(self.weights, d)) - self.radius ** 2

    def evaluate(self, *coords):
        """Profile values ``tanh(-F/eps)`` at the given coordinates."""
        if self.kind == "union_max":
            return np.maximum(self.parts[0].evaluate(*coords), self.parts[1].evaluate(*coords))
        return np.tanh(-self.level_set(*coords) / self.eps)


def build_profile(spec: ShapeSpec, grid: UniformGrid, name: str = "") -> ScalarField:
    """Sample the diffuse-interface profile of ``spec`` at cell centres."""
    if spec.dim != grid.dim:
        raise ConfigurationError(f"{spec.dim}-D shape on a {grid.dim}-D grid")
    return ScalarField(grid, spec.evaluate(*grid.cell_centers()), name=name or spec.kind)


def mass_target(phi0: ScalarField, phi_obs: ScalarField, t: float, T: float) -> float:
    """Linear interpolant in time of the initial and target masses."""
    if not T > 0:
        raise ConfigurationError("end time T must be positive")
    if phi0.grid != phi_obs.grid:
        raise StructuralError("initial and target states live on different grids")
    m0 = integrate(phi0)
    return m0 + (t / T) * (integrate(phi_obs) - m0)
