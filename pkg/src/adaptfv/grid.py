"""Uniform Cartesian blocks with ghost layers and physical boundary conditions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

OUTFLOW = "outflow"
PERIODIC = "periodic"
REFLECTIVE = "reflective"
BC_KINDS = (OUTFLOW, PERIODIC, REFLECTIVE)

GHOST = 2


class LevelMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BoundaryCondition:
    """Boundary kinds per axis as ``(lower, upper)`` pairs."""

    faces: tuple

    def __post_init__(self):
        for lo, hi in self.faces:
            if lo not in BC_KINDS or hi not in BC_KINDS:
                raise ValueError(f"unknown boundary kind in {self.faces}")
            if (lo == PERIODIC) != (hi == PERIODIC):
                raise ValueError("periodic faces must come in matched pairs")

    @classmethod
    def uniform(cls, kind: str, dim: int) -> "BoundaryCondition":
        return cls(tuple((kind, kind) for _ in range(dim)))

    @property
    def dim(self) -> int:
        return len(self.faces)

    def periodic(self, axis: int) -> bool:
        return self.faces[axis][0] == PERIODIC


def _take(A, axis, idx):
    sl = [slice(None)] * A.ndim
    sl[axis] = idx
    return tuple(sl)


def fill_axis(A: np.ndarray, g: int, axis: int, lo: str, hi: str, normal_var: int | None) -> None:
    """Fill the ``g`` ghost layers of array axis ``axis`` in place.

    ``A`` carries the variable axis first, so spatial axis ``k`` is array axis
    ``k + 1``.  ``normal_var`` is the variable index negated by reflection.
    """
    ax = axis + 1
    n = A.shape[ax] - 2 * g
    for side, kind in ((0, lo), (1, hi)):
        for j in range(g):
            ghost = j if side == 0 else n + g + j
            if kind == PERIODIC:
                src = ghost + n if side == 0 else ghost - n
            elif kind == OUTFLOW:
                src = g if side == 0 else n + g - 1
            else:
                src = 2 * g - 1 - j if side == 0 else n + g - 1 - j
            A[_take(A, ax, ghost)] = A[_take(A, ax, src)]
            if kind == REFLECTIVE and normal_var is not None:
                t = list(_take(A, ax, ghost))
                t[0] = normal_var
                A[tuple(t)] *= -1.0


def fill_ghosts_array(A: np.ndarray, bc: BoundaryCondition, g: int = GHOST, reflect: bool = True) -> np.ndarray:
    """Fill ghosts of a padded ``(nvar, ...)`` array axis by axis (corners included)."""
    for axis, (lo, hi) in enumerate(bc.faces):
        fill_axis(A, g, axis, lo, hi, 1 + axis if reflect else None)
    return A


def interior(dim: int, g: int = GHOST):
    return (slice(None),) + (slice(g, -g),) * dim


@dataclass
class UniformGrid:
    """Regular block at a single level; ``U`` includes ``ghost`` layers per side."""

    dim: int
    level: int
    n: int
    lower: tuple
    upper: tuple
    U: np.ndarray
    t: float = 0.0
    ghost: int = GHOST
    gamma: float = 1.4
    meta: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, dim, level, n, lower=None, upper=None, gamma=1.4, ghost=GHOST):
        lower = tuple(lower) if lower is not None else (0.0,) * dim
        upper = tuple(upper) if upper is not None else (1.0,) * dim
        extents = {round(u - l, 14) for l, u in zip(lower, upper)}
        if len(extents) != 1:
            raise ValueError("only square/cubic domains are supported")
        U = np.zeros((dim + 2,) + (n + 2 * ghost,) * dim)
        return cls(dim, level, n, lower, upper, U, 0.0, ghost, gamma)

    @property
    def dx(self) -> float:
        return (self.upper[0] - self.lower[0]) / self.n

    @property
    def cell_volume(self) -> float:
        return self.dx**self.dim

    @property
    def interior(self) -> np.ndarray:
        return self.U[interior(self.dim, self.ghost)]

    @interior.setter
    def interior(self, value):
        self.U[interior(self.dim, self.ghost)] = value

    def centers(self) -> list[np.ndarray]:
        """Cell-center coordinate arrays (``indexing='ij'``) for the interior."""
        axes = [self.lower[k] + (np.arange(self.n) + 0.5) * self.dx for k in range(self.dim)]
        return np.meshgrid(*axes, indexing="ij")

    def totals(self) -> np.ndarray:
        """Integral of each conserved variable over the domain."""
        return self.interior.reshape(self.dim + 2, -1).sum(axis=1) * self.cell_volume

    def copy(self) -> "UniformGrid":
        return UniformGrid(self.dim, self.level, self.n, self.lower, self.upper,
                           self.U.copy(), self.t, self.ghost, self.gamma, dict(self.meta))


def fill_ghosts(grid: UniformGrid, bc: BoundaryCondition) -> UniformGrid:
    fill_ghosts_array(grid.U, bc, grid.ghost)
    return grid


def coarsen_mean(A: np.ndarray, dim: int) -> np.ndarray:
    """2^d-cell arithmetic mean of an unpadded ``(nvar, n, ...)`` array."""
    n = A.shape[1]
    if n % 2:
        raise LevelMismatch("cannot coarsen an odd number of cells")
    total = None
    for off in np.ndindex(*(2,) * dim):
        part = A[(slice(None),) + tuple(slice(o, None, 2) for o in off)]
        total = part.copy() if total is None else total + part
    return total * (1.0 / 2**dim)


def refine_repeat(A: np.ndarray, dim: int) -> np.ndarray:
    """Piecewise-constant injection to the next finer level."""
    for k in range(dim):
        A = np.repeat(A, 2, axis=k + 1)
    return A


def make_bc(faces: Sequence | str, dim: int) -> BoundaryCondition:
    if isinstance(faces, BoundaryCondition):
        return faces
    if isinstance(faces, str):
        return BoundaryCondition.uniform(faces, dim)
    return BoundaryCondition(tuple(tuple(f) for f in faces))
