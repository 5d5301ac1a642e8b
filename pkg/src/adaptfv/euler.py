"""Compressible Euler equations: state layout, ideal-gas EOS, physical fluxes.

Conserved arrays use a leading variable axis of length ``d + 2``::

    U[0]        density rho
    U[1:d+1]    momentum rho*v
    U[d+1]      total energy density rho*e

Trailing axes are arbitrary (a single cell, a flat list of gathered cells, or a
dense 2D/3D block), so every function here is a pure elementwise kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POSITIVITY_FLOOR = 1e-12


class NonPhysicalState(ValueError):
    """Raised when density or pressure drops below the positivity floor."""

    def __init__(self, message: str, location=None):
        super().__init__(message if location is None else f"{message} at {location}")
        self.location = location


@dataclass(frozen=True)
class GasModel:
    gamma: float = 1.4

    def __post_init__(self):
        if not self.gamma > 1.0:
            raise ValueError(f"gamma must exceed 1, got {self.gamma}")


def nvars(dim: int) -> int:
    return dim + 2


def state_dim(U: np.ndarray) -> int:
    return U.shape[0] - 2


def _first_bad(mask: np.ndarray):
    idx = np.argwhere(mask)
    return tuple(int(i) for i in idx[0]) if idx.size else None


def check_physical(rho, p, where: str = "state") -> None:
    """Raise NonPhysicalState if any rho or p is below the floor (or NaN)."""
    bad = ~(rho > POSITIVITY_FLOOR) | ~(p > POSITIVITY_FLOOR)
    if np.any(bad):
        loc = _first_bad(np.atleast_1d(bad))
        raise NonPhysicalState(f"non-physical {where} (rho or p <= {POSITIVITY_FLOOR})", loc)


def pressure(U: np.ndarray, gamma: float) -> np.ndarray:
    d = state_dim(U)
    rho = U[0]
    kin = U[1] * U[1]
    for k in range(2, d + 1):
        kin = kin + U[k] * U[k]
    return (gamma - 1.0) * (U[d + 1] - 0.5 * kin / rho)


def cons_to_prim(U: np.ndarray, gamma: float, check: bool = True) -> np.ndarray:
    """Conserved -> primitive (rho, v_1..v_d, p)."""
    d = state_dim(U)
    W = np.empty_like(U)
    rho = U[0]
    W[0] = rho
    kin = np.zeros_like(rho)
    for k in range(1, d + 1):
        v = U[k] / rho
        W[k] = v
        kin = kin + v * v
    W[d + 1] = (gamma - 1.0) * (U[d + 1] - 0.5 * rho * kin)
    if check:
        check_physical(W[0], W[d + 1])
    return W


def prim_to_cons(W: np.ndarray, gamma: float) -> np.ndarray:
    d = state_dim(W)
    U = np.empty_like(W)
    rho = W[0]
    U[0] = rho
    kin = np.zeros_like(rho)
    for k in range(1, d + 1):
        U[k] = rho * W[k]
        kin = kin + W[k] * W[k]
    U[d + 1] = W[d + 1] / (gamma - 1.0) + 0.5 * rho * kin
    return U


def primitives(q, gas: GasModel = GasModel()):
    """Return ``(rho, v, p)`` for a single conserved state vector."""
    q = np.asarray(q, dtype=float)
    W = cons_to_prim(q, gas.gamma)
    d = state_dim(q)
    return float(W[0]), W[1 : d + 1].copy(), float(W[d + 1])


def conservative(rho, v, p, gas: GasModel = GasModel()) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    W = np.concatenate([[rho], v, [p]]).astype(float)
    return prim_to_cons(W, gas.gamma)


def flux_from_prim(W: np.ndarray, axis: int, gamma: float) -> np.ndarray:
    """Physical flux along ``axis`` evaluated from primitive variables."""
    d = state_dim(W)
    rho = W[0]
    vn = W[1 + axis]
    p = W[d + 1]
    kin = W[1] * W[1]
    for k in range(2, d + 1):
        kin = kin + W[k] * W[k]
    rhoE = p / (gamma - 1.0) + 0.5 * rho * kin
    F = np.empty_like(W)
    mass = rho * vn
    F[0] = mass
    for k in range(1, d + 1):
        F[k] = mass * W[k]
    F[1 + axis] = F[1 + axis] + p
    F[d + 1] = (rhoE + p) * vn
    return F


def physical_flux(q, axis: int, gas: GasModel = GasModel()) -> np.ndarray:
    """Physical flux f_axis(q) of a conserved state (any trailing shape)."""
    q = np.asarray(q, dtype=float)
    d = state_dim(q)
    if not 0 <= axis < d:
        raise ValueError(f"axis {axis} out of range for dimension {d}")
    W = cons_to_prim(q, gas.gamma)
    vn = W[1 + axis]
    p = W[d + 1]
    F = np.empty_like(q)
    F[0] = q[1 + axis]
    for k in range(1, d + 1):
        F[k] = q[k] * vn
    F[1 + axis] = F[1 + axis] + p
    F[d + 1] = (q[d + 1] + p) * vn
    return F


def sound_speed(rho, p, gamma: float):
    return np.sqrt(gamma * p / rho)


def max_wave_speed(q, axis: int, gas: GasModel = GasModel()):
    """|v_axis| + c, elementwise."""
    q = np.asarray(q, dtype=float)
    W = cons_to_prim(q, gas.gamma)
    d = state_dim(q)
    c = sound_speed(W[0], W[d + 1], gas.gamma)
    out = np.abs(W[1 + axis]) + c
    return float(out) if np.ndim(out) == 0 else out
