"""Single-block finite-volume kernels.

Two presets are used throughout:

* MR family: MUSCL + van Albada + AUSM+, explicit midpoint RK2.
* AMR family: MUSCL + Minmod + AUSMDV, MUSCL-Hancock predictor/corrector.

Reconstruction always works on primitive variables (rho, v, p).  All kernels
are elementwise over trailing axes, so the same code runs on dense slices of a
padded block and on flat arrays of gathered stencil values; this keeps the
adaptive solvers bit-identical to the uniform solver on fully refined meshes.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .euler import NonPhysicalState, POSITIVITY_FLOOR, cons_to_prim, flux_from_prim, prim_to_cons
from .grid import BoundaryCondition, UniformGrid, fill_ghosts

VAN_ALBADA_DELTA = 1e-12
AUSM_ALPHA = 3.0 / 16.0
AUSM_BETA = 1.0 / 8.0
AUSMDV_K = 10.0


class FluxKind(str, Enum):
    AUSM_PLUS = "ausm+"
    AUSMDV = "ausmdv"


class LimiterKind(str, Enum):
    VAN_ALBADA = "vanalbada"
    MINMOD = "minmod"


class IntegratorKind(str, Enum):
    RK2 = "rk2"
    MUSCL_HANCOCK = "muscl-hancock"


@dataclass(frozen=True)
class SchemeConfig:
    flux_kind: FluxKind = FluxKind.AUSM_PLUS
    limiter_kind: LimiterKind = LimiterKind.VAN_ALBADA
    integrator_kind: IntegratorKind = IntegratorKind.RK2

    @classmethod
    def mr_preset(cls) -> "SchemeConfig":
        return cls(FluxKind.AUSM_PLUS, LimiterKind.VAN_ALBADA, IntegratorKind.RK2)

    @classmethod
    def amr_preset(cls) -> "SchemeConfig":
        return cls(FluxKind.AUSMDV, LimiterKind.MINMOD, IntegratorKind.MUSCL_HANCOCK)

    @property
    def is_named_preset(self) -> bool:
        return self in (SchemeConfig.mr_preset(), SchemeConfig.amr_preset())

    @property
    def tag(self) -> str:
        return f"{self.flux_kind.value}/{self.limiter_kind.value}/{self.integrator_kind.value}"


# ---------------------------------------------------------------- limiters

def minmod(a, b):
    return np.where(a * b > 0.0, np.where(np.abs(a) < np.abs(b), a, b), 0.0)


def van_albada(a, b):
    ab = a * b
    return np.where(ab > 0.0, ab * (a + b) / (a * a + b * b + VAN_ALBADA_DELTA), 0.0)


def limiter(kind, a, b):
    """Limited slope from backward difference ``a`` and forward difference ``b``."""
    kind = LimiterKind(kind)
    out = minmod(a, b) if kind is LimiterKind.MINMOD else van_albada(a, b)
    return float(out) if np.ndim(out) == 0 else out


def _lim(kind: LimiterKind):
    return minmod if kind is LimiterKind.MINMOD else van_albada


# ---------------------------------------------------------- reconstruction

def _physical(W):
    d = W.shape[0] - 2
    return (W[0] > POSITIVITY_FLOOR) & (W[d + 1] > POSITIVITY_FLOOR)


def muscl_prim(Wm1, W0, Wp1, Wp2, kind):
    """Face states (WL, WR, n_fallback) from a 4-cell primitive stencil.

    Faces whose reconstructed states lose positivity fall back to the
    first-order states W0 / Wp1.
    """
    lim = _lim(LimiterKind(kind))
    WL = W0 + 0.5 * lim(W0 - Wm1, Wp1 - W0)
    WR = Wp1 - 0.5 * lim(Wp1 - W0, Wp2 - Wp1)
    ok = _physical(WL) & _physical(WR)
    nbad = int(ok.size - np.count_nonzero(ok))
    if nbad:
        WL = np.where(ok, WL, W0)
        WR = np.where(ok, WR, Wp1)
    return WL, WR, nbad


def muscl_states(qm1, q0, qp1, qp2, kind, gamma: float = 1.4):
    """Conservative face states left/right of the face between ``q0`` and ``qp1``."""
    Ws = [cons_to_prim(np.asarray(q, dtype=float), gamma) for q in (qm1, q0, qp1, qp2)]
    WL, WR, _ = muscl_prim(*Ws, kind)
    return prim_to_cons(WL, gamma), prim_to_cons(WR, gamma)


# ---------------------------------------------------------- numerical fluxes

def _split(W, axis, gamma):
    d = W.shape[0] - 2
    rho = W[0]
    u = W[1 + axis]
    p = W[d + 1]
    kin = W[1] * W[1]
    for k in range(2, d + 1):
        kin = kin + W[k] * W[k]
    H = gamma / (gamma - 1.0) * p / rho + 0.5 * kin
    return d, rho, u, p, H


def ausm_plus_prim(WL, WR, axis: int, gamma: float):
    """AUSM+ flux (Liou 1996) from primitive face states."""
    d, rL, uL, pL, HL = _split(WL, axis, gamma)
    _, rR, uR, pR, HR = _split(WR, axis, gamma)
    cfac = 2.0 * (gamma - 1.0) / (gamma + 1.0)
    csL = np.sqrt(cfac * HL)
    csR = np.sqrt(cfac * HR)
    ctL = csL * csL / np.maximum(csL, uL)
    ctR = csR * csR / np.maximum(csR, -uR)
    c = np.minimum(ctL, ctR)
    ML = uL / c
    MR = uR / c

    aL = np.abs(ML)
    aR = np.abs(MR)
    m2L = ML * ML - 1.0
    m2R = MR * MR - 1.0
    M4p = np.where(aL >= 1.0, 0.5 * (ML + aL), 0.25 * (ML + 1.0) * (ML + 1.0) + AUSM_BETA * m2L * m2L)
    M4m = np.where(aR >= 1.0, 0.5 * (MR - aR), -0.25 * (MR - 1.0) * (MR - 1.0) - AUSM_BETA * m2R * m2R)
    P5p = np.where(aL >= 1.0, np.where(ML > 0.0, 1.0, 0.0),
                   0.25 * (ML + 1.0) * (ML + 1.0) * (2.0 - ML) + AUSM_ALPHA * ML * m2L * m2L)
    P5m = np.where(aR >= 1.0, np.where(MR < 0.0, 1.0, 0.0),
                   0.25 * (MR - 1.0) * (MR - 1.0) * (2.0 + MR) - AUSM_ALPHA * MR * m2R * m2R)
    m = M4p + M4m
    ph = P5p * pL + P5m * pR
    mdp = c * 0.5 * (m + np.abs(m)) * rL
    mdm = c * 0.5 * (m - np.abs(m)) * rR

    F = np.empty_like(WL)
    F[0] = mdp + mdm
    for k in range(1, d + 1):
        F[k] = mdp * WL[k] + mdm * WR[k]
    F[1 + axis] = F[1 + axis] + ph
    F[d + 1] = mdp * HL + mdm * HR
    return F


def ausmdv_prim(WL, WR, axis: int, gamma: float):
    """AUSMDV flux (Wada & Liou 1997) from primitive face states."""
    d, rL, uL, pL, HL = _split(WL, axis, gamma)
    _, rR, uR, pR, HR = _split(WR, axis, gamma)
    cL = np.sqrt(gamma * pL / rL)
    cR = np.sqrt(gamma * pR / rR)
    cm = np.maximum(cL, cR)
    poL = pL / rL
    poR = pR / rR
    alL = 2.0 * poL / (poL + poR)
    alR = 2.0 * poR / (poL + poR)

    upL = 0.5 * (uL + np.abs(uL))
    umR = 0.5 * (uR - np.abs(uR))
    subL = np.abs(uL) <= cm
    subR = np.abs(uR) <= cm
    uLp = np.where(subL, alL * ((uL + cm) * (uL + cm) / (4.0 * cm) - upL) + upL, upL)
    uRm = np.where(subR, alR * (-(uR - cm) * (uR - cm) / (4.0 * cm) - umR) + umR, umR)

    ML = uL / cm
    MR = uR / cm
    with np.errstate(divide="ignore", invalid="ignore"):
        pLp = np.where(subL, pL * (ML + 1.0) * (ML + 1.0) * (2.0 - ML) * 0.25, pL * upL / uL)
        pRm = np.where(subR, pR * (MR - 1.0) * (MR - 1.0) * (2.0 + MR) * 0.25, pR * umR / uR)
    ph = pLp + pRm

    mL = rL * uLp
    mR = rR * uRm
    md = mL + mR
    amd = np.abs(md)

    mom_v = mL * uL + mR * uR
    mom_d = 0.5 * (md * (uL + uR) - amd * (uR - uL))
    s = 0.5 * np.minimum(1.0, AUSMDV_K * np.abs(pR - pL) / np.minimum(pL, pR))
    mom_n = (0.5 + s) * mom_v + (0.5 - s) * mom_d

    F = np.empty_like(WL)
    F[0] = md
    for k in range(1, d + 1):
        F[k] = 0.5 * (md * (WL[k] + WR[k]) - amd * (WR[k] - WL[k]))
    F[1 + axis] = mom_n + ph
    F[d + 1] = 0.5 * (md * (HL + HR) - amd * (HR - HL))
    return F


def numerical_flux_prim(kind, WL, WR, axis, gamma):
    if FluxKind(kind) is FluxKind.AUSM_PLUS:
        return ausm_plus_prim(WL, WR, axis, gamma)
    return ausmdv_prim(WL, WR, axis, gamma)


def _cons_pair(qL, qR, gamma):
    WL = cons_to_prim(np.asarray(qL, dtype=float), gamma)
    WR = cons_to_prim(np.asarray(qR, dtype=float), gamma)
    return WL, WR


def ausm_plus(qL, qR, axis: int, gamma: float = 1.4):
    """AUSM+ numerical flux between conserved states ``qL`` and ``qR``."""
    return ausm_plus_prim(*_cons_pair(qL, qR, gamma), axis, gamma)


def ausmdv(qL, qR, axis: int, gamma: float = 1.4):
    """AUSMDV numerical flux between conserved states ``qL`` and ``qR``."""
    return ausmdv_prim(*_cons_pair(qL, qR, gamma), axis, gamma)


def face_flux(Wm1, W0, Wp1, Wp2, axis: int, cfg: SchemeConfig, gamma: float):
    """MUSCL-reconstructed numerical flux at the face between W0 and Wp1."""
    WL, WR, nbad = muscl_prim(Wm1, W0, Wp1, Wp2, cfg.limiter_kind)
    return numerical_flux_prim(cfg.flux_kind, WL, WR, axis, gamma), nbad


# ------------------------------------------------------- MUSCL-Hancock pieces

def hancock_predict(U0, W0, Wm, Wp, coef, cfg: SchemeConfig, gamma: float):
    """Half-step boundary-extrapolated conservative states per cell.

    ``Wm[a]`` / ``Wp[a]`` are the primitive neighbors along axis ``a``;
    ``coef`` is ``0.5 * dt / dx``.  Returns ``(faces, n_fallback)`` where
    ``faces[a] = (U_minus, U_plus)`` are the states at the lower and upper
    face of each cell along axis ``a``.  The half-step uses the exact
    physical flux of the extrapolated states (no Riemann solve).
    """
    lim = _lim(LimiterKind(cfg.limiter_kind))
    d = len(Wm)
    ext = []
    ok = _physical(W0)
    for a in range(d):
        slope = lim(W0 - Wm[a], Wp[a] - W0)
        Wlo = W0 - 0.5 * slope
        Whi = W0 + 0.5 * slope
        ok = ok & _physical(Wlo) & _physical(Whi)
        ext.append((Wlo, Whi))
    div = None
    for a in range(d):
        Wlo, Whi = ext[a]
        diff = flux_from_prim(Whi, a, gamma) - flux_from_prim(Wlo, a, gamma)
        div = diff if div is None else div + diff
    dU = coef * div
    faces = []
    for a in range(d):
        Wlo, Whi = ext[a]
        Ulo = prim_to_cons(Wlo, gamma) - dU
        Uhi = prim_to_cons(Whi, gamma) - dU
        faces.append([Ulo, Uhi])
    for a in range(d):
        for Uf in faces[a]:
            p = _pressure_cons(Uf, gamma)
            ok = ok & (Uf[0] > POSITIVITY_FLOOR) & (p > POSITIVITY_FLOOR)
    nbad = int(ok.size - np.count_nonzero(ok))
    if nbad:
        for a in range(d):
            faces[a] = [np.where(ok, Uf, U0) for Uf in faces[a]]
    return faces, nbad


def _pressure_cons(U, gamma):
    d = U.shape[0] - 2
    kin = U[1] * U[1]
    for k in range(2, d + 1):
        kin = kin + U[k] * U[k]
    with np.errstate(divide="ignore", invalid="ignore"):
        return (gamma - 1.0) * (U[d + 1] - 0.5 * kin / U[0])


def hancock_face_flux(Uleft_hi, Uright_lo, axis, cfg: SchemeConfig, gamma: float):
    WL = cons_to_prim(Uleft_hi, gamma, check=False)
    WR = cons_to_prim(Uright_lo, gamma, check=False)
    return numerical_flux_prim(cfg.flux_kind, WL, WR, axis, gamma)


def conservative_update(U, div, coef):
    """``U - coef * div``; the single update formula shared by all solvers."""
    return U - coef * div


def check_update(U, gamma, where="cell"):
    p = _pressure_cons(U, gamma)
    bad = ~(U[0] > POSITIVITY_FLOOR) | ~(p > POSITIVITY_FLOOR)
    if np.any(bad):
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonPhysicalState(f"non-physical {where} after update (CFL violation?)", loc)


# ------------------------------------------------------- dense block drivers

@dataclass
class FluxField:
    """Numerical fluxes of one block: ``fluxes[a]`` has ``n + 1`` faces along ``a``."""

    fluxes: list
    fallbacks: int = 0

    def face_shape(self, axis: int):
        return self.fluxes[axis].shape[1:]


def _sizes(n, dim) -> tuple:
    return tuple(n) if np.ndim(n) else (int(n),) * dim


def _axis_slice(dim, g, n, axis, start):
    ns = _sizes(n, dim)
    sl = [slice(None)]
    for k in range(dim):
        if k == axis:
            sl.append(slice(start, start + ns[k] + 1))
        else:
            sl.append(slice(g, g + ns[k]))
    return tuple(sl)


def block_fluxes_muscl(Upad, dim, n, g, cfg, gamma) -> FluxField:
    """MUSCL fluxes on every interior-bounding face of a padded block.

    ``n`` is the interior size, an int or one size per axis.
    """
    W = cons_to_prim(Upad, gamma)
    out, nbad = [], 0
    for a in range(dim):
        st = [W[_axis_slice(dim, g, n, a, g - 2 + s)] for s in range(4)]
        F, nb = face_flux(st[0], st[1], st[2], st[3], a, cfg, gamma)
        out.append(F)
        nbad += nb
    return FluxField(out, nbad)


def flux_divergence(ff: FluxField, dim: int, n) -> np.ndarray:
    ns = _sizes(n, dim)
    div = None
    for a in range(dim):
        F = ff.fluxes[a]
        hi = [slice(None)] * (dim + 1)
        lo = [slice(None)] * (dim + 1)
        hi[a + 1] = slice(1, ns[a] + 1)
        lo[a + 1] = slice(0, ns[a])
        diff = F[tuple(hi)] - F[tuple(lo)]
        div = diff if div is None else div + diff
    return div


def block_fluxes_hancock(Upad, dim, n, g, dt, dx, cfg, gamma) -> FluxField:
    """MUSCL-Hancock corrector fluxes on a padded block (needs g >= 2)."""
    ns = _sizes(n, dim)
    W = cons_to_prim(Upad, gamma)
    box = (slice(None),) + tuple(slice(g - 1, g + m + 1) for m in ns)

    def shifted(a, s):
        sl = list(box)
        sl[a + 1] = slice(g - 1 + s, g + ns[a] + 1 + s)
        return W[tuple(sl)]

    Wm = [shifted(a, -1) for a in range(dim)]
    Wp = [shifted(a, +1) for a in range(dim)]
    faces, nbad = hancock_predict(Upad[box], W[box], Wm, Wp, 0.5 * dt / dx, cfg, gamma)
    out = []
    for a in range(dim):
        # predicted box has n + 2 cells per axis; faces between box cells i, i+1
        left = [slice(None)] + [slice(1, m + 1) for m in ns]
        right = list(left)
        left[a + 1] = slice(0, ns[a] + 1)
        right[a + 1] = slice(1, ns[a] + 2)
        Uhi = faces[a][1][tuple(left)]
        Ulo = faces[a][0][tuple(right)]
        out.append(hancock_face_flux(Uhi, Ulo, a, cfg, gamma))
    return FluxField(out, nbad)


def step_rk2(block: UniformGrid, dt: float, cfg: SchemeConfig, bc: BoundaryCondition):
    """Explicit midpoint RK2 step; returns ``(new_block, final_stage_fluxes)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    dim, n, g = block.dim, block.n, block.ghost
    dx = block.dx
    inner = (slice(None),) + (slice(g, g + n),) * dim
    U0 = block.U[inner].copy()

    fill_ghosts(block, bc)
    ff1 = block_fluxes_muscl(block.U, dim, n, g, cfg, block.gamma)
    div = flux_divergence(ff1, dim, n)
    mid = block.copy()
    mid.U[inner] = conservative_update(U0, div, (0.5 * dt) / dx)
    check_update(mid.U[inner], block.gamma, "stage-1 cell")

    fill_ghosts(mid, bc)
    ff2 = block_fluxes_muscl(mid.U, dim, n, g, cfg, block.gamma)
    div = flux_divergence(ff2, dim, n)
    new = block.copy()
    new.U[inner] = conservative_update(U0, div, dt / dx)
    check_update(new.U[inner], block.gamma)
    new.t = block.t + dt
    fill_ghosts(new, bc)
    ff2.fallbacks += ff1.fallbacks
    return new, ff2


def step_muscl_hancock(block: UniformGrid, dt: float, cfg: SchemeConfig, bc: BoundaryCondition):
    """MUSCL-Hancock step; returns ``(new_block, corrector_fluxes)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    dim, n, g = block.dim, block.n, block.ghost
    dx = block.dx
    inner = (slice(None),) + (slice(g, g + n),) * dim
    fill_ghosts(block, bc)
    ff = block_fluxes_hancock(block.U, dim, n, g, dt, dx, cfg, block.gamma)
    div = flux_divergence(ff, dim, n)
    new = block.copy()
    new.U[inner] = conservative_update(block.U[inner], div, dt / dx)
    check_update(new.U[inner], block.gamma)
    new.t = block.t + dt
    fill_ghosts(new, bc)
    return new, ff


def step(block, dt, cfg: SchemeConfig, bc):
    if cfg.integrator_kind is IntegratorKind.RK2:
        return step_rk2(block, dt, cfg, bc)
    return step_muscl_hancock(block, dt, cfg, bc)
