"""Block-structured adaptive mesh refinement with optional time refinement.

Each level owns a dense padded "canvas" covering the whole domain at that
level's resolution.  Patches are rectangular boxes whose cell data are views
into the canvas, so same-level ghost copies are free and every patch is
advanced with the same dense block kernels as the uniform solver.  Canvas
cells outside the patches near a patch (the halo) are refilled by
time-interpolated, slope-limited conservative interpolation from the coarser
level before every stage.
"""

from __future__ import annotations

import contextlib
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import masks as mk
from .euler import POSITIVITY_FLOOR, NonPhysicalState, cons_to_prim, pressure
from .grid import GHOST, BoundaryCondition, fill_ghosts_array, coarsen_mean
from .metrics import RunReport, TaskTimers
from .scheme import (FluxField, IntegratorKind, SchemeConfig, conservative_update, face_flux,
                     flux_divergence, hancock_face_flux, hancock_predict, minmod)


class NestingViolation(AssertionError):
    pass


class MissingBracketingStates(RuntimeError):
    pass


class TimeMismatch(RuntimeError):
    pass


class RegisterMismatch(RuntimeError):
    pass


# ----------------------------------------------------------------- boxes

@dataclass(frozen=True, order=True)
class Box:
    """Half-open integer index box ``[lower, upper)`` at one level."""

    lower: tuple
    upper: tuple
    level: int = 0

    def __post_init__(self):
        if len(self.lower) != len(self.upper) or any(u <= l for l, u in zip(self.lower, self.upper)):
            raise ValueError(f"empty or malformed box {self.lower}..{self.upper}")

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def shape(self) -> tuple:
        return tuple(u - l for l, u in zip(self.lower, self.upper))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def slices(self, offset: int = 0, grow: int = 0) -> tuple:
        return tuple(slice(l + offset - grow, u + offset + grow) for l, u in zip(self.lower, self.upper))

    def refine(self, r: int = 2) -> "Box":
        return Box(tuple(r * l for l in self.lower), tuple(r * u for u in self.upper), self.level + 1)

    def coarsen(self, r: int = 2) -> "Box":
        return Box(tuple(l // r for l in self.lower), tuple(-(-u // r) for u in self.upper), self.level - 1)

    def contains(self, other: "Box") -> bool:
        return all(a <= b for a, b in zip(self.lower, other.lower)) and \
            all(a >= b for a, b in zip(self.upper, other.upper))

    def intersects(self, other: "Box") -> bool:
        return all(max(a, c) < min(b, d) for a, b, c, d in
                   zip(self.lower, self.upper, other.lower, other.upper))


def boxes_mask(boxes, n: int, dim: int) -> np.ndarray:
    m = np.zeros((n,) * dim, dtype=bool)
    for b in boxes:
        m[b.slices()] = True
    return m


# ----------------------------------------------------------------- clustering

def _best_split(sig: np.ndarray):
    """Split position inside a signature (cells ``< pos`` go left), or None."""
    n = sig.size
    if n < 2:
        return None
    zeros = np.flatnonzero(sig[1:-1] == 0) + 1
    if zeros.size:
        # a hole closest to the middle
        k = zeros[np.argmin(np.abs(zeros - (n - 1) / 2.0))]
        return int(k)
    if n >= 4:
        lap = sig[:-2] - 2 * sig[1:-1] + sig[2:]
        jump = lap[:-1] * lap[1:] < 0
        if jump.any():
            idx = np.flatnonzero(jump)
            strength = np.abs(lap[idx + 1] - lap[idx])
            best = idx[strength == strength.max()]
            k = best[np.argmin(np.abs(best + 2 - n / 2.0))]
            return int(k) + 2
    return None


def cluster(flags: np.ndarray, eta_tol: float, level: int = 0, allowed: np.ndarray | None = None) -> list:
    """Signature-bisection clustering of a flag mask into disjoint boxes.

    Every returned box has a flagged fraction of at least ``eta_tol`` (or is a
    single cell) and lies inside ``allowed`` when given.
    """
    if not 0 < eta_tol <= 1:
        raise ValueError("eta_tol must lie in (0, 1]")
    flags = np.asarray(flags, dtype=bool)
    dim = flags.ndim
    out = []
    stack = [tuple(slice(0, s) for s in flags.shape)]
    while stack:
        region = stack.pop()
        sub = flags[region]
        if not sub.any():
            continue
        nz = [np.flatnonzero(sub.any(axis=tuple(k for k in range(dim) if k != a))) for a in range(dim)]
        lo = [region[a].start + int(nz[a][0]) for a in range(dim)]
        hi = [region[a].start + int(nz[a][-1]) + 1 for a in range(dim)]
        tight = tuple(slice(l, h) for l, h in zip(lo, hi))
        sub = flags[tight]
        eff = np.count_nonzero(sub) / sub.size
        inside = allowed is None or bool(allowed[tight].all())
        if (eff >= eta_tol and inside) or sub.size == 1:
            out.append(Box(tuple(lo), tuple(hi), level))
            continue
        cut = None
        for a in np.argsort([-(h - l) for l, h in zip(lo, hi)], kind="stable"):
            sig = sub.sum(axis=tuple(k for k in range(dim) if k != a))
            k = _best_split(sig)
            if k is not None:
                cut = (int(a), k)
                break
        if cut is None:
            a = int(np.argmax([h - l for l, h in zip(lo, hi)]))
            cut = (a, (hi[a] - lo[a]) // 2)
        a, k = cut
        left, right = list(tight), list(tight)
        left[a] = slice(lo[a], lo[a] + k)
        right[a] = slice(lo[a] + k, hi[a])
        stack.append(tuple(right))
        stack.append(tuple(left))
    return sorted(out)


def box_efficiency(box: Box, flags: np.ndarray) -> float:
    return float(np.count_nonzero(flags[box.slices()])) / box.size


# ----------------------------------------------------------------- flagging

def flag_cells(U: np.ndarray, eps_rho: float, eps_p: float, gamma: float = 1.4,
               ghost: int = 0, buffer: int = 1, periodic=None) -> np.ndarray:
    """Scaled-gradient flags on density and pressure plus a buffer layer.

    A cell is flagged when ``|w(i + alpha) - w(i)| > eps_w`` for any forward
    offset ``alpha`` in ``{0, 1}^d \\ {0}``; both cells of the pair are
    flagged.  ``U`` may carry ``ghost`` layers so forward partners at the upper
    boundary are available.  Returns a mask over the unpadded cells.
    """
    dim = U.ndim - 1
    periodic = periodic or (False,) * dim
    with np.errstate(divide="ignore", invalid="ignore"):
        fields = [(U[0], eps_rho), (pressure(U, gamma), eps_p)]
    n = tuple(s - 2 * ghost for s in U.shape[1:])
    ext = tuple(m + 2 for m in n)  # cells -1 .. n of the interior frame
    pair = np.zeros(ext, dtype=bool)
    for w, eps in fields:
        if ghost:
            frame = w[tuple(slice(ghost - 1, ghost + m + 1) for m in n)]
        else:
            frame = np.pad(w, 1, mode="edge")
        for alpha in np.ndindex(*(2,) * dim):
            if not any(alpha):
                continue
            base = tuple(slice(0, m + 2 - o) for m, o in zip(n, alpha))
            part = tuple(slice(o, m + 2) for m, o in zip(n, alpha))
            with np.errstate(invalid="ignore"):
                hot = np.abs(frame[part] - frame[base]) > eps
            pair[base] |= hot
            pair[part] |= hot
    flags = pair[tuple(slice(1, m + 1) for m in n)].copy()
    if buffer:
        flags = mk.dilate_box(flags, buffer, periodic)
    return flags


# ----------------------------------------------------------------- interpolation

def _coarse_stencil(Cpad: np.ndarray, fine_idx, g: int):
    """Gather coarse parent values and axis neighbors for fine cell indices."""
    dim = Cpad.ndim - 1
    nv = Cpad.shape[0]
    shape = Cpad.shape[1:]
    pc = tuple(i // 2 + g for i in fine_idx)
    flat = np.ravel_multi_index(pc, shape)
    C = Cpad.reshape(nv, -1)
    strides = [int(np.prod(shape[a + 1:])) for a in range(dim)]
    Q0 = C[:, flat]
    nb = [(C[:, flat - s], C[:, flat + s]) for s in strides]
    return Q0, nb


def prolong_cells(Cpad: np.ndarray, fine_idx, g: int = GHOST, Cpad_new: np.ndarray | None = None,
                  theta: float = 0.0) -> np.ndarray:
    """Minmod-limited conservative linear interpolation at selected fine cells.

    ``Cpad`` is the padded coarse canvas; with ``Cpad_new`` the coarse data
    are first interpolated linearly in time with weight ``theta``.
    """
    Q0, nb = _coarse_stencil(Cpad, fine_idx, g)
    if Cpad_new is not None and theta != 0.0:
        R0, rnb = _coarse_stencil(Cpad_new, fine_idx, g)
        Q0 = Q0 + theta * (R0 - Q0)
        nb = [(m + theta * (rm - m), p + theta * (rp - p)) for (m, p), (rm, rp) in zip(nb, rnb)]
    val = Q0.copy()
    for a, (Qm, Qp) in enumerate(nb):
        slope = minmod(Q0 - Qm, Qp - Q0)
        sign = np.where(fine_idx[a] % 2 == 0, -0.25, 0.25)
        val += sign * slope
    return val


def prolong_level(Cpad: np.ndarray, g: int = GHOST) -> np.ndarray:
    """Interpolate an entire padded coarse canvas to the unpadded finer level."""
    dim = Cpad.ndim - 1
    n = Cpad.shape[1] - 2 * g
    idx = np.indices((2 * n,) * dim).reshape(dim, -1)
    vals = prolong_cells(Cpad, tuple(idx), g)
    return vals.reshape((Cpad.shape[0],) + (2 * n,) * dim)


# ----------------------------------------------------------------- hierarchy

@dataclass
class Patch:
    """A box and a view of its cells in the level canvas."""

    box: Box
    data: np.ndarray = field(repr=False)
    ghost: int = GHOST
    t: float = 0.0


@dataclass
class PatchHierarchy:
    dim: int
    base_level: int
    max_levels: int
    lower: tuple
    upper: tuple
    bc: BoundaryCondition
    eps_rho: float
    eps_p: float
    eta_tol: float = 0.8
    gamma: float = 1.4
    ghost: int = GHOST
    t: float = 0.0
    canvas: list = field(default_factory=list)
    patches: list = field(default_factory=list)
    flux_correction: bool = True
    timers: TaskTimers | None = field(default=None, repr=False)
    _masks: dict = field(default_factory=dict, repr=False, compare=False)
    _stencils: dict = field(default_factory=dict, repr=False, compare=False)

    # -- geometry
    def absolute_level(self, lev: int) -> int:
        return self.base_level + lev

    def n(self, lev: int) -> int:
        return 2 ** (self.base_level + lev)

    def dx(self, lev: int) -> float:
        return (self.upper[0] - self.lower[0]) / self.n(lev)

    @property
    def periodic(self) -> tuple:
        return tuple(self.bc.periodic(a) for a in range(self.dim))

    @property
    def num_levels(self) -> int:
        k = 0
        while k < len(self.patches) and self.patches[k]:
            k += 1
        return k

    @property
    def finest(self) -> int:
        return self.num_levels - 1

    def interior(self, lev: int) -> tuple:
        g = self.ghost
        return (slice(None),) + (slice(g, g + self.n(lev)),) * self.dim

    def level_data(self, lev: int) -> np.ndarray:
        return self.canvas[lev][self.interior(lev)]

    def patch_mask(self, lev: int) -> np.ndarray:
        if lev >= len(self.patches):
            return np.zeros((self.n(lev),) * self.dim, dtype=bool)
        return self._cached("patch", lev, lambda: boxes_mask(self.boxes(lev), self.n(lev), self.dim))

    def _cached(self, kind: str, lev: int, make):
        key = (kind, lev)
        if key not in self._masks:
            m = make()
            m.flags.writeable = False
            self._masks[key] = m
        return self._masks[key]

    def covered_mask(self, lev: int) -> np.ndarray:
        """Cells of ``lev`` covered by the next finer level."""
        if lev + 1 >= self.num_levels:
            return np.zeros((self.n(lev),) * self.dim, dtype=bool)
        return self._cached("covered", lev, lambda: mk.parent_any(self.patch_mask(lev + 1)))

    def uncovered_mask(self, lev: int) -> np.ndarray:
        return self._cached("uncovered", lev, lambda: self.patch_mask(lev) & ~self.covered_mask(lev))

    def halo_mask(self, lev: int) -> np.ndarray:
        """Non-patch cells within the ghost width of a patch of ``lev``."""
        def make():
            pm = self.patch_mask(lev)
            return mk.dilate_box(pm, self.ghost, self.periodic) & ~pm
        return self._cached("halo", lev, make)

    def n_cells(self) -> int:
        return int(sum(p.box.size for lvl in self.patches for p in lvl))

    def n_leaves(self) -> int:
        return int(sum(np.count_nonzero(self.uncovered_mask(k)) for k in range(self.num_levels)))

    def boxes(self, lev: int) -> list:
        return [p.box for p in self.patches[lev]] if lev < len(self.patches) else []

    def set_boxes(self, lev: int, boxes) -> None:
        while len(self.patches) <= lev:
            self.patches.append([])
        boxes = sorted(boxes)
        if boxes == self.boxes(lev):
            return
        g = self.ghost
        self.patches[lev] = [Patch(b, self.canvas[lev][(slice(None),) + b.slices(offset=g)], g, self.t)
                             for b in boxes]
        # masks of this level and the covered masks of the level below are stale
        for key in [k for k in self._masks if k[1] in (lev - 1, lev)]:
            del self._masks[key]
        self._stencils.pop(lev, None)

    def stencil(self, lev: int) -> "LevelStencil":
        if lev not in self._stencils:
            self._stencils[lev] = LevelStencil(self, lev)
        return self._stencils[lev]

    def check_nesting(self) -> None:
        per = self.periodic
        for k in range(1, self.num_levels):
            allowed = mk.children(_allowed(self.patch_mask(k - 1), per))
            if np.any(self.patch_mask(k) & ~allowed):
                raise NestingViolation(f"level {k} not properly nested in level {k - 1}")
            masks = [boxes_mask([b], self.n(k), self.dim) for b in self.boxes(k)]
            if masks and np.any(np.sum(masks, axis=0) > 1):
                raise NestingViolation(f"overlapping patches at level {k}")

    def totals(self) -> np.ndarray:
        """Domain integrals of the composite (uncovered) solution."""
        tot = np.zeros(self.dim + 2)
        for k in range(self.num_levels):
            m = self.uncovered_mask(k)
            tot += self.level_data(k)[:, m].sum(axis=1) * self.dx(k) ** self.dim
        return tot

    def composite(self, lev: int | None = None) -> np.ndarray:
        """Uniform array at level ``lev``: finer data averaged down, coarser data injected."""
        lev = self.finest if lev is None else lev
        A = self.level_data(0).copy()
        for k in range(1, lev + 1):
            A = np.repeat(A, 2, axis=1)
            for a in range(2, self.dim + 1):
                A = np.repeat(A, 2, axis=a)
            if k < self.num_levels:
                m = self.patch_mask(k)
                A[:, m] = self.level_data(k)[:, m]
        return A

    def _timed(self, group: str):
        return self.timers(group) if self.timers is not None else contextlib.nullcontext()


def _allowed(mask: np.ndarray, periodic) -> np.ndarray:
    """Coarse cells that may be refined: the level domain eroded by one cell.

    Cells outside the physical domain count as inside, so refinement may
    touch the domain boundary.
    """
    return mk.erode_box(mask, 1, periodic)


# ----------------------------------------------------------------- ghosts

class _LevelState:
    """Bracketing canvases of a level during its step (for time interpolation)."""

    def __init__(self, old, t_old, new=None, t_new=None):
        self.old, self.t_old, self.new, self.t_new = old, t_old, new, t_new


def sync_ghosts(h: PatchHierarchy, lev: int, t: float, states: dict | None = None,
                halo: np.ndarray | None = None) -> None:
    """Fill the halo of level ``lev`` at time ``t`` and apply physical boundaries.

    Same-level neighbors need no copy (they share the canvas).  Halo cells
    are interpolated from the coarser level, linearly in time between its
    bracketing states when it is mid-step; then the domain ghosts are set.
    """
    g = h.ghost
    if lev > 0:
        halo = h.halo_mask(lev) if halo is None else halo
        if halo.any():
            idx = np.nonzero(halo)
            st = (states or {}).get(lev - 1)
            coarse = h.canvas[lev - 1]
            if st is not None and st.new is not None and not np.isclose(t, st.t_new, rtol=0, atol=1e-14):
                if not (st.t_old - 1e-14 <= t <= st.t_new + 1e-14):
                    raise MissingBracketingStates(f"t={t} outside [{st.t_old}, {st.t_new}] at level {lev - 1}")
                theta = (t - st.t_old) / (st.t_new - st.t_old)
                vals = prolong_cells(st.old, idx, g, st.new, theta)
            elif st is not None and st.new is None and not np.isclose(t, st.t_old, rtol=0, atol=1e-14):
                raise MissingBracketingStates(f"no end state of level {lev - 1} for t={t}")
            else:
                vals = prolong_cells(coarse, idx, g)
            inner = h.canvas[lev][h.interior(lev)]
            inner[(slice(None),) + idx] = vals
    fill_ghosts_array(h.canvas[lev], h.bc, g)


# ----------------------------------------------------------------- remesh

def remesh(h: PatchHierarchy, lev: int, init_fn=None, states: dict | None = None) -> None:
    """Regrid every level above ``lev`` from flags; level ``lev`` is untouched.

    New boxes are built from the finest candidate level down, adding the
    coarse footprint of the finer new boxes to the flags; a final top-down
    pass enforces proper nesting.  Cells already refined keep their data,
    others are interpolated from the coarser level (or sampled from
    ``init_fn(level, index_box)`` while building the initial hierarchy).
    """
    per = h.periodic
    top = h.max_levels - 1
    if lev >= top:
        return
    with h._timed("adaptation"):
        cboxes = {}  # new boxes of level k+1, in level-k indices
        for k in range(top - 1, lev - 1, -1):
            if k >= h.num_levels:
                continue
            domain = h.patch_mask(k)
            flags = flag_cells(h.canvas[k], h.eps_rho, h.eps_p, h.gamma, h.ghost, 1, per) & domain
            if cboxes.get(k + 1):
                foot = mk.parent_any(boxes_mask(cboxes[k + 1], h.n(k + 1), h.dim))
                flags |= mk.dilate_box(foot, 1, per)
            allowed = _allowed(domain, per)
            cboxes[k] = cluster(flags & allowed, h.eta_tol, k, allowed)
        # top-down nesting against the new coarser level
        for k in range(lev + 1, top):
            if not cboxes.get(k):
                break
            below = mk.children(boxes_mask(cboxes[k - 1], h.n(k - 1), h.dim))
            allowed = _allowed(below, per)
            m = boxes_mask(cboxes[k], h.n(k), h.dim)
            if np.any(m & ~allowed):
                cboxes[k] = cluster(m & allowed, 1.0, k)
    with h._timed("transfer"):
        old_masks = {k: h.patch_mask(k) for k in range(lev + 1, h.num_levels)}
        for k in range(lev, top):
            fine = k + 1
            if not cboxes.get(k):
                for j in range(fine, len(h.patches)):
                    h.set_boxes(j, [])
                break
            boxes = [b.refine() for b in cboxes[k]]
            new_mask = boxes_mask(boxes, h.n(fine), h.dim)
            fresh = new_mask & ~old_masks.get(fine, np.zeros_like(new_mask))
            if fresh.any():
                idx = np.nonzero(fresh)
                inner = h.canvas[fine][h.interior(fine)]
                if init_fn is not None:
                    inner[(slice(None),) + idx] = init_fn(h.absolute_level(fine))[(slice(None),) + idx]
                else:
                    inner[(slice(None),) + idx] = prolong_cells(h.canvas[k], idx, h.ghost)
            h.set_boxes(fine, boxes)
            sync_ghosts(h, fine, h.t, states)


# ----------------------------------------------------------------- stepping

class LevelStencil:
    """Flat gather indices for advancing all patches of one level at once.

    Indices point into the flattened padded canvas.  ``cells`` are the patch
    cells, ``ring`` adds one cell along each axis (Hancock predictor cells),
    ``reach`` two cells (all primitive values any face stencil touches).
    Faces along axis ``a`` are listed by their left cell and cover every
    face of every patch cell.
    """

    def __init__(self, h: "PatchHierarchy", lev: int):
        d, g, n = h.dim, h.ghost, h.n(lev)
        shape = (n + 2 * g,) * d
        Pp = np.zeros(shape, dtype=bool)
        Pp[(slice(g, g + n),) * d] = h.patch_mask(lev)
        flat = (False,) * d
        self.cells = np.flatnonzero(Pp)
        ring_mask = mk.dilate_axes(Pp, 1, flat)
        ring = np.flatnonzero(ring_mask)
        # predictor cells need their own axis neighbors, face stencils two cells
        reach = np.flatnonzero(mk.dilate_axes(Pp, 2, flat) | mk.dilate_axes(ring_mask, 1, flat))
        size = int(np.prod(shape))
        pos = np.full(size, -1, dtype=np.intp)
        pos[reach] = np.arange(reach.size)
        pos_ring = np.full(size, -1, dtype=np.intp)
        pos_ring[ring] = np.arange(ring.size)
        self.strides = [int(np.prod(shape[a + 1:])) for a in range(d)]
        self.reach = reach
        self.ring = ring
        self.ring_w = pos[ring]
        self.ring_m = [pos[ring - s] for s in self.strides]
        self.ring_p = [pos[ring + s] for s in self.strides]
        self.face_left, self.face_ring, self.face_w, self.div_hi, self.div_lo, self.dense = [], [], [], [], [], []
        coords_shape = (n,) * d
        Pflat = Pp.reshape(-1)
        pos_left = np.empty(size, dtype=np.intp)
        for a, s in enumerate(self.strides):
            # faces are keyed by their left cell: a patch cell or its left neighbor
            has_face = Pflat.copy()
            has_face[:-s] |= Pflat[s:]
            left = np.flatnonzero(has_face)
            self.face_left.append(left)
            self.face_ring.append((pos_ring[left], pos_ring[left + s]))
            self.face_w.append(tuple(pos[left + k * s] for k in (-1, 0, 1, 2)))
            pos_left[left] = np.arange(left.size)
            self.div_hi.append(pos_left[self.cells])
            self.div_lo.append(pos_left[self.cells - s])
            c = list(np.unravel_index(left, shape))
            c = [ci - g for ci in c]
            c[a] = c[a] + 1
            fshape = list(coords_shape)
            fshape[a] = n + 1
            self.dense.append((tuple(fshape), np.ravel_multi_index(tuple(c), tuple(fshape))))
        lookups = [self.ring_w, *self.ring_m, *self.ring_p]
        lookups += [k for a in range(d) for k in self.face_ring[a] + self.face_w[a]]
        if any(np.any(k < 0) for k in lookups):
            raise AssertionError("stencil cell outside the gathered set")

    def fluxes(self, Uflat, dt, dx, cfg: SchemeConfig, gamma: float):
        """Face fluxes per axis (flat lists matching ``face_left``) and fallback count."""
        W = cons_to_prim(Uflat[:, self.reach], gamma)
        d = len(self.strides)
        out, nbad = [], 0
        if cfg.integrator_kind is IntegratorKind.RK2:
            for a in range(d):
                st = [W[:, k] for k in self.face_w[a]]
                F, nb = face_flux(st[0], st[1], st[2], st[3], a, cfg, gamma)
                out.append(F)
                nbad += nb
            return out, nbad
        W0 = W[:, self.ring_w]
        Wm = [W[:, k] for k in self.ring_m]
        Wp = [W[:, k] for k in self.ring_p]
        faces, nbad = hancock_predict(Uflat[:, self.ring], W0, Wm, Wp, 0.5 * dt / dx, cfg, gamma)
        for a in range(d):
            lft, rgt = self.face_ring[a]
            out.append(hancock_face_flux(faces[a][1][:, lft], faces[a][0][:, rgt], a, cfg, gamma))
        return out, nbad

    def divergence(self, F) -> np.ndarray:
        div = None
        for a in range(len(F)):
            diff = F[a][:, self.div_hi[a]] - F[a][:, self.div_lo[a]]
            div = diff if div is None else div + diff
        return div

    def dense_faces(self, F, nv: int) -> list:
        out = []
        for a, (fshape, idx) in enumerate(self.dense):
            D = np.zeros((nv,) + fshape)
            D.reshape(nv, -1)[:, idx] = F[a]
            out.append(D)
        return out


def _check_cells(U, h, lev, cells):
    p = pressure(U, h.gamma)
    bad = ~(U[0] > POSITIVITY_FLOOR) | ~(p > POSITIVITY_FLOOR)
    if np.any(bad):
        g, n = h.ghost, h.n(lev)
        idx = np.unravel_index(cells[np.argmax(bad)], (n + 2 * g,) * h.dim)
        cell = tuple(int(i) - g for i in idx)
        box = next((pt.box for pt in h.patches[lev]
                    if all(l <= c < u for l, c, u in zip(pt.box.lower, cell, pt.box.upper))), None)
        raise NonPhysicalState(f"non-physical cell at level {lev}, patch {box}, cell {cell}", (lev, box, cell))


def update_level(h: PatchHierarchy, lev: int, t: float, dt: float, cfg: SchemeConfig,
                 states: dict | None = None, store_fluxes: bool = False):
    """Advance every patch of ``lev`` by ``dt``; returns dense face fluxes and fallbacks.

    Assumes the halo is filled at ``t``.  For the two-stage integrator the
    halo is refilled at ``t + dt/2`` between the stages.
    """
    dx = h.dx(lev)
    nv = h.dim + 2
    st = h.stencil(lev)
    Uflat = h.canvas[lev].reshape(nv, -1)
    U0 = Uflat[:, st.cells]
    nbad = 0
    if cfg.integrator_kind is IntegratorKind.RK2:
        with h._timed("numerics"):
            F, nb = st.fluxes(Uflat, dt, dx, cfg, h.gamma)
            nbad += nb
            mid = conservative_update(U0, st.divergence(F), (0.5 * dt) / dx)
            _check_cells(mid, h, lev, st.cells)
            Uflat[:, st.cells] = mid
        with h._timed("boundary"):
            sync_ghosts(h, lev, t + 0.5 * dt, states)
    with h._timed("numerics"):
        F, nb = st.fluxes(Uflat, dt, dx, cfg, h.gamma)
        nbad += nb
        new = conservative_update(U0, st.divergence(F), dt / dx)
        _check_cells(new, h, lev, st.cells)
        Uflat[:, st.cells] = new
        for p in h.patches[lev]:
            p.t = t + dt
    dense = None
    if store_fluxes:
        with h._timed("transfer"):
            dense = st.dense_faces(F, nv)
    return dense, nbad


def average_down(h: PatchHierarchy, lev: int) -> None:
    """Overwrite covered cells of ``lev`` with the mean of their level ``lev+1`` children."""
    if lev + 1 >= h.num_levels:
        return
    fine_t = {p.t for p in h.patches[lev + 1]}
    coarse_t = {p.t for p in h.patches[lev]}
    if len(fine_t | coarse_t) > 1 and not np.allclose(list(fine_t | coarse_t), max(fine_t | coarse_t),
                                                      rtol=0, atol=1e-12):
        raise TimeMismatch(f"levels {lev} and {lev + 1} are not synchronized")
    cov = h.covered_mask(lev)
    avg = coarsen_mean(h.level_data(lev + 1), h.dim)
    inner = h.level_data(lev)
    inner[:, cov] = avg[:, cov]


def _interface_faces(h: PatchHierarchy, lev: int, covered: np.ndarray) -> list:
    out = []
    per = h.periodic
    codes = covered.astype(np.int8)
    for a in range(h.dim):
        L, R = mk.face_codes(codes, a, per[a], 2)
        out.append(((L == 0) & (R == 1)) | ((L == 1) & (R == 0)))
    return out


def flux_correct(h: PatchHierarchy, lev: int, dt: float, coarse_F: list, fine_acc: list) -> None:
    """Replace coarse fluxes by accumulated fine fluxes at coarse/fine interfaces.

    ``fine_acc`` holds the time-weighted fine face fluxes (dense at level
    ``lev+1``); uncovered coarse cells next to the interface get
    ``dt/dx * (F_coarse - F_fine)`` with the sign of their side.
    """
    if coarse_F is None or fine_acc is None:
        raise RegisterMismatch(f"missing flux register contributions at level {lev}")
    covered = h.covered_mask(lev)
    faces = _interface_faces(h, lev, covered)
    delta = []
    for a in range(h.dim):
        R = mk.restrict_faces(fine_acc[a], a)
        delta.append(np.where(faces[a], R - coarse_F[a], 0.0))
    div = flux_divergence(FluxField(delta), h.dim, h.n(lev))
    fix = h.uncovered_mask(lev)
    inner = h.level_data(lev)
    inner[:, fix] -= (dt / h.dx(lev)) * div[:, fix]


class _Driver:
    def __init__(self, h: PatchHierarchy, cfg: SchemeConfig, dt_finest: float, time_refined: bool,
                 report: RunReport | None):
        self.h, self.cfg, self.dt, self.lt, self.report = h, cfg, dt_finest, time_refined, report
        self.states = {}
        self.fallbacks = 0

    def dt_level(self, lev: int) -> float:
        if not self.lt:
            return self.dt
        return self.dt * 2 ** (self.h.max_levels - 1 - lev)

    def advance(self, lev: int, t: float, remesh_due: bool):
        """One step of ``lev`` (and the finer levels inside it); returns dense fluxes."""
        h = self.h
        dt = self.dt_level(lev)
        with h._timed("boundary"):
            sync_ghosts(h, lev, t, self.states)
        if remesh_due and lev < h.max_levels - 1:
            h.t = t
            remesh(h, lev, states=self.states)
        has_fine = lev + 1 < h.num_levels
        if has_fine:
            self.states[lev] = _LevelState(h.canvas[lev].copy(), t)
        F, nb = update_level(h, lev, t, dt, self.cfg, self.states, store_fluxes=lev > 0 or has_fine)
        self.fallbacks += nb
        if has_fine:
            with h._timed("boundary"):
                st = self.states[lev]
                sync_ghosts(h, lev, t + dt, self.states)
                st.new, st.t_new = h.canvas[lev], t + dt
            r = 2 if self.lt else 1
            dtf = self.dt_level(lev + 1)
            acc = None
            for k in range(r):
                Ff = self.advance(lev + 1, t + k * dtf, remesh_due=self.lt and k > 0)
                with h._timed("transfer"):
                    w = dtf / dt
                    if acc is None:
                        # a single substep of equal length needs no scaled copy
                        acc = list(Ff) if r == 1 else [w * f for f in Ff]
                    else:
                        for a in range(h.dim):
                            acc[a] += w * Ff[a]
            del self.states[lev]
            with h._timed("transfer"):
                if h.flux_correction:
                    flux_correct(h, lev, dt, F, acc)
                average_down(h, lev)
        elif self.report is not None:
            self.report.record(h.n_cells(), h.n_leaves(), dt / self.dt)
        return F


def advance_level(h: PatchHierarchy, lev: int, dt_finest: float, cfg: SchemeConfig,
                  time_refined: bool = True, report: RunReport | None = None) -> int:
    """Advance the hierarchy by one step of level ``lev`` (normally 0); returns fallbacks."""
    drv = _Driver(h, cfg, dt_finest, time_refined, report)
    t0 = h.t
    drv.advance(lev, t0, remesh_due=True)
    h.t = t0 + drv.dt_level(lev)
    return drv.fallbacks


# ----------------------------------------------------------------- construction

def build_hierarchy(case, L: int, base_level: int | None = None, eps_rho: float | None = None,
                    eps_p: float | None = None, eta_tol: float | None = None,
                    bc: BoundaryCondition | None = None, flux_correction: bool = True,
                    init_fn=None) -> PatchHierarchy:
    """Initial hierarchy from the case's initial condition, refined up to level ``L``."""
    base = amr_base_level(case, L) if base_level is None else base_level
    if base > L:
        raise ValueError(f"base level {base} above finest level {L}")
    dim = case.dim
    h = PatchHierarchy(dim, base, L - base + 1, tuple(case.lower), tuple(case.upper), bc or case.bc,
                       case.amr_eps_rho if eps_rho is None else eps_rho,
                       case.amr_eps_p if eps_p is None else eps_p,
                       case.eta_tol if eta_tol is None else eta_tol, case.gamma,
                       flux_correction=flux_correction)
    g = h.ghost
    for k in range(h.max_levels):
        n = h.n(k)
        h.canvas.append(np.zeros((dim + 2,) + (n + 2 * g,) * dim))
    init_fn = init_fn or (lambda level: case.initial_cells(level))
    h.canvas[0][h.interior(0)] = init_fn(base)
    h.set_boxes(0, [Box((0,) * dim, (h.n(0),) * dim, 0)])
    fill_ghosts_array(h.canvas[0], h.bc, g)
    for k in range(1, h.max_levels):
        # background values keep the whole canvas physical
        h.canvas[k][h.interior(k)] = prolong_level(h.canvas[k - 1], g)
        fill_ghosts_array(h.canvas[k], h.bc, g)
    cache = {}

    def sampled(level):
        if level not in cache:
            cache[level] = init_fn(level)
        return cache[level]

    for _ in range(h.max_levels):
        remesh(h, 0, init_fn=sampled)
    return h


def amr_base_level(case, L: int) -> int:
    """Absolute level of the AMR base mesh for a finest level ``L``."""
    return min(case.amr_base_level, L)


# ----------------------------------------------------------------- snapshot

HIER_MAGIC = b"AFVHIER\0"


def encode_hierarchy(h: PatchHierarchy) -> bytes:
    """Per-level box lists and per-patch float64 payloads, lexicographic order."""
    out = [HIER_MAGIC, struct.pack("<IIIId", 1, h.dim, h.base_level, h.num_levels, h.t)]
    for k in range(h.num_levels):
        boxes = sorted(h.boxes(k))
        out.append(struct.pack("<I", len(boxes)))
        for b in boxes:
            out.append(struct.pack(f"<{2 * h.dim}i", *b.lower, *b.upper))
            data = h.level_data(k)[(slice(None),) + b.slices()]
            out.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(out)


def hierarchy_summary(h: PatchHierarchy) -> str:
    lines = [f"# hierarchy dim={h.dim} base_level={h.base_level} levels={h.num_levels} t={h.t!r}"]
    for k in range(h.num_levels):
        for b in sorted(h.boxes(k)):
            lines.append(f"{k} {' '.join(map(str, b.lower))} {' '.join(map(str, b.upper))}")
    return "\n".join(lines) + "\n"


def write_hierarchy_snapshot(path, h: PatchHierarchy) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_hierarchy(h))


# ----------------------------------------------------------------- driver

def run_amr(case, L: int, N_I: int | None = None, lt: bool = False, cfg: SchemeConfig | None = None,
            eps_rho: float | None = None, eps_p: float | None = None, eta_tol: float | None = None,
            base_level: int | None = None, bc: BoundaryCondition | None = None,
            flux_correction: bool = True, nesting_checks: bool = False, callback=None):
    """Run AMR (global step) or AMRLT (``lt=True``) for ``N_I`` finest-level steps.

    ``callback(step, hierarchy)`` runs after every base-level step.
    """
    cfg = cfg or SchemeConfig.amr_preset()
    N_I = N_I or case.n_steps(L)
    dt = case.t_end / N_I
    timers = TaskTimers()
    report = RunReport("AMRLT" if lt else "AMR", case.name, L, N_I, scheme=cfg.tag,
                       n_cells_uniform=(2**L) ** case.dim)
    t_start = time.perf_counter()
    h = build_hierarchy(case, L, base_level, eps_rho, eps_p, eta_tol, bc, flux_correction)
    h.timers = timers
    report.extras.update(base_level=h.base_level, eps_rho=h.eps_rho, eps_p=h.eps_p, eta_tol=h.eta_tol)
    ratio = 2 ** (h.max_levels - 1) if lt else 1
    if N_I % ratio:
        raise ValueError(f"N_I={N_I} is not a multiple of the coarse step ratio {ratio}")
    for _ in range(N_I // ratio):
        report.fallbacks += advance_level(h, 0, dt, cfg, lt, report)
        if nesting_checks:
            h.check_nesting()
        if callback is not None:
            callback(round(h.t / dt), h)
    report.wall_s = time.perf_counter() - t_start
    report.timers = dict(timers.totals)
    h.t = case.t_end
    return h, report
