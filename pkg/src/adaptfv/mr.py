"""Adaptive multiresolution solver on a graded tree of cell averages.

Every level ``l`` of the tree is stored as a dense array of averages plus an
``exists`` mask.  A node is a leaf when it exists and has no children,
internal when its ``2^d`` children exist, and non-existing positions are
filled on demand by recursive prediction from the coarser level (these are the
virtual leaves whenever a flux stencil reaches them).  Keeping whole levels
dense lets every flux, prediction and detail evaluation run as one vectorized
call, while the work still scales with the number of faces that touch leaves.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import masks as mk
from .euler import cons_to_prim, pressure, NonPhysicalState, POSITIVITY_FLOOR
from .grid import GHOST, BoundaryCondition, LevelMismatch, UniformGrid, coarsen_mean, fill_ghosts_array
from .metrics import RunReport, TaskTimers
from .scheme import SchemeConfig, conservative_update, face_flux, flux_divergence, FluxField

LEAF, INTERNAL, VIRTUAL = "Leaf", "Internal", "VirtualLeaf"
_V, _LEAF, _INT, _GHOST = 0, 1, 2, 3
STENCIL_REACH = 2


class GradednessError(AssertionError):
    pass


# ----------------------------------------------------------------- transforms

def project(children: np.ndarray) -> np.ndarray:
    """Parent average from a ``(nvar, 2, ..., 2)`` block of child averages."""
    d = children.ndim - 1
    return children.mean(axis=tuple(range(1, d + 1)))


BOUNDARY_PREDICTIONS = ("copy", "quadratic")


def predict(Qc: np.ndarray, periodic=None, boundary: str = "copy") -> np.ndarray:
    """Third-order prediction of a complete level onto the next finer level.

    Applies the 1D rule ``child = Q -/+ (Q[i+1] - Q[i-1]) / 8`` axis by axis,
    which yields the tensor-product stencil.  On non-periodic axes the missing
    boundary neighbor is a copy of the boundary cell (``"copy"``, matching
    outflow ghosts) or the quadratic extrapolation through the three outermost
    averages (``"quadratic"``, exact for degree <= 2 up to the boundary).
    """
    if boundary not in BOUNDARY_PREDICTIONS:
        raise ValueError(f"unknown boundary prediction {boundary!r}")
    d = Qc.ndim - 1
    periodic = periodic or (False,) * d
    A = Qc
    for a in range(d):
        ax = a + 1
        n = A.shape[ax]
        pre = (slice(None),) * ax
        shp = list(A.shape)
        shp[ax] = n + 2
        P = np.empty(shp)
        P[pre + (slice(1, n + 1),)] = A
        if periodic[a]:
            P[pre + (0,)] = A[pre + (n - 1,)]
            P[pre + (n + 1,)] = A[pre + (0,)]
        elif boundary == "quadratic" and n >= 3:
            P[pre + (0,)] = 3.0 * A[pre + (0,)] - 3.0 * A[pre + (1,)] + A[pre + (2,)]
            P[pre + (n + 1,)] = 3.0 * A[pre + (n - 1,)] - 3.0 * A[pre + (n - 2,)] + A[pre + (n - 3,)]
        else:
            P[pre + (0,)] = A[pre + (0,)]
            P[pre + (n + 1,)] = A[pre + (n - 1,)]
        s = 0.125 * (P[pre + (slice(0, n),)] - P[pre + (slice(2, n + 2),)])
        shp[ax] = 2 * n
        out = np.empty(shp)
        out[pre + (slice(0, None, 2),)] = A + s
        out[pre + (slice(1, None, 2),)] = A - s
        A = out
    return A


def predict_children(neighborhood: np.ndarray) -> np.ndarray:
    """Children of the center cell of a ``(nvar, 3, ..., 3)`` coarse neighborhood."""
    d = neighborhood.ndim - 1
    fine = predict(neighborhood)
    return fine[(slice(None),) + (slice(2, 4),) * d]


# ----------------------------------------------------------------- tree

@dataclass
class MRNode:
    level: int
    index: tuple
    status: str
    state: np.ndarray
    parent: tuple | None
    children: list | None


@dataclass
class MRTree:
    """Graded tree over levels ``min_level .. max_level``.

    ``Q[l]`` holds averages at level ``l`` (only meaningful where ``exists[l]``);
    every position of the root level exists.
    """

    dim: int
    min_level: int
    max_level: int
    lower: tuple
    upper: tuple
    bc: BoundaryCondition
    eps: float
    scale: np.ndarray
    Q: dict
    exists: dict
    gamma: float = 1.4
    t: float = 0.0
    timers: TaskTimers | None = field(default=None, repr=False)
    lookahead: bool = False
    spread: int = 0
    level_exponent: float = 0.0
    boundary: str = "copy"
    # internal masks keyed by the exists array they were derived from;
    # exists arrays are replaced, never modified in place
    _internal_cache: dict = field(default_factory=dict, repr=False, compare=False)

    # -- geometry
    def n(self, level: int) -> int:
        return 2**level

    def dx(self, level: int) -> float:
        return (self.upper[0] - self.lower[0]) / 2**level

    @property
    def periodic(self) -> tuple:
        return tuple(self.bc.periodic(a) for a in range(self.dim))

    @property
    def levels(self) -> range:
        return range(self.min_level, self.max_level + 1)

    # -- status masks
    def internal(self, level: int) -> np.ndarray:
        if level >= self.max_level:
            return np.zeros((self.n(level),) * self.dim, dtype=bool)
        src = self.exists[level + 1]
        hit = self._internal_cache.get(level)
        if hit is not None and hit[0] is src:
            return hit[1]
        mask = mk.parent_any(src)
        mask.flags.writeable = False
        self._internal_cache[level] = (src, mask)
        return mask

    def leaf(self, level: int) -> np.ndarray:
        return self.exists[level] & ~self.internal(level)

    def codes(self, level: int) -> np.ndarray:
        c = np.zeros(self.exists[level].shape, dtype=np.int8)
        c[self.exists[level]] = _LEAF
        c[self.internal(level)] = _INT
        return c

    def deepest(self) -> int:
        for m in reversed(self.levels):
            if self.exists[m].any():
                return m
        return self.min_level

    def n_nodes(self) -> int:
        return int(sum(np.count_nonzero(self.exists[m]) for m in self.levels))

    def n_leaves(self) -> int:
        return int(sum(np.count_nonzero(self.leaf(m)) for m in self.levels))

    # -- values
    def full_arrays(self, top: int | None = None, coarse: dict | None = None,
                    preds: dict | None = None) -> dict:
        """Complete arrays per level: stored values where nodes exist, predictions elsewhere.

        ``coarse`` optionally supplies already complete arrays for the lowest
        levels (used by local time stepping for time-interpolated data).  When
        ``preds`` is a dict it receives the prediction of each level from the
        one below, keyed by the finer level.
        """
        top = self.deepest() if top is None else top
        full = dict(coarse or {})
        with self._timed("transfer"):
            for m in range(self.min_level, top + 1):
                if m in full:
                    continue
                if m == self.min_level:
                    full[m] = self.Q[m]
                else:
                    pred = predict(full[m - 1], self.periodic, self.boundary)
                    if preds is not None:
                        preds[m] = pred
                    full[m] = np.where(self.exists[m], self.Q[m], pred)
        return full

    def project_internal(self, low: int | None = None) -> None:
        """Refresh internal averages bottom-up as means of their children."""
        low = self.min_level if low is None else low
        with self._timed("transfer"):
            for m in range(self.deepest() - 1, low - 1, -1):
                inner = self.internal(m)
                if inner.any():
                    self.Q[m] = np.where(inner, coarsen_mean(self.Q[m + 1], self.dim), self.Q[m])

    def to_uniform(self, level: int | None = None) -> np.ndarray:
        level = self.max_level if level is None else level
        if level > self.max_level:
            raise LevelMismatch(f"level {level} above tree depth {self.max_level}")
        full = self.full_arrays(top=max(level, self.min_level))
        if level < self.min_level:
            A = full[self.min_level]
            for _ in range(self.min_level - level):
                A = coarsen_mean(A, self.dim)
            return A.copy()
        return np.array(full[level], copy=True)

    def node(self, level: int, index) -> MRNode:
        index = tuple(int(i) for i in index)
        if self.exists[level][index]:
            status = INTERNAL if self.internal(level)[index] else LEAF
            state = self.Q[level][(slice(None),) + index].copy()
        else:
            parent_ok = level > self.min_level and self.exists[level - 1][tuple(i // 2 for i in index)]
            if not parent_ok:
                raise KeyError(f"no node at level {level}, index {index}")
            status = VIRTUAL
            state = self.full_arrays(top=level)[level][(slice(None),) + index].copy()
        parent = None if level == self.min_level else (level - 1, tuple(i // 2 for i in index))
        kids = None
        if status == INTERNAL:
            kids = [(level + 1, tuple(2 * i + o for i, o in zip(index, off)))
                    for off in np.ndindex(*(2,) * self.dim)]
        return MRNode(level, index, status, state, parent, kids)

    def threshold(self, m: int, eps: float | None = None) -> float:
        """Threshold for details of children at level ``m``: ``eps * 2**(p*(m-L))``."""
        eps = self.eps if eps is None else eps
        return eps * 2.0 ** (self.level_exponent * (m - self.max_level))

    def copy(self) -> "MRTree":
        return MRTree(self.dim, self.min_level, self.max_level, self.lower, self.upper, self.bc,
                      self.eps, self.scale.copy(), {m: q.copy() for m, q in self.Q.items()},
                      {m: e.copy() for m, e in self.exists.items()}, self.gamma, self.t, None,
                      self.lookahead, self.spread, self.level_exponent, self.boundary)

    # -- checks
    def check_graded(self) -> None:
        per = self.periodic
        for m in self.levels:
            if m > self.min_level:
                grp = mk.parent_any(self.exists[m])
                if not np.array_equal(mk.children(grp), self.exists[m]):
                    raise GradednessError(f"incomplete sibling group at level {m}")
                if np.any(grp & ~self.exists[m - 1]):
                    raise GradednessError(f"orphan node at level {m}")
            inner = self.internal(m)
            if np.any(mk.dilate_face(inner, per) & ~self.exists[m]):
                raise GradednessError(f"level jump > 1 next to level {m}")

    def projection_error(self) -> float:
        err = 0.0
        for m in range(self.min_level, self.max_level):
            inner = self.internal(m)
            if inner.any():
                diff = np.abs(self.Q[m] - coarsen_mean(self.Q[m + 1], self.dim))[:, inner]
                err = max(err, float(diff.max()))
        return err

    def _timed(self, group: str):
        return self.timers(group) if self.timers is not None else contextlib.nullcontext()


def detail_scale(U: np.ndarray, gamma: float) -> np.ndarray:
    """Per-component normalization for details: global max-norm at t=0.

    Momentum components share one scale that is never smaller than the
    acoustic momentum ``sqrt(rho p)``, so a quiescent start does not divide by zero.
    """
    d = U.shape[0] - 2
    flat = U.reshape(d + 2, -1)
    s = np.abs(flat).max(axis=1)
    acoustic = np.sqrt(np.max(flat[0] * pressure(U, gamma).reshape(-1)))
    s[1:d + 1] = max(float(s[1:d + 1].max()), float(acoustic))
    return np.maximum(s, POSITIVITY_FLOOR)


def build_tree(U: np.ndarray, level: int, eps: float, min_level: int = 2,
               bc: BoundaryCondition | None = None, lower=None, upper=None, gamma: float = 1.4,
               scale: np.ndarray | None = None, coarsen: bool = True) -> MRTree:
    """Tree from uniform level-``level`` averages, thresholded with ``eps``."""
    dim = U.ndim - 1
    if U.shape[1] != 2**level:
        raise LevelMismatch(f"array with {U.shape[1]} cells is not level {level}")
    min_level = min(min_level, level)
    bc = bc or BoundaryCondition.uniform("outflow", dim)
    lower = tuple(lower) if lower is not None else (0.0,) * dim
    upper = tuple(upper) if upper is not None else (1.0,) * dim
    Q, ex = {level: np.array(U, dtype=float, copy=True)}, {}
    for m in range(level - 1, min_level - 1, -1):
        Q[m] = coarsen_mean(Q[m + 1], dim)
    for m in range(min_level, level + 1):
        ex[m] = np.ones((2**m,) * dim, dtype=bool)
    scale = detail_scale(U, gamma) if scale is None else np.asarray(scale, dtype=float)
    tree = MRTree(dim, min_level, level, lower, upper, bc, float(eps), scale, Q, ex, gamma)
    if coarsen:
        mr_coarsen(tree)
    return tree


def tree_from_grid(grid: UniformGrid, eps: float, min_level: int = 2, bc=None, **kw) -> MRTree:
    tree = build_tree(grid.interior, grid.level, eps, min_level, bc, grid.lower, grid.upper,
                      grid.gamma, **kw)
    tree.t = grid.t
    return tree


# ----------------------------------------------------------------- details

def group_details(tree: MRTree, full: dict, top: int | None = None, preds: dict | None = None) -> dict:
    """Normalized detail magnitude of every sibling group, keyed by child level.

    ``D[m]`` lives on the level ``m-1`` grid; it is the max over the group's
    children and conserved components of ``|Q - predict| / scale``.
    Positions without children hold 0.
    """
    top = tree.deepest() if top is None else top
    D = {}
    sc = tree.scale.reshape((-1,) + (1,) * tree.dim)
    for m in range(tree.min_level + 1, top + 1):
        grp = mk.parent_any(tree.exists[m])
        if not grp.any():
            D[m] = np.zeros(grp.shape)
            continue
        pred = preds[m] if preds and m in preds else predict(full[m - 1], tree.periodic, tree.boundary)
        mag = (np.abs(full[m] - pred) / sc).max(axis=0)
        mag = np.where(tree.exists[m], mag, 0.0)
        n = grp.shape[0]
        shp = sum(((n, 2) for _ in range(tree.dim)), ())
        D[m] = mag.reshape(shp).max(axis=tuple(range(1, 2 * tree.dim, 2)))
    return D


def node_details(tree: MRTree, level: int, index) -> np.ndarray:
    """Raw detail vectors ``Q_child - predict`` of an internal node, shape ``(nvar, 2, ..., 2)``."""
    index = tuple(int(i) for i in index)
    if not tree.internal(level)[index]:
        raise KeyError(f"node {level}:{index} is not internal")
    full = tree.full_arrays(top=level)
    pred = predict(full[level], tree.periodic, tree.boundary)
    sl = (slice(None),) + tuple(slice(2 * i, 2 * i + 2) for i in index)
    return tree.Q[level + 1][sl] - pred[sl]


# ----------------------------------------------------------------- adaptation

def _close(tree: MRTree, exists: dict, min_new: int):
    """Complete sibling groups, parents and face-neighbor gradedness in place.

    Nodes are only created at levels ``>= min_new``; needs below that level are
    returned as violation masks keyed by level.
    """
    per = tree.periodic
    violations = {}
    for m in range(tree.max_level, tree.min_level, -1):
        grp = mk.parent_any(exists[m])
        if m >= min_new:
            exists[m] = mk.children(grp)
        missing = mk.dilate_face(grp, per) & ~exists[m - 1]
        if missing.any():
            if m - 1 >= min_new:
                exists[m - 1] = exists[m - 1] | missing
            else:
                violations[m - 1] = missing
    return violations


def _descend(mask, levels):
    for _ in range(levels):
        mask = mk.children(mask)
    return mask


def mr_refine(tree: MRTree, min_level: int | None = None, full: dict | None = None) -> int:
    """Preventive refinement; returns the number of created nodes.

    A leaf below the finest level splits when the detail of its sibling group
    reaches ``eps``.  Only leaves at levels ``>= min_level`` may split and
    nodes are only created above ``min_level``; a split that would force a
    coarser level to refine is dropped.
    """
    return _refine(tree, min_level, full)[0]


def _refine(tree: MRTree, min_level: int | None = None, coarse: dict | None = None):
    low = tree.min_level if min_level is None else min_level
    with tree._timed("adaptation"):
        preds = {}
        full = tree.full_arrays(coarse=coarse, preds=preds)
        top = tree.deepest()
        D = group_details(tree, full, top, preds)
        flags = {}
        carry = None  # dilated hot regions of finer levels, seen from level m
        for m in range(min(top, tree.max_level - 1), max(low, tree.min_level) - 1, -1):
            hot = np.zeros(tree.exists[m].shape, dtype=bool)
            if m in D:
                hot |= mk.children(D[m] >= tree.threshold(m))
            if tree.lookahead and m - 1 in D:
                hot |= _descend(D[m - 1] >= tree.threshold(m - 1), 2)
            if tree.spread:
                hot = mk.dilate_box(hot, tree.spread, tree.periodic)
                # coarser leaves overlapping a dilated finer region are refined too
                if carry is not None:
                    hot |= carry
                carry = mk.parent_any(hot) if m > tree.min_level else None
            f = tree.leaf(m) & hot
            if f.any():
                flags[m] = f
        if not flags:
            return 0, full
        while True:
            ex = {m: e.copy() for m, e in tree.exists.items()}
            for m, f in flags.items():
                ex[m + 1] = ex[m + 1] | mk.children(f)
            viol = _close(tree, ex, low + 1)
            if not viol:
                break
            before = sum(int(f.sum()) for f in flags.values())
            for k, v in viol.items():
                region = mk.dilate_box(v, 2, tree.periodic)
                for m in list(flags):
                    if m >= k:
                        flags[m] &= ~_descend(region, m - k)
            flags = {m: f for m, f in flags.items() if f.any()}
            after = sum(int(f.sum()) for f in flags.values())
            if after == before:
                flags = {}
            if not flags:
                return 0, full
        created = 0
        # new nodes take the predicted values, so the complete arrays stay valid
        top_new = max(m for m in tree.levels if ex[m].any())
        full = tree.full_arrays(top=top_new, coarse=full)
        for m in tree.levels:
            new = ex[m] & ~tree.exists[m]
            if new.any():
                created += int(new.sum())
                tree.Q[m] = np.where(new, full[m], tree.Q[m])
            tree.exists[m] = ex[m]
    return created, full


def mr_coarsen(tree: MRTree, eps: float | None = None, min_level: int | None = None,
               full: dict | None = None) -> int:
    """Merge sibling groups whose details are all below ``eps``; returns nodes removed.

    Only groups whose parent is at level ``>= min_level`` are considered.  A
    group merges when all its children are leaves and none of them is a face
    neighbor of an internal node, so gradedness is preserved.
    """
    eps = tree.eps if eps is None else eps
    low = tree.min_level if min_level is None else min_level
    per = tree.periodic
    removed = 0
    with tree._timed("adaptation"):
        preds = {}
        full = tree.full_arrays(coarse=full, preds=preds)
        D = group_details(tree, full, preds=preds)
        for m in range(tree.deepest(), max(low, tree.min_level), -1):
            grp = mk.parent_any(tree.exists[m])
            inner = tree.internal(m)
            all_leaves = ~mk.parent_any(inner)
            blocked = mk.parent_any(mk.dilate_face(inner, per))
            merge = grp & all_leaves & ~blocked & (D[m] < tree.threshold(m, eps))
            if merge.any():
                gone = mk.children(merge)
                removed += int(gone.sum())
                tree.exists[m] = tree.exists[m] & ~gone
    return removed


def add_virtual_leaves(tree: MRTree) -> dict:
    """Masks of virtual leaves: missing cells reached by a leaf's flux stencil.

    Their values are predictions from the coarser level, available through
    :meth:`MRTree.full_arrays`.
    """
    per = tree.periodic
    out = {}
    for m in tree.levels:
        reach = mk.dilate_axes(tree.leaf(m), STENCIL_REACH, per)
        v = reach & ~tree.exists[m]
        if m > tree.min_level:
            v &= mk.children(tree.exists[m - 1])
        out[m] = v
    return out


# ----------------------------------------------------------------- fluxes

def _pad_prim(tree: MRTree, A: np.ndarray) -> np.ndarray:
    d = tree.dim
    P = np.empty((d + 2,) + tuple(s + 2 * GHOST for s in A.shape[1:]))
    P[(slice(None),) + (slice(GHOST, -GHOST),) * d] = A
    fill_ghosts_array(P, tree.bc, GHOST)
    return cons_to_prim(P, tree.gamma, check=False)


def _face_index(tree: MRTree, m: int, a: int, mask: np.ndarray) -> np.ndarray:
    """Flat index (into the padded level array) of the leftmost stencil cell of each face."""
    d = tree.dim
    coords = list(np.nonzero(mask))
    for k in range(d):
        if k != a:
            coords[k] = coords[k] + GHOST
    return np.ravel_multi_index(tuple(coords), (2**m + 2 * GHOST,) * d)


def _gather_fluxes(tree: MRTree, Wpad: dict, face_masks: dict, cfg: SchemeConfig,
                   index_cache: dict | None = None):
    """Fluxes on the selected faces of several levels with one kernel call per axis.

    ``face_masks[m][a]`` selects faces (``n+1`` along axis ``a``) at level ``m``.
    Returns dense face arrays (zero where unselected) and the fallback count.
    """
    d = tree.dim
    nv = d + 2
    levels = sorted(face_masks)
    cache = {} if index_cache is None else index_cache
    out = {m: [None] * d for m in levels}
    nbad = 0
    for a in range(d):
        spans = []
        for m in levels:
            if (m, a) not in cache:
                cache[(m, a)] = _face_index(tree, m, a, face_masks[m][a])
            spans.append(cache[(m, a)].size)
        total = sum(spans)
        F = None
        if total:
            st = [np.empty((nv, total)) for _ in range(4)]
            pos = 0
            for m, cnt in zip(levels, spans):
                if cnt:
                    stride = (2**m + 2 * GHOST) ** (d - 1 - a)
                    Wm = Wpad[m].reshape(nv, -1)
                    f = cache[(m, a)]
                    for s in range(4):
                        np.take(Wm, f + s * stride, axis=1, out=st[s][:, pos:pos + cnt])
                pos += cnt
            F, nb = face_flux(st[0], st[1], st[2], st[3], a, cfg, tree.gamma)
            nbad += nb
        pos = 0
        for m, cnt in zip(levels, spans):
            dense = np.zeros((nv,) + face_masks[m][a].shape)
            if cnt:
                dense[:, face_masks[m][a]] = F[:, pos:pos + cnt]
            out[m][a] = dense
            pos += cnt
    return out, nbad


def _interface_masks(tree: MRTree, m: int):
    """Per-axis masks of leaf|leaf-or-missing-or-boundary faces and leaf|internal faces."""
    codes = tree.codes(m)
    need, avg = [], []
    for a in range(tree.dim):
        L, R = mk.face_codes(codes, a, tree.periodic[a], _GHOST)
        need.append(((L == _LEAF) & (R != _INT)) | ((R == _LEAF) & (L != _INT)))
        avg.append(((L == _LEAF) & (R == _INT)) | ((L == _INT) & (R == _LEAF)))
    return need, avg


def _check_leaves(U, leaf, gamma, level):
    sub = U[:, leaf]
    if sub.size == 0:
        return
    p = pressure(sub, gamma)
    bad = ~(sub[0] > POSITIVITY_FLOOR) | ~(p > POSITIVITY_FLOOR)
    if np.any(bad):
        idx = tuple(int(c[np.argmax(bad)]) for c in np.nonzero(leaf))
        raise NonPhysicalState(f"non-physical leaf at level {level} index {idx}", (level, idx))


# ----------------------------------------------------------------- evolution

def mr_evolve_global(tree: MRTree, dt: float, cfg: SchemeConfig, bc: BoundaryCondition | None = None,
                     full: dict | None = None) -> int:
    """One RK2 step of every leaf with the global time step; returns fallback count.

    Faces between a leaf and a coarser neighbor are evaluated on the fine side
    (against virtual leaves) and their subface average replaces the coarse
    cell's flux, so the update is conservative.
    """
    if bc is not None:
        tree.bc = bc
    d = tree.dim
    top = tree.deepest()
    levels = range(tree.min_level, top + 1)
    with tree._timed("adaptation"):
        leaf = {m: tree.leaf(m) for m in levels}
        masks = {m: _interface_masks(tree, m) for m in levels}
    U0 = {m: tree.Q[m].copy() for m in levels}
    nbad = 0
    icache = {}
    for stage, coef_dt in enumerate((0.5 * dt, dt)):
        if stage or full is None:
            full = tree.full_arrays(top=top)
        with tree._timed("boundary"):
            Wpad = {m: _pad_prim(tree, full[m]) for m in levels if leaf[m].any()}
        with tree._timed("numerics"):
            fm = {m: masks[m][0] for m in Wpad}
            F, nb = _gather_fluxes(tree, Wpad, fm, cfg, icache)
            nbad += nb
        with tree._timed("transfer"):
            for m in sorted(F, reverse=True):
                if m + 1 in F:
                    for a in range(d):
                        F[m][a] = np.where(masks[m][1][a], mk.restrict_faces(F[m + 1][a], a), F[m][a])
        with tree._timed("numerics"):
            for m in F:
                div = flux_divergence(FluxField(F[m]), d, 2**m)
                new = conservative_update(U0[m], div, coef_dt / tree.dx(m))
                _check_leaves(new, leaf[m], tree.gamma, m)
                tree.Q[m] = np.where(leaf[m], new, tree.Q[m])
        tree.project_internal()
    tree.t += dt
    return nbad


class _LocalStepper:
    """Recursive level advance for local time stepping."""

    def __init__(self, tree: MRTree, dt: float, cfg: SchemeConfig, report: RunReport | None):
        self.tree, self.dt, self.cfg, self.report = tree, dt, cfg, report
        self.old, self.new, self.t0, self.h = {}, {}, {}, {}
        self.fallbacks = 0

    def coarse_at(self, level: int, t: float) -> dict:
        """Complete arrays of the mid-step levels below ``level``, interpolated to ``t``."""
        out = {}
        for m in range(self.tree.min_level, level):
            th = (t - self.t0[m]) / self.h[m]
            out[m] = self.old[m] + th * (self.new[m] - self.old[m])
        return out

    def virtual_values(self, level: int, t: float):
        tree = self.tree
        if level == tree.min_level:
            return None
        c = self.coarse_at(level, t)
        return predict(c[level - 1], tree.periodic, tree.boundary)

    def advance(self, level: int, t0: float):
        tree, d = self.tree, self.tree.dim
        h = self.dt * 2 ** (tree.max_level - level)
        if level < tree.max_level:
            coarse = self.coarse_at(level, t0)
            mr_coarsen(tree, min_level=level, full=coarse)
            mr_refine(tree, min_level=level, full=coarse)
        with tree._timed("adaptation"):
            ex = tree.exists[level]
            inner = tree.internal(level)
            leaf = ex & ~inner
            per = tree.periodic
            active = leaf | (inner & mk.dilate_axes(leaf, STENCIL_REACH, per))
            missing = ~ex
        with tree._timed("transfer"):
            pred0 = self.virtual_values(level, t0)
            U0 = tree.Q[level] if pred0 is None else np.where(ex, tree.Q[level], pred0)
        self.old[level], self.t0[level], self.h[level] = U0, t0, h
        dx = tree.dx(level)
        F2 = None
        if active.any():
            fmask = []
            for a in range(d):
                L, R = mk.face_codes(active.astype(np.int8), a, per[a], 0)
                fmask.append((L == 1) | (R == 1))
            with tree._timed("boundary"):
                W = _pad_prim(tree, U0)
            with tree._timed("numerics"):
                icache = {}
                F1, nb = _gather_fluxes(tree, {level: W}, {level: fmask}, self.cfg, icache)
                div = flux_divergence(FluxField(F1[level]), d, 2**level)
                U1 = np.where(active, conservative_update(U0, div, (0.5 * h) / dx), U0)
                _check_leaves(U1, leaf, tree.gamma, level)
            with tree._timed("transfer"):
                if pred0 is not None:
                    U1 = np.where(missing, self.virtual_values(level, t0 + 0.5 * h), U1)
            with tree._timed("boundary"):
                W = _pad_prim(tree, U1)
            with tree._timed("numerics"):
                F2, nb2 = _gather_fluxes(tree, {level: W}, {level: fmask}, self.cfg, icache)
                F2 = F2[level]
                self.fallbacks += nb + nb2
                div = flux_divergence(FluxField(F2), d, 2**level)
                Un = np.where(active, conservative_update(U0, div, h / dx), U0)
                _check_leaves(Un, leaf, tree.gamma, level)
        else:
            Un = U0.copy()
        with tree._timed("transfer"):
            if pred0 is not None:
                Un = np.where(missing, self.virtual_values(level, t0 + h), Un)
        self.new[level] = Un
        tree.Q[level] = np.where(leaf, Un, tree.Q[level])

        if level < tree.max_level and inner.any():
            codes = tree.codes(level)
            avg = []
            for a in range(d):
                L, R = mk.face_codes(codes, a, per[a], _GHOST)
                avg.append(((L == _LEAF) & (R == _INT)) | ((L == _INT) & (R == _LEAF)))
            reg = [None] * d
            for k in range(2):
                Ff = self.advance(level + 1, t0 + 0.5 * k * h)
                if Ff is None:
                    continue
                with tree._timed("transfer"):
                    for a in range(d):
                        r = 0.5 * mk.restrict_faces(Ff[a], a)
                        reg[a] = r if reg[a] is None else reg[a] + r
            if F2 is not None and reg[0] is not None and any(m.any() for m in avg):
                with tree._timed("numerics"):
                    Fc = [np.where(avg[a], reg[a], F2[a]) for a in range(d)]
                    div = flux_divergence(FluxField(Fc), d, 2**level)
                    Uc = conservative_update(U0, div, h / dx)
                    _check_leaves(Uc, leaf, tree.gamma, level)
                    tree.Q[level] = np.where(leaf, Uc, tree.Q[level])
            with tree._timed("transfer"):
                tree.Q[level] = np.where(inner, coarsen_mean(tree.Q[level + 1], d), tree.Q[level])
        elif self.report is not None:
            self.report.record(tree.n_nodes(), tree.n_leaves(), h / self.dt)
        for dct in (self.old, self.new, self.t0, self.h):
            dct.pop(level, None)
        return F2


def mrlt_evolve(tree: MRTree, dt_finest: float, cfg: SchemeConfig, bc: BoundaryCondition | None = None,
                report: RunReport | None = None) -> int:
    """One macro step ``2^(L - min_level) * dt_finest`` with level-wise time steps.

    Level ``l`` advances with ``2^(L-l) * dt_finest``; missing coarse values
    are interpolated linearly in time, and the time and subface averaged fine
    fluxes replace the coarse flux at every level interface.  Adaptation runs
    at the start of each level step and only touches finer levels.
    """
    if bc is not None:
        tree.bc = bc
    st = _LocalStepper(tree, dt_finest, cfg, report)
    st.advance(tree.min_level, tree.t)
    tree.t += dt_finest * 2 ** (tree.max_level - tree.min_level)
    return st.fallbacks


# ----------------------------------------------------------------- output

def leaf_projection_to_uniform(tree: MRTree, L_target: int | None = None) -> UniformGrid:
    L_target = tree.max_level if L_target is None else L_target
    A = tree.to_uniform(L_target)
    g = UniformGrid.empty(tree.dim, L_target, 2**L_target, tree.lower, tree.upper, gamma=tree.gamma)
    g.interior = A
    g.t = tree.t
    return g


def tree_records(tree: MRTree, virtual: bool = False):
    """``(level, index, status, state)`` records sorted by level then index."""
    vmask = add_virtual_leaves(tree) if virtual else {}
    full = tree.full_arrays() if virtual else None
    for m in tree.levels:
        inner = tree.internal(m)
        for idx in zip(*np.nonzero(tree.exists[m])):
            idx = tuple(int(i) for i in idx)
            yield m, idx, INTERNAL if inner[idx] else LEAF, tree.Q[m][(slice(None),) + idx]
        if virtual:
            for idx in zip(*np.nonzero(vmask[m])):
                idx = tuple(int(i) for i in idx)
                yield m, idx, VIRTUAL, full[m][(slice(None),) + idx]


def tree_snapshot(tree: MRTree, virtual: bool = False) -> str:
    """Deterministic plain-text snapshot, one record per line."""
    lines = [f"# mrtree dim={tree.dim} min_level={tree.min_level} max_level={tree.max_level} "
             f"t={tree.t!r} eps={tree.eps!r}"]
    for m, idx, status, q in sorted(tree_records(tree, virtual), key=lambda r: (r[0], r[1], r[2])):
        vals = " ".join(repr(float(v)) for v in q)
        lines.append(f"{m} {' '.join(map(str, idx))} {status} {vals}")
    return "\n".join(lines) + "\n"


def write_tree_snapshot(path, tree: MRTree, virtual: bool = False) -> None:
    with open(path, "w") as fh:
        fh.write(tree_snapshot(tree, virtual))


# ----------------------------------------------------------------- driver

def run_mr(case, L: int, N_I: int | None = None, eps: float | None = None, lt: bool = False,
           cfg: SchemeConfig | None = None, bc: BoundaryCondition | None = None,
           min_level: int | None = None, initial: UniformGrid | None = None,
           graded_checks: bool = False, detail_norm: str = "absolute",
           lookahead: bool = False, spread: int = 0, level_exponent: float = 0.0,
           boundary: str = "copy", callback=None):
    """Run the MR (or MRLT with ``lt=True``) solver for ``N_I`` finest-level steps.

    ``detail_norm`` is ``"max"`` (details relative to the initial max-norm of
    each component) or ``"absolute"`` (unscaled details).  ``lookahead`` also
    splits leaves whose parent group is significant, ``spread`` dilates the
    significant regions by that many cells, ``level_exponent`` p scales the
    threshold of level m by ``2**(p*(m-L))`` and ``boundary`` selects the
    prediction at non-periodic domain edges.  ``callback(step, tree)`` runs
    after every global step or macro step (``step`` counts finest-level steps).
    """
    if detail_norm not in ("max", "absolute"):
        raise ValueError(f"unknown detail normalization {detail_norm!r}")
    cfg = cfg or SchemeConfig.mr_preset()
    N_I = N_I or case.n_steps(L)
    eps = case.mr_eps if eps is None else eps
    bc = bc or case.bc
    min_level = case.mr_min_level if min_level is None else min_level
    min_level = min(min_level, L)
    dt = case.t_end / N_I
    grid = initial if initial is not None else case.initial_grid(L)
    timers = TaskTimers()
    report = RunReport("MRLT" if lt else "MR", case.name, L, N_I, scheme=cfg.tag,
                       n_cells_uniform=(2**L) ** case.dim)
    report.extras.update(eps=eps, min_level=min_level, detail_norm=detail_norm)
    t_start = time.perf_counter()
    scale = np.ones(case.dim + 2) if detail_norm == "absolute" else None
    tree = tree_from_grid(grid, eps, min_level, bc, scale=scale, coarsen=False)
    if boundary not in BOUNDARY_PREDICTIONS:
        raise ValueError(f"unknown boundary prediction {boundary!r}")
    tree.lookahead, tree.spread, tree.level_exponent = lookahead, spread, level_exponent
    tree.boundary = boundary
    mr_coarsen(tree)
    tree.timers = timers
    tree.t = 0.0
    if lt:
        per_macro = 2 ** (L - min_level)
        if N_I % per_macro:
            raise ValueError(f"N_I={N_I} is not a multiple of the macro step ratio {per_macro}")
        for k in range(N_I // per_macro):
            report.fallbacks += mrlt_evolve(tree, dt, cfg, bc, report)
            if graded_checks:
                tree.check_graded()
            if callback is not None:
                callback((k + 1) * per_macro, tree)
    else:
        for k in range(N_I):
            _, full = _refine(tree)
            report.record(tree.n_nodes(), tree.n_leaves())
            report.fallbacks += mr_evolve_global(tree, dt, cfg, bc, full)
            mr_coarsen(tree)
            if graded_checks:
                tree.check_graded()
            if callback is not None:
                callback(k + 1, tree)
    report.wall_s = time.perf_counter() - t_start
    report.timers = dict(timers.totals)
    tree.t = case.t_end
    return tree, report
