"""Boolean mask helpers shared by the tree and patch solvers.

Masks carry spatial axes only (no variable axis).
"""

from __future__ import annotations

import numpy as np


def _blocks(mask: np.ndarray):
    for off in np.ndindex(*(2,) * mask.ndim):
        yield mask[tuple(slice(o, None, 2) for o in off)]


def parent_any(mask: np.ndarray) -> np.ndarray:
    """True on a coarse cell if any of its 2^d children is True."""
    it = _blocks(mask)
    out = next(it).copy()
    for part in it:
        out |= part
    return out


def parent_all(mask: np.ndarray) -> np.ndarray:
    it = _blocks(mask)
    out = next(it).copy()
    for part in it:
        out &= part
    return out


def children(mask: np.ndarray) -> np.ndarray:
    for k in range(mask.ndim):
        mask = np.repeat(mask, 2, axis=k)
    return mask


def shift(mask: np.ndarray, axis: int, s: int, periodic: bool, fill=False) -> np.ndarray:
    """``out[i] = mask[i + s]`` along ``axis``; out-of-range reads give ``fill``."""
    if periodic:
        return np.roll(mask, -s, axis=axis)
    out = np.full_like(mask, fill)
    n = mask.shape[axis]
    if abs(s) >= n:
        return out
    src = [slice(None)] * mask.ndim
    dst = [slice(None)] * mask.ndim
    if s > 0:
        src[axis] = slice(s, n)
        dst[axis] = slice(0, n - s)
    else:
        src[axis] = slice(0, n + s)
        dst[axis] = slice(-s, n)
    out[tuple(dst)] = mask[tuple(src)]
    return out


def dilate_axes(mask: np.ndarray, r: int, periodic) -> np.ndarray:
    """Cross-shaped dilation: neighbors up to ``r`` cells along each axis."""
    out = mask.copy()
    for a in range(mask.ndim):
        for s in range(1, r + 1):
            out |= shift(mask, a, s, periodic[a])
            out |= shift(mask, a, -s, periodic[a])
    return out


def dilate_face(mask: np.ndarray, periodic) -> np.ndarray:
    return dilate_axes(mask, 1, periodic)


def dilate_box(mask: np.ndarray, r: int, periodic) -> np.ndarray:
    """Chebyshev dilation (includes diagonal neighbors)."""
    out = mask
    for a in range(mask.ndim):
        cur = out.copy()
        for s in range(1, r + 1):
            cur |= shift(out, a, s, periodic[a])
            cur |= shift(out, a, -s, periodic[a])
        out = cur
    return out


def erode_box(mask: np.ndarray, r: int, periodic) -> np.ndarray:
    """Chebyshev erosion; cells outside the domain count as inside (True)."""
    out = mask
    for a in range(mask.ndim):
        cur = out.copy()
        for s in range(1, r + 1):
            cur &= shift(out, a, s, periodic[a], fill=True)
            cur &= shift(out, a, -s, periodic[a], fill=True)
        out = cur
    return out


def face_codes(codes: np.ndarray, axis: int, periodic: bool, ghost_code: int):
    """Codes of the cells left and right of each of the ``n + 1`` faces along ``axis``."""
    n = codes.shape[axis]
    if periodic:
        lo = np.take(codes, [n - 1], axis=axis)
        hi = np.take(codes, [0], axis=axis)
    else:
        shp = list(codes.shape)
        shp[axis] = 1
        lo = np.full(shp, ghost_code, dtype=codes.dtype)
        hi = lo
    padded = np.concatenate([lo, codes, hi], axis=axis)
    left = np.take(padded, np.arange(0, n + 1), axis=axis)
    right = np.take(padded, np.arange(1, n + 2), axis=axis)
    return left, right


def restrict_faces(F: np.ndarray, axis: int) -> np.ndarray:
    """Average fine face values (``2n+1`` along ``axis``) onto coarse faces.

    ``F`` has a leading variable axis; spatial axis ``k`` is array axis ``k+1``.
    """
    d = F.ndim - 1
    sl = [slice(None)] * F.ndim
    sl[axis + 1] = slice(None, None, 2)
    G = F[tuple(sl)]
    for k in range(d):
        if k == axis:
            continue
        lo = [slice(None)] * F.ndim
        hi = [slice(None)] * F.ndim
        lo[k + 1] = slice(0, None, 2)
        hi[k + 1] = slice(1, None, 2)
        G = G[tuple(lo)] + G[tuple(hi)]
    return G * (0.5 ** (d - 1))
