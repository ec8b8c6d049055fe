"""Uniform cell-centred grids with optional cut cells.

A cut-cell domain is described by a level set ``phi`` (negative inside).  Per
cell we store the fraction of its volume inside, and per interior face the
fraction of its area inside (the aperture).  Fractions come from a
piecewise-linear interpolant of ``phi`` on a simplex split of the cell that
uses the exact corner, face-centre and cell-centre values.
"""
from __future__ import annotations

import json
from itertools import product

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

__all__ = ["GridDomain", "DisconnectedDomainError", "triangle_fraction", "tetra_fraction"]

#: components lighter than this many full cells are treated as cut-cell debris
FRAGMENT_CELLS = 0.5
#: cut cells with a smaller inside fraction are discarded; slivers would add
#: arbitrarily large, irrelevant eigenvalues and ruin conditioning
MIN_VOLFRAC = 1e-6


class DisconnectedDomainError(ValueError):
    """The active cells split into several components."""


def triangle_fraction(a, b, c):
    """Area fraction of ``{phi < 0}`` in a triangle with linear ``phi``.

    Arguments are the vertex values; arrays broadcast.
    """
    v = np.stack(np.broadcast_arrays(*map(np.asarray, (a, b, c))), axis=-1).astype(float)
    v = np.sort(v, axis=-1)
    lo, mid, hi = v[..., 0], v[..., 1], v[..., 2]
    neg = (v < 0).sum(axis=-1)
    out = np.zeros(lo.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        one = lo * lo / ((lo - mid) * (lo - hi))
        two = 1.0 - hi * hi / ((hi - lo) * (hi - mid))
    out = np.where(neg == 1, one, out)
    out = np.where(neg == 2, two, out)
    out = np.where(neg == 3, 1.0, out)
    return np.clip(np.nan_to_num(out), 0.0, 1.0)


def segment_fraction(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    out = np.where((a < 0) & (b < 0), 1.0, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where((a < 0) & (b >= 0), a / (a - b), out)
        out = np.where((a >= 0) & (b < 0), b / (b - a), out)
    return out


def tetra_fraction(v):
    """Volume fraction of ``{phi < 0}`` in tetrahedra; ``v`` has shape ``(..., 4)``."""
    v = np.sort(np.asarray(v, dtype=float), axis=-1)
    a, b, c, d = (v[..., i] for i in range(4))
    neg = (v < 0).sum(axis=-1)
    out = np.zeros(a.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        one = a**3 / ((a - b) * (a - c) * (a - d))
        three = 1.0 - d**3 / ((d - a) * (d - b) * (d - c))
        # two negative (a, b), two positive (c, d): a wedge cut into three tets,
        # measured as determinants of barycentric coordinates
        t_ac, t_ad = a / (a - c), a / (a - d)
        t_bc, t_bd = b / (b - c), b / (b - d)
        shape = a.shape + (4,)
        ea, eb, ec, ed = (np.broadcast_to(np.eye(4)[i], shape) for i in range(4))
        p11 = (1 - t_ac)[..., None] * ea + t_ac[..., None] * ec
        p12 = (1 - t_ad)[..., None] * ea + t_ad[..., None] * ed
        p21 = (1 - t_bc)[..., None] * eb + t_bc[..., None] * ec
        p22 = (1 - t_bd)[..., None] * eb + t_bd[..., None] * ed
        two = sum(
            np.abs(np.linalg.det(np.stack(tet, axis=-2)))
            for tet in ((ea, eb, p21, p22), (ea, p11, p12, p22), (ea, p11, p22, p21))
        )
    out = np.where(neg == 1, one, out)
    out = np.where(neg == 2, two, out)
    out = np.where(neg == 3, three, out)
    out = np.where(neg == 4, 1.0, out)
    return np.clip(np.nan_to_num(out), 0.0, 1.0)


def _axes(lower, h, shape, offset):
    return [lo + hh * (np.arange(n + (1 if offset == 0 else 0)) + offset) for lo, hh, n in zip(lower, h, shape)]


def _eval_on(phi, axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    return np.asarray(phi(pts), dtype=float).reshape(mesh[0].shape)


def _cut_geometry_2d(phi, lower, h, shape):
    corner = _eval_on(phi, _axes(lower, h, shape, 0.0))
    centre_axes = _axes(lower, h, shape, 0.5)
    centre = _eval_on(phi, centre_axes)
    c00, c10 = corner[:-1, :-1], corner[1:, :-1]
    c01, c11 = corner[:-1, 1:], corner[1:, 1:]
    vol = 0.25 * (
        triangle_fraction(centre, c00, c10)
        + triangle_fraction(centre, c10, c11)
        + triangle_fraction(centre, c11, c01)
        + triangle_fraction(centre, c01, c00)
    )
    xf = _axes(lower, h, shape, 0.0)
    # x-normal faces at interior x nodes, split at the face midpoint
    mid_x = _eval_on(phi, [xf[0][1:-1], centre_axes[1]])
    ax0 = 0.5 * (segment_fraction(corner[1:-1, :-1], mid_x) + segment_fraction(mid_x, corner[1:-1, 1:]))
    mid_y = _eval_on(phi, [centre_axes[0], xf[1][1:-1]])
    ax1 = 0.5 * (segment_fraction(corner[:-1, 1:-1], mid_y) + segment_fraction(mid_y, corner[1:, 1:-1]))
    return vol, (ax0, ax1)


def _square_fraction(fc, q00, q10, q11, q01):
    return 0.25 * (
        triangle_fraction(fc, q00, q10)
        + triangle_fraction(fc, q10, q11)
        + triangle_fraction(fc, q11, q01)
        + triangle_fraction(fc, q01, q00)
    )


def _cut_geometry_3d(phi, lower, h, shape):
    nodes = _axes(lower, h, shape, 0.0)
    mids = _axes(lower, h, shape, 0.5)
    corner = _eval_on(phi, nodes)
    centre = _eval_on(phi, mids)
    # face-centre values on all faces normal to each axis
    fcs = [
        _eval_on(phi, [nodes[a] if b == a else mids[b] for b in range(3)])
        for a in range(3)
    ]
    c = {
        (i, j, k): corner[i : i + shape[0], j : j + shape[1], k : k + shape[2]]
        for i, j, k in product((0, 1), repeat=3)
    }
    samples = [centre] + list(c.values())
    lo = np.minimum.reduce(samples)
    hi = np.maximum.reduce(samples)
    vol = np.where(hi < 0, 1.0, 0.0)
    cut = (lo < 0) & (hi >= 0)
    idx = np.nonzero(cut)
    if idx[0].size:
        fracs = np.zeros(idx[0].size)
        for a in range(3):
            others = [b for b in range(3) if b != a]
            for side in (0, 1):
                sl = [slice(None)] * 3
                sl[a] = slice(side, side + shape[a])
                fc = fcs[a][tuple(sl)][idx]
                # corners of this face in cyclic order
                ring = []
                for s, t in ((0, 0), (1, 0), (1, 1), (0, 1)):
                    key = [0, 0, 0]
                    key[a] = side
                    key[others[0]], key[others[1]] = s, t
                    ring.append(c[tuple(key)][idx])
                for e in range(4):
                    tet = np.stack([centre[idx], fc, ring[e], ring[(e + 1) % 4]], axis=-1)
                    fracs += tetra_fraction(tet)
        vol[idx] = fracs / 24.0
    apertures = []
    for a in range(3):
        others = [b for b in range(3) if b != a]
        sl = [slice(None)] * 3
        sl[a] = slice(1, shape[a])
        fc = fcs[a][tuple(sl)]
        ring = []
        for s, t in ((0, 0), (1, 0), (1, 1), (0, 1)):
            csl = [slice(None)] * 3
            csl[a] = slice(1, shape[a])
            csl[others[0]] = slice(s, s + shape[others[0]])
            csl[others[1]] = slice(t, t + shape[others[1]])
            ring.append(corner[tuple(csl)])
        apertures.append(_square_fraction(fc, *ring))
    return vol, tuple(apertures)


class GridDomain:
    """Uniform cell-centred grid on a box with an active-cell mask.

    Parameters
    ----------
    lower, upper : array_like
        Box corners.  ``upper - lower`` must be an integer multiple of ``h``.
    shape : tuple of int
        Cells per axis.
    mask : ndarray of bool, optional
        Active cells; defaults to all.
    volfrac : ndarray, optional
        Inside fraction of each cell (cut cells); defaults to ``mask``.
    apertures : tuple of ndarray, optional
        Inside fraction of each interior face, one array per axis with that
        axis shortened by one.  Defaults to 1 between two active cells.
    boundary : {"neumann", "truncation"}
        How the outer boundary is interpreted.  Both are reflecting; the tag
        records whether the boundary is part of the problem or an artifact of
        truncating an unbounded domain.
    """

    def __init__(self, lower, upper, shape, mask=None, volfrac=None, apertures=None, boundary="neumann",
                 drop_fragments=True):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.shape = tuple(int(n) for n in shape)
        self.dim = len(self.shape)
        if self.dim > 3:
            raise ValueError("ambient grids support dimension <= 3")
        self.h = (self.upper - self.lower) / np.array(self.shape)
        if boundary not in ("neumann", "truncation"):
            raise ValueError(f"unknown boundary kind {boundary!r}")
        self.boundary = boundary
        mask = np.ones(self.shape, bool) if mask is None else np.asarray(mask, bool)
        if mask.shape != self.shape:
            raise ValueError(f"mask shape {mask.shape} != grid shape {self.shape}")
        self.volfrac = mask.astype(float) if volfrac is None else np.where(mask & (volfrac >= MIN_VOLFRAC), volfrac, 0.0)
        mask = self.volfrac > 0
        if apertures is None:
            apertures = tuple(
                (np.take(mask, range(n - 1), axis=a) & np.take(mask, range(1, n), axis=a)).astype(float)
                for a, n in enumerate(self.shape)
            )
        self.apertures = tuple(
            np.asarray(ap, float) * np.take(mask, range(n - 1), axis=a) * np.take(mask, range(1, n), axis=a)
            for a, (ap, n) in enumerate(zip(apertures, self.shape))
        )
        self.mask = mask
        self._check_connected(drop_fragments)

    # ---- constructors -------------------------------------------------
    @staticmethod
    def _fit_box(lower, upper, h):
        lower = np.atleast_1d(np.asarray(lower, float))
        upper = np.atleast_1d(np.asarray(upper, float))
        h = np.broadcast_to(np.asarray(h, float), lower.shape)
        shape = np.maximum(np.ceil((upper - lower) / h - 1e-9).astype(int), 1)
        mid = 0.5 * (lower + upper)
        half = 0.5 * shape * h
        return mid - half, mid + half, tuple(shape)

    @classmethod
    def box(cls, lower, upper, h, boundary="neumann"):
        """Full box; the extent is widened symmetrically to a multiple of ``h``."""
        lo, hi, shape = cls._fit_box(lower, upper, h)
        return cls(lo, hi, shape, boundary=boundary)

    @classmethod
    def from_mask(cls, lower, upper, mask, boundary="neumann"):
        mask = np.asarray(mask, bool)
        return cls(lower, upper, mask.shape, mask=mask, boundary=boundary)

    @classmethod
    def from_level_set(cls, phi, lower, upper, h, boundary="neumann"):
        """Cut-cell domain ``{phi < 0}`` inside the box."""
        lo, hi, shape = cls._fit_box(lower, upper, h)
        hh = (hi - lo) / np.array(shape)
        if len(shape) == 1:
            nodes = lo[0] + hh[0] * np.arange(shape[0] + 1)
            v = np.asarray(phi(nodes[:, None]), float)
            vol = segment_fraction(v[:-1], v[1:])
            ap = ((v[1:-1] < 0).astype(float),)
        elif len(shape) == 2:
            vol, ap = _cut_geometry_2d(phi, lo, hh, shape)
        else:
            vol, ap = _cut_geometry_3d(phi, lo, hh, shape)
        return cls(lo, hi, shape, mask=vol > 0, volfrac=vol, apertures=ap, boundary=boundary)

    @classmethod
    def tube(cls, manifold, radius, h, pad_cells=2):
        """Cut-cell grid of the closed tube of ``radius`` around a catalog manifold."""
        pts = manifold.embed(manifold.parameter_grid(256 if manifold.k == 1 else 64)[0])
        reach = radius + (pad_cells + 1) * h
        lower = pts.min(axis=0) - reach
        upper = pts.max(axis=0) + reach
        return cls.from_level_set(lambda x: manifold.distance(x) - radius, lower, upper, h)

    # ---- geometry -----------------------------------------------------
    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    def axes(self):
        return [lo + hh * (np.arange(n) + 0.5) for lo, hh, n in zip(self.lower, self.h, self.shape)]

    def centers(self, active_only=True):
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        return pts[self.mask.ravel()] if active_only else pts

    @property
    def n_active(self):
        return int(self.mask.sum())

    def index_map(self):
        """Flat active index per cell, -1 for inactive cells."""
        idx = np.full(self.shape, -1, dtype=np.int64)
        idx[self.mask] = np.arange(self.n_active)
        return idx

    def masses(self):
        return self.volfrac[self.mask] * self.cell_volume

    def faces(self):
        """Yield ``(i, j, conductance)`` for interior faces with positive aperture.

        Conductance is ``aperture * face_area / h_axis``.
        """
        idx = self.index_map()
        for a, ap in enumerate(self.apertures):
            n = self.shape[a]
            left = np.take(idx, range(n - 1), axis=a)
            right = np.take(idx, range(1, n), axis=a)
            ok = (ap > 0) & (left >= 0) & (right >= 0)
            area = self.cell_volume / self.h[a]
            yield left[ok], right[ok], ap[ok] * area / self.h[a]

    def boundary_cells(self):
        """Active cells touching an inactive cell or the box edge."""
        m = self.mask
        edge = ~ndimage.binary_erosion(m, border_value=0)
        return edge & m

    def _check_connected(self, drop_fragments):
        n = self.n_active
        if n == 0:
            raise DisconnectedDomainError("domain has no active cells")
        rows, cols = [], []
        for i, j, _ in self.faces():
            rows.append(i)
            cols.append(j)
        rows = np.concatenate(rows) if rows else np.zeros(0, int)
        cols = np.concatenate(cols) if cols else np.zeros(0, int)
        graph = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        ncomp, labels = connected_components(graph, directed=False)
        if ncomp == 1:
            return
        mass = np.bincount(labels, weights=self.volfrac[self.mask])
        main = int(np.argmax(mass))
        debris = (mass < FRAGMENT_CELLS) & (np.arange(ncomp) != main)
        if not drop_fragments or np.count_nonzero(~debris) > 1:
            raise DisconnectedDomainError(
                f"mask has {ncomp} components (volumes in cells: {np.sort(mass)[::-1][:4].round(3).tolist()})"
            )
        keep = labels == main
        flat = np.zeros(self.mask.size, bool)
        flat[np.flatnonzero(self.mask.ravel())[keep]] = True
        new_mask = flat.reshape(self.shape)
        self.volfrac = np.where(new_mask, self.volfrac, 0.0)
        self.apertures = tuple(
            ap * np.take(new_mask, range(n - 1), axis=a) * np.take(new_mask, range(1, n), axis=a)
            for a, (ap, n) in enumerate(zip(self.apertures, self.shape))
        )
        self.mask = new_mask
        self.dropped_fragments = int(ncomp - 1)

    # ---- serialization ------------------------------------------------
    def to_rle(self) -> dict:
        """Run-length encoding of the active mask (C order), JSON-ready."""
        flat = self.mask.ravel().astype(np.int8)
        change = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate([[0], change, [flat.size]])
        return {
            "format": "rle-v1",
            "shape": list(self.shape),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "boundary": self.boundary,
            "start": int(flat[0]),
            "runs": np.diff(bounds).tolist(),
        }

    @classmethod
    def from_rle(cls, data):
        if isinstance(data, str):
            data = json.loads(data)
        if data.get("format") != "rle-v1":
            raise ValueError("not an rle-v1 mask")
        runs = np.asarray(data["runs"], int)
        values = (np.arange(runs.size) + data["start"]) % 2
        mask = np.repeat(values.astype(bool), runs).reshape(data["shape"])
        return cls.from_mask(data["lower"], data["upper"], mask, boundary=data.get("boundary", "neumann"))

    def __repr__(self):
        return f"GridDomain(shape={self.shape}, h={self.h.round(6).tolist()}, active={self.n_active})"
