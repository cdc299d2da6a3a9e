"""Resampling scattered swath samples onto the event grid.

Samples are projected to a local transverse Mercator plane, Delaunay
triangulated, and linearly interpolated at grid nodes. Nodes outside the
hull, or not covered by any triangle whose circumradius is within the alpha
radius, are masked and set to zero.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .projection import LocalTM

log = logging.getLogger(__name__)

DEFAULT_ALPHA_RADIUS = 2000.0
_BARY_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Event-centred regular grid.

    Node ``(i, j)`` sits at ``x = (j - width//2) * cell_size`` and
    ``y = (height//2 - i) * cell_size``: row 0 is the northern edge and the
    event itself falls on node ``(height//2, width//2)``.
    """

    lat: float
    lon: float
    cell_size: float = 1000.0
    width: int = 100
    height: int = 100

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("grid width and height must be positive")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def center_index(self):
        return (self.height // 2, self.width // 2)

    def axes(self):
        xs = (np.arange(self.width) - self.width // 2) * self.cell_size
        ys = (self.height // 2 - np.arange(self.height)) * self.cell_size
        return xs, ys

    def nodes(self):
        xs, ys = self.axes()
        return np.meshgrid(xs, ys)

    def bounds(self, margin=0.0):
        xs, ys = self.axes()
        return xs[0] - margin, ys[-1] - margin, xs[-1] + margin, ys[0] + margin

    def projection(self):
        return LocalTM(self.lat, self.lon)


@dataclass
class RasterLayer:
    values: np.ndarray
    mask: np.ndarray

    @classmethod
    def empty(cls, spec):
        return cls(np.zeros(spec.shape), np.zeros(spec.shape, dtype=bool))


def project(lat, lon, spec):
    """Project geographic points to grid-local metres."""
    return spec.projection().forward(lat, lon)


def unproject(x, y, spec):
    return spec.projection().inverse(x, y)


def _dedupe(x, y, v):
    pts = np.column_stack([x, y])
    uniq, inverse, counts = np.unique(pts, axis=0, return_inverse=True, return_counts=True)
    if len(uniq) == len(pts):
        order = np.lexsort((y, x))
        return x[order], y[order], None if v is None else v[order]
    inverse = inverse.ravel()
    log.debug("averaged %d duplicate sample positions", int(np.sum(counts > 1)))
    vals = None
    if v is not None:
        vals = np.bincount(inverse, weights=v, minlength=len(uniq)) / counts
    # np.unique output is already lexicographically sorted on (x, y)
    return uniq[:, 0], uniq[:, 1], vals


def _triangulate(x, y):
    if len(x) < 3:
        return None
    try:
        return Delaunay(np.column_stack([x, y]))
    except QhullError:
        return None


def _interpolate(tri, values, qx, qy):
    """Barycentric-linear interpolation; returns (values, inside-hull mask)."""
    q = np.column_stack([qx.ravel(), qy.ravel()])
    simplex = tri.find_simplex(q)
    inside = simplex >= 0
    out = np.zeros(len(q))
    s = simplex[inside]
    t = tri.transform[s]
    c = np.einsum("nij,nj->ni", t[:, :2, :], q[inside] - t[:, 2, :])
    verts = tri.simplices[s]
    v0, v1, v2 = values[verts[:, 0]], values[verts[:, 1]], values[verts[:, 2]]
    # anchored on the third vertex: exact to rounding on affine fields
    out[inside] = v2 + c[:, 0] * (v0 - v2) + c[:, 1] * (v1 - v2)
    return out.reshape(qx.shape), inside.reshape(qx.shape)


def circumradii(points, simplices):
    a = points[simplices[:, 0]]
    b = points[simplices[:, 1]]
    c = points[simplices[:, 2]]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(c - a, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    area2 = np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = la * lb * lc / (2.0 * area2)
    return np.where(area2 > 0, r, np.inf)


def _rasterise_triangles(points, simplices, spec):
    """Mark every grid node lying inside (or on) any of the given triangles."""
    h, w = spec.shape
    mask = np.zeros(spec.shape, dtype=bool)
    if len(simplices) == 0:
        return mask
    half_w, half_h = w // 2, h // 2
    cs = spec.cell_size
    tri = points[simplices]  # (n, 3, 2)
    col_lo = np.clip(np.ceil(tri[:, :, 0].min(axis=1) / cs - 1e-9).astype(int) + half_w, 0, w)
    col_hi = np.clip(np.floor(tri[:, :, 0].max(axis=1) / cs + 1e-9).astype(int) + half_w, -1, w - 1)
    row_lo = np.clip(half_h - np.floor(tri[:, :, 1].max(axis=1) / cs + 1e-9).astype(int), 0, h)
    row_hi = np.clip(half_h - np.ceil(tri[:, :, 1].min(axis=1) / cs - 1e-9).astype(int), -1, h - 1)
    ncols = col_hi - col_lo + 1
    nrows = row_hi - row_lo + 1
    live = (ncols > 0) & (nrows > 0)
    span = np.maximum(ncols, nrows)
    # small triangles in one vectorised pass; big ones one at a time
    small = live & (span <= 8)
    groups = [(np.flatnonzero(small), 8)] + [(np.array([k]), int(span[k])) for k in np.flatnonzero(live & ~small)]
    for idx, k in groups:
        if len(idx) == 0:
            continue
        off = np.arange(k)
        rr = row_lo[idx, None, None] + off[None, :, None]
        cc = col_lo[idx, None, None] + off[None, None, :]
        rr, cc = np.broadcast_arrays(rr, cc)
        valid = (rr <= row_hi[idx, None, None]) & (cc <= col_hi[idx, None, None])
        px = (cc - half_w) * cs
        py = (half_h - rr) * cs
        a, b, c = tri[idx, 0], tri[idx, 1], tri[idx, 2]
        d = (b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1])
        d = d[:, None, None]
        l1 = ((b[:, 1] - c[:, 1])[:, None, None] * (px - c[:, 0, None, None])
              + (c[:, 0] - b[:, 0])[:, None, None] * (py - c[:, 1, None, None])) / d
        l2 = ((c[:, 1] - a[:, 1])[:, None, None] * (px - c[:, 0, None, None])
              + (a[:, 0] - c[:, 0])[:, None, None] * (py - c[:, 1, None, None])) / d
        l3 = 1.0 - l1 - l2
        hit = valid & (l1 >= -_BARY_TOL) & (l2 >= -_BARY_TOL) & (l3 >= -_BARY_TOL)
        mask[rr[hit], cc[hit]] = True
    return mask


def _alpha_from_tri(tri, spec, alpha_radius):
    if tri is None:
        return np.zeros(spec.shape, dtype=bool)
    keep = circumradii(tri.points, tri.simplices) <= alpha_radius
    return _rasterise_triangles(tri.points, tri.simplices[keep], spec)


def triangulate_interpolate(x, y, v, spec):
    """Linear interpolation of scattered samples at the grid nodes.

    Fewer than three samples, or all-collinear samples, give a fully masked
    layer. Duplicate positions are averaged.
    """
    x, y, v = _dedupe(np.asarray(x, float), np.asarray(y, float), np.asarray(v, float))
    tri = _triangulate(x, y)
    if tri is None:
        return RasterLayer.empty(spec)
    gx, gy = spec.nodes()
    vals, inside = _interpolate(tri, v, gx, gy)
    return RasterLayer(np.where(inside, vals, 0.0), inside)


def alpha_mask(x, y, spec, alpha_radius=DEFAULT_ALPHA_RADIUS):
    """Grid nodes inside the alpha shape of the sample positions.

    A node is kept iff it lies in some Delaunay triangle whose circumradius
    does not exceed ``alpha_radius`` (metres).
    """
    if alpha_radius <= 0:
        raise ValueError("alpha_radius must be > 0")
    x, y, _ = _dedupe(np.asarray(x, float), np.asarray(y, float), None)
    return _alpha_from_tri(_triangulate(x, y), spec, alpha_radius)


def resample_points(x, y, v, spec, alpha_radius=DEFAULT_ALPHA_RADIUS):
    """Interpolate then intersect with the alpha mask; masked cells are 0."""
    x, y, v = _dedupe(np.asarray(x, float), np.asarray(y, float), np.asarray(v, float))
    tri = _triangulate(x, y)
    if tri is None:
        return RasterLayer.empty(spec)
    gx, gy = spec.nodes()
    vals, inside = _interpolate(tri, v, gx, gy)
    mask = inside & _alpha_from_tri(tri, spec, alpha_radius)
    return RasterLayer(np.where(mask, vals, 0.0), mask)


def resample_scene(scene, spec, alpha_radius=DEFAULT_ALPHA_RADIUS):
    """Project a swath scene and resample it onto ``spec``'s grid.

    Only samples within a margin of the grid take part in the triangulation.
    """
    if len(scene) == 0:
        return RasterLayer.empty(spec)
    margin = max(2.0 * alpha_radius, 2.0 * spec.cell_size)
    # cheap geographic prefilter before projecting
    reach = (max(spec.width, spec.height) * spec.cell_size / 2.0 + margin) / 1000.0
    dlat = reach / 110.0 + 0.01
    dlon = reach / (111.0 * max(np.cos(np.radians(spec.lat)), 0.05)) + 0.01
    dl = (scene.lons - spec.lon + 180.0) % 360.0 - 180.0
    near = (np.abs(scene.lats - spec.lat) <= dlat) & (np.abs(dl) <= dlon)
    if np.count_nonzero(near) < 3:
        return RasterLayer.empty(spec)
    x, y = project(scene.lats[near], scene.lons[near], spec)
    x0, y0, x1, y1 = spec.bounds(margin)
    inside = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    return resample_points(x[inside], y[inside], scene.values[near][inside], spec, alpha_radius)


def write_debug_rasters(layer, stem):
    """Dump a layer as an 8-bit PGM (valid range stretched) plus a PBM mask."""
    h, w = layer.values.shape
    img = np.zeros((h, w), dtype=np.uint8)
    if layer.mask.any():
        v = layer.values[layer.mask]
        lo, hi = float(v.min()), float(v.max())
        scale = 255.0 / (hi - lo) if hi > lo else 0.0
        img[layer.mask] = np.clip((layer.values[layer.mask] - lo) * scale, 0, 255).astype(np.uint8)
    with open(f"{stem}.pgm", "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())
    with open(f"{stem}.pbm", "wb") as fh:
        fh.write(f"P4\n{w} {h}\n".encode())
        # PBM: 1 = black; mark masked-out cells black
        fh.write(np.packbits(~layer.mask, axis=1).tobytes())
