"""Exact polygon arithmetic and half-open rasterization.

Conventions used throughout the package:

* The canvas is the unit square [0,1]^2 with y measured upward from the
  bottom edge.
* A raster mask is a ``(height, width)`` uint8 array. Row 0 is the bottom
  row of the canvas; ``mask[r, c]`` covers ``x in [c/w, (c+1)/w)`` and
  ``y in [r/h, (r+1)/h)`` with its sampling point at the pixel center
  ``((c + 0.5)/w, (r + 0.5)/h)``.
* Pixel membership is half-open: a pixel belongs to a polygon iff its
  center is strictly inside, or lies exactly on a left/bottom boundary
  edge. Two polygons that share an edge therefore never both claim a
  pixel, so fragments of a partition tile the raster exactly.

The half-open rule is implemented with a canonical-edge parity test: each
edge is re-oriented so its endpoints are sorted by (y, x) before the
crossing test, which makes the arithmetic bit-identical for an edge shared
by two abutting polygons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GeometryError",
    "InvalidPolygonError",
    "RejectedCutError",
    "CutSamplingError",
    "Polygon",
    "CutLine",
    "polygon_area",
    "polygon_perimeter",
    "polygon_centroid",
    "split_polygon",
    "sample_cut",
    "transform",
    "rotate_points",
    "rasterize",
    "rasterize_box",
    "points_in_polygon",
    "mask_overlap",
    "poly_to_text",
    "poly_from_text",
]

_AREA_EPS = 1e-12


class GeometryError(Exception):
    """Base class for geometry failures."""


class InvalidPolygonError(GeometryError):
    """Polygon violates its invariants (degenerate, CW, self-intersecting...)."""


class RejectedCutError(GeometryError):
    """Cut chord leaves the polygon between its two crossing points."""


class CutSamplingError(GeometryError):
    """No valid cut found within the retry budget."""


@dataclass(frozen=True)
class Polygon:
    """Simple counter-clockwise vertex loop with strictly positive area.

    ``vertices`` is an (n, 2) float64 array; the loop is implicitly closed.
    """

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise InvalidPolygonError(f"need an (n>=3, 2) vertex array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidPolygonError("non-finite vertex coordinate")
        object.__setattr__(self, "vertices", v)
        area2 = _signed_area2(v)
        if abs(area2) <= _AREA_EPS:
            raise InvalidPolygonError("degenerate polygon: area is (numerically) zero")
        if area2 < 0.0:
            raise InvalidPolygonError("clockwise vertex loop; counter-clockwise required")
        if not _is_simple(v):
            raise InvalidPolygonError("self-intersecting vertex loop")

    def __len__(self):
        return self.vertices.shape[0]


@dataclass(frozen=True)
class CutLine:
    """A chord crossing two non-adjacent edges of a polygon.

    ``t_a``/``t_b`` parameterize the crossing point along each edge and are
    restricted to [0.25, 0.75]: the chord enters within 25% of the edge
    length from the edge midpoint.

    Axis-aligned cuts additionally carry the axis (0=x, 1=y) and the line
    coordinate; endpoints are snapped onto that line exactly, so fragments
    of an axis-aligned partition are exact rectangles.
    """

    edge_a: int
    edge_b: int
    t_a: float
    t_b: float
    axis: int | None = None
    axis_value: float = 0.0

    def validate(self, poly: Polygon):
        n = len(poly)
        a, b = self.edge_a, self.edge_b
        if not (0 <= a < n and 0 <= b < n):
            raise RejectedCutError(f"edge index out of range for {n}-gon: {a}, {b}")
        if a == b or (a - b) % n in (1, n - 1):
            raise RejectedCutError(f"edges {a} and {b} are adjacent or equal")
        for t in (self.t_a, self.t_b):
            if not (0.25 <= t <= 0.75):
                raise RejectedCutError(f"edge parameter {t} outside [0.25, 0.75]")

    def endpoints(self, poly: Polygon):
        v = poly.vertices
        n = len(poly)
        pa = v[self.edge_a] + self.t_a * (v[(self.edge_a + 1) % n] - v[self.edge_a])
        pb = v[self.edge_b] + self.t_b * (v[(self.edge_b + 1) % n] - v[self.edge_b])
        if self.axis is not None:
            pa[self.axis] = self.axis_value
            pb[self.axis] = self.axis_value
        return pa, pb


def _signed_area2(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(poly: Polygon) -> float:
    """Shoelace area in canvas units squared (positive for valid polygons)."""
    return 0.5 * _signed_area2(poly.vertices)


def polygon_perimeter(poly: Polygon) -> float:
    d = np.roll(poly.vertices, -1, axis=0) - poly.vertices
    return float(np.hypot(d[:, 0], d[:, 1]).sum())


def polygon_centroid(poly: Polygon) -> np.ndarray:
    """Area-weighted centroid."""
    v = poly.vertices
    w = np.roll(v, -1, axis=0)
    cross = v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1]
    a2 = cross.sum()
    cx = ((v[:, 0] + w[:, 0]) * cross).sum() / (3.0 * a2)
    cy = ((v[:, 1] + w[:, 1]) * cross).sum() / (3.0 * a2)
    return np.array([cx, cy])


def _orient(p, q, r) -> float:
    return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])


def _on_segment(p, q, r) -> bool:
    # r collinear with pq assumed; is r within the bounding box of pq?
    return (
        min(p[0], q[0]) <= r[0] <= max(p[0], q[0])
        and min(p[1], q[1]) <= r[1] <= max(p[1], q[1])
    )


def _segments_touch(p1, q1, p2, q2) -> bool:
    """True if the closed segments share any point."""
    d1 = _orient(p2, q2, p1)
    d2 = _orient(p2, q2, q1)
    d3 = _orient(p1, q1, p2)
    d4 = _orient(p1, q1, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0:
        return True
    if d1 == 0 and _on_segment(p2, q2, p1):
        return True
    if d2 == 0 and _on_segment(p2, q2, q1):
        return True
    if d3 == 0 and _on_segment(p1, q1, p2):
        return True
    if d4 == 0 and _on_segment(p1, q1, q2):
        return True
    return False


def _is_simple(v: np.ndarray) -> bool:
    n = v.shape[0]
    # zero-length edges count as degenerate
    for i in range(n):
        if np.all(v[i] == v[(i + 1) % n]):
            return False
    for i in range(n):
        p1, q1 = v[i], v[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # adjacent edges share a vertex by construction
            if _segments_touch(p1, q1, v[j], v[(j + 1) % n]):
                return False
    return True


def split_polygon(poly: Polygon, cut: CutLine) -> tuple[Polygon, Polygon]:
    """Split ``poly`` along the chord described by ``cut``.

    Returns two CCW polygons whose areas sum to the parent's. The chord
    endpoints are computed once and inserted verbatim into both children,
    so the shared edge is bit-identical on either side (this is what makes
    half-open rasterization partition pixels exactly).
    """
    cut.validate(poly)
    pa, pb = cut.endpoints(poly)
    _check_chord_inside(poly, cut, pa, pb)
    v = poly.vertices
    n = len(poly)
    a, b = cut.edge_a, cut.edge_b

    def walk(start_pt, first, last, end_pt):
        pts = [start_pt]
        i = first
        while True:
            pts.append(v[i])
            if i == last:
                break
            i = (i + 1) % n
        pts.append(end_pt)
        return np.array(pts)

    child1 = walk(pa, (a + 1) % n, b, pb)
    child2 = walk(pb, (b + 1) % n, a, pa)
    try:
        return Polygon(child1), Polygon(child2)
    except InvalidPolygonError as e:
        raise RejectedCutError(f"cut produced an invalid child: {e}") from e


def _check_chord_inside(poly: Polygon, cut: CutLine, pa, pb):
    v = poly.vertices
    n = len(poly)
    mid = 0.5 * (pa + pb)
    if not bool(points_in_polygon(mid[None, :], poly)[0]):
        raise RejectedCutError("chord midpoint falls outside the polygon")
    for i in range(n):
        if i in (cut.edge_a, cut.edge_b):
            continue
        d1 = _orient(pa, pb, v[i])
        d2 = _orient(pa, pb, v[(i + 1) % n])
        d3 = _orient(v[i], v[(i + 1) % n], pa)
        d4 = _orient(v[i], v[(i + 1) % n], pb)
        if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)):
            raise RejectedCutError("chord crosses a polygon edge between its endpoints")


def sample_cut(poly: Polygon, mode: str = "random", rng=None, n_retry: int = 100) -> CutLine:
    """Draw a valid cut for ``poly``.

    ``mode="random"`` picks two non-adjacent edges and uniform parameters in
    [0.25, 0.75]; ``mode="axis-aligned"`` picks a horizontal or vertical line
    and keeps it only when both crossed edges satisfy the same constraints.
    """
    if mode not in ("random", "axis-aligned"):
        raise ValueError(f"unknown cut mode: {mode!r}")
    if rng is None:
        rng = np.random.default_rng()
    n = len(poly)
    if n < 4 and mode == "random":
        # a triangle has no pair of non-adjacent edges
        raise CutSamplingError("polygon has no non-adjacent edge pair")
    for _ in range(n_retry):
        cut = _propose_axis(poly, rng) if mode == "axis-aligned" else _propose_random(poly, rng, n)
        if cut is None:
            continue
        try:
            cut.validate(poly)
            pa, pb = cut.endpoints(poly)
            _check_chord_inside(poly, cut, pa, pb)
        except RejectedCutError:
            continue
        return cut
    raise CutSamplingError(f"no valid {mode} cut found in {n_retry} attempts")


def _propose_random(poly: Polygon, rng, n) -> CutLine | None:
    a = int(rng.integers(n))
    b = int(rng.integers(n))
    t_a = float(rng.uniform(0.25, 0.75))
    t_b = float(rng.uniform(0.25, 0.75))
    if a == b or (a - b) % n in (1, n - 1):
        return None
    return CutLine(a, b, t_a, t_b)


def _propose_axis(poly: Polygon, rng) -> CutLine | None:
    v = poly.vertices
    n = len(poly)
    vertical = bool(rng.integers(2))
    axis = 0 if vertical else 1
    lo, hi = float(v[:, axis].min()), float(v[:, axis].max())
    u = float(rng.uniform(lo, hi))
    hits = []
    for i in range(n):
        c0, c1 = v[i, axis], v[(i + 1) % n, axis]
        if (c0 <= u < c1) or (c1 <= u < c0):
            t = (u - c0) / (c1 - c0)
            hits.append((i, t))
    if len(hits) != 2:
        return None
    (ea, ta), (eb, tb) = hits
    return CutLine(ea, eb, ta, tb, axis=axis, axis_value=u)


_QUARTER_TURNS = {
    0: lambda p: p,
    1: lambda p: np.stack([-p[:, 1], p[:, 0]], axis=1),
    2: lambda p: -p,
    3: lambda p: np.stack([p[:, 1], -p[:, 0]], axis=1),
}


def rotate_points(points: np.ndarray, rotation_bin: int, num_bins: int) -> np.ndarray:
    """Rotate points about the origin by ``2*pi*bin/num_bins``.

    Quarter turns (including the identity) are computed exactly by
    coordinate swaps, never through cos/sin, so bins that compose to a full
    turn round-trip without trigonometric error.
    """
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    k = rotation_bin % num_bins
    q, rem = divmod(4 * k, num_bins)
    pts = np.asarray(points, dtype=np.float64)
    if rem == 0:
        return _QUARTER_TURNS[q % 4](pts).astype(np.float64, copy=False)
    ang = 2.0 * math.pi * k / num_bins
    c, s = math.cos(ang), math.sin(ang)
    return np.stack([c * pts[:, 0] - s * pts[:, 1], s * pts[:, 0] + c * pts[:, 1]], axis=1)


def transform(poly: Polygon, rotation_bin: int, num_bins: int, center) -> Polygon:
    """Rotate ``poly`` about its centroid by ``2*pi*bin/num_bins``, then
    translate so the centroid lands on ``center``."""
    if not (num_bins >= 1 and 0 <= rotation_bin < num_bins):
        raise ValueError(f"rotation bin {rotation_bin} invalid for {num_bins} bins")
    c = polygon_centroid(poly)
    rotated = rotate_points(poly.vertices - c, rotation_bin, num_bins)
    return Polygon(rotated + np.asarray(center, dtype=np.float64))


def _parity_fill(verts: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Half-open inside test on the grid ``ys x xs`` (row-major result).

    Counts, per sample point, the canonically-oriented edges that span the
    point's y and whose line has the point strictly to its left. Odd count
    means inside. Points exactly on a left/bottom edge come out inside,
    points on a right/top edge outside.
    """
    inside = np.zeros((ys.size, xs.size), dtype=bool)
    n = verts.shape[0]
    for i in range(n):
        p, q = verts[i], verts[(i + 1) % n]
        # canonical orientation: identical arithmetic for an edge shared
        # (in opposite directions) by two abutting polygons
        if (p[1], p[0]) <= (q[1], q[0]):
            lo, hi = p, q
        else:
            lo, hi = q, p
        if lo[1] == hi[1]:
            continue  # horizontal edges never span a scanline
        rows = (ys >= lo[1]) & (ys < hi[1])
        if not rows.any():
            continue
        cross = (hi[0] - lo[0]) * (ys[rows, None] - lo[1]) - (hi[1] - lo[1]) * (xs[None, :] - lo[0])
        inside[rows] ^= cross > 0.0
    return inside


def rasterize(poly: Polygon, width: int, height: int) -> np.ndarray:
    """Binary occupancy mask of ``poly`` on the unit canvas."""
    return rasterize_box(poly, width, height, (0.0, 0.0, 1.0, 1.0))


def rasterize_box(poly: Polygon, width: int, height: int, box) -> np.ndarray:
    """Rasterize onto an arbitrary axis-aligned box (same half-open rule)."""
    if width < 1 or height < 1:
        raise ValueError("raster dimensions must be >= 1")
    x0, y0, x1, y1 = box
    xs = x0 + (np.arange(width) + 0.5) * ((x1 - x0) / width)
    ys = y0 + (np.arange(height) + 0.5) * ((y1 - y0) / height)
    return _parity_fill(poly.vertices, xs, ys).astype(np.uint8)


def points_in_polygon(points: np.ndarray, poly: Polygon) -> np.ndarray:
    """Vectorized half-open inside test for arbitrary points (n, 2)."""
    pts = np.asarray(points, dtype=np.float64)
    verts = poly.vertices
    n = verts.shape[0]
    count = np.zeros(pts.shape[0], dtype=np.int64)
    for i in range(n):
        p, q = verts[i], verts[(i + 1) % n]
        if (p[1], p[0]) <= (q[1], q[0]):
            lo, hi = p, q
        else:
            lo, hi = q, p
        if lo[1] == hi[1]:
            continue
        span = (pts[:, 1] >= lo[1]) & (pts[:, 1] < hi[1])
        cross = (hi[0] - lo[0]) * (pts[:, 1] - lo[1]) - (hi[1] - lo[1]) * (pts[:, 0] - lo[0])
        count += span & (cross > 0.0)
    return (count % 2).astype(bool)


def mask_overlap(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    """(intersection, union) pixel counts of two binary masks."""
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    aa = a.astype(bool)
    bb = b.astype(bool)
    return int(np.logical_and(aa, bb).sum()), int(np.logical_or(aa, bb).sum())


def poly_to_text(poly: Polygon) -> str:
    """One-line text form ``x0,y0 x1,y1 ...`` with 9 significant digits."""
    return " ".join(f"{x:.9g},{y:.9g}" for x, y in poly.vertices)


def poly_from_text(line: str) -> Polygon:
    pts = []
    for tok in line.split():
        x, _, y = tok.partition(",")
        pts.append((float(x), float(y)))
    return Polygon(np.array(pts, dtype=np.float64))
