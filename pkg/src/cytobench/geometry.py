"""Planar polygon primitives on the pixel grid.

Everything downstream (feature measurement, mask IoU, nucleus expansion)
funnels through the small set of operations in this module: simple-polygon
validation, convex hulls, rotating calipers, pixel-center rasterization and
crack-boundary tracing of binary masks.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "GeometryError",
    "Polygon",
    "convex_hull",
    "hull_diameter",
    "hull_width",
    "rasterize",
    "trace_mask",
]


class GeometryError(ValueError):
    """Raised for degenerate or self-intersecting geometry."""


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _is_simple(v: np.ndarray) -> bool:
    """True when no two non-adjacent edges intersect or touch.

    O(n^2) orientation tests, vectorized over the partner edges of each
    edge in turn. Adjacent edges share exactly one endpoint and are allowed.
    """
    n = len(v)
    a0 = v
    a1 = np.roll(v, -1, axis=0)
    for i in range(n - 2):
        # partners strictly after i, skipping the shared-vertex neighbours
        j0 = i + 2
        j1 = n if i > 0 else n - 1  # edge 0 is adjacent to edge n-1
        if j0 >= j1:
            continue
        p0, p1 = a0[i], a1[i]
        q0, q1 = a0[j0:j1], a1[j0:j1]
        d1 = np.cross(p1 - p0, q0 - p0)
        d2 = np.cross(p1 - p0, q1 - p0)
        d3 = np.cross(q1 - q0, p0 - q0)
        d4 = np.cross(q1 - q0, p1 - q0)
        proper = ((d1 > 0) != (d2 > 0)) & ((d3 > 0) != (d4 > 0))
        if proper.any():
            return False
        # collinear touching: an endpoint of one segment lying on the other
        if _touches(p0, p1, q0, q1, d1, d2, d3, d4):
            return False
    return True


def _touches(p0, p1, q0, q1, d1, d2, d3, d4) -> bool:
    def on_segment(s0, s1, pt):
        lo = np.minimum(s0, s1)
        hi = np.maximum(s0, s1)
        return np.all((pt >= lo) & (pt <= hi), axis=-1)

    hit = np.zeros(len(q0), dtype=bool)
    hit |= (d1 == 0) & on_segment(p0, p1, q0)
    hit |= (d2 == 0) & on_segment(p0, p1, q1)
    hit |= (d3 == 0) & on_segment(q0, q1, p0)
    hit |= (d4 == 0) & on_segment(q0, q1, p1)
    return bool(hit.any())


class Polygon:
    """A simple polygon in pixel coordinates, implicitly closed.

    Vertices are normalized to counter-clockwise orientation (positive
    shoelace sign in plain x/y axes) on construction. An explicit closing
    vertex equal to the first one is dropped.
    """

    __slots__ = ("vertices",)

    def __init__(self, vertices, validate: bool = True):
        v = np.array(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise GeometryError("vertices must form an (n, 2) array")
        if len(v) > 1 and np.array_equal(v[0], v[-1]):
            v = v[:-1]
        if len(v) < 3:
            raise GeometryError("polygon needs at least 3 distinct vertices")
        if np.any(np.all(v == np.roll(v, -1, axis=0), axis=1)):
            raise GeometryError("repeated consecutive vertex")
        area = _signed_area(v)
        if area == 0.0:
            raise GeometryError("degenerate polygon: zero signed area")
        if area < 0.0:
            v = np.ascontiguousarray(v[::-1])
        if validate and not _is_simple(v):
            raise GeometryError("self-intersecting polygon")
        v.setflags(write=False)
        self.vertices = v

    def __len__(self) -> int:
        return len(self.vertices)

    def __repr__(self) -> str:
        return f"Polygon({len(self.vertices)} vertices)"

    def area(self) -> float:
        """Enclosed area in px^2 (always positive after normalization)."""
        return _signed_area(self.vertices)

    def perimeter(self) -> float:
        d = np.roll(self.vertices, -1, axis=0) - self.vertices
        return float(np.hypot(d[:, 0], d[:, 1]).sum())

    def centroid(self) -> tuple[float, float]:
        """Area centroid (not the vertex mean)."""
        v = self.vertices
        x, y = v[:, 0], v[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        cross = x * yn - xn * y
        a = cross.sum() / 2.0
        cx = float(((x + xn) * cross).sum() / (6.0 * a))
        cy = float(((y + yn) * cross).sum() / (6.0 * a))
        return cx, cy

    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)."""
        v = self.vertices
        return (
            float(v[:, 0].min()),
            float(v[:, 1].min()),
            float(v[:, 0].max()),
            float(v[:, 1].max()),
        )

    def contains_point(self, x: float, y: float) -> bool:
        """Even-odd rule; crossings strictly to the right of the point count."""
        v = self.vertices
        x1, y1 = v[:, 0], v[:, 1]
        x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
        c = ((y1 <= y) & (y < y2)) | ((y2 <= y) & (y < y1))
        if not c.any():
            return False
        t = (y - y1[c]) / (y2[c] - y1[c])
        xs = x1[c] + t * (x2[c] - x1[c])
        return int((xs > x).sum()) % 2 == 1

    def translated(self, dx: float, dy: float) -> "Polygon":
        return Polygon(self.vertices + np.array([dx, dy]), validate=False)


def convex_hull(points) -> np.ndarray:
    """Convex hull of a point set via Andrew's monotone chain.

    Returns hull vertices counter-clockwise with collinear points removed.
    """
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) < 3:
        raise GeometryError("hull needs at least 3 distinct points")
    # np.unique sorts lexicographically by (x, y), which is what the chain needs

    def half(points_iter):
        chain: list[np.ndarray] = []
        for p in points_iter:
            while len(chain) > 1 and np.cross(chain[-1] - chain[-2], p - chain[-2]) <= 0:
                chain.pop()
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        raise GeometryError("all points collinear")
    return hull


def hull_diameter(hull: np.ndarray) -> float:
    """Maximum vertex distance of a strictly convex CCW hull (rotating calipers)."""
    n = len(hull)
    if n < 3:
        raise GeometryError("hull must have at least 3 vertices")

    def area2(a, b, c):
        return abs(float(np.cross(b - a, c - a)))

    best = 0.0
    j = 1
    for i in range(n):
        ni = (i + 1) % n
        # advance the antipodal pointer while the opposite triangle grows
        steps = 0
        while area2(hull[i], hull[ni], hull[(j + 1) % n]) > area2(hull[i], hull[ni], hull[j]):
            j = (j + 1) % n
            steps += 1
            if steps > n:
                raise GeometryError("caliper walk failed to terminate")
        best = max(
            best,
            float(np.hypot(*(hull[i] - hull[j]))),
            float(np.hypot(*(hull[ni] - hull[j]))),
        )
    return best


def hull_width(hull: np.ndarray) -> float:
    """Minimum width over edge directions of a strictly convex CCW hull."""
    n = len(hull)
    if n < 3:
        raise GeometryError("hull must have at least 3 vertices")

    def edge_dist(i, k):
        e = hull[(i + 1) % n] - hull[i]
        return float(np.cross(e, hull[k] - hull[i])) / float(np.hypot(e[0], e[1]))

    width = np.inf
    j = 1
    for i in range(n):
        steps = 0
        while edge_dist(i, (j + 1) % n) > edge_dist(i, j):
            j = (j + 1) % n
            steps += 1
            if steps > n:
                raise GeometryError("caliper walk failed to terminate")
        width = min(width, edge_dist(i, j))
    return float(width)


def rasterize(poly: Polygon, width: int, height: int) -> np.ndarray:
    """Binary mask of the pixels whose center lies inside the polygon.

    Pixel (row i, col j) has center (j + 0.5, i + 0.5); membership follows
    the even-odd rule with crossings counted strictly to the right of the
    center, which makes boundary ties deterministic.
    """
    mask = np.zeros((height, width), dtype=bool)
    v = poly.vertices
    xmin, ymin, xmax, ymax = poly.bounds()
    r0 = max(0, int(np.floor(ymin)))
    r1 = min(height, int(np.ceil(ymax)) + 1)
    c0 = max(0, int(np.floor(xmin)))
    c1 = min(width, int(np.ceil(xmax)) + 1)
    if r0 >= r1 or c0 >= c1:
        return mask
    x1, y1 = v[:, 0], v[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    centers = np.arange(c0, c1) + 0.5
    for i in range(r0, r1):
        yc = i + 0.5
        c = ((y1 <= yc) & (yc < y2)) | ((y2 <= yc) & (yc < y1))
        if not c.any():
            continue
        t = (yc - y1[c]) / (y2[c] - y1[c])
        xs = np.sort(x1[c] + t * (x2[c] - x1[c]))
        right = len(xs) - np.searchsorted(xs, centers, side="right")
        mask[i, c0:c1] = (right % 2) == 1
    return mask


def trace_mask(mask: np.ndarray) -> Polygon:
    """Trace the crack boundary of a single 4-connected, hole-free region.

    The returned polygon has vertices on the integer corner lattice and its
    even-odd rasterization reproduces ``mask`` exactly. Raises if the mask
    is empty, has holes, or has more than one component (those leave
    boundary edges unvisited).
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise GeometryError("cannot trace an empty mask")
    up = np.zeros_like(m)
    up[1:, :] = m[:-1, :]
    down = np.zeros_like(m)
    down[:-1, :] = m[1:, :]
    left = np.zeros_like(m)
    left[:, 1:] = m[:, :-1]
    right = np.zeros_like(m)
    right[:, :-1] = m[:, 1:]

    edges: dict[tuple[int, int], tuple[int, int]] = {}

    def add(starts_r, starts_c, dr0, dc0, dr1, dc1):
        for r, c in zip(starts_r.tolist(), starts_c.tolist()):
            start = (c + dc0, r + dr0)
            end = (c + dc1, r + dr1)
            if start in edges:
                raise GeometryError("mask boundary pinches at a corner")
            edges[start] = end

    r, c = np.nonzero(m & ~up)
    add(r, c, 0, 0, 0, 1)  # top side, travels +x
    r, c = np.nonzero(m & ~right)
    add(r, c, 0, 1, 1, 1)  # right side, travels +y
    r, c = np.nonzero(m & ~down)
    add(r, c, 1, 1, 1, 0)  # bottom side, travels -x
    r, c = np.nonzero(m & ~left)
    add(r, c, 1, 0, 0, 0)  # left side, travels -y

    start = min(edges)
    path = [start]
    cur = edges.pop(start)
    while cur != start:
        path.append(cur)
        nxt = edges.pop(cur, None)
        if nxt is None:
            raise GeometryError("open boundary while tracing mask")
        cur = nxt
    if edges:
        raise GeometryError("mask is not a single hole-free component")

    # merge collinear runs; directions are axis-aligned unit steps
    merged = []
    n = len(path)
    for k in range(n):
        prev = path[k - 1]
        here = path[k]
        nxt = path[(k + 1) % n]
        d0 = (here[0] - prev[0], here[1] - prev[1])
        d1 = (nxt[0] - here[0], nxt[1] - here[1])
        if d0 != d1:
            merged.append(here)
    # crack boundaries of 4-connected hole-free masks are simple by construction
    return Polygon(np.array(merged, dtype=float), validate=False)
