"""Spherical Voronoi primal mesh and Delaunay dual for TRiSK.

Cells are Voronoi regions around generator points on the sphere; vertices are
circumcentres of the Delaunay triangles.  Variable-degree tables are stored
padded with ``-1`` (and zero weights), together with a per-row count.

Conventions
-----------
* ``cells_on_edge[e] = (lo, hi)`` with ``lo < hi``.  The edge normal points out
  of the higher-index cell, so ``n_sign[e] = (-1, +1)``.
* ``edges_on_cell[i]`` and ``vertices_on_cell[i]`` run counterclockwise seen
  from outside the sphere; edge slot ``k`` joins vertex slots ``k`` and
  ``k + 1``, so the kite at vertex slot ``k`` is bounded by edge slots
  ``k - 1`` and ``k``.
* ``t_sign[e, j] = +1`` iff ``vertices_on_edge[e, j]`` lies in the direction
  ``k x n_e`` seen from the edge point.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull

EARTH_RADIUS = 6371220.0
MAX_LEVEL = 8
MAX_LLOYD = 500
MAX_REFINE_FACTOR = 64


class MeshError(ValueError):
    """Base class for mesh construction and I/O failures."""


class TopologyError(MeshError):
    pass


class GeometryError(MeshError):
    pass


class MeshParseError(MeshError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshVersionError(MeshError):
    pass


@dataclass(frozen=True, eq=False)
class VoronoiMesh:
    radius: float
    cell_xyz: np.ndarray          # (nc, 3) unit vectors
    vertex_xyz: np.ndarray        # (nv, 3)
    edge_xyz: np.ndarray          # (ne, 3)
    n_edges_on_cell: np.ndarray   # (nc,)
    edges_on_cell: np.ndarray     # (nc, maxdeg)
    vertices_on_cell: np.ndarray  # (nc, maxdeg)
    cells_on_cell: np.ndarray     # (nc, maxdeg)
    cells_on_edge: np.ndarray     # (ne, 2)
    vertices_on_edge: np.ndarray  # (ne, 2)
    edges_on_vertex: np.ndarray   # (nv, 3)
    cells_on_vertex: np.ndarray   # (nv, 3)
    n_edges_on_edge: np.ndarray   # (ne,)
    edges_on_edge: np.ndarray     # (ne, maxee)
    dv_edge: np.ndarray           # l_e, primal (Voronoi) edge length
    dc_edge: np.ndarray           # d_e, distance between the two cell centres
    area_cell: np.ndarray
    area_vertex: np.ndarray
    kite_area: np.ndarray         # (nc, maxdeg), aligned with vertices_on_cell
    n_sign: np.ndarray            # (ne, 2), aligned with cells_on_edge
    t_sign: np.ndarray            # (ne, 2), aligned with vertices_on_edge
    weights_on_edge: np.ndarray   # (ne, maxee), aligned with edges_on_edge

    @property
    def n_cells(self):
        return self.cell_xyz.shape[0]

    @property
    def n_edges(self):
        return self.edge_xyz.shape[0]

    @property
    def n_vertices(self):
        return self.vertex_xyz.shape[0]

    @property
    def l_e(self):
        return self.dv_edge

    @property
    def d_e(self):
        return self.dc_edge

    @property
    def cell_lonlat(self):
        return xyz_to_lonlat(self.cell_xyz)

    @property
    def vertex_lonlat(self):
        return xyz_to_lonlat(self.vertex_xyz)

    @property
    def edge_lonlat(self):
        return xyz_to_lonlat(self.edge_xyz)

    def edge_normals(self):
        """Unit tangent vectors n_e at the edge points, pointing out of the higher-index cell."""
        lo = self.cell_xyz[self.cells_on_edge[:, 0]]
        hi = self.cell_xyz[self.cells_on_edge[:, 1]]
        x = self.edge_xyz
        d = lo - hi
        d = d - np.sum(d * x, axis=1)[:, None] * x
        return d / np.linalg.norm(d, axis=1)[:, None]

    def kites_on_vertex(self):
        """(nv, 3) kite areas aligned with ``cells_on_vertex``."""
        out = np.zeros(self.cells_on_vertex.shape)
        for j in range(3):
            cells = self.cells_on_vertex[:, j]
            slot = np.argmax(self.vertices_on_cell[cells] == np.arange(self.n_vertices)[:, None], axis=1)
            out[:, j] = self.kite_area[cells, slot]
        return out

    def cell_neighbors(self, i):
        return self.cells_on_cell[i, : self.n_edges_on_cell[i]]

    def derived(self, key, build):
        """Memoize a table derived from this (immutable) mesh."""
        cache = self.__dict__.setdefault("_derived", {})
        if key not in cache:
            cache[key] = build(self)
        return cache[key]

    def __eq__(self, other):
        if not isinstance(other, VoronoiMesh):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or a.dtype != b.dtype or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


# ---------------------------------------------------------------------------
# spherical geometry helpers

def xyz_to_lonlat(xyz):
    """Longitude in [0, 2pi) and latitude in [-pi/2, pi/2]."""
    xyz = np.asarray(xyz, dtype=float)
    lon = np.mod(np.arctan2(xyz[..., 1], xyz[..., 0]), 2.0 * np.pi)
    lat = np.arcsin(np.clip(xyz[..., 2] / np.linalg.norm(xyz, axis=-1), -1.0, 1.0))
    return lon, lat


def lonlat_to_xyz(lon, lat):
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def arc_length(a, b):
    """Great-circle angle between unit vectors (rows)."""
    return np.arctan2(np.linalg.norm(np.cross(a, b - a), axis=-1), np.sum(a * b, axis=-1))


def triangle_area(a, b, c):
    """Signed area of the spherical triangle (a, b, c) on the unit sphere.

    Positive when the corners run counterclockwise seen from outside.
    """
    det = np.einsum("...i,...i->...", a, np.cross(b - a, c - a))
    den = 1.0 + np.einsum("...i,...i->...", a, b) + np.einsum("...i,...i->...", b, c) \
        + np.einsum("...i,...i->...", c, a)
    return 2.0 * np.arctan2(det, den)


# ---------------------------------------------------------------------------
# generator point sets

def _icosahedron():
    t = (1.0 + math.sqrt(5.0)) / 2.0
    pts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    return _normalize(pts), faces


def icosphere_points(level):
    """Generators and triangles of the ``level``-times subdivided icosahedron."""
    pts, faces = _icosahedron()
    pts = list(pts)
    for _ in range(level):
        cache = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = pts[a] + pts[b]
                pts.append(m / np.linalg.norm(m))
                cache[key] = len(pts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(pts), np.array(faces, dtype=np.int64)


def _hull_triangles(points):
    return np.asarray(ConvexHull(points).simplices, dtype=np.int64)


# ---------------------------------------------------------------------------
# connectivity

def build_connectivity(points, triangles):
    """Connectivity tables of the Voronoi mesh dual to a spherical triangulation.

    Returns a dict of integer tables plus the oriented, canonically ordered
    triangle list (one triangle per Voronoi vertex).
    """
    points = np.asarray(points, dtype=float)
    tri = np.array(triangles, dtype=np.int64)
    nc = points.shape[0]

    # orient outward, rotate smallest id first, sort: deterministic vertex ids
    a, b, c = points[tri[:, 0]], points[tri[:, 1]], points[tri[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    shift = np.argmin(tri, axis=1)
    idx = (shift[:, None] + np.arange(3)[None, :]) % 3
    tri = np.take_along_axis(tri, idx, axis=1)
    tri = tri[np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))]
    nv = tri.shape[0]

    pairs = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    owner = np.concatenate([np.arange(nv)] * 3)
    pairs = np.sort(pairs, axis=1)
    edges, inv, counts = np.unique(pairs, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    bad = np.nonzero(counts != 2)[0]
    if bad.size:
        e = int(bad[0])
        raise TopologyError(f"edge {e} (cells {edges[e, 0]}, {edges[e, 1]}) is shared by "
                            f"{counts[e]} triangles, expected 2")
    ne = edges.shape[0]
    order = np.argsort(inv, kind="stable")
    vertices_on_edge = owner[order].reshape(ne, 2)
    cells_on_edge = edges

    used = np.zeros(nc, dtype=bool)
    used[tri.ravel()] = True
    if not used.all():
        raise TopologyError(f"generator {int(np.argmin(used))} is not part of the triangulation")

    # vertex -> its three edges, aligned with the triangle corners' opposite pairs
    edges_on_vertex = inv.reshape(3, nv).T.copy()
    cells_on_vertex = tri.copy()

    # vertices around each cell, counterclockwise from outside
    vert_of_cell = [[] for _ in range(nc)]
    for v in range(nv):
        for i in tri[v]:
            vert_of_cell[i].append(v)
    deg = np.array([len(x) for x in vert_of_cell])
    small = np.nonzero(deg < 3)[0]
    if small.size:
        raise TopologyError(f"cell {int(small[0])} has {deg[small[0]]} edges, at least 3 required")
    maxdeg = int(deg.max())

    # walk the oriented triangles around each cell: triangle (a, b, c) is
    # followed counterclockwise about a by the triangle holding (a, c, d)
    succ = [dict() for _ in range(nc)]
    for v in range(nv):
        a, b, c = (int(x) for x in tri[v])
        succ[a][b] = (c, v)
        succ[b][c] = (a, v)
        succ[c][a] = (b, v)
    vertices_on_cell = np.full((nc, maxdeg), -1, dtype=np.int64)
    for i in range(nc):
        nxt = succ[i]
        if len(nxt) != deg[i]:
            raise TopologyError(f"cell {i}: non-manifold vertex fan")
        start_nb = min(nxt, key=lambda nb: nxt[nb][1])
        ring = []
        nb = start_nb
        for _ in range(deg[i]):
            nb, v = nxt[nb]
            ring.append(v)
            if nb not in nxt:
                raise TopologyError(f"cell {i}: open vertex fan")
        if nb != start_nb or len(set(ring)) != deg[i]:
            raise TopologyError(f"cell {i}: vertex fan is not a single cycle")
        start = int(np.argmin(ring))
        vertices_on_cell[i, : deg[i]] = np.roll(ring, -start)

    # edge between consecutive vertex slots k, k+1
    edge_lookup = {}
    for e in range(ne):
        edge_lookup[(int(vertices_on_edge[e, 0]), int(vertices_on_edge[e, 1]))] = e
        edge_lookup[(int(vertices_on_edge[e, 1]), int(vertices_on_edge[e, 0]))] = e
    edges_on_cell = np.full((nc, maxdeg), -1, dtype=np.int64)
    cells_on_cell = np.full((nc, maxdeg), -1, dtype=np.int64)
    for i in range(nc):
        n = deg[i]
        for k in range(n):
            va, vb = vertices_on_cell[i, k], vertices_on_cell[i, (k + 1) % n]
            e = edge_lookup.get((int(va), int(vb)))
            if e is None or i not in cells_on_edge[e]:
                raise TopologyError(f"cell {i}: vertices {va} and {vb} are not joined by an edge of the cell")
            edges_on_cell[i, k] = e
            lo, hi = cells_on_edge[e]
            cells_on_cell[i, k] = hi if lo == i else lo

    # edges on edge: walk counterclockwise around each owning cell starting after e
    maxee = 2 * maxdeg - 2
    n_eoe = np.zeros(ne, dtype=np.int64)
    edges_on_edge = np.full((ne, maxee), -1, dtype=np.int64)
    for e in range(ne):
        row = []
        for i in cells_on_edge[e]:
            n = deg[i]
            k = int(np.nonzero(edges_on_cell[i, :n] == e)[0][0])
            row += [int(edges_on_cell[i, (k + j) % n]) for j in range(1, n)]
        n_eoe[e] = len(row)
        edges_on_edge[e, : len(row)] = row
    edges_on_edge = edges_on_edge[:, : int(n_eoe.max())]  # same width as a file round trip

    return dict(
        triangles=tri,
        n_edges_on_cell=deg.astype(np.int64),
        edges_on_cell=edges_on_cell,
        vertices_on_cell=vertices_on_cell,
        cells_on_cell=cells_on_cell,
        cells_on_edge=cells_on_edge,
        vertices_on_edge=vertices_on_edge,
        edges_on_vertex=edges_on_vertex,
        cells_on_vertex=cells_on_vertex,
        n_edges_on_edge=n_eoe,
        edges_on_edge=edges_on_edge,
    )


# ---------------------------------------------------------------------------
# geometry, signs, weights

def voronoi_vertices(points, triangles):
    p = np.asarray(points)
    t = np.asarray(triangles)
    return _normalize(np.cross(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]]))


def edge_points(cell_xyz, vertex_xyz, cells_on_edge, vertices_on_edge, strict=True):
    """Intersection of the arc joining the two cell centres with the arc joining the two vertices.

    With ``strict=False`` a degenerate (zero-length) primal edge falls back to
    its vertex position instead of raising.
    """
    c0, c1 = cell_xyz[cells_on_edge[:, 0]], cell_xyz[cells_on_edge[:, 1]]
    v0, v1 = vertex_xyz[vertices_on_edge[:, 0]], vertex_xyz[vertices_on_edge[:, 1]]
    d = np.cross(np.cross(c0, c1 - c0), np.cross(v0, v1 - v0))
    norm = np.linalg.norm(d, axis=1)
    degenerate = norm < 1e-15
    if not strict and np.any(degenerate):
        d[degenerate] = v0[degenerate]
        norm[degenerate] = 1.0
    elif np.any(degenerate):
        e = int(np.nonzero(degenerate)[0][0])
        raise GeometryError(f"edge {e}: degenerate edge point (zero-length edge)")
    d /= norm[:, None]
    s = np.sign(np.einsum("ij,ij->i", d, c0 + c1))
    s[s == 0] = 1.0
    return d * s[:, None]


def compute_geometry(cell_xyz, vertex_xyz, edge_xyz, conn, radius):
    """Lengths, areas and kite areas on a sphere of the given radius."""
    r2 = radius * radius
    ce, ve = conn["cells_on_edge"], conn["vertices_on_edge"]
    dv = radius * arc_length(vertex_xyz[ve[:, 0]], vertex_xyz[ve[:, 1]])
    dc = radius * arc_length(cell_xyz[ce[:, 0]], cell_xyz[ce[:, 1]])
    for name, arr in (("primal", dv), ("dual", dc)):
        if np.any(arr <= 0.0):
            e = int(np.nonzero(arr <= 0.0)[0][0])
            raise GeometryError(f"edge {e}: zero-length {name} edge")

    deg = conn["n_edges_on_cell"]
    voc, eoc = conn["vertices_on_cell"], conn["edges_on_cell"]
    nc, maxdeg = voc.shape
    kite = np.zeros((nc, maxdeg))
    area_cell = np.zeros(nc)
    xi = cell_xyz
    for k in range(maxdeg):
        has = deg > k
        rows = np.nonzero(has)[0]
        n = deg[rows]
        v = voc[rows, k]
        kp = (k + 1) % n
        vn = voc[rows, kp]
        e_prev = eoc[rows, (k - 1) % n]
        e_next = eoc[rows, k]
        kite[rows, k] = r2 * (
            triangle_area(xi[rows], edge_xyz[e_prev], vertex_xyz[v])
            + triangle_area(xi[rows], vertex_xyz[v], edge_xyz[e_next])
        )
        area_cell[rows] += r2 * triangle_area(xi[rows], vertex_xyz[v], vertex_xyz[vn])
    if np.any(area_cell <= 0.0):
        i = int(np.argmin(area_cell))
        raise GeometryError(f"cell {i}: non-positive area")
    tri = conn["cells_on_vertex"]
    area_vertex = r2 * triangle_area(cell_xyz[tri[:, 0]], cell_xyz[tri[:, 1]], cell_xyz[tri[:, 2]])
    if np.any(area_vertex <= 0.0):
        v = int(np.argmin(area_vertex))
        raise GeometryError(f"vertex {v}: non-positive dual area")
    if np.any(kite[np.arange(maxdeg)[None, :] < deg[:, None]] <= 0.0):
        warnings.warn("mesh has non-positive kite areas (triangulation not well centred)")
    return dv, dc, area_cell, area_vertex, kite


def compute_signs(cell_xyz, vertex_xyz, edge_xyz, cells_on_edge, vertices_on_edge):
    """n_sign by the index convention and t_sign from the geometry."""
    ne = cells_on_edge.shape[0]
    n_sign = np.empty((ne, 2), dtype=np.int64)
    hi_first = cells_on_edge[:, 0] > cells_on_edge[:, 1]
    n_sign[:, 0] = np.where(hi_first, 1, -1)
    n_sign[:, 1] = -n_sign[:, 0]

    hi = np.where(hi_first, cells_on_edge[:, 0], cells_on_edge[:, 1])
    lo = np.where(hi_first, cells_on_edge[:, 1], cells_on_edge[:, 0])
    x = edge_xyz
    n = cell_xyz[lo] - cell_xyz[hi]
    n = n - np.sum(n * x, axis=1)[:, None] * x
    tvec = np.cross(x, n)
    # vertex-to-vertex direction: robust even when x_e falls outside the Voronoi edge
    d = vertex_xyz[vertices_on_edge[:, 0]] - vertex_xyz[vertices_on_edge[:, 1]]
    s = np.sign(np.einsum("ij,ij->i", d, tvec)).astype(np.int64)
    if np.any(s == 0):
        e = int(np.nonzero(s == 0)[0][0])
        raise GeometryError(f"edge {e}: Voronoi edge is parallel to the cell-centre arc")
    t_sign = np.stack([s, -s], axis=1)
    return n_sign, t_sign


def compute_perp_weights(conn, area_cell, kite, n_sign, t_sign):
    """TRiSK tangential-reconstruction weights w[e, e'] for e' in EE(e).

    For the cell shared by e and e', the vertices met walking counterclockwise
    from e' to e are summed as kite fractions; the last of them (v*) is an
    endpoint of e.
    """
    deg = conn["n_edges_on_cell"]
    eoc, voc = conn["edges_on_cell"], conn["vertices_on_cell"]
    ce, ve = conn["cells_on_edge"], conn["vertices_on_edge"]
    eoe = conn["edges_on_edge"]
    ne = ce.shape[0]
    w = np.zeros(eoe.shape)
    for e in range(ne):
        col = 0
        for side in range(2):
            i = ce[e, side]
            n = deg[i]
            k = int(np.nonzero(eoc[i, :n] == e)[0][0])
            vstar = voc[i, k]
            ts = t_sign[e, 0] if ve[e, 0] == vstar else t_sign[e, 1]
            frac = kite[i, :n] / area_cell[i]
            for j in range(1, n):
                kp = (k + j) % n
                ep = eoc[i, kp]
                # vertices kp+1, ..., k (inclusive, cyclic)
                acc = 0.0
                m = (kp + 1) % n
                while True:
                    acc += frac[m]
                    if m == k:
                        break
                    m = (m + 1) % n
                nep = n_sign[ep, 0] if ce[ep, 0] == i else n_sign[ep, 1]
                w[e, col] = nep * ts * (acc - 0.5)
                col += 1
    return w


# ---------------------------------------------------------------------------
# assembly

def assemble_mesh(points, triangles, radius=EARTH_RADIUS):
    points = _normalize(np.asarray(points, dtype=float))
    conn = build_connectivity(points, triangles)
    vxyz = voronoi_vertices(points, conn["triangles"])
    exyz = edge_points(points, vxyz, conn["cells_on_edge"], conn["vertices_on_edge"])
    dv, dc, area_cell, area_vertex, kite = compute_geometry(points, vxyz, exyz, conn, radius)
    n_sign, t_sign = compute_signs(points, vxyz, exyz, conn["cells_on_edge"], conn["vertices_on_edge"])
    w = compute_perp_weights(conn, area_cell, kite, n_sign, t_sign)
    return VoronoiMesh(
        radius=float(radius),
        cell_xyz=points,
        vertex_xyz=vxyz,
        edge_xyz=exyz,
        n_edges_on_cell=conn["n_edges_on_cell"],
        edges_on_cell=conn["edges_on_cell"],
        vertices_on_cell=conn["vertices_on_cell"],
        cells_on_cell=conn["cells_on_cell"],
        cells_on_edge=conn["cells_on_edge"],
        vertices_on_edge=conn["vertices_on_edge"],
        edges_on_vertex=conn["edges_on_vertex"],
        cells_on_vertex=conn["cells_on_vertex"],
        n_edges_on_edge=conn["n_edges_on_edge"],
        edges_on_edge=conn["edges_on_edge"],
        dv_edge=dv,
        dc_edge=dc,
        area_cell=area_cell,
        area_vertex=area_vertex,
        kite_area=kite,
        n_sign=n_sign,
        t_sign=t_sign,
        weights_on_edge=w,
    )


# ---------------------------------------------------------------------------
# generation

def _lloyd_step(points, triangles, density):
    """Move generators to the density-weighted centroids of their cells.

    Each triangle contributes, to each of its corners, the two sub-triangles
    (corner, edge midpoint, circumcentre) of the corresponding Voronoi cell.
    """
    tri = np.asarray(triangles)
    vxyz = voronoi_vertices(points, tri)
    # circumcentre on the outward side of the triangle
    s = np.sign(np.einsum("ij,ij->i", vxyz, points[tri].sum(axis=1)))
    vxyz *= np.where(s == 0, 1.0, s)[:, None]
    acc = np.zeros_like(points)
    for a in range(3):
        ia = tri[:, a]
        xi = points[ia]
        for b in range(3):
            if b == a:
                continue
            xe = _normalize(xi + points[tri[:, b]])
            area = np.abs(triangle_area(xi, xe, vxyz))
            cen = _normalize(xi + xe + vxyz)
            np.add.at(acc, ia, (area * density(cen))[:, None] * cen)
    return _normalize(acc)


def _cap_spacing(refine_center, refine_radius, refine_factor):
    """Relative target spacing: 1/f inside the cap, graded linearly to 1 over one cap radius."""
    lon, lat = refine_center
    c = lonlat_to_xyz(lon, lat)
    width = refine_radius

    def spacing(x):
        r = np.arccos(np.clip(x @ c, -1.0, 1.0))
        s = (r - refine_radius) / width
        s = np.clip(s, 0.0, 1.0)
        return 1.0 / refine_factor + (1.0 - 1.0 / refine_factor) * s

    return spacing


def _refine_points(points, spacing, refine_factor):
    """Add edge midpoints of triangles whose target spacing is well below the current one."""
    passes = int(math.ceil(math.log2(refine_factor))) if refine_factor > 1 else 0
    pts = np.asarray(points)
    for p in range(passes):
        tri = _hull_triangles(pts)
        tri = np.sort(tri, axis=1)
        tri = tri[np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))]
        cen = _normalize(pts[tri].sum(axis=1))
        current = 0.5 ** p
        sel = tri[spacing(cen) < 0.75 * current]
        if sel.size == 0:
            break
        pairs = np.concatenate([sel[:, [0, 1]], sel[:, [1, 2]], sel[:, [0, 2]]])
        pairs = np.unique(np.sort(pairs, axis=1), axis=0)
        mids = _normalize(pts[pairs[:, 0]] + pts[pairs[:, 1]])
        pts = np.concatenate([pts, mids])
    if passes:
        # break exact co-circularity of inserted midpoints; seeded, so deterministic
        jitter = np.random.default_rng(0).standard_normal(pts.shape) * 1e-9
        pts = _normalize(pts + jitter)
    return pts


def generate_icosphere_mesh(subdivision_level=3, lloyd_iterations=0, radius=EARTH_RADIUS):
    """Quasi-uniform Voronoi mesh dual to the subdivided icosahedron.

    ``10 * 4**level + 2`` cells, 12 of them pentagons.
    """
    level = int(min(max(subdivision_level, 0), MAX_LEVEL))
    iters = int(min(max(lloyd_iterations, 0), MAX_LLOYD))
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts, faces = icosphere_points(level)
    uniform = lambda x: np.ones(x.shape[0])  # noqa: E731
    for _ in range(iters):
        pts = _lloyd_step(pts, faces, uniform)
    # Lloyd on the icosahedral triangulation keeps its topology
    return assemble_mesh(pts, faces, radius)


def generate_refined_mesh(subdivision_level=3, refine_center=(1.5 * math.pi, math.pi / 6),
                          refine_radius=math.pi / 8, refine_factor=4, lloyd_iterations=20,
                          radius=EARTH_RADIUS):
    """Variable-resolution mesh: cells shrink by about ``refine_factor`` inside a spherical cap.

    Generators are added by local midpoint refinement in nested caps, then
    relaxed by density-weighted Lloyd iterations (density ~ spacing**-4).
    """
    f = int(min(max(refine_factor, 1), MAX_REFINE_FACTOR))
    if f == 1:
        return generate_icosphere_mesh(subdivision_level, lloyd_iterations, radius)
    if not 0.0 < refine_radius < math.pi:
        raise ValueError("refine_radius must lie in (0, pi)")
    level = int(min(max(subdivision_level, 0), MAX_LEVEL))
    iters = int(min(max(lloyd_iterations, 0), MAX_LLOYD))
    spacing = _cap_spacing(refine_center, refine_radius, f)
    density = lambda x: spacing(x) ** -4  # noqa: E731
    pts, _ = icosphere_points(level)
    pts = _refine_points(pts, spacing, f)
    for _ in range(iters):
        pts = _lloyd_step(pts, _hull_triangles(pts), density)
    return assemble_mesh(pts, _hull_triangles(pts), radius)


# ---------------------------------------------------------------------------
# MSWM1 file format

MAGIC = "MSWM1"


def _fmt(x):
    return "%.17g" % x


def write_mesh(mesh, path):
    """Write ``mesh`` as an MSWM1 text file.

    Sections: ``@cells`` (id x y z area degree), ``@edges`` (id x y z l d),
    ``@vertices`` (id x y z area), ``@connectivity`` (EC/VC/CC per cell,
    CE/VE per edge, EV/CV per vertex, EE per edge), ``@geometry`` (KITE per
    cell, NS/TS per edge) and ``@weights`` (W per edge).
    """
    m = mesh
    lines = [f"{MAGIC} {m.n_cells} {m.n_edges} {m.n_vertices} {_fmt(m.radius)}"]
    lines.append("@cells")
    for i in range(m.n_cells):
        x = m.cell_xyz[i]
        lines.append(f"{i} {_fmt(x[0])} {_fmt(x[1])} {_fmt(x[2])} {_fmt(m.area_cell[i])} {m.n_edges_on_cell[i]}")
    lines.append("@edges")
    for e in range(m.n_edges):
        x = m.edge_xyz[e]
        lines.append(f"{e} {_fmt(x[0])} {_fmt(x[1])} {_fmt(x[2])} {_fmt(m.dv_edge[e])} {_fmt(m.dc_edge[e])}")
    lines.append("@vertices")
    for v in range(m.n_vertices):
        x = m.vertex_xyz[v]
        lines.append(f"{v} {_fmt(x[0])} {_fmt(x[1])} {_fmt(x[2])} {_fmt(m.area_vertex[v])}")
    lines.append("@connectivity")
    for i in range(m.n_cells):
        n = m.n_edges_on_cell[i]
        lines.append(f"EC {i} " + " ".join(str(e) for e in m.edges_on_cell[i, :n]))
        lines.append(f"VC {i} " + " ".join(str(v) for v in m.vertices_on_cell[i, :n]))
        lines.append(f"CC {i} " + " ".join(str(c) for c in m.cells_on_cell[i, :n]))
    for e in range(m.n_edges):
        lines.append(f"CE {e} {m.cells_on_edge[e, 0]} {m.cells_on_edge[e, 1]}")
        lines.append(f"VE {e} {m.vertices_on_edge[e, 0]} {m.vertices_on_edge[e, 1]}")
        n = m.n_edges_on_edge[e]
        lines.append(f"EE {e} " + " ".join(str(x) for x in m.edges_on_edge[e, :n]))
    for v in range(m.n_vertices):
        lines.append(f"EV {v} " + " ".join(str(x) for x in m.edges_on_vertex[v]))
        lines.append(f"CV {v} " + " ".join(str(x) for x in m.cells_on_vertex[v]))
    lines.append("@geometry")
    for i in range(m.n_cells):
        n = m.n_edges_on_cell[i]
        lines.append(f"KITE {i} " + " ".join(_fmt(a) for a in m.kite_area[i, :n]))
    for e in range(m.n_edges):
        lines.append(f"NS {e} {m.n_sign[e, 0]} {m.n_sign[e, 1]}")
        lines.append(f"TS {e} {m.t_sign[e, 0]} {m.t_sign[e, 1]}")
    lines.append("@weights")
    for e in range(m.n_edges):
        n = m.n_edges_on_edge[e]
        lines.append(f"W {e} " + " ".join(_fmt(x) for x in m.weights_on_edge[e, :n]))
    lines.append("@end")
    Path(path).write_text("\n".join(lines) + "\n")


class _Reader:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self):
        if self.pos >= len(self.lines):
            raise MeshParseError("unexpected end of file", self.pos + 1)
        line = self.lines[self.pos]
        self.pos += 1
        return line.split()

    @property
    def lineno(self):
        return self.pos

    def expect(self, tag):
        tok = self.next()
        if tok != [tag]:
            raise MeshParseError(f"expected section {tag!r}, got {' '.join(tok)!r}", self.lineno)

    def row(self, tag, idx, nmin, nmax=None):
        tok = self.next()
        if tag is not None:
            if not tok or tok[0] != tag:
                raise MeshParseError(f"expected {tag!r} record", self.lineno)
            tok = tok[1:]
        try:
            if int(tok[0]) != idx:
                raise MeshParseError(f"expected id {idx}, got {tok[0]}", self.lineno)
        except (ValueError, IndexError):
            raise MeshParseError("bad record id", self.lineno) from None
        vals = tok[1:]
        if len(vals) < nmin or (nmax is not None and len(vals) > nmax):
            raise MeshParseError(f"wrong number of fields ({len(vals)})", self.lineno)
        return vals

    def ints(self, vals):
        try:
            return [int(x) for x in vals]
        except ValueError:
            raise MeshParseError("bad integer", self.lineno) from None

    def floats(self, vals):
        try:
            return [float(x) for x in vals]
        except ValueError:
            raise MeshParseError("bad float", self.lineno) from None


def read_mesh(path):
    """Read an MSWM1 file written by :func:`write_mesh`."""
    rd = _Reader(Path(path).read_text())
    head = rd.next()
    if not head or not head[0].startswith("MSWM"):
        raise MeshParseError("not an MSWM mesh file", 1)
    if head[0] != MAGIC:
        raise MeshVersionError(f"unsupported mesh file version {head[0]!r}, expected {MAGIC!r}")
    if len(head) != 5:
        raise MeshParseError("malformed header", 1)
    nc, ne, nv = rd.ints(head[1:4])
    (radius,) = rd.floats(head[4:5])

    rd.expect("@cells")
    cell_xyz = np.zeros((nc, 3))
    area_cell = np.zeros(nc)
    deg = np.zeros(nc, dtype=np.int64)
    for i in range(nc):
        vals = rd.row(None, i, 5, 5)
        f = rd.floats(vals[:4])
        cell_xyz[i], area_cell[i] = f[:3], f[3]
        deg[i] = rd.ints(vals[4:5])[0]
    maxdeg = int(deg.max()) if nc else 0

    rd.expect("@edges")
    edge_xyz = np.zeros((ne, 3))
    dv = np.zeros(ne)
    dc = np.zeros(ne)
    for e in range(ne):
        f = rd.floats(rd.row(None, e, 5, 5))
        edge_xyz[e], dv[e], dc[e] = f[:3], f[3], f[4]

    rd.expect("@vertices")
    vertex_xyz = np.zeros((nv, 3))
    area_vertex = np.zeros(nv)
    for v in range(nv):
        f = rd.floats(rd.row(None, v, 4, 4))
        vertex_xyz[v], area_vertex[v] = f[:3], f[3]

    rd.expect("@connectivity")
    eoc = np.full((nc, maxdeg), -1, dtype=np.int64)
    voc = np.full((nc, maxdeg), -1, dtype=np.int64)
    coc = np.full((nc, maxdeg), -1, dtype=np.int64)
    for i in range(nc):
        n = deg[i]
        eoc[i, :n] = rd.ints(rd.row("EC", i, n, n))
        voc[i, :n] = rd.ints(rd.row("VC", i, n, n))
        coc[i, :n] = rd.ints(rd.row("CC", i, n, n))
    ce = np.zeros((ne, 2), dtype=np.int64)
    vte = np.zeros((ne, 2), dtype=np.int64)
    eoe_rows = []
    for e in range(ne):
        vals = rd.row("CE", e, 0)
        if len(vals) != 2:
            raise TopologyError(f"edge {e} has {len(vals)} cells, expected 2 (line {rd.lineno})")
        ce[e] = rd.ints(vals)
        vte[e] = rd.ints(rd.row("VE", e, 2, 2))
        eoe_rows.append(rd.ints(rd.row("EE", e, 0)))
    n_eoe = np.array([len(r) for r in eoe_rows], dtype=np.int64)
    maxee = int(n_eoe.max()) if ne else 0
    eoe = np.full((ne, maxee), -1, dtype=np.int64)
    for e, r in enumerate(eoe_rows):
        eoe[e, : len(r)] = r
    eov = np.zeros((nv, 3), dtype=np.int64)
    cov = np.zeros((nv, 3), dtype=np.int64)
    for v in range(nv):
        eov[v] = rd.ints(rd.row("EV", v, 3, 3))
        cov[v] = rd.ints(rd.row("CV", v, 3, 3))

    rd.expect("@geometry")
    kite = np.zeros((nc, maxdeg))
    for i in range(nc):
        n = deg[i]
        kite[i, :n] = rd.floats(rd.row("KITE", i, n, n))
    n_sign = np.zeros((ne, 2), dtype=np.int64)
    t_sign = np.zeros((ne, 2), dtype=np.int64)
    for e in range(ne):
        n_sign[e] = rd.ints(rd.row("NS", e, 2, 2))
        t_sign[e] = rd.ints(rd.row("TS", e, 2, 2))

    rd.expect("@weights")
    w = np.zeros((ne, maxee))
    for e in range(ne):
        n = n_eoe[e]
        w[e, :n] = rd.floats(rd.row("W", e, n, n))
    rd.expect("@end")

    for arr, hi, what in ((ce, nc, "cell"), (vte, nv, "vertex"), (eov, ne, "edge"), (cov, nc, "cell")):
        if arr.size and (arr.min() < 0 or arr.max() >= hi):
            raise TopologyError(f"{what} id out of range in connectivity")
    if np.any(ce[:, 0] == ce[:, 1]):
        e = int(np.nonzero(ce[:, 0] == ce[:, 1])[0][0])
        raise TopologyError(f"edge {e} joins cell {ce[e, 0]} to itself")

    return VoronoiMesh(
        radius=radius, cell_xyz=cell_xyz, vertex_xyz=vertex_xyz, edge_xyz=edge_xyz,
        n_edges_on_cell=deg, edges_on_cell=eoc, vertices_on_cell=voc, cells_on_cell=coc,
        cells_on_edge=ce, vertices_on_edge=vte, edges_on_vertex=eov, cells_on_vertex=cov,
        n_edges_on_edge=n_eoe, edges_on_edge=eoe, dv_edge=dv, dc_edge=dc,
        area_cell=area_cell, area_vertex=area_vertex, kite_area=kite,
        n_sign=n_sign, t_sign=t_sign, weights_on_edge=w,
    )
