"""Brute-force reference implementations built from raw positions with plain loops.

Nothing here reads the package's sign tables, kite areas, weights or padded
connectivity; signs and orderings are recomputed from geometry so that a
bookkeeping slip in the vectorized code cannot cancel out.
"""

import math

import numpy as np


def _unit(v):
    return v / np.linalg.norm(v)


def sph_triangle_area(a, b, c):
    """l'Huilier's formula on the unit sphere."""
    ab = math.acos(min(1.0, max(-1.0, float(a @ b))))
    bc = math.acos(min(1.0, max(-1.0, float(b @ c))))
    ca = math.acos(min(1.0, max(-1.0, float(c @ a))))
    s = 0.5 * (ab + bc + ca)
    t = math.tan(s / 2) * math.tan((s - ab) / 2) * math.tan((s - bc) / 2) * math.tan((s - ca) / 2)
    return 4.0 * math.atan(math.sqrt(max(t, 0.0)))


class Geometry:
    """Everything the TRiSK operators need, rebuilt from cell/vertex/edge positions."""

    def __init__(self, mesh):
        self.R = mesh.radius
        X, V, E = mesh.cell_xyz, mesh.vertex_xyz, mesh.edge_xyz
        ce, ve = mesh.cells_on_edge, mesh.vertices_on_edge
        nc, ne, nv = len(X), len(E), len(V)
        self.nc, self.ne, self.nv = nc, ne, nv
        self.ce = [tuple(int(c) for c in ce[e]) for e in range(ne)]
        self.ve = [tuple(int(v) for v in ve[e]) for e in range(ne)]
        R2 = self.R ** 2

        self.l = np.array([self.R * math.acos(np.clip(V[a] @ V[b], -1, 1)) for a, b in self.ve])
        self.d = np.array([self.R * math.acos(np.clip(X[a] @ X[b], -1, 1)) for a, b in self.ce])

        # normal direction: from the higher-index cell towards the lower one
        self.nvec = []
        self.tvec = []
        for e in range(ne):
            hi, lo = max(self.ce[e]), min(self.ce[e])
            x = E[e]
            n = X[lo] - X[hi]
            n = _unit(n - (n @ x) * x)
            self.nvec.append(n)
            self.tvec.append(np.cross(x, n))

        # outward sign of edge e for each of its cells, circulation sign for each vertex
        self.nsgn = {}
        for e in range(ne):
            for i in self.ce[e]:
                self.nsgn[(e, i)] = 1 if self.nvec[e] @ (E[e] - X[i]) > 0 else -1
        self.tsgn = {}
        for e in range(ne):
            for v, other in (self.ve[e], self.ve[e][::-1]):
                self.tsgn[(e, v)] = 1 if self.tvec[e] @ (V[v] - V[other]) > 0 else -1

        self.edges_of_cell = [[] for _ in range(nc)]
        for e, (a, b) in enumerate(self.ce):
            self.edges_of_cell[a].append(e)
            self.edges_of_cell[b].append(e)
        self.edges_of_vertex = [[] for _ in range(nv)]
        for e, (a, b) in enumerate(self.ve):
            self.edges_of_vertex[a].append(e)
            self.edges_of_vertex[b].append(e)

        # counterclockwise order of the edges around each cell, by angle in the tangent plane
        self.ccw = []
        for i in range(nc):
            x = X[i]
            ref = _unit(np.cross(x, [0.3, 0.5, 0.8]))
            other = np.cross(x, ref)
            ang = [math.atan2(E[e] @ other, E[e] @ ref) for e in self.edges_of_cell[i]]
            self.ccw.append([self.edges_of_cell[i][k] for k in np.argsort(ang)])

        # kite area of (cell, vertex): two spherical triangles cell-edge-vertex
        self.kite = {}
        for i in range(nc):
            for e in self.edges_of_cell[i]:
                for v in self.ve[e]:
                    self.kite[(i, v)] = self.kite.get((i, v), 0.0) + R2 * sph_triangle_area(X[i], E[e], V[v])
        self.area_cell = np.zeros(nc)
        self.area_vertex = np.zeros(nv)
        for (i, v), a in self.kite.items():
            self.area_cell[i] += a
            self.area_vertex[v] += a

        self.w = {}
        for i in range(nc):
            ring = self.ccw[i]
            n = len(ring)
            for k, e in enumerate(ring):
                # vertex shared by ring[k] and ring[k+1] (ccw successor)
                for j in range(1, n):
                    ep = ring[(k + j) % n]
                    # walk ccw from ep to e collecting the vertices passed
                    acc = 0.0
                    vstar = None
                    for m in range(j, n):
                        a, b = ring[(k + m) % n], ring[(k + m + 1) % n]
                        v = (set(self.ve[a]) & set(self.ve[b])).pop()
                        acc += self.kite[(i, v)] / self.area_cell[i]
                        vstar = v
                    assert vstar in self.ve[e]
                    self.w[(e, ep)] = self.w.get((e, ep), 0.0) + (
                        self.nsgn[(ep, i)] * self.tsgn[(e, vstar)] * (acc - 0.5))


def divergence(G, F):
    out = np.zeros(G.nc)
    for e, (a, b) in enumerate(G.ce):
        for i in (a, b):
            out[i] += G.nsgn[(e, i)] * G.l[e] * F[e]
    return out / G.area_cell


def gradient(G, phi):
    out = np.zeros(G.ne)
    for e, (a, b) in enumerate(G.ce):
        out[e] = (phi[min(a, b)] - phi[max(a, b)]) / G.d[e]
    return out


def kinetic_energy(G, u):
    out = np.zeros(G.nc)
    for e, (a, b) in enumerate(G.ce):
        for i in (a, b):
            out[i] += G.l[e] * G.d[e] * u[e] ** 2 / (4.0 * G.area_cell[i])
    return out


def absolute_vorticity(G, u, f):
    out = np.array(f, dtype=float).copy()
    for v in range(G.nv):
        circ = sum(G.tsgn[(e, v)] * G.d[e] * u[e] for e in G.edges_of_vertex[v])
        out[v] += circ / G.area_vertex[v]
    return out


def vertex_thickness(G, h):
    out = np.zeros(G.nv)
    for (i, v), a in G.kite.items():
        out[v] += a * h[i]
    return out / G.area_vertex


def perp_flux(G, F, qe=None):
    out = np.zeros(G.ne)
    for (e, ep), w in G.w.items():
        q = 1.0 if qe is None else 0.5 * (qe[e] + qe[ep])
        out[e] += w * G.l[ep] * F[ep] * q
    return out / G.d


def tendencies(G, h, u, b, f, g):
    he = np.array([0.5 * (h[a] + h[c]) for a, c in G.ce])
    F = he * u
    dh = -divergence(G, F)
    q = absolute_vorticity(G, u, f) / vertex_thickness(G, h)
    qe = np.array([0.5 * (q[a] + q[c]) for a, c in G.ve])
    du = -perp_flux(G, F, qe) - gradient(G, g * (np.asarray(h) + b) + kinetic_energy(G, u))
    return dh, du


def ssprk(order, rhs, x, dt):
    """Shu-Osher SSPRK2 / SSPRK3 for a right-hand side acting on a flat vector."""
    if order == 2:
        x1 = x + dt * rhs(x)
        return 0.5 * x + 0.5 * (x1 + dt * rhs(x1))
    x1 = x + dt * rhs(x)
    x2 = 0.75 * x + 0.25 * (x1 + dt * rhs(x1))
    return x / 3.0 + 2.0 / 3.0 * (x2 + dt * rhs(x2))
