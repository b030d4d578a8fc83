"""TRiSK discrete operators and the shallow-water tendencies.

Every operator is written as a kernel over an explicit list of target
elements.  The padded connectivity tables are reduced column by column, so the
value at one element is produced by exactly the same floating-point operations
whether the kernel runs over the whole mesh or over a subset.  That makes
region-restricted evaluation bitwise equal to the full evaluation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .mesh import VoronoiMesh


class DryVertexError(RuntimeError):
    """Interpolated vertex thickness is not positive."""

    def __init__(self, vertex, value):
        self.vertex = int(vertex)
        self.value = float(value)
        super().__init__(f"vertex {self.vertex}: thickness {self.value:g} <= 0 (drying is not supported)")


# ---------------------------------------------------------------------------
# derived tables

@dataclass(frozen=True)
class _Tables:
    cell_mask: np.ndarray        # (nc, maxdeg) slot in use
    edge_sign_on_cell: np.ndarray  # n_{e,i} for e = edges_on_cell[i, k]
    ee_mask: np.ndarray          # (ne, maxee)
    t_sign_on_vertex: np.ndarray  # t_{e,v} for e = edges_on_vertex[v, j]
    kites_on_vertex: np.ndarray  # (nv, 3) aligned with cells_on_vertex


def _build_tables(mesh: VoronoiMesh):
    deg = mesh.n_edges_on_cell
    maxdeg = mesh.edges_on_cell.shape[1]
    cell_mask = np.arange(maxdeg)[None, :] < deg[:, None]
    eoc = np.where(cell_mask, mesh.edges_on_cell, 0)
    lo = mesh.cells_on_edge[eoc, 0]
    own = np.arange(mesh.n_cells)[:, None]
    sign = np.where(lo == own, mesh.n_sign[eoc, 0], mesh.n_sign[eoc, 1])
    sign = np.where(cell_mask, sign, 0)

    maxee = mesh.edges_on_edge.shape[1]
    ee_mask = np.arange(maxee)[None, :] < mesh.n_edges_on_edge[:, None]

    eov = mesh.edges_on_vertex
    vid = np.arange(mesh.n_vertices)[:, None]
    tsv = np.where(mesh.vertices_on_edge[eov, 0] == vid, mesh.t_sign[eov, 0], mesh.t_sign[eov, 1])
    return _Tables(cell_mask, sign, ee_mask, tsv, mesh.kites_on_vertex())


def tables(mesh: VoronoiMesh) -> _Tables:
    return mesh.derived("operator_tables", _build_tables)


# ---------------------------------------------------------------------------
# kernels over target subsets (inputs are full-size arrays)

def _edge_mean_on(mesh, h, edges):
    ce = mesh.cells_on_edge[edges]
    return (h[ce[:, 0]] + h[ce[:, 1]]) * 0.5


def _divergence_on(mesh, tab, F, cells):
    eoc = mesh.edges_on_cell[cells]
    acc = np.zeros(len(cells))
    for k in range(eoc.shape[1]):
        e = eoc[:, k]
        term = tab.edge_sign_on_cell[cells, k] * mesh.dv_edge[e] * F[e]
        acc += np.where(tab.cell_mask[cells, k], term, 0.0)
    return acc / mesh.area_cell[cells]


def _gradient_on(mesh, phi, edges):
    ce = mesh.cells_on_edge[edges]
    # n = -1 on the lower-index cell, +1 on the higher
    return (phi[ce[:, 0]] - phi[ce[:, 1]]) / mesh.dc_edge[edges]


def _kinetic_energy_on(mesh, tab, u, cells):
    eoc = mesh.edges_on_cell[cells]
    acc = np.zeros(len(cells))
    for k in range(eoc.shape[1]):
        e = eoc[:, k]
        term = mesh.dv_edge[e] * mesh.dc_edge[e] * u[e] * u[e]
        acc += np.where(tab.cell_mask[cells, k], term, 0.0)
    return acc / (4.0 * mesh.area_cell[cells])


def _vertex_fields_on(mesh, tab, h, u, f, verts):
    """Absolute vorticity and kite-weighted thickness at the given vertices."""
    circ = np.zeros(len(verts))
    hk = np.zeros(len(verts))
    eov = mesh.edges_on_vertex[verts]
    cov = mesh.cells_on_vertex[verts]
    for j in range(3):
        e = eov[:, j]
        circ += tab.t_sign_on_vertex[verts, j] * mesh.dc_edge[e] * u[e]
        hk += tab.kites_on_vertex[verts, j] * h[cov[:, j]]
    av = mesh.area_vertex[verts]
    return f[verts] + circ / av, hk / av


def _perp_on(mesh, tab, F, edges, qe=None):
    """sum_j w l' F' (times the averaged edge PV when ``qe`` is given), over d_e."""
    eoe = mesh.edges_on_edge[edges]
    acc = np.zeros(len(edges))
    for j in range(eoe.shape[1]):
        ep = eoe[:, j]
        term = mesh.weights_on_edge[edges, j] * mesh.dv_edge[ep] * F[ep]
        if qe is not None:
            term = term * ((qe[edges] + qe[ep]) * 0.5)
        acc += np.where(tab.ee_mask[edges, j], term, 0.0)
    return acc / mesh.dc_edge[edges]


def _check_dry(hv, verts):
    bad = np.nonzero(~(hv > 0.0))[0]
    if bad.size:
        raise DryVertexError(verts[bad[0]], hv[bad[0]])


# ---------------------------------------------------------------------------
# full-mesh operators

def _all(n):
    return np.arange(n)


def thickness_to_edge(mesh, h):
    """[h]_e: mean of the two cells sharing the edge."""
    return _edge_mean_on(mesh, np.asarray(h, dtype=float), _all(mesh.n_edges))


def normal_flux(mesh, h, u):
    return thickness_to_edge(mesh, h) * np.asarray(u, dtype=float)


def divergence(mesh, F):
    return _divergence_on(mesh, tables(mesh), np.asarray(F, dtype=float), _all(mesh.n_cells))


def gradient(mesh, phi):
    return _gradient_on(mesh, np.asarray(phi, dtype=float), _all(mesh.n_edges))


def kinetic_energy(mesh, u):
    return _kinetic_energy_on(mesh, tables(mesh), np.asarray(u, dtype=float), _all(mesh.n_cells))


def absolute_vorticity(mesh, u, f):
    nv = mesh.n_vertices
    eta, _ = _vertex_fields_on(mesh, tables(mesh), np.ones(mesh.n_cells), np.asarray(u, dtype=float),
                               np.asarray(f, dtype=float), _all(nv))
    return eta


def vertex_thickness(mesh, h):
    nv = mesh.n_vertices
    _, hv = _vertex_fields_on(mesh, tables(mesh), np.asarray(h, dtype=float), np.zeros(mesh.n_edges),
                              np.zeros(nv), _all(nv))
    return hv


def vorticity_and_pv(mesh, h, u, f):
    """Potential vorticity q_v = eta_v / h_v at every vertex."""
    verts = _all(mesh.n_vertices)
    eta, hv = _vertex_fields_on(mesh, tables(mesh), np.asarray(h, dtype=float),
                                np.asarray(u, dtype=float), np.asarray(f, dtype=float), verts)
    _check_dry(hv, verts)
    return eta / hv


def edge_pv(mesh, q):
    """q~_e: mean of the PV at the two vertices of the edge."""
    ve = mesh.vertices_on_edge
    q = np.asarray(q, dtype=float)
    return (q[ve[:, 0]] + q[ve[:, 1]]) * 0.5


def perp_flux(mesh, F):
    """Tangential flux reconstruction F^perp_e = sum_{e'} w l_{e'} F_{e'} / d_e."""
    return _perp_on(mesh, tables(mesh), np.asarray(F, dtype=float), _all(mesh.n_edges))


def pv_flux_term(mesh, q, F):
    """Energy-conserving product F^perp_e [q]_e, formed without dividing by F^perp."""
    return _perp_on(mesh, tables(mesh), np.asarray(F, dtype=float), _all(mesh.n_edges),
                    qe=edge_pv(mesh, q))


# ---------------------------------------------------------------------------
# tendencies with restriction

@dataclass(frozen=True)
class TendencyStencil:
    """Elements whose intermediate values are needed for a restricted evaluation."""

    cells: np.ndarray       # targets for dh
    edges: np.ndarray       # targets for du
    flux_edges: np.ndarray  # F needed by the divergence and the PV flux
    ke_cells: np.ndarray    # K (and the Bernoulli potential) needed by the gradient
    pv_edges: np.ndarray    # q~ needed by the PV flux
    pv_vertices: np.ndarray


def build_stencil(mesh, cells, edges) -> TendencyStencil:
    cells = np.unique(np.asarray(cells, dtype=np.int64))
    edges = np.unique(np.asarray(edges, dtype=np.int64))
    tab = tables(mesh)
    ec = mesh.edges_on_cell[cells][tab.cell_mask[cells]]
    ee = mesh.edges_on_edge[edges][tab.ee_mask[edges]]
    flux_edges = np.unique(np.concatenate([ec, ee]))
    ke_cells = np.unique(mesh.cells_on_edge[edges].ravel())
    pv_edges = np.unique(np.concatenate([edges, ee]))
    pv_vertices = np.unique(mesh.vertices_on_edge[pv_edges].ravel())
    return TendencyStencil(cells, edges, flux_edges, ke_cells, pv_edges, pv_vertices)


def stencil_for(mesh, cells, edges) -> TendencyStencil:
    """Cached :func:`build_stencil` keyed on the exact target sets."""
    cells = np.asarray(cells, dtype=np.int64)
    edges = np.asarray(edges, dtype=np.int64)
    store = mesh.derived("stencils", lambda m: {})
    key = (cells.tobytes(), edges.tobytes())
    st = store.get(key)
    if st is None:
        st = build_stencil(mesh, cells, edges)
        store[key] = st
    return st


@dataclass
class Tendencies:
    dh: np.ndarray           # full length, NaN outside valid_cells
    du: np.ndarray           # full length, NaN outside valid_edges
    valid_cells: np.ndarray
    valid_edges: np.ndarray


def evaluate_stencil(mesh, st: TendencyStencil, h, u, b, f, g, out_dh=None, out_du=None):
    """Shallow-water tendencies on the targets of ``st``.

    Results are written into ``out_dh`` / ``out_du`` (allocated NaN-filled
    when omitted) at the target positions only.  Inputs need to be valid on
    the stencil's support; everything else may hold garbage.
    """
    tab = tables(mesh)
    nc, ne, nv = mesh.n_cells, mesh.n_edges, mesh.n_vertices
    if out_dh is None:
        out_dh = np.full(nc, np.nan)
    if out_du is None:
        out_du = np.full(ne, np.nan)

    F = np.full(ne, np.nan)
    F[st.flux_edges] = _edge_mean_on(mesh, h, st.flux_edges) * u[st.flux_edges]
    if st.cells.size:
        out_dh[st.cells] = -_divergence_on(mesh, tab, F, st.cells)
    if st.edges.size == 0:
        return out_dh, out_du

    phi = np.full(nc, np.nan)
    kc = st.ke_cells
    phi[kc] = g * (h[kc] + b[kc]) + _kinetic_energy_on(mesh, tab, u, kc)

    eta, hv = _vertex_fields_on(mesh, tab, h, u, f, st.pv_vertices)
    _check_dry(hv, st.pv_vertices)
    q = np.full(nv, np.nan)
    q[st.pv_vertices] = eta / hv
    qe = np.full(ne, np.nan)
    ve = mesh.vertices_on_edge[st.pv_edges]
    qe[st.pv_edges] = (q[ve[:, 0]] + q[ve[:, 1]]) * 0.5

    e = st.edges
    out_du[e] = -_perp_on(mesh, tab, F, e, qe=qe) - _gradient_on(mesh, phi, e)
    return out_dh, out_du


def tendencies(mesh, h, u, b, f, g, cell_set=None, edge_set=None, ledger=None,
               region="all", stage="full") -> Tendencies:
    """dh = -div(F), du = -F^perp[q] - grad(g (h + b) + K), optionally restricted.

    ``None`` for a set means the whole mesh.  Entries outside the sets are NaN.
    """
    cells = np.arange(mesh.n_cells) if cell_set is None else np.asarray(cell_set, dtype=np.int64)
    edges = np.arange(mesh.n_edges) if edge_set is None else np.asarray(edge_set, dtype=np.int64)
    st = stencil_for(mesh, cells, edges)
    h = np.asarray(h, dtype=float)
    u = np.asarray(u, dtype=float)
    dh, du = evaluate_stencil(mesh, st, h, u, np.asarray(b, dtype=float), np.asarray(f, dtype=float), g)
    if ledger is not None:
        ledger.add(region, stage, st.cells.size, st.edges.size)
    return Tendencies(dh, du, st.cells, st.edges)


# ---------------------------------------------------------------------------
# field dump

def write_fields(path, cell=None, edge=None, vertex=None):
    """CSV ``kind,id,value`` with full-precision values."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "id", "value"])
        for kind, arr in (("cell", cell), ("edge", edge), ("vertex", vertex)):
            if arr is None:
                continue
            for i, x in enumerate(np.asarray(arr, dtype=float)):
                w.writerow([kind, i, "%.17g" % x])


def read_fields(path):
    out = {"cell": [], "edge": [], "vertex": []}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["kind", "id", "value"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for kind, idx, val in r:
            out[kind].append((int(idx), float(val)))
    res = {}
    for kind, rows in out.items():
        if rows:
            arr = np.empty(len(rows))
            for i, v in rows:
                arr[i] = v
            res[kind] = arr
    return res
