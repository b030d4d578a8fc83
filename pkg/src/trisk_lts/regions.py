"""Local-time-stepping regions on cells and edges.

Cells are split into fine, interface-1, interface-2 and coarse sets by
breadth-first layering from the fine set.  The two fine layers nearest the
interface ("underline-fine") get a sublabel; the third-order scheme advances
them with the coarse step in its first stage.  Edges are then assigned moving
from the fine side towards the coarse side, each edge taking the first region
that claims it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class RegionConfigError(ValueError):
    pass


class RegionParseError(RegionConfigError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CellRegion(IntEnum):
    # values double as the region-file labels
    FINE = 1
    COARSE = 2
    INTERFACE1 = 3
    INTERFACE2 = 4


class SubLabel(IntEnum):
    NONE = 0
    UNDERLINE_F1 = 5
    UNDERLINE_F2 = 7


class EdgeRegion(IntEnum):
    FINE = 0
    UNDERLINE_FINE = 1
    INTERFACE1 = 2
    INTERFACE2 = 3
    COARSE = 4


class RegionClass(IntEnum):
    """Coarser grouping used for partition blocks."""
    FINE = 0
    COARSE = 1
    INTERFACE = 2


CELL_CLASS = {
    CellRegion.FINE: RegionClass.FINE,
    CellRegion.COARSE: RegionClass.COARSE,
    CellRegion.INTERFACE1: RegionClass.INTERFACE,
    CellRegion.INTERFACE2: RegionClass.INTERFACE,
}

EDGE_CLASS = {
    EdgeRegion.FINE: RegionClass.FINE,
    EdgeRegion.UNDERLINE_FINE: RegionClass.FINE,
    EdgeRegion.INTERFACE1: RegionClass.INTERFACE,
    EdgeRegion.INTERFACE2: RegionClass.INTERFACE,
    EdgeRegion.COARSE: RegionClass.COARSE,
}


@dataclass(eq=False)
class RegionMap:
    cell_label: np.ndarray               # CellRegion codes
    interface_width: int = 1
    cell_sublabel: np.ndarray | None = None
    edge_label: np.ndarray | None = None  # EdgeRegion codes

    def _cells(self, code):
        return np.nonzero(self.cell_label == code)[0]

    @property
    def fine(self):
        return self._cells(CellRegion.FINE)

    @property
    def coarse(self):
        return self._cells(CellRegion.COARSE)

    @property
    def interface1(self):
        return self._cells(CellRegion.INTERFACE1)

    @property
    def interface2(self):
        return self._cells(CellRegion.INTERFACE2)

    @property
    def underline_fine(self):
        if self.cell_sublabel is None:
            return np.zeros(0, dtype=np.int64)
        return np.nonzero(self.cell_sublabel != SubLabel.NONE)[0]

    def edges(self, *codes):
        if self.edge_label is None:
            raise RegionConfigError("edge labels have not been assigned")
        return np.nonzero(np.isin(self.edge_label, [int(c) for c in codes]))[0]

    @property
    def counts(self):
        return dict(
            n_fine=int(np.sum(self.cell_label == CellRegion.FINE)),
            n_if1=int(np.sum(self.cell_label == CellRegion.INTERFACE1)),
            n_if2=int(np.sum(self.cell_label == CellRegion.INTERFACE2)),
            n_coarse=int(np.sum(self.cell_label == CellRegion.COARSE)),
        )

    def cell_class(self):
        out = np.empty(self.cell_label.shape, dtype=np.int64)
        for code, cls in CELL_CLASS.items():
            out[self.cell_label == code] = cls
        return out

    def edge_class(self):
        out = np.empty(self.edge_label.shape, dtype=np.int64)
        for code, cls in EDGE_CLASS.items():
            out[self.edge_label == code] = cls
        return out


# ---------------------------------------------------------------------------
# construction

def hop_distance(mesh, sources):
    """Breadth-first distance (in shared-edge hops) from a set of cells; -1 if unreachable."""
    dist = np.full(mesh.n_cells, -1, dtype=np.int64)
    frontier = np.unique(np.asarray(sources, dtype=np.int64))
    dist[frontier] = 0
    cc = mesh.cells_on_cell
    d = 0
    while frontier.size:
        d += 1
        nb = cc[frontier].ravel()
        nb = np.unique(nb[nb >= 0])
        nb = nb[dist[nb] < 0]
        dist[nb] = d
        frontier = nb
    return dist


def _predicate_mask(mesh, fine_predicate):
    if callable(fine_predicate):
        mask = fine_predicate(mesh)
    else:
        mask = fine_predicate
    mask = np.asarray(mask)
    if mask.dtype != bool:
        idx = mask.astype(np.int64)
        mask = np.zeros(mesh.n_cells, dtype=bool)
        mask[idx] = True
    if mask.shape != (mesh.n_cells,):
        raise RegionConfigError(f"fine predicate has shape {mask.shape}, expected ({mesh.n_cells},)")
    return mask


def label_cells(mesh, fine_predicate, interface_width=1) -> RegionMap:
    """Fine, interface and coarse cell sets.

    ``fine_predicate`` is a boolean mask, an index array, or a callable
    ``mesh -> mask``.  Interface 1 holds the ``interface_width`` cell layers
    next to the fine set, interface 2 the following ``interface_width`` layers.
    """
    w = int(interface_width)
    if w < 1:
        raise RegionConfigError("interface_width must be at least 1")
    fine = _predicate_mask(mesh, fine_predicate)
    if not fine.any():
        raise RegionConfigError("the fine region is empty")
    if fine.all():
        raise RegionConfigError("the fine region covers the whole mesh; no room for interfaces")
    dist = hop_distance(mesh, np.nonzero(fine)[0])
    label = np.full(mesh.n_cells, int(CellRegion.COARSE), dtype=np.int64)
    label[fine] = CellRegion.FINE
    label[(dist >= 1) & (dist <= w)] = CellRegion.INTERFACE1
    label[(dist > w) & (dist <= 2 * w)] = CellRegion.INTERFACE2
    if not np.any(label == CellRegion.COARSE):
        raise RegionConfigError(
            f"interface layers of width {w} exhaust the {int((~fine).sum())} non-fine cells; "
            "no coarse region left")
    return RegionMap(cell_label=label, interface_width=w)


def _touching(mesh, cells_mask, other_mask):
    """Cells in ``cells_mask`` sharing an edge with a cell in ``other_mask``."""
    cc = mesh.cells_on_cell
    nb_ok = cc >= 0
    hit = np.any(nb_ok & other_mask[np.where(nb_ok, cc, 0)], axis=1)
    return cells_mask & hit


def label_underline_fine(mesh, rmap: RegionMap) -> RegionMap:
    """Add the two fine layers closest to interface 1 as sublabels."""
    fine = rmap.cell_label == CellRegion.FINE
    if1 = rmap.cell_label == CellRegion.INTERFACE1
    uf1 = _touching(mesh, fine, if1)
    uf2 = _touching(mesh, fine & ~uf1, uf1)
    sub = np.zeros(mesh.n_cells, dtype=np.int64)
    sub[uf1] = SubLabel.UNDERLINE_F1
    sub[uf2] = SubLabel.UNDERLINE_F2
    if not uf2.any():
        warnings.warn("second underline-fine layer is empty; the fine region is too thin for "
                      "third-order interface treatment")
    rmap.cell_sublabel = sub
    return rmap


def label_edges(mesh, rmap: RegionMap) -> RegionMap:
    """Assign edges from the fine side to the coarse side; first claim wins."""
    label = rmap.cell_label
    sub = rmap.cell_sublabel if rmap.cell_sublabel is not None else np.zeros_like(label)
    fine = label == CellRegion.FINE
    under = fine & (sub != SubLabel.NONE)
    order = [
        (EdgeRegion.FINE, fine & ~under),
        (EdgeRegion.UNDERLINE_FINE, under),
        (EdgeRegion.INTERFACE1, label == CellRegion.INTERFACE1),
        (EdgeRegion.INTERFACE2, label == CellRegion.INTERFACE2),
    ]
    ce = mesh.cells_on_edge
    out = np.full(mesh.n_edges, -1, dtype=np.int64)
    for code, mask in order:
        claim = (mask[ce[:, 0]] | mask[ce[:, 1]]) & (out < 0)
        out[claim] = code
    out[out < 0] = EdgeRegion.COARSE
    rmap.edge_label = out
    return rmap


def build_regions(mesh, fine_predicate, interface_width=1, underline=True) -> RegionMap:
    """label_cells + label_underline_fine + label_edges."""
    rmap = label_cells(mesh, fine_predicate, interface_width)
    if underline:
        label_underline_fine(mesh, rmap)
    return label_edges(mesh, rmap)


def cap_predicate(center, radius):
    """Cells whose centres lie within ``radius`` (radians) of ``center`` = (lon, lat)."""
    from .mesh import lonlat_to_xyz

    c = lonlat_to_xyz(*center)

    def pred(mesh):
        return np.arccos(np.clip(mesh.cell_xyz @ c, -1.0, 1.0)) <= radius

    return pred


# ---------------------------------------------------------------------------
# validation

@dataclass
class ValidationReport:
    counts: dict
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations


def _from_sets(mesh, sets, violations):
    names = {"fine": CellRegion.FINE, "interface1": CellRegion.INTERFACE1,
             "interface2": CellRegion.INTERFACE2, "coarse": CellRegion.COARSE}
    hits = np.zeros(mesh.n_cells, dtype=np.int64)
    label = np.full(mesh.n_cells, -1, dtype=np.int64)
    for name, cells in sets.items():
        if name not in names:
            violations.append(f"unknown cell set '{name}'")
            continue
        cells = np.unique(np.asarray(list(cells), dtype=np.int64))
        hits[cells] += 1
        label[cells] = names[name]
    for i in np.nonzero(hits > 1)[0][:10]:
        violations.append(f"disjoint cover: cell {i} belongs to {hits[i]} sets")
    for i in np.nonzero(hits == 0)[0][:10]:
        violations.append(f"disjoint cover: cell {i} belongs to no set")
    return label


def validate(mesh, rmap) -> ValidationReport:
    """Check every region invariant; violations are returned, not raised.

    ``rmap`` may also be a mapping ``{"fine"|"interface1"|"interface2"|"coarse": cells}``.
    """
    violations = []
    if isinstance(rmap, RegionMap):
        label = np.asarray(rmap.cell_label)
        width = rmap.interface_width
        sub, elab = rmap.cell_sublabel, rmap.edge_label
    else:
        label = _from_sets(mesh, rmap, violations)
        width, sub, elab = 1, None, None
    if label.shape != (mesh.n_cells,):
        return ValidationReport({}, [f"cell label array has shape {label.shape}"])

    valid_codes = [int(c) for c in CellRegion]
    bad = ~np.isin(label, valid_codes)
    for i in np.nonzero(bad)[0][:10]:
        if isinstance(rmap, RegionMap):
            violations.append(f"disjoint cover: cell {i} has invalid label {label[i]}")

    counts = dict(
        n_fine=int(np.sum(label == CellRegion.FINE)),
        n_if1=int(np.sum(label == CellRegion.INTERFACE1)),
        n_if2=int(np.sum(label == CellRegion.INTERFACE2)),
        n_coarse=int(np.sum(label == CellRegion.COARSE)),
    )
    if counts["n_fine"] == 0:
        violations.append("fine region is empty")
        return ValidationReport(counts, violations)

    dist = hop_distance(mesh, np.nonzero(label == CellRegion.FINE)[0])
    reach = np.where(dist < 0, np.iinfo(np.int64).max, dist)
    expect = [
        (CellRegion.INTERFACE1, lambda d: (d >= 1) & (d <= width), f"in [1, {width}]"),
        (CellRegion.INTERFACE2, lambda d: (d > width) & (d <= 2 * width), f"in ({width}, {2 * width}]"),
        (CellRegion.COARSE, lambda d: d > 2 * width, f"> {2 * width}"),
    ]
    for code, ok, text in expect:
        cells = np.nonzero(label == code)[0]
        wrong = cells[~ok(reach[cells])]
        for i in wrong[:10]:
            violations.append(f"adjacency: {code.name.lower()} cell {i} is {dist[i]} hops from the "
                              f"fine region, expected {text}")
    # the layers themselves must be complete
    for code, lo, hi in ((CellRegion.INTERFACE1, 1, width), (CellRegion.INTERFACE2, width + 1, 2 * width)):
        cells = np.nonzero((reach >= lo) & (reach <= hi) & (label != code) & ~bad)[0]
        for i in cells[:10]:
            violations.append(f"adjacency: cell {i} at distance {dist[i]} should be {code.name.lower()}")

    if sub is not None:
        sub = np.asarray(sub)
        fine = label == CellRegion.FINE
        stray = np.nonzero((sub != SubLabel.NONE) & ~fine)[0]
        for i in stray[:10]:
            violations.append(f"underline-fine: cell {i} is not fine")
        uf1 = _touching(mesh, fine, label == CellRegion.INTERFACE1)
        uf2 = _touching(mesh, fine & ~uf1, uf1)
        want = np.zeros(mesh.n_cells, dtype=np.int64)
        want[uf1] = SubLabel.UNDERLINE_F1
        want[uf2] = SubLabel.UNDERLINE_F2
        for i in np.nonzero(want != sub)[0][:10]:
            violations.append(f"underline-fine: cell {i} has sublabel {sub[i]}, expected {want[i]}")

    if elab is not None and isinstance(rmap, RegionMap) and not bad.any():
        elab = np.asarray(elab)
        if elab.shape != (mesh.n_edges,):
            violations.append(f"edge label array has shape {elab.shape}")
        else:
            ref = label_edges(mesh, RegionMap(label.copy(), width, None if sub is None else sub.copy())).edge_label
            for e in np.nonzero(ref != elab)[0][:10]:
                violations.append(f"edge {e}: label {elab[e]}, expected {ref[e]}")
            counts["n_edges_by_label"] = {EdgeRegion(c).name.lower(): int(np.sum(elab == c))
                                          for c in EdgeRegion}
    return ValidationReport(counts, violations)


# ---------------------------------------------------------------------------
# region file

def write_region_file(path, rmap: RegionMap):
    sub = rmap.cell_sublabel if rmap.cell_sublabel is not None else np.zeros_like(rmap.cell_label)
    with open(path, "w") as fh:
        fh.write(f"# interface_width {rmap.interface_width}\n")
        for i, (lab, s) in enumerate(zip(rmap.cell_label, sub)):
            fh.write(f"{i} {int(lab)} {int(s)}\n")


def read_region_file(path, mesh) -> RegionMap:
    """Load a region file and rebuild the edge labels."""
    label = np.full(mesh.n_cells, -1, dtype=np.int64)
    sub = np.zeros(mesh.n_cells, dtype=np.int64)
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                parts = text[1:].split()
                if len(parts) == 2 and parts[0] == "interface_width":
                    width = int(parts[1])
                continue
            parts = text.split()
            if len(parts) != 3:
                raise RegionParseError(f"expected 'cell_id label sublabel', got {text!r}", lineno)
            try:
                i, lab, s = (int(p) for p in parts)
            except ValueError:
                raise RegionParseError(f"non-integer field in {text!r}", lineno) from None
            if not 0 <= i < mesh.n_cells:
                raise RegionParseError(f"cell id {i} out of range", lineno)
            if lab not in [int(c) for c in CellRegion]:
                raise RegionParseError(f"unknown label {lab}", lineno)
            if s not in [int(c) for c in SubLabel]:
                raise RegionParseError(f"unknown sublabel {s}", lineno)
            label[i], sub[i] = lab, s
    missing = np.nonzero(label < 0)[0]
    if missing.size:
        raise RegionParseError(f"cell {missing[0]} has no label")
    if width is None:
        # recover the width from the layering
        dist = hop_distance(mesh, np.nonzero(label == CellRegion.FINE)[0])
        if1 = dist[label == CellRegion.INTERFACE1]
        width = int(if1.max()) if if1.size else 1
    rmap = RegionMap(label, width, sub)
    return label_edges(mesh, rmap)
