"""Region-aware domain decomposition.

Ranks are split into three region-pure blocks (fine, coarse, interface), so a
restricted tendency evaluation on one region touches exactly the blocks of
that region plus their two-layer halos.  Ranks are emulated by worker threads
in one process; the halo exchange is an explicit copy of owned and halo
values into per-block buffers.
"""

from __future__ import annotations

from collections import deque
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import operators as ops
from .accounting import WorkLedger
from .integrators import InvariantError, RegionCounter
from .regions import RegionClass, RegionMap

BLOCK_NAMES = {RegionClass.FINE: "fine", RegionClass.COARSE: "coarse", RegionClass.INTERFACE: "interface"}


class PartitionError(ValueError):
    pass


class PartitionParseError(PartitionError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# graph files

@dataclass
class CellGraph:
    adjacency: list                  # neighbour id arrays, 0-based
    weights: np.ndarray | None = None  # (n, 3) one-hot (coarse, fine, interface)

    @property
    def n(self):
        return len(self.adjacency)

    @property
    def n_pairs(self):
        return sum(len(a) for a in self.adjacency) // 2

    @classmethod
    def from_mesh(cls, mesh, rmap: RegionMap | None = None):
        adj = [mesh.cell_neighbors(i).copy() for i in range(mesh.n_cells)]
        return cls(adj, None if rmap is None else region_weights(rmap))

    def check(self):
        pairs = set()
        for i, nb in enumerate(self.adjacency):
            for j in nb:
                pairs.add((i, int(j)))
        for i, j in pairs:
            if (j, i) not in pairs:
                raise PartitionError(f"adjacency is not symmetric: {i} -> {j} has no reverse")
        if self.weights is not None:
            w = np.asarray(self.weights)
            if w.shape != (self.n, 3) or not np.all(w.sum(axis=1) == 1) or not np.all((w == 0) | (w == 1)):
                raise PartitionError("vertex weights must be one-hot triplets")


def region_weights(rmap: RegionMap):
    """One-hot (coarse, fine, interface) triplet per cell."""
    cls = rmap.cell_class()
    w = np.zeros((cls.size, 3), dtype=np.int64)
    w[cls == RegionClass.COARSE, 0] = 1
    w[cls == RegionClass.FINE, 1] = 1
    w[cls == RegionClass.INTERFACE, 2] = 1
    return w


def write_graph(mesh, rmap: RegionMap | None, path):
    """METIS graph file: header ``n m`` (or ``n m 010 3`` with weights), then 1-based neighbours."""
    g = CellGraph.from_mesh(mesh, rmap)
    with open(path, "w") as fh:
        if g.weights is None:
            fh.write(f"{g.n} {g.n_pairs}\n")
        else:
            fh.write(f"{g.n} {g.n_pairs} 010 3\n")
        for i, nb in enumerate(g.adjacency):
            parts = []
            if g.weights is not None:
                parts += [str(int(x)) for x in g.weights[i]]
            parts += [str(int(j) + 1) for j in nb]
            fh.write(" ".join(parts) + "\n")
    return g


def read_graph(path) -> CellGraph:
    with open(path) as fh:
        lines = [(n, ln.split()) for n, ln in enumerate(fh, 1) if ln.strip() and not ln.startswith("%")]
    if not lines:
        raise PartitionParseError("empty graph file", 1)
    lineno, head = lines[0]
    try:
        n, m = int(head[0]), int(head[1])
        fmt = head[2] if len(head) > 2 else "000"
        ncon = int(head[3]) if len(head) > 3 else (1 if fmt[-2] == "1" else 0)
    except (ValueError, IndexError):
        raise PartitionParseError(f"bad header {' '.join(head)!r}", lineno) from None
    if fmt.zfill(3)[-1] == "1" or fmt.zfill(3)[0] == "1":
        raise PartitionParseError("edge weights and vertex sizes are not supported", lineno)
    has_w = fmt.zfill(3)[1] == "1"
    if len(lines) - 1 != n:
        raise PartitionParseError(f"header announces {n} vertices, found {len(lines) - 1} lines", lineno)
    adj, wts = [], []
    for lineno, parts in lines[1:]:
        try:
            vals = [int(p) for p in parts]
        except ValueError:
            raise PartitionParseError("non-integer entry", lineno) from None
        if has_w:
            wts.append(vals[:ncon])
            vals = vals[ncon:]
        if any(v < 1 or v > n for v in vals):
            raise PartitionParseError("neighbour id out of range", lineno)
        adj.append(np.array(vals, dtype=np.int64) - 1)
    g = CellGraph(adj, np.array(wts, dtype=np.int64) if has_w else None)
    if g.n_pairs != m:
        raise PartitionParseError(f"header announces {m} edges, adjacency has {g.n_pairs}", 1)
    return g


def write_partition_file(path, labels):
    with open(path, "w") as fh:
        for x in labels:
            fh.write(f"{int(x)}\n")


def read_partition_file(path, X, n_cells=None):
    """One 0-based label in [0, X) per line (``graph.info.part.X``)."""
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                v = int(text)
            except ValueError:
                raise PartitionParseError(f"not an integer: {text!r}", lineno) from None
            if not 0 <= v < X:
                raise PartitionParseError(f"label {v} outside [0, {X})", lineno)
            labels.append(v)
    if n_cells is not None and len(labels) != n_cells:
        raise PartitionParseError(f"{len(labels)} labels for {n_cells} cells", len(labels) + 1)
    return np.array(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# partitioner

def _bfs_order(adj, nodes, start):
    """Breadth-first order of ``nodes`` through edges that stay inside ``nodes``.

    Components are visited one after another, each from its lowest unvisited
    id (``start`` for the first).  Returns the order and the last node reached.
    """
    inside = np.zeros(len(adj), dtype=bool)
    inside[nodes] = True
    seen = np.zeros(len(adj), dtype=bool)
    order = []
    for root in [start, *nodes]:
        if seen[root]:
            continue
        seen[root] = True
        q = deque([root])
        while q:
            i = q.popleft()
            order.append(i)
            for j in adj[i]:
                if inside[j] and not seen[j]:
                    seen[j] = True
                    q.append(j)
    return np.array(order, dtype=np.int64)


def partition_multiconstraint(graph: CellGraph, n_parts, seed=0):
    """Split every constraint class into ``n_parts`` equal, compact chunks.

    Each class (the one-hot weight column, or all cells when unweighted) is
    ordered breadth-first inside its own subgraph from a pseudo-peripheral
    cell and cut into chunks whose sizes differ by at most one.  Chunks of the
    larger classes are placed first; later classes go to the parts they touch
    most, via a linear assignment on shared graph edges.
    """
    n = graph.n
    P = int(n_parts)
    if P < 1:
        raise PartitionError("n_parts must be at least 1")
    if P > n:
        raise PartitionError(f"n_parts = {P} exceeds the number of cells ({n})")
    if P == 1:
        return np.zeros(n, dtype=np.int64)
    adj = [np.asarray(a, dtype=np.int64) for a in graph.adjacency]
    if graph.weights is None:
        con = np.zeros(n, dtype=np.int64)
        ncon = 1
    else:
        w = np.asarray(graph.weights)
        con = np.argmax(w, axis=1)
        ncon = w.shape[1]
    total = np.bincount(con, minlength=ncon)
    for c in range(ncon):
        if 0 < total[c] < P:
            warnings.warn(f"constraint {c} has {total[c]} cells for {P} parts; some shares are empty")

    rng = np.random.default_rng(seed)
    part = np.full(n, -1, dtype=np.int64)
    for c in sorted(range(ncon), key=lambda c: (-total[c], c)):
        nodes = np.nonzero(con == c)[0]
        if nodes.size == 0:
            continue
        first = _bfs_order(adj, nodes, int(rng.choice(nodes)))
        order = _bfs_order(adj, nodes, int(first[-1]))
        chunks = np.array_split(order, P)
        if np.all(part < 0):
            for k, ch in enumerate(chunks):
                part[ch] = k
            continue
        touch = np.zeros((P, P))
        for k, ch in enumerate(chunks):
            for i in ch:
                q = part[adj[i]]
                np.add.at(touch[k], q[q >= 0], 1.0)
        rows, cols = linear_sum_assignment(-touch)
        for k, r in zip(rows, cols):
            part[chunks[k]] = r
    return part


def constraint_imbalance(labels, graph: CellGraph, n_parts):
    """max/mean load per constraint column."""
    w = np.ones((graph.n, 1), dtype=np.int64) if graph.weights is None else np.asarray(graph.weights)
    out = []
    for c in range(w.shape[1]):
        load = np.bincount(labels, weights=w[:, c], minlength=n_parts)
        mean = load.mean()
        out.append(float(load.max() / mean) if mean > 0 else 1.0)
    return out


# ---------------------------------------------------------------------------
# block plan

@dataclass(eq=False)
class PartitionPlan:
    n_ranks: int
    block_of_cell: np.ndarray
    block_of_edge: np.ndarray
    owned_cells: list
    owned_edges: list
    halo_cells: list
    halo_edges: list
    mesh: object = field(repr=False)
    rmap: RegionMap = field(repr=False)

    @property
    def n_blocks(self):
        return 3 * self.n_ranks

    def rank_of_block(self, b):
        return b // 3

    def block_region(self, b):
        return RegionClass(b % 3)

    @property
    def rank_of_cell(self):
        return self.block_of_cell // 3

    def region_purity(self):
        """Per block: every owned cell belongs to the block's region class."""
        cls = self.rmap.cell_class()
        return [bool(np.all(cls[c] == b % 3)) for b, c in enumerate(self.owned_cells)]


def _two_ring(mesh, cells):
    mask = np.zeros(mesh.n_cells, dtype=bool)
    mask[cells] = True
    cc = mesh.cells_on_cell
    ring = mask.copy()
    for _ in range(2):
        nb = cc[ring]
        nb = nb[nb >= 0]
        ring[nb] = True
    return ring


def _build_plan(mesh, rmap, block_of_cell, n_ranks):
    X = 3 * n_ranks
    cls_e = rmap.edge_class()
    cls_c = rmap.cell_class()
    ce = mesh.cells_on_edge
    # owner: lowest-id adjacent cell whose class matches the edge's class
    lo_ok = cls_c[ce[:, 0]] == cls_e
    owner = np.where(lo_ok, ce[:, 0], ce[:, 1])
    if not np.all(cls_c[owner] == cls_e):
        e = int(np.nonzero(cls_c[owner] != cls_e)[0][0])
        raise InvariantError(f"edge {e} has no adjacent cell of its region class")
    block_of_edge = block_of_cell[owner]

    owned_cells, owned_edges, halo_cells, halo_edges = [], [], [], []
    for b in range(X):
        oc = np.nonzero(block_of_cell == b)[0]
        oe = np.nonzero(block_of_edge == b)[0]
        ring = _two_ring(mesh, oc)
        hc = np.nonzero(ring & (block_of_cell != b))[0]
        inside = ring[ce[:, 0]] & ring[ce[:, 1]]
        he = np.nonzero(inside & (block_of_edge != b))[0]
        owned_cells.append(oc)
        owned_edges.append(oe)
        halo_cells.append(hc)
        halo_edges.append(he)
    return PartitionPlan(n_ranks, block_of_cell, block_of_edge, owned_cells, owned_edges,
                         halo_cells, halo_edges, mesh, rmap)


def make_block_plan(mesh, rmap: RegionMap, rank_labels) -> PartitionPlan:
    """Route each rank's cells to blocks 3k + (0 fine, 1 coarse, 2 interface)."""
    ranks = np.asarray(rank_labels, dtype=np.int64)
    if ranks.shape != (mesh.n_cells,):
        raise PartitionError(f"{ranks.size} rank labels for {mesh.n_cells} cells")
    if ranks.min() < 0:
        raise PartitionError("negative rank label")
    N = int(ranks.max()) + 1
    block = 3 * ranks + rmap.cell_class()
    plan = _build_plan(mesh, rmap, block, N)
    for b, oc in enumerate(plan.owned_cells):
        if oc.size == 0:
            warnings.warn(f"block {b} (rank {b // 3}, {BLOCK_NAMES[RegionClass(b % 3)]}) owns no cells")
    return plan


def concentrate_interface(plan: PartitionPlan) -> PartitionPlan:
    """Move every interface cell to rank 0's interface block."""
    block = plan.block_of_cell.copy()
    block[block % 3 == RegionClass.INTERFACE] = RegionClass.INTERFACE
    return _build_plan(plan.mesh, plan.rmap, block, plan.n_ranks)


def block_labels(plan: PartitionPlan):
    """Per-cell block id, i.e. the ``graph.info.part.X`` content with X = 3N."""
    return plan.block_of_cell.copy()


@dataclass
class ImbalanceReport:
    ratios: dict             # region class name -> max/mean over ranks
    total_ratio: float
    per_rank: np.ndarray     # (N, 3) owned cells: fine, coarse, interface
    idle: list = field(default_factory=list)

    def summary(self):
        lines = [f"{k}: {v:.3f}" for k, v in self.ratios.items()]
        lines.append(f"total: {self.total_ratio:.3f}")
        lines += self.idle
        return "\n".join(lines)


def imbalance_metrics(plan: PartitionPlan, rmap: RegionMap | None = None) -> ImbalanceReport:
    N = plan.n_ranks
    per = np.zeros((N, 3), dtype=np.int64)
    for b, oc in enumerate(plan.owned_cells):
        per[b // 3, b % 3] = oc.size
    ratios = {}
    for c in RegionClass:
        load = per[:, c]
        mean = load.mean()
        ratios[BLOCK_NAMES[c]] = float(load.max() / mean) if mean > 0 else 1.0
    tot = per.sum(axis=1)
    total_ratio = float(tot.max() / tot.mean()) if tot.mean() > 0 else 1.0
    idle = [f"rank {r} has no {BLOCK_NAMES[RegionClass(c)]} cells"
            for r in range(N) for c in range(3) if per[r, c] == 0 and per[:, c].sum() > 0]
    return ImbalanceReport(ratios, total_ratio, per, idle)


def write_plan_summary(path, plan: PartitionPlan):
    with open(path, "w") as fh:
        fh.write("block,rank,region,owned_cells,owned_edges,halo_cells,halo_edges\n")
        for b in range(plan.n_blocks):
            fh.write(f"{b},{b // 3},{BLOCK_NAMES[RegionClass(b % 3)]},{plan.owned_cells[b].size},"
                     f"{plan.owned_edges[b].size},{plan.halo_cells[b].size},{plan.halo_edges[b].size}\n")


# ---------------------------------------------------------------------------
# partitioned evaluation

class PartitionedEvaluator:
    """Restricted tendencies computed block by block on emulated ranks.

    One worker per rank processes its three blocks in order.  Each block sees
    only its owned and halo values (everything else is NaN in its buffer), so
    a finite result proves the halos are deep enough.
    """

    def __init__(self, mesh, plan: PartitionPlan, b, f, g, ledger: WorkLedger | None = None,
                 layers=1, rmap: RegionMap | None = None, workers=None):
        self.mesh = mesh
        self.plan = plan
        self.b = np.asarray(b, dtype=float)
        self.f = np.asarray(f, dtype=float)
        self.g = float(g)
        self.ledger = ledger
        self.layers = int(layers)
        self.counter = RegionCounter(mesh, rmap)
        self.workers = plan.n_ranks if workers is None else max(1, int(workers))
        self._pool = None
        self.rank_cell_evals = np.zeros(plan.n_ranks, dtype=np.int64)
        self.rank_edge_evals = np.zeros(plan.n_ranks, dtype=np.int64)
        self._cell_idx = [np.union1d(plan.owned_cells[k], plan.halo_cells[k]) for k in range(plan.n_blocks)]
        self._edge_idx = [np.union1d(plan.owned_edges[k], plan.halo_edges[k]) for k in range(plan.n_blocks)]

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def _run_block(self, k, h, u, cells_mask, edges_mask, dh, du):
        plan = self.plan
        tc = plan.owned_cells[k][cells_mask[plan.owned_cells[k]]]
        te = plan.owned_edges[k][edges_mask[plan.owned_edges[k]]]
        if tc.size == 0 and te.size == 0:
            return 0, 0
        # halo exchange: copy owned + halo values into the block's buffers
        ci, ei = self._cell_idx[k], self._edge_idx[k]
        hl = np.full_like(h, np.nan)
        ul = np.full_like(u, np.nan)
        bl = np.full_like(self.b, np.nan)
        hl[ci] = h[ci]
        ul[ei] = u[ei]
        bl[ci] = self.b[ci]
        st = ops.stencil_for(self.mesh, tc, te)
        try:
            for _ in range(self.layers - 1):
                ops.evaluate_stencil(self.mesh, st, hl, ul, bl, self.f, self.g)
            ldh, ldu = ops.evaluate_stencil(self.mesh, st, hl, ul, bl, self.f, self.g)
        except ops.DryVertexError as exc:
            if np.isnan(exc.value):  # a poisoned entry reached the vertex thickness
                raise InvariantError(f"block {k}: tendencies read data outside the owned + halo sets") from exc
            raise
        if not (np.all(np.isfinite(ldh[tc])) and np.all(np.isfinite(ldu[te]))):
            raise InvariantError(f"block {k}: tendencies read data outside the owned + halo sets")
        dh[tc] = ldh[tc]
        du[te] = ldu[te]
        return tc.size, te.size

    def _run_rank(self, r, *args):
        nc = ne = 0
        for k in range(3 * r, 3 * r + 3):
            a, b = self._run_block(k, *args)
            nc += a
            ne += b
        return nc, ne

    def __call__(self, h, u, cells, edges, stage="full", t=None):
        mesh = self.mesh
        cells = np.asarray(cells, dtype=np.int64)
        edges = np.asarray(edges, dtype=np.int64)
        cm = np.zeros(mesh.n_cells, dtype=bool)
        em = np.zeros(mesh.n_edges, dtype=bool)
        cm[cells] = True
        em[edges] = True
        dh = np.full(mesh.n_cells, np.nan)
        du = np.full(mesh.n_edges, np.nan)
        args = (h, u, cm, em, dh, du)
        N = self.plan.n_ranks
        if self.workers == 1 or N == 1:
            res = [self._run_rank(r, *args) for r in range(N)]
        else:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=min(self.workers, N))
            futures = [self._pool.submit(self._run_rank, r, *args) for r in range(N)]
            res = [fu.result() for fu in futures]  # barrier
        done_c = sum(a for a, _ in res)
        done_e = sum(b for _, b in res)
        if done_c != cm.sum() or done_e != em.sum():
            raise InvariantError(f"blocks evaluated {done_c}/{int(cm.sum())} cells and "
                                 f"{done_e}/{int(em.sum())} edges; the plan does not cover the request")
        for r, (a, b) in enumerate(res):
            self.rank_cell_evals[r] += a * self.layers
            self.rank_edge_evals[r] += b * self.layers
        if self.ledger is not None:
            cc, ec = self.counter(np.nonzero(cm)[0], np.nonzero(em)[0])
            self.ledger.add_counts(stage, cc, ec, times=self.layers)
        return dh, du
