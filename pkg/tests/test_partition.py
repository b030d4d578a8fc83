import dataclasses
import warnings
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trisk_lts import operators as op
from trisk_lts import partition as pt
from trisk_lts.harness import init_tc5
from trisk_lts.integrators import InvariantError, SerialEvaluator
from trisk_lts.regions import RegionClass


def _plan(mesh, rmap, n, seed=0):
    g = pt.CellGraph.from_mesh(mesh, rmap)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return pt.make_block_plan(mesh, rmap, pt.partition_multiconstraint(g, n, seed=seed))


def _within_two(mesh, cells):
    nb = {i: set() for i in range(mesh.n_cells)}
    for a, b in mesh.cells_on_edge:
        nb[int(a)].add(int(b))
        nb[int(b)].add(int(a))
    dist = {int(c): 0 for c in cells}
    q = deque(dist)
    while q:
        i = q.popleft()
        if dist[i] == 2:
            continue
        for j in nb[i]:
            if j not in dist:
                dist[j] = dist[i] + 1
                q.append(j)
    return set(dist)


def test_graph_file_roundtrip(tmp_path, small_refined):
    mesh, rmap = small_refined
    pt.write_graph(mesh, rmap, tmp_path / "g.info")
    head = (tmp_path / "g.info").read_text().splitlines()[0].split()
    assert head == [str(mesh.n_cells), str(mesh.n_edges), "010", "3"]
    g = pt.read_graph(tmp_path / "g.info")
    g.check()
    assert g.n == mesh.n_cells and g.n_pairs == mesh.n_edges
    assert np.array_equal(g.weights, pt.region_weights(rmap))
    for i in range(mesh.n_cells):
        assert sorted(g.adjacency[i]) == sorted(mesh.cell_neighbors(i))
    pt.write_graph(mesh, None, tmp_path / "u.info")
    assert pt.read_graph(tmp_path / "u.info").weights is None


def test_region_weights_are_one_hot(small_refined):
    _, rmap = small_refined
    w = pt.region_weights(rmap)
    assert np.all(w.sum(axis=1) == 1)
    assert np.array_equal(np.argmax(w, axis=1) == 1, rmap.cell_class() == RegionClass.FINE)


@pytest.mark.parametrize("text, line", [
    ("", 1),
    ("3 2\n2\n1 3\n", 1),          # too few vertex lines
    ("2 1\n2\nx\n", 3),
    ("2 1\n3\n1\n", 2),            # id out of range
    ("2 5\n2\n1\n", 1),            # edge count mismatch
    ("2 1 001\n2 1\n1 1\n", 1),    # edge weights unsupported
])
def test_graph_parse_errors(tmp_path, text, line):
    (tmp_path / "g").write_text(text)
    with pytest.raises(pt.PartitionParseError) as err:
        pt.read_graph(tmp_path / "g")
    assert err.value.line == line


def test_asymmetric_graph_rejected():
    with pytest.raises(pt.PartitionError):
        pt.CellGraph([np.array([1]), np.array([], dtype=np.int64)]).check()


def test_partition_file_roundtrip_and_errors(tmp_path):
    lab = np.array([0, 3, 5, 1, 2])
    pt.write_partition_file(tmp_path / "p", lab)
    assert np.array_equal(pt.read_partition_file(tmp_path / "p", 6, 5), lab)
    with pytest.raises(pt.PartitionParseError) as err:
        pt.read_partition_file(tmp_path / "p", 5)
    assert err.value.line == 3
    with pytest.raises(pt.PartitionParseError):
        pt.read_partition_file(tmp_path / "p", 6, 4)
    (tmp_path / "q").write_text("0\nz\n")
    with pytest.raises(pt.PartitionParseError) as err:
        pt.read_partition_file(tmp_path / "q", 2)
    assert err.value.line == 2


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_multiconstraint_balance(fixture_lts, n):
    mesh, rmap = fixture_lts
    g = pt.CellGraph.from_mesh(mesh, rmap)
    lab = pt.partition_multiconstraint(g, n)
    assert lab.min() == 0 and lab.max() == n - 1
    assert max(pt.constraint_imbalance(lab, g, n)) <= 1.25
    assert np.array_equal(lab, pt.partition_multiconstraint(g, n))  # deterministic


def test_partitioner_rejects_bad_counts(mesh0):
    g = pt.CellGraph.from_mesh(mesh0)
    with pytest.raises(pt.PartitionError):
        pt.partition_multiconstraint(g, 0)
    with pytest.raises(pt.PartitionError):
        pt.partition_multiconstraint(g, 13)
    assert sorted(pt.partition_multiconstraint(g, 12)) == list(range(12))


def _check_plan(mesh, rmap, plan):
    assert all(plan.region_purity())
    cover = np.concatenate(plan.owned_cells)
    assert np.array_equal(np.sort(cover), np.arange(mesh.n_cells))
    ecover = np.concatenate(plan.owned_edges)
    assert np.array_equal(np.sort(ecover), np.arange(mesh.n_edges))
    ecls = rmap.edge_class()
    for b in range(plan.n_blocks):
        assert np.all(ecls[plan.owned_edges[b]] == b % 3)
        if plan.owned_cells[b].size == 0:
            continue
        want = _within_two(mesh, plan.owned_cells[b]) - set(plan.owned_cells[b].tolist())
        assert set(plan.halo_cells[b].tolist()) == want
        region = set(plan.owned_cells[b].tolist()) | want
        he = set(plan.halo_edges[b].tolist())
        for e, (a, c) in enumerate(mesh.cells_on_edge):
            inside = int(a) in region and int(c) in region
            assert (e in he) == (inside and plan.block_of_edge[e] != b)


@pytest.mark.parametrize("n", [1, 2, 4])
def test_block_plan_invariants(small_refined, n):
    mesh, rmap = small_refined
    plan = _plan(mesh, rmap, n)
    assert plan.n_blocks == 3 * n
    _check_plan(mesh, rmap, plan)
    c = pt.concentrate_interface(plan)
    _check_plan(mesh, rmap, c)
    rep = pt.imbalance_metrics(c, rmap)
    assert rep.ratios["interface"] == pytest.approx(n)
    assert rep.per_rank[0, RegionClass.INTERFACE] == rmap.counts["n_if1"] + rmap.counts["n_if2"]
    if n > 1:
        assert any("interface" in s for s in rep.idle)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_any_labelling_gives_a_pure_plan(n, seed):
    from trisk_lts.regions import build_regions, cap_predicate

    mesh = _small_mesh()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rmap = build_regions(mesh, cap_predicate((1.0, 0.3), 0.5), 1)
        lab = np.random.default_rng(seed).integers(0, n, mesh.n_cells)
        plan = pt.make_block_plan(mesh, rmap, lab)
    assert all(plan.region_purity())
    assert np.array_equal(np.sort(np.concatenate(plan.owned_cells)), np.arange(mesh.n_cells))
    assert np.array_equal(pt.block_labels(plan) // 3, lab)


_M = {}


def _small_mesh():
    if not _M:
        from trisk_lts.mesh import generate_icosphere_mesh

        _M["m"] = generate_icosphere_mesh(2, 3)
    return _M["m"]


def test_make_block_plan_errors(small_refined):
    mesh, rmap = small_refined
    with pytest.raises(pt.PartitionError):
        pt.make_block_plan(mesh, rmap, np.zeros(3))
    with pytest.raises(pt.PartitionError):
        pt.make_block_plan(mesh, rmap, -np.ones(mesh.n_cells))
    with pytest.warns(UserWarning, match="owns no cells"):
        lab = np.zeros(mesh.n_cells, dtype=np.int64)
        lab[rmap.coarse[:5]] = 1
        pt.make_block_plan(mesh, rmap, lab)


@pytest.mark.parametrize("n", [1, 2, 4])
def test_partitioned_tendencies_bitwise(small_refined, tc5_small, tc, n, rng):
    mesh, rmap = small_refined
    state, b, f = tc5_small
    plan = _plan(mesh, rmap, n)
    h = state.h * (1 + 0.01 * rng.standard_normal(mesh.n_cells))
    u = state.u + rng.standard_normal(mesh.n_edges)
    ser = SerialEvaluator(mesh, b, f, tc.g)
    par = pt.PartitionedEvaluator(mesh, plan, b, f, tc.g)
    try:
        for frac in (1.0, 0.3):
            cells = np.nonzero(rng.random(mesh.n_cells) < frac)[0]
            edges = np.nonzero(rng.random(mesh.n_edges) < frac)[0]
            a = ser(h, u, cells, edges)
            c = par(h, u, cells, edges)
            assert np.array_equal(a[0][cells], c[0][cells])
            assert np.array_equal(a[1][edges], c[1][edges])
        assert par.rank_cell_evals.sum() == mesh.n_cells + cells.size
    finally:
        par.close()


def test_one_ring_halo_is_not_enough(small_refined, tc5_small, tc):
    mesh, rmap = small_refined
    state, b, f = tc5_small
    plan = _plan(mesh, rmap, 2)
    cc = mesh.cells_on_cell
    thin = []
    for k in range(plan.n_blocks):
        own = plan.owned_cells[k]
        nb = cc[own].ravel()
        thin.append(np.setdiff1d(nb[nb >= 0], own))
    bad = dataclasses.replace(plan, halo_cells=thin)
    par = pt.PartitionedEvaluator(mesh, bad, b, f, tc.g, workers=1)
    with pytest.raises(InvariantError, match="outside the owned"):
        par(state.h, state.u, np.arange(mesh.n_cells), np.arange(mesh.n_edges))


def test_plan_summary_file(tmp_path, small_refined):
    mesh, rmap = small_refined
    plan = _plan(mesh, rmap, 2)
    pt.write_plan_summary(tmp_path / "s.csv", plan)
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert len(rows) == 1 + plan.n_blocks
    assert rows[1].startswith("0,0,fine,")
