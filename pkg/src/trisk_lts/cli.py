"""Command-line entry point: ``trisk-lts {mesh,regions,partition,run,converge,report}``."""

from __future__ import annotations

import argparse
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import harness as hs
from . import partition as pt
from .accounting import read_ledger_csv
from .integrators import SCHEMES, SchemeConfig, State
from .mesh import EARTH_RADIUS, MeshError, generate_icosphere_mesh, generate_refined_mesh, read_mesh, write_mesh
from .operators import read_fields, write_fields
from .regions import (RegionConfigError, RegionParseError, build_regions, cap_predicate, read_region_file,
                      validate, write_region_file)


class CliError(Exception):
    """Runtime failure reported with exit code 1."""


def _pair(text):
    try:
        a, b = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lon,lat' in radians, got {text!r}") from None
    return (a, b)


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None


def _say(*lines):
    for ln in lines:
        print(ln)


def _echo_args(args):
    items = {k: v for k, v in vars(args).items() if k != "func"}
    return [f"{k} = {v}" for k, v in sorted(items.items())]


# ---------------------------------------------------------------------------
# mesh / regions / partition

def cmd_mesh(args):
    try:
        if args.refine_factor > 1:
            mesh = generate_refined_mesh(args.level, args.refine_center, args.refine_radius, args.refine_factor,
                                         args.lloyd, args.radius)
        else:
            mesh = generate_icosphere_mesh(args.level, args.lloyd, args.radius)
    except (MeshError, ValueError) as exc:
        raise CliError(f"mesh generation failed: {exc}") from exc
    write_mesh(mesh, args.out)
    a_ls, _ = hs.mesh_metrics(mesh)
    _say(f"cells {mesh.n_cells}", f"edges {mesh.n_edges}", f"vertices {mesh.n_vertices}", f"A_ls {a_ls:.6g}",
         f"wrote {args.out}")


def _load_mesh(path):
    try:
        return read_mesh(path)
    except (OSError, MeshError) as exc:
        raise CliError(f"cannot read mesh {path}: {exc}") from exc


def cmd_regions(args):
    mesh = _load_mesh(args.mesh)
    try:
        rmap = build_regions(mesh, cap_predicate(args.cap_center, args.cap_radius), args.width)
    except RegionConfigError as exc:
        raise CliError(str(exc)) from exc
    rep = validate(mesh, rmap)
    if not rep.ok:
        raise CliError("region map failed validation:\n" + "\n".join(rep.violations))
    write_region_file(args.out, rmap)
    _, ccf = hs.mesh_metrics(mesh, rmap)
    c = rmap.counts
    _say(f"fine {c['n_fine']}", f"interface1 {c['n_if1']}", f"interface2 {c['n_if2']}",
         f"coarse {c['n_coarse']}", f"C_cf {ccf:.4f}", f"wrote {args.out}")


def _load_regions(path, mesh):
    try:
        return read_region_file(path, mesh)
    except (OSError, RegionParseError) as exc:
        raise CliError(f"cannot read regions {path}: {exc}") from exc


def _plan(mesh, rmap, ranks, case, seed, import_part=None):
    if import_part:
        try:
            labels = pt.read_partition_file(import_part, ranks, mesh.n_cells)
        except (OSError, pt.PartitionParseError) as exc:
            raise CliError(f"cannot import partition {import_part}: {exc}") from exc
    else:
        graph = pt.CellGraph.from_mesh(mesh, rmap)
        labels = pt.partition_multiconstraint(graph, ranks, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plan = pt.make_block_plan(mesh, rmap, labels)
    if plan.n_ranks < ranks:
        # trailing ranks without cells still exist as (empty) blocks
        plan = pt._build_plan(mesh, rmap, plan.block_of_cell, ranks)
    if case.upper() == "C":
        plan = pt.concentrate_interface(plan)
    if not all(plan.region_purity()):
        raise CliError("block plan violates region purity")
    return labels, plan


def cmd_partition(args):
    mesh = _load_mesh(args.mesh)
    rmap = _load_regions(args.regions, mesh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pt.write_graph(mesh, rmap, out / "graph.info")
    labels, plan = _plan(mesh, rmap, args.ranks, args.case, args.seed, args.import_part)
    pt.write_partition_file(out / f"graph.info.part.{args.ranks}", labels)
    pt.write_partition_file(out / f"graph.info.part.{plan.n_blocks}", pt.block_labels(plan))
    pt.write_plan_summary(out / "plan_summary.csv", plan)
    rep = pt.imbalance_metrics(plan, rmap)
    _say(f"ranks {plan.n_ranks}", f"blocks {plan.n_blocks}")
    for name, r in rep.ratios.items():
        _say(f"imbalance {name} {r:.4f}")
    _say(f"imbalance total {rep.total_ratio:.4f}", *rep.idle, f"wrote {out}")


# ---------------------------------------------------------------------------
# run / converge

def _config_from_args(args):
    cfg = hs.parse_run_config(args.config) if args.config else hs.RunConfig()
    for key in ("mesh_path", "region_path", "cap_center", "cap_radius", "interface_width", "scheme", "M",
                "dt_coarse", "duration", "n_ranks", "layers_replication", "output_dir", "seed", "case"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    return cfg


def _setup(cfg):
    if cfg.mesh_path:
        mesh = _load_mesh(cfg.mesh_path)
    else:
        mesh, _ = hs.build_fixture()
    if cfg.region_path:
        rmap = _load_regions(cfg.region_path, mesh)
    else:
        try:
            rmap = build_regions(mesh, cap_predicate(cfg.cap_center, cfg.cap_radius), cfg.interface_width)
        except RegionConfigError as exc:
            raise CliError(str(exc)) from exc
    return mesh, rmap


def cmd_run(args):
    cfg = _config_from_args(args)
    if cfg.scheme not in SCHEMES:
        raise CliError(f"unknown scheme {cfg.scheme}")
    mesh, rmap = _setup(cfg)
    scheme = SchemeConfig(cfg.scheme, cfg.dt_coarse, cfg.M if cfg.scheme.startswith("lts") else 1)
    tc = hs.TestCaseConfig(layers=cfg.layers_replication)
    plan = None
    if cfg.n_ranks > 1 or args.partitioned:
        _, plan = _plan(mesh, rmap, cfg.n_ranks, cfg.case, cfg.seed)
    try:
        res = hs.run_simulation(mesh, rmap, plan, scheme, tc, cfg.duration, workers=args.workers)
    except hs.StepError as exc:
        raise CliError(f"solver failed at step {exc.step}: {exc.cause}") from exc
    except hs.ConfigError as exc:
        raise CliError(str(exc)) from exc
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.echo()
    hs.write_diagnostics_csv(out / "diagnostics.csv", res.diagnostics, echo)
    write_fields(out / "fields_final.csv", cell=res.state.h, edge=res.state.u)
    res.ledger.write_csv(out / "ledger.csv")
    m0, m1 = res.diagnostics[0]["total_mass"], res.diagnostics[-1]["total_mass"]
    a_ls, ccf = hs.mesh_metrics(mesh, rmap)
    lines = ["# effective configuration", *echo, "",
             f"steps {len(res.diagnostics) - 1}",
             f"final_time {res.state.time:.17g}",
             f"relative_mass_drift {abs(m1 - m0) / m0:.3e}",
             f"cell_evals {res.ledger.total_cells()}",
             f"edge_evals {res.ledger.total_edges()}",
             f"A_ls {a_ls:.6g}", f"C_cf {ccf:.6g}",
             f"wall_time_s {res.wall_time:.3f}"]
    hs.write_report(out / "report.txt", lines)
    _say(*lines[len(echo) + 2:], f"wrote {out}")


def cmd_converge(args):
    cfg = _config_from_args(args)
    mesh, rmap = _setup(cfg)
    tc = hs.TestCaseConfig()
    res = hs.convergence_study(cfg.scheme, cfg.M, args.dts, cfg.duration, mesh, rmap, tc, dt_ref=args.dt_ref)
    _say(f"scheme {res.scheme} M {res.M} dt_ref {res.dt_ref:g}")
    for dt, e in zip(res.dts, res.errors):
        _say(f"dt {dt:g} l2_h {e.l2_h:.6e} l2_u {e.l2_u:.6e}")
    _say(f"slope_h {res.slope_h:.4f}", f"slope_u {res.slope_u:.4f}")
    if not res.monotone:
        _say("warning: errors are not monotone in dt")


# ---------------------------------------------------------------------------
# report

def cmd_report(args):
    did = False
    if args.optimal_ratio:
        n, nc, nf, M = args.optimal_ratio
        try:
            _say(f"optimal_ratio {hs.optimal_ratio(int(n), int(nc), int(nf), int(M)):.6f}")
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        did = True
    if args.gain:
        tr, tl = args.gain
        _say(f"gain_percent {hs.gain_percent(tr, tl):.6f}")
        did = True
    if args.mesh:
        mesh = _load_mesh(args.mesh)
        rmap = _load_regions(args.regions, mesh) if args.regions else None
        a_ls, ccf = hs.mesh_metrics(mesh, rmap)
        _say(f"A_ls {a_ls:.6g}")
        if ccf is not None:
            _say(f"C_cf {ccf:.6g}")
        did = True
    if args.compare:
        a, b = (Path(p) for p in args.compare)
        fa = read_fields(a / "fields_final.csv" if a.is_dir() else a)
        fb = read_fields(b / "fields_final.csv" if b.is_dir() else b)
        sa, sb = State(fa["cell"], fa["edge"]), State(fb["cell"], fb["edge"])
        try:
            err = hs.l2_error(sa, sb)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        rel_h = float(np.max(np.abs(sa.h - sb.h)) / np.max(np.abs(sb.h)))
        rel_u = float(np.max(np.abs(sa.u - sb.u)) / np.max(np.abs(sb.u)))
        _say(f"l2_h {err.l2_h:.6e}", f"l2_u {err.l2_u:.6e}",
             f"rel_l2_h {err.l2_h / np.linalg.norm(sb.h):.6e}", f"max_rel_h {rel_h:.6e}", f"max_rel_u {rel_u:.6e}")
        did = True
    if args.ledger:
        led = read_ledger_csv(args.ledger)
        for r, s, c, e in led.as_rows():
            _say(f"{r} {s} cells {c} edges {e}")
        _say(f"total_work {led.total_work()}")
        did = True
    if not did:
        raise CliError("nothing to report; pass --optimal-ratio, --gain, --mesh, --compare or --ledger")


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="trisk-lts", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mesh", help="generate a spherical Voronoi mesh")
    m.add_argument("--level", type=int, default=3)
    m.add_argument("--refine-center", type=_pair, default=(1.5 * math.pi, math.pi / 6))
    m.add_argument("--refine-radius", type=float, default=math.pi / 8)
    m.add_argument("--refine-factor", type=int, default=1)
    m.add_argument("--lloyd", type=int, default=0)
    m.add_argument("--radius", type=float, default=EARTH_RADIUS)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mesh)

    r = sub.add_parser("regions", help="label LTS regions around a fine cap")
    r.add_argument("--mesh", required=True)
    r.add_argument("--cap-center", type=_pair, default=(1.5 * math.pi, math.pi / 6))
    r.add_argument("--cap-radius", type=float, required=True)
    r.add_argument("--width", type=int, default=1)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_regions)

    q = sub.add_parser("partition", help="multi-constraint partition and block plan")
    q.add_argument("--mesh", required=True)
    q.add_argument("--regions", required=True)
    q.add_argument("--ranks", type=int, required=True)
    q.add_argument("--case", choices=["A", "B", "C"], default="A")
    q.add_argument("--import-part", help="rank labels (graph.info.part.N) from an external partitioner")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_partition)

    def run_flags(sp):
        sp.add_argument("--config", help="key = value run configuration")
        sp.add_argument("--mesh", dest="mesh_path")
        sp.add_argument("--regions", dest="region_path")
        sp.add_argument("--cap-center", type=_pair)
        sp.add_argument("--cap-radius", type=float)
        sp.add_argument("--width", dest="interface_width", type=int)
        sp.add_argument("--scheme", type=str.lower, choices=SCHEMES)
        sp.add_argument("--M", type=int)
        sp.add_argument("--duration", type=float)
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("run", help="integrate test case 5")
    run_flags(s)
    s.add_argument("--dt", dest="dt_coarse", type=float)
    s.add_argument("--ranks", dest="n_ranks", type=int)
    s.add_argument("--layers", dest="layers_replication", type=int)
    s.add_argument("--case", choices=["A", "B", "C"])
    s.add_argument("--workers", type=int)
    s.add_argument("--partitioned", action="store_true", help="use the block evaluator even for one rank")
    s.add_argument("--out", dest="output_dir")
    s.set_defaults(func=cmd_run)

    c = sub.add_parser("converge", help="time-step convergence study against an RK4 reference")
    run_flags(c)
    c.add_argument("--dts", type=_floats, required=True)
    c.add_argument("--dt-ref", type=float)
    c.set_defaults(func=cmd_converge)

    rp = sub.add_parser("report", help="derived metrics and run comparisons")
    rp.add_argument("--optimal-ratio", nargs=4, type=float, metavar=("N", "N_COARSE", "N_FINE", "M"))
    rp.add_argument("--gain", nargs=2, type=float, metavar=("T_REF", "T_LTS"))
    rp.add_argument("--mesh")
    rp.add_argument("--regions")
    rp.add_argument("--compare", nargs=2, metavar=("RUN_A", "RUN_B"))
    rp.add_argument("--ledger")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
