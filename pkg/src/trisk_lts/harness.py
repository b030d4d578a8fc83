"""Test case 5 (zonal flow over an isolated mountain), simulation driver and derived metrics."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import integrators as itg
from .accounting import WorkLedger, read_ledger_csv  # noqa: F401  (re-exported)
from .integrators import SchemeConfig, SerialEvaluator, State
from .mesh import EARTH_RADIUS, generate_refined_mesh
from .regions import RegionMap, build_regions, cap_predicate


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TestCaseConfig:
    lam_c: float = 1.5 * math.pi   # mountain centre longitude
    theta_c: float = math.pi / 6   # mountain centre latitude
    R_mnt: float = math.pi / 9     # mountain radius (radians)
    hs0: float = 2000.0            # mountain height (m)
    u0: float = 20.0               # zonal wind speed (m/s)
    h0: float = 5960.0             # reference fluid height (m)
    g: float = 9.80616
    omega: float = 7.292e-5
    radius: float = EARTH_RADIUS
    layers: int = 1                # kernel replication factor

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if not 0.0 < self.R_mnt < math.pi:
            raise ConfigError("R_mnt must lie in (0, pi)")
        if int(self.layers) != self.layers or self.layers < 1:
            raise ConfigError("layers must be a positive integer")


def mountain_height(lon, lat, cfg: TestCaseConfig):
    """Conical mountain hs0 * (1 - r / R) with r^2 = min(R^2, dlon^2 + dlat^2)."""
    r2 = np.minimum(cfg.R_mnt ** 2, (np.asarray(lon) - cfg.lam_c) ** 2 + (np.asarray(lat) - cfg.theta_c) ** 2)
    return cfg.hs0 * (1.0 - np.sqrt(r2) / cfg.R_mnt)


def zonal_flow(mesh, u0):
    """Normal components of u0 cos(lat) e_lon at the edge points."""
    lon, lat = mesh.edge_lonlat
    e_lon = np.stack([-np.sin(lon), np.cos(lon), np.zeros_like(lon)], axis=1)
    return u0 * np.cos(lat) * np.einsum("ij,ij->i", e_lon, mesh.edge_normals())


def init_tc5(mesh, cfg: TestCaseConfig = TestCaseConfig()):
    """Initial state, bottom topography b (cells) and Coriolis parameter f (vertices)."""
    lon, lat = mesh.cell_lonlat
    a = mesh.radius
    b = mountain_height(lon, lat, cfg)
    gh = cfg.g * cfg.h0 - (a * cfg.omega * cfg.u0 + 0.5 * cfg.u0 ** 2) * np.sin(lat) ** 2
    h = gh / cfg.g - b
    if np.any(h <= 0.0):
        i = int(np.argmin(h))
        raise ConfigError(f"cell {i}: mountain reaches above the free surface (h = {h[i]:g} m)")
    u = zonal_flow(mesh, cfg.u0)
    _, vlat = mesh.vertex_lonlat
    f = 2.0 * cfg.omega * np.sin(vlat)
    return State(h, u, 0.0), b, f


# ---------------------------------------------------------------------------
# norms and conserved quantities

@dataclass
class ErrorReport:
    l2_h: float
    l2_u: float
    linf_h: float
    linf_u: float
    slopes: dict = field(default_factory=dict)


def l2_error(a: State, ref: State, weighted=False, mesh=None) -> ErrorReport:
    """Plain vector l2 (or area-weighted with ``weighted=True``) of the differences."""
    if a.h.shape != ref.h.shape or a.u.shape != ref.u.shape:
        raise ValueError("states live on different meshes")
    dh = a.h - ref.h
    du = a.u - ref.u
    if weighted:
        if mesh is None:
            raise ValueError("weighted norm needs the mesh")
        l2h = math.sqrt(float(np.sum(mesh.area_cell * dh * dh)))
        l2u = math.sqrt(float(np.sum(mesh.dv_edge * mesh.dc_edge * du * du)))
    else:
        l2h = math.sqrt(float(np.dot(dh, dh)))
        l2u = math.sqrt(float(np.dot(du, du)))
    return ErrorReport(l2h, l2u, float(np.max(np.abs(dh))), float(np.max(np.abs(du))))


def total_mass(mesh, h):
    """sum_i A_i h_i (m^3), summed in cell order."""
    return float(np.sum(mesh.area_cell * np.asarray(h)))


def total_energy(mesh, h, u, b, g):
    """sum_i A_i (h_i K_i + g h_i (h_i / 2 + b_i))."""
    from .operators import kinetic_energy

    K = kinetic_energy(mesh, u)
    return float(np.sum(mesh.area_cell * (h * K + g * h * (0.5 * h + b))))


# ---------------------------------------------------------------------------
# driver

DIAG_COLUMNS = ("time", "total_mass", "total_energy", "courant_fine", "courant_coarse")


@dataclass
class SimulationResult:
    state: State
    diagnostics: list
    ledger: WorkLedger
    wall_time: float = 0.0
    fields_per_step: list | None = None


def n_steps_for(duration, dt):
    n = int(round(duration / dt))
    if n < 1 or abs(n * dt - duration) > 1e-9 * max(duration, dt):
        raise ConfigError(f"duration {duration} is not a multiple of dt {dt}")
    return n


def make_evaluator(mesh, b, f, g, plan=None, ledger=None, layers=1, rmap=None, workers=None):
    if plan is None:
        return SerialEvaluator(mesh, b, f, g, ledger=ledger, layers=layers, rmap=rmap)
    from .partition import PartitionedEvaluator

    return PartitionedEvaluator(mesh, plan, b, f, g, ledger=ledger, layers=layers, rmap=rmap, workers=workers)


def run_simulation(mesh, rmap: RegionMap | None, plan, scheme: SchemeConfig, tc: TestCaseConfig,
                   duration, initial=None, workers=None, keep_fields=False, diagnostics=True):
    """Integrate test case 5 for ``duration`` seconds.

    Returns the final state, one diagnostics row per step (plus the initial
    row), and the work ledger.  ``initial`` = (state, b, f) overrides the
    test-case initialization.
    """
    state, b, f = initial if initial is not None else init_tc5(mesh, tc)
    n = n_steps_for(duration, scheme.dt_coarse)
    ledger = WorkLedger()
    ev = make_evaluator(mesh, b, f, scheme.g, plan=plan, ledger=ledger, layers=tc.layers,
                        rmap=rmap, workers=workers)
    rows = []
    snaps = [] if keep_fields else None

    def record(s):
        if not diagnostics:
            return
        cf, cc = itg.courant_numbers(mesh, s.u, scheme, rmap)
        rows.append(dict(time=s.time, total_mass=total_mass(mesh, s.h),
                         total_energy=total_energy(mesh, s.h, s.u, b, scheme.g),
                         courant_fine=cf, courant_coarse=cc))

    record(state)
    t0 = time.perf_counter()
    try:
        for k in range(n):
            try:
                state = itg.step(mesh, state, scheme, b, f, rmap=rmap, evaluator=ev)
            except Exception as exc:
                raise StepError(k + 1, exc) from exc
            record(state)
            if keep_fields:
                snaps.append((state.h.copy(), state.u.copy()))
    finally:
        if hasattr(ev, "close"):
            ev.close()
    wall = time.perf_counter() - t0
    ledger.wall_time["integration"] += wall
    return SimulationResult(state, rows, ledger, wall, snaps)


class StepError(RuntimeError):
    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")


def write_diagnostics_csv(path, rows, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(DIAG_COLUMNS)
        for r in rows:
            w.writerow(["%.17g" % r[c] for c in DIAG_COLUMNS])


def read_diagnostics_csv(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    r = csv.DictReader(lines)
    return [{k: float(v) for k, v in row.items()} for row in r]


# ---------------------------------------------------------------------------
# derived metrics

def optimal_ratio(n_total, n_coarse_dt_cells, n_fine_dt_cells, M):
    """M * N / (N_coarse + M * N_fine): ideal speed-up of substepping only the fine cells."""
    if n_total != n_coarse_dt_cells + n_fine_dt_cells:
        raise ValueError(f"counts do not add up: {n_coarse_dt_cells} + {n_fine_dt_cells} != {n_total}")
    if M < 1 or n_total <= 0:
        raise ValueError("need M >= 1 and a positive cell count")
    return M * n_total / (n_coarse_dt_cells + M * n_fine_dt_cells)


def gain_percent(t_reference, t_lts):
    """Time saved relative to the reference, in percent."""
    if not t_reference > 0:
        raise ValueError("t_reference must be positive")
    return (t_reference - t_lts) * 100.0 / t_reference


def coarse_fine_ratio(n_coarse_dt_cells, n_fine_dt_cells):
    return n_coarse_dt_cells / n_fine_dt_cells


def mesh_metrics(mesh, rmap: RegionMap | None = None):
    """(A_ls, C_cf): largest/smallest cell area and coarse-step/fine-step cell count ratio."""
    a_ls = float(mesh.area_cell.max() / mesh.area_cell.min())
    if rmap is None:
        return a_ls, None
    c = rmap.counts
    if c["n_fine"] == 0:
        return a_ls, math.inf
    return a_ls, coarse_fine_ratio(c["n_coarse"] + c["n_if1"] + c["n_if2"], c["n_fine"])


def fit_slope(dts, errors):
    """Least-squares slope of log(error) against log(dt)."""
    x = np.log(np.asarray(dts, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class ConvergenceResult:
    scheme: str
    M: int
    dts: list
    errors: list          # ErrorReport per dt
    slope_h: float
    slope_u: float
    monotone: bool
    dt_ref: float


def reference_solution(mesh, tc, duration, dt_ref, initial=None, g=None):
    cfg = SchemeConfig("rk4", dt_ref, 1, tc.g if g is None else g)
    return run_simulation(mesh, None, None, cfg, TestCaseConfig(**{**asdict(tc), "layers": 1}),
                          duration, initial=initial, diagnostics=False).state


def convergence_study(scheme, M, dts, duration, mesh, rmap, tc: TestCaseConfig = TestCaseConfig(),
                      dt_ref=None, reference=None, weighted=False, initial=None):
    """Errors against a fine-step RK4 reference over a ladder of coarse steps, and fitted slopes.

    ``dt_ref`` defaults to min(dts) / 20.  A precomputed reference State may
    be passed to share it between studies.
    """
    dts = [float(d) for d in dts]
    if dt_ref is None:
        dt_ref = min(dts) / 20.0
    if reference is None:
        reference = reference_solution(mesh, tc, duration, dt_ref, initial)
    tc1 = TestCaseConfig(**{**asdict(tc), "layers": 1})
    errors = []
    for dt in dts:
        cfg = SchemeConfig(scheme, dt, M if scheme.startswith("lts") else 1, tc.g)
        res = run_simulation(mesh, rmap if cfg.is_lts else None, None, cfg, tc1, duration,
                             initial=initial, diagnostics=False)
        errors.append(l2_error(res.state, reference, weighted, mesh))
    eh = [e.l2_h for e in errors]
    eu = [e.l2_u for e in errors]
    order = np.argsort(dts)
    mono = bool(np.all(np.diff(np.array(eh)[order]) > 0) and np.all(np.diff(np.array(eu)[order]) > 0))
    return ConvergenceResult(scheme, M, dts, errors, fit_slope(dts, eh), fit_slope(dts, eu), mono, dt_ref)


# ---------------------------------------------------------------------------
# work accounting

def fine_equivalent_work_ratio(ledger_m1: WorkLedger, steps_m1, ledger_m: WorkLedger, steps_m, M):
    """Work to cover the same time span: M coarse steps at M=1 versus one coarse step at M.

    Both runs are normalized per coarse step; the M=1 run has the fine step as
    its coarse step, so M of its steps span one step of the substepped run.
    """
    per1 = ledger_m1.total_work() / steps_m1
    perm = ledger_m.total_work() / steps_m
    return M * per1 / perm


def predicted_lts_counts(rmap: RegionMap, order, M, steps=1, layers=1):
    """(cell_evals, edge_evals) per stage label that one LTS run should charge."""
    plan = itg.LtsPlan.build(order, rmap)
    counts = {}

    def add(stage, sets, times):
        c, e = sets
        pc, pe = counts.get(stage, (0, 0))
        counts[stage] = (pc + len(c) * times * steps * layers, pe + len(e) * times * steps * layers)

    add("step1", plan.step1, 1)
    add("step2", plan.step2, 1)
    add("substep1", plan.substep, M)
    add("substep2", plan.substep, M)
    if order == 3:
        add("substep3", plan.substep, M)
        add("step4", plan.step4, 1)
    return counts


# ---------------------------------------------------------------------------
# fixtures

@dataclass(frozen=True)
class FixtureSpec:
    """Variable-resolution mesh plus a fine cap: the default desk-scale setup."""

    level: int = 4
    refine_center: tuple = (1.5 * math.pi, math.pi / 6)
    refine_radius: float = math.pi / 16
    refine_factor: int = 4
    lloyd_iterations: int = 30
    fine_radius: float = 0.28
    interface_width: int = 1


def build_fixture(spec: FixtureSpec = FixtureSpec()):
    mesh = generate_refined_mesh(spec.level, spec.refine_center, spec.refine_radius, spec.refine_factor,
                                 spec.lloyd_iterations)
    rmap = build_regions(mesh, cap_predicate(spec.refine_center, spec.fine_radius), spec.interface_width)
    return mesh, rmap


# ---------------------------------------------------------------------------
# run configuration files

@dataclass
class RunConfig:
    mesh_path: str = ""
    region_path: str = ""
    cap_center: tuple = (1.5 * math.pi, math.pi / 6)
    cap_radius: float = 0.28
    interface_width: int = 1
    scheme: str = "ssprk3"
    M: int = 1
    dt_coarse: float = 60.0
    duration: float = 3600.0
    n_ranks: int = 1
    layers_replication: int = 1
    output_dir: str = "out"
    seed: int = 0
    case: str = "A"

    def echo(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            out.append(f"{f.name} = {v}")
        return out


def parse_run_config(path) -> RunConfig:
    """``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    cfg = RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    defaults = asdict(cfg)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in text.split("=", 1))
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            setattr(cfg, key, _coerce(defaults[key], val, path, lineno))
    return cfg


def _coerce(default, val, path, lineno):
    try:
        if isinstance(default, tuple):
            return tuple(float(x) for x in val.split(","))
        if isinstance(default, bool):
            return val.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(val)
        if isinstance(default, float):
            return float(val)
        return val
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: bad value {val!r}") from None


def write_report(path, lines):
    Path(path).write_text("\n".join(lines) + "\n")
