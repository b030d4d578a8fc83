"""Explicit time integrators: SSPRK2/3, classical RK4 and the LTS2/LTS3 local time-stepping schemes.

Tendencies are obtained through an *evaluator*, a callable
``evaluator(h, u, cells, edges, stage, t=None) -> (dh, du)`` that fills the
requested cells and edges (full-length arrays, NaN elsewhere).  The serial
evaluator below calls :func:`operators.evaluate_stencil` directly; the
partitioned one in :mod:`partition` splits the same work over emulated ranks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import operators as ops
from .accounting import WorkLedger
from .regions import CellRegion, EdgeRegion, RegionConfigError, RegionMap

SCHEMES = ("ssprk2", "ssprk3", "rk4", "lts2", "lts3")

# (omega_old, omega_1st, omega_rhs) of the second SSPRK stage
SSPRK_WEIGHTS = {2: (0.5, 0.5, 0.5), 3: (0.75, 0.25, 0.25)}
# weights of the accumulated stage tendencies in the interface correction
THETA = {2: (0.5, 0.5, 0.0), 3: (1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0)}


class InvariantError(RuntimeError):
    """Internal consistency check failed."""


@dataclass
class State:
    h: np.ndarray
    u: np.ndarray
    time: float = 0.0

    def copy(self):
        return State(self.h.copy(), self.u.copy(), self.time)


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "ssprk3"
    dt_coarse: float = 60.0
    M: int = 1
    g: float = 9.80616

    def __post_init__(self):
        name = self.scheme.lower()
        object.__setattr__(self, "scheme", name)
        if name not in SCHEMES:
            raise ValueError(f"unknown scheme '{self.scheme}', expected one of {', '.join(SCHEMES)}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"M must be a positive integer, got {self.M}")
        object.__setattr__(self, "M", int(self.M))
        if not self.dt_coarse > 0:
            raise ValueError(f"dt_coarse must be positive, got {self.dt_coarse}")

    @property
    def order(self):
        return {"ssprk2": 2, "ssprk3": 3, "rk4": 4, "lts2": 2, "lts3": 3}[self.scheme]

    @property
    def is_lts(self):
        return self.scheme.startswith("lts")

    @property
    def dt_fine(self):
        return self.dt_coarse / self.M if self.is_lts else self.dt_coarse


# ---------------------------------------------------------------------------
# evaluators

CELL_REGION_NAMES = {int(c): c.name.lower() for c in CellRegion}
EDGE_REGION_NAMES = {int(c): c.name.lower() for c in EdgeRegion}


class RegionCounter:
    """Turns evaluated element lists into per-region counts for the ledger."""

    def __init__(self, mesh, rmap: RegionMap | None = None):
        if rmap is None or rmap.edge_label is None:
            self.cell_codes = np.zeros(mesh.n_cells, dtype=np.int64)
            self.edge_codes = np.zeros(mesh.n_edges, dtype=np.int64)
            self.cell_names = ["all"]
            self.edge_names = ["all"]
        else:
            self.cell_codes = np.asarray(rmap.cell_label, dtype=np.int64)
            self.edge_codes = np.asarray(rmap.edge_label, dtype=np.int64)
            ncell = max(CELL_REGION_NAMES) + 1
            nedge = max(EDGE_REGION_NAMES) + 1
            self.cell_names = [CELL_REGION_NAMES.get(i, str(i)) for i in range(ncell)]
            self.edge_names = [EDGE_REGION_NAMES.get(i, str(i)) for i in range(nedge)]

    def __call__(self, cells, edges):
        cc = np.bincount(self.cell_codes[cells], minlength=len(self.cell_names))
        ec = np.bincount(self.edge_codes[edges], minlength=len(self.edge_names))
        return ({self.cell_names[i]: int(n) for i, n in enumerate(cc) if n},
                {self.edge_names[i]: int(n) for i, n in enumerate(ec) if n})


class SerialEvaluator:
    """Restricted tendencies on one worker.

    ``layers`` repeats the kernel (replicas are discarded) to model a
    multi-layer workload; the ledger is charged for every replica.
    """

    def __init__(self, mesh, b, f, g, ledger: WorkLedger | None = None, layers=1,
                 rmap: RegionMap | None = None):
        self.mesh = mesh
        self.b = np.asarray(b, dtype=float)
        self.f = np.asarray(f, dtype=float)
        self.g = float(g)
        self.ledger = ledger
        self.layers = int(layers)
        if self.layers < 1:
            raise ValueError("layers must be at least 1")
        self.counter = RegionCounter(mesh, rmap)

    def _charge(self, stage, cells, edges):
        if self.ledger is not None:
            cc, ec = self.counter(cells, edges)
            self.ledger.add_counts(stage, cc, ec, times=self.layers)

    def __call__(self, h, u, cells, edges, stage="full", t=None):
        st = ops.stencil_for(self.mesh, cells, edges)
        for _ in range(self.layers - 1):
            ops.evaluate_stencil(self.mesh, st, h, u, self.b, self.f, self.g)
        dh, du = ops.evaluate_stencil(self.mesh, st, h, u, self.b, self.f, self.g)
        self._charge(stage, st.cells, st.edges)
        return dh, du


def _full_sets(mesh):
    return mesh.derived("all_sets", lambda m: (np.arange(m.n_cells), np.arange(m.n_edges)))


# ---------------------------------------------------------------------------
# single-rate schemes

def ssprk_step(order, mesh, state: State, cfg: SchemeConfig, b, f, evaluator=None) -> State:
    """One SSPRK2 or SSPRK3 step of size ``cfg.dt_coarse`` on the whole mesh."""
    if order not in (2, 3):
        raise ValueError(f"SSPRK order must be 2 or 3, got {order}")
    ev = evaluator or SerialEvaluator(mesh, b, f, cfg.g)
    cells, edges = _full_sets(mesh)
    dt = cfg.dt_coarse
    h0, u0, t0 = state.h, state.u, state.time
    w_old, w_1st, w_rhs = SSPRK_WEIGHTS[order]

    dh, du = ev(h0, u0, cells, edges, "stage1", t0)
    h1 = h0 + dt * dh
    u1 = u0 + dt * du
    dh, du = ev(h1, u1, cells, edges, "stage2", t0 + dt)
    h2 = w_old * h0 + w_1st * h1 + w_rhs * dt * dh
    u2 = w_old * u0 + w_1st * u1 + w_rhs * dt * du
    if order == 2:
        return State(h2, u2, t0 + dt)
    dh, du = ev(h2, u2, cells, edges, "stage3", t0 + 0.5 * dt)
    h3 = h0 / 3.0 + 2.0 / 3.0 * h2 + 2.0 / 3.0 * dt * dh
    u3 = u0 / 3.0 + 2.0 / 3.0 * u2 + 2.0 / 3.0 * dt * du
    return State(h3, u3, t0 + dt)


def rk4_step(mesh, state: State, cfg: SchemeConfig, b, f, evaluator=None) -> State:
    """Classical four-stage Runge-Kutta step on the whole mesh."""
    ev = evaluator or SerialEvaluator(mesh, b, f, cfg.g)
    cells, edges = _full_sets(mesh)
    dt = cfg.dt_coarse
    h0, u0, t0 = state.h, state.u, state.time
    k1h, k1u = ev(h0, u0, cells, edges, "stage1", t0)
    k2h, k2u = ev(h0 + 0.5 * dt * k1h, u0 + 0.5 * dt * k1u, cells, edges, "stage2", t0 + 0.5 * dt)
    k3h, k3u = ev(h0 + 0.5 * dt * k2h, u0 + 0.5 * dt * k2u, cells, edges, "stage3", t0 + 0.5 * dt)
    k4h, k4u = ev(h0 + dt * k3h, u0 + dt * k3u, cells, edges, "stage4", t0 + dt)
    h = h0 + dt / 6.0 * (k1h + 2.0 * k2h + 2.0 * k3h + k4h)
    u = u0 + dt / 6.0 * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
    return State(h, u, t0 + dt)


# ---------------------------------------------------------------------------
# local time stepping

def lts_interp_coeffs(order, stage, k, M):
    """Coefficients (c_old, c_1st, c_2nd) predicting interface-1 values in substep ``k``.

    The prediction is ``c_old * x_old + c_1st * x_1st + c_2nd * x_2nd`` with
    ``(1 - x - xt, x - xt, 2 xt)`` for the stage's interpolation point x and
    quadratic correction xt (zero for the second-order scheme).
    """
    if order not in (2, 3):
        raise ValueError(f"LTS order must be 2 or 3, got {order}")
    if stage not in (1, 2, 3) or (stage == 3 and order == 2):
        raise ValueError(f"stage {stage} does not exist for LTS{order}")
    if not (isinstance(M, (int, np.integer)) and M >= 1):
        raise ValueError(f"M must be a positive integer, got {M}")
    if not 0 <= k < M:
        raise ValueError(f"substep index {k} outside [0, {M})")
    m2 = M * M
    if stage == 1:
        x, xt = k / M, (k * k / m2 if order == 3 else 0.0)
    elif stage == 2:
        x, xt = (k + 1) / M, (k * (k + 2) / m2 if order == 3 else 0.0)
    else:
        x, xt = (2 * k + 1) / (2 * M), (2 * k * k + 2 * k + 1) / (2 * m2)
    return (1.0 - x - xt, x - xt, 2.0 * xt)


@dataclass(frozen=True)
class LtsSets:
    """Cell and edge index sets used by the LTS steps (sorted)."""

    fine: np.ndarray
    underline: np.ndarray
    if1: np.ndarray
    if2: np.ndarray
    coarse: np.ndarray
    fine_e: np.ndarray       # fine and underline-fine edges: advanced with dt/M
    underline_e: np.ndarray
    if1_e: np.ndarray
    if2_e: np.ndarray
    coarse_e: np.ndarray

    @property
    def interface(self):
        return np.union1d(self.if1, self.if2)

    @property
    def interface_e(self):
        return np.union1d(self.if1_e, self.if2_e)


def lts_sets(rmap: RegionMap) -> LtsSets:
    if rmap.edge_label is None:
        raise RegionConfigError("region map has no edge labels")
    lab = rmap.cell_label
    under = rmap.underline_fine
    return LtsSets(
        fine=np.nonzero(lab == CellRegion.FINE)[0],
        underline=under,
        if1=np.nonzero(lab == CellRegion.INTERFACE1)[0],
        if2=np.nonzero(lab == CellRegion.INTERFACE2)[0],
        coarse=np.nonzero(lab == CellRegion.COARSE)[0],
        fine_e=rmap.edges(EdgeRegion.FINE, EdgeRegion.UNDERLINE_FINE),
        underline_e=rmap.edges(EdgeRegion.UNDERLINE_FINE),
        if1_e=rmap.edges(EdgeRegion.INTERFACE1),
        if2_e=rmap.edges(EdgeRegion.INTERFACE2),
        coarse_e=rmap.edges(EdgeRegion.COARSE),
    )


@dataclass(frozen=True)
class LtsPlan:
    """Evaluation sets of every LTS step for one scheme order."""

    order: int
    sets: LtsSets
    step1: tuple
    step2: tuple
    substep: tuple
    step4: tuple

    @classmethod
    def build(cls, order, rmap: RegionMap):
        s = lts_sets(rmap)
        u = np.union1d
        ic, ie = s.interface, s.interface_e
        if order == 3:
            if rmap.cell_sublabel is None:
                raise RegionConfigError("LTS3 needs the underline-fine sublabels (label_underline_fine)")
            step1 = (u(u(s.underline, ic), s.coarse), u(u(s.underline_e, ie), s.coarse_e))
            step2 = (u(ic, s.coarse), u(ie, s.coarse_e))
        else:
            step1 = (u(ic, s.coarse), u(ie, s.coarse_e))
            step2 = (s.coarse, s.coarse_e)
        substep = (u(s.fine, ic), u(s.fine_e, ie))
        return cls(order, s, step1, step2, substep, (s.coarse, s.coarse_e))


def _plan_for(order, rmap):
    cache = rmap.__dict__.setdefault("_lts_plans", {})
    key = (order, rmap.cell_label.tobytes(), rmap.edge_label.tobytes(),
           None if rmap.cell_sublabel is None else rmap.cell_sublabel.tobytes())
    if key not in cache:
        cache[key] = LtsPlan.build(order, rmap)
    return cache[key]


@dataclass
class LtsWorkspace:
    """Stage values and interface-correction accumulators of one coarse step."""

    h_1st: np.ndarray
    u_1st: np.ndarray
    h_2nd: np.ndarray
    u_2nd: np.ndarray
    H_acc: list            # three cell arrays, valid on I1 u I2
    U_acc: list            # three edge arrays, valid on I1^e u I2^e
    n_acc: list = field(default_factory=lambda: [0, 0, 0])

    @classmethod
    def start(cls, state: State):
        return cls(state.h.copy(), state.u.copy(), state.h.copy(), state.u.copy(),
                   [np.zeros_like(state.h) for _ in range(3)],
                   [np.zeros_like(state.u) for _ in range(3)])

    def accumulate(self, stage, cells, edges, dh, du):
        self.H_acc[stage][cells] += dh[cells]
        self.U_acc[stage][edges] += du[edges]
        self.n_acc[stage] += 1


def interface_correction(ws: LtsWorkspace, order, dt_coarse, M, h_old, u_old, h_new, u_new,
                         cells, edges):
    """Overwrite interface values by old + dt/M * sum_s theta_s * accumulated tendency_s."""
    theta = THETA[order]
    n_stages = 2 if order == 2 else 3
    for s in range(n_stages):
        if ws.n_acc[s] != M:
            raise InvariantError(f"accumulator {s + 1} holds {ws.n_acc[s]} evaluations, expected {M}")
    dtm = dt_coarse / M
    hc = theta[0] * ws.H_acc[0][cells] + theta[1] * ws.H_acc[1][cells]
    uc = theta[0] * ws.U_acc[0][edges] + theta[1] * ws.U_acc[1][edges]
    if order == 3:
        hc = hc + theta[2] * ws.H_acc[2][cells]
        uc = uc + theta[2] * ws.U_acc[2][edges]
    h_new[cells] = h_old[cells] + dtm * hc
    u_new[edges] = u_old[edges] + dtm * uc


def _predict(coeffs, old, first, second, idx):
    c0, c1, c2 = coeffs
    out = c0 * old[idx] + c1 * first[idx]
    if c2 != 0.0:
        out = out + c2 * second[idx]
    return out


def lts_step(order, mesh, rmap: RegionMap, state: State, cfg: SchemeConfig, b, f,
             evaluator=None, plan=None) -> State:
    """One coarse step of LTS2 or LTS3.

    Coarse and interface regions use ``cfg.dt_coarse``; fine cells and edges
    (underline-fine included) take ``cfg.M`` substeps of ``dt_coarse / M``.
    Within substep ``k`` the fine stages are ordinary SSPRK stages on the
    substep-local values; interface-1 values are predicted from the coarse
    stage values, and the interface tendencies are summed for the final
    correction.  ``plan`` (a PartitionPlan) selects the partitioned evaluator
    when no evaluator is given.
    """
    if order not in (2, 3):
        raise ValueError(f"LTS order must be 2 or 3, got {order}")
    if evaluator is None:
        if plan is not None:
            from .partition import PartitionedEvaluator
            evaluator = PartitionedEvaluator(mesh, plan, b, f, cfg.g)
        else:
            evaluator = SerialEvaluator(mesh, b, f, cfg.g)
    ev = evaluator
    P = _plan_for(order, rmap)
    S = P.sets
    M = cfg.M
    dt = cfg.dt_coarse
    dtm = dt / M
    t0 = state.time
    h_old, u_old = state.h, state.u
    w_old, w_1st, w_rhs = SSPRK_WEIGHTS[order]
    ws = LtsWorkspace.start(state)

    # Step 1: first stage on coarse + interfaces (+ underline-fine for LTS3)
    c1, e1 = P.step1
    dh, du = ev(h_old, u_old, c1, e1, "step1", t0)
    ws.h_1st[c1] = h_old[c1] + dt * dh[c1]
    ws.u_1st[e1] = u_old[e1] + dt * du[e1]

    # Step 2: second stage on coarse (+ interfaces for LTS3)
    c2, e2 = P.step2
    dh, du = ev(ws.h_1st, ws.u_1st, c2, e2, "step2", t0 + dt)
    ws.h_2nd[c2] = w_old * h_old[c2] + w_1st * ws.h_1st[c2] + w_rhs * dt * dh[c2]
    ws.u_2nd[e2] = w_old * u_old[e2] + w_1st * ws.u_1st[e2] + w_rhs * dt * du[e2]

    # Step 3: fine substeps.  a*/v* hold the substep stage states: fine values
    # are substep-local, interface-1 values predicted, the rest from steps 1-2.
    F, Fe = S.fine, S.fine_e
    I1, I1e = S.if1, S.if1_e
    Ic, Ie = S.interface, S.interface_e
    cs, es = P.substep
    a0, v0 = h_old.copy(), u_old.copy()
    a1, v1 = ws.h_1st.copy(), ws.u_1st.copy()
    a2, v2 = ws.h_2nd.copy(), ws.u_2nd.copy()
    for k in range(M):
        tk = t0 + k * dtm
        co = lts_interp_coeffs(order, 1, k, M)
        a0[I1] = _predict(co, h_old, ws.h_1st, ws.h_2nd, I1)
        v0[I1e] = _predict(co, u_old, ws.u_1st, ws.u_2nd, I1e)
        dh, du = ev(a0, v0, cs, es, "substep1", tk)
        ws.accumulate(0, Ic, Ie, dh, du)
        a1[F] = a0[F] + dtm * dh[F]
        v1[Fe] = v0[Fe] + dtm * du[Fe]

        co = lts_interp_coeffs(order, 2, k, M)
        a1[I1] = _predict(co, h_old, ws.h_1st, ws.h_2nd, I1)
        v1[I1e] = _predict(co, u_old, ws.u_1st, ws.u_2nd, I1e)
        dh, du = ev(a1, v1, cs, es, "substep2", tk + dtm)
        ws.accumulate(1, Ic, Ie, dh, du)
        if order == 2:
            a0[F] = w_old * a0[F] + w_1st * a1[F] + w_rhs * dtm * dh[F]
            v0[Fe] = w_old * v0[Fe] + w_1st * v1[Fe] + w_rhs * dtm * du[Fe]
            continue
        a2[F] = w_old * a0[F] + w_1st * a1[F] + w_rhs * dtm * dh[F]
        v2[Fe] = w_old * v0[Fe] + w_1st * v1[Fe] + w_rhs * dtm * du[Fe]

        co = lts_interp_coeffs(order, 3, k, M)
        a2[I1] = _predict(co, h_old, ws.h_1st, ws.h_2nd, I1)
        v2[I1e] = _predict(co, u_old, ws.u_1st, ws.u_2nd, I1e)
        dh, du = ev(a2, v2, cs, es, "substep3", tk + 0.5 * dtm)
        ws.accumulate(2, Ic, Ie, dh, du)
        a0[F] = a0[F] / 3.0 + 2.0 / 3.0 * a2[F] + 2.0 / 3.0 * dtm * dh[F]
        v0[Fe] = v0[Fe] / 3.0 + 2.0 / 3.0 * v2[Fe] + 2.0 / 3.0 * dtm * du[Fe]

    h_new = np.full_like(h_old, np.nan)
    u_new = np.full_like(u_old, np.nan)
    h_new[F] = a0[F]
    u_new[Fe] = v0[Fe]

    # Step 4: coarse region
    C, Ce = S.coarse, S.coarse_e
    if order == 2:
        h_new[C] = ws.h_2nd[C]
        u_new[Ce] = ws.u_2nd[Ce]
    else:
        dh, du = ev(ws.h_2nd, ws.u_2nd, C, Ce, "step4", t0 + 0.5 * dt)
        h_new[C] = h_old[C] / 3.0 + 2.0 / 3.0 * ws.h_2nd[C] + 2.0 / 3.0 * dt * dh[C]
        u_new[Ce] = u_old[Ce] / 3.0 + 2.0 / 3.0 * ws.u_2nd[Ce] + 2.0 / 3.0 * dt * du[Ce]

    # Step 5: interface correction
    interface_correction(ws, order, dt, M, h_old, u_old, h_new, u_new, Ic, Ie)

    if not (np.all(np.isfinite(h_new)) and np.all(np.isfinite(u_new))):
        bad_c = np.nonzero(~np.isfinite(h_new))[0]
        bad_e = np.nonzero(~np.isfinite(u_new))[0]
        raise InvariantError(f"LTS step left {bad_c.size} cells and {bad_e.size} edges without a value "
                             "(region map does not cover the mesh?)")
    return State(h_new, u_new, t0 + dt)


# ---------------------------------------------------------------------------
# driver helpers

def step(mesh, state, cfg: SchemeConfig, b, f, rmap=None, evaluator=None) -> State:
    """Advance by one (coarse) step with the configured scheme."""
    if cfg.scheme in ("ssprk2", "ssprk3"):
        return ssprk_step(cfg.order, mesh, state, cfg, b, f, evaluator)
    if cfg.scheme == "rk4":
        return rk4_step(mesh, state, cfg, b, f, evaluator)
    if rmap is None:
        raise RegionConfigError(f"{cfg.scheme} needs a region map")
    return lts_step(cfg.order, mesh, rmap, state, cfg, b, f, evaluator)


def courant_numbers(mesh, u, cfg: SchemeConfig, rmap=None):
    """Advisory Courant numbers max |u_e| dt / d_e on the fine and the coarse-step edges.

    Fine edges use dt/M under LTS.  Without a region map both numbers refer
    to the whole mesh.
    """
    c = np.abs(u) / mesh.dc_edge
    if rmap is None or rmap.edge_label is None:
        v = float(c.max() * cfg.dt_coarse)
        return v, v
    fine = np.isin(rmap.edge_label, [EdgeRegion.FINE, EdgeRegion.UNDERLINE_FINE])
    cf = float(c[fine].max() * cfg.dt_fine) if fine.any() else 0.0
    cc = float(c[~fine].max() * cfg.dt_coarse) if (~fine).any() else 0.0
    return cf, cc


def with_scheme(cfg: SchemeConfig, **kw) -> SchemeConfig:
    return replace(cfg, **kw)
