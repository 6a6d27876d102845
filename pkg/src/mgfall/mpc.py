"""Horizon problem assembly for the two EMS variants, plus the
communication-failure machinery: default-schedule shifting, frequency-share
estimation, and storage-energy estimation for units that are out of contact.

The optimizer works on a stacked decision vector; per-step blocks are

    u_t, u_s, u_r   set-points of units in contact
    delta           thermal switches in contact (binary)
    s_switch        slack for |delta - delta_prev|
    p_dis, p_chg    nonnegative storage discharge/charge split (all storages)
    rho             one frequency share per prediction step
    z_droop         delta*rho product per thermal in contact (big-M linked)

followed by storage energies ``x`` (steps 1..h+1) and soft-band slacks
``e_soft`` (steps 1..h).  Units without communication enter through their
default schedule as constants; their power still carries the droop term, so
it stays affine in rho.  The standard variant pins rho (and hence z) to zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import model as mg
from .bnb import BnbConfig, BnbSolution, BnbStatus, MixedBinaryQp, solve_miqp
from .qp import QpSettings, QpSolver, QuadraticProgram

# small regularization pinning otherwise cost-free directions (rho, the
# droop products, the storage split and switch slacks) to a unique optimum
_RIDGE_RHO = 1e-8
_RIDGE_SPLIT = 1e-9


class MpcVariant(Enum):
    STANDARD = "standard"   # certainty equivalence, rho fixed to zero
    ENHANCED = "enhanced"   # rho free: exploits local droop during CF


class InfeasibleByConstruction(ValueError):
    """The assembled problem cannot be feasible (bad defaults or state)."""


@dataclass
class MpcConfig:
    horizon: int
    discount: float = 1.0
    variant: MpcVariant = MpcVariant.STANDARD
    rho_min: float | None = None   # enhanced only; None = derive from model
    rho_max: float | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not (0.0 < self.discount <= 1.0):
            raise ValueError("discount must lie in (0, 1]")
        if self.rho_min is not None and self.rho_min > 0:
            raise ValueError("rho_min must be <= 0")
        if self.rho_max is not None and self.rho_max < 0:
            raise ValueError("rho_max must be >= 0")


def default_rho_bounds(model: mg.MicrogridModel, load_capacity: float) -> tuple[float, float]:
    """Symmetric rho range wide enough to retarget any storage via droop."""
    chi_min = min(model.storage_vec("droop_gain").min(), 1.0)
    span = (abs(load_capacity) + float(np.sum(model.thermal_vec("p_max")))
            + float(np.sum(model.storage_vec("p_max")))) / chi_min
    return -span, span


@dataclass
class ForecastBundle:
    """Point forecasts over steps k..k+h (columns)."""
    w_r: np.ndarray   # (|R|, h+1), >= 0
    w_l: np.ndarray   # (|L|, h+1), <= 0

    def __post_init__(self):
        self.w_r = np.atleast_2d(np.asarray(self.w_r, dtype=float))
        self.w_l = np.atleast_2d(np.asarray(self.w_l, dtype=float))
        if np.any(self.w_r < 0):
            raise ValueError("renewable forecast must be nonnegative")
        if np.any(self.w_l > 0):
            raise ValueError("load forecast must be nonpositive")

    @property
    def steps(self) -> int:
        return self.w_r.shape[1]


@dataclass
class DefaultSchedule:
    """Per-unit powers and switch states held autonomously during CF."""
    d_t: np.ndarray       # (|T|, h+1)
    d_s: np.ndarray       # (|S|, h+1)
    d_r: np.ndarray       # (|R|, h+1)
    delta_d: np.ndarray   # (|T|, h+1), binary
    terminal_hold: bool = False

    @classmethod
    def zeros(cls, model: mg.MicrogridModel, h: int) -> "DefaultSchedule":
        return cls(np.zeros((model.n_thermal, h + 1)),
                   np.zeros((model.n_storage, h + 1)),
                   np.zeros((model.n_renewable, h + 1)),
                   np.zeros((model.n_thermal, h + 1)))


@dataclass
class SolverStats:
    status: BnbStatus
    nodes: int
    gap: float
    objective_bound: float


@dataclass
class MpcSolution:
    u_t: np.ndarray       # (|T|, h+1); CF columns hold the default schedule
    u_s: np.ndarray
    u_r: np.ndarray
    delta: np.ndarray     # (|T|, h+1)
    rho: np.ndarray       # (h+1,); identically zero for the standard variant
    p_t: np.ndarray
    p_s: np.ndarray
    p_r: np.ndarray
    x: np.ndarray         # (|S|, h+2) including the initial energy
    objective: float
    stats: SolverStats
    inconsistency: float = 0.0
    warnings: list[str] = field(default_factory=list)


@dataclass
class VariableMap:
    """Index layout of the stacked decision vector plus build context."""
    n: int
    slices: dict[tuple[str, int], slice]
    comm_thermal: list[int]
    comm_storage: list[int]
    comm_renewable: list[int]
    binary_indices: list[int]
    offset: float                  # objective constant not in the QP
    context: dict = field(default_factory=dict)

    def get(self, block: str, step: int) -> slice:
        return self.slices[(block, step)]

    def has(self, block: str, step: int) -> bool:
        return (block, step) in self.slices


# ---------------------------------------------------------------------------
# fallback schedule and estimators
# ---------------------------------------------------------------------------

def fallback_schedule(prev: MpcSolution, c: int, h: int) -> DefaultSchedule:
    """Shift the last received plan by ``c`` steps, holding the final entry.

    ``prev`` was solved ``c`` steps ago with horizon ``h``; the defaults for
    the coming steps are the tail of that plan, terminally extended.
    """
    if c < 0:
        raise ValueError("steps since last contact must be nonnegative")
    src = np.minimum(np.arange(h + 1) + c, h)
    d_t = prev.u_t[:, src].copy()
    delta_d = np.round(prev.delta[:, src].copy())
    d_t[delta_d == 0] = 0.0
    return DefaultSchedule(
        d_t=d_t,
        d_s=prev.u_s[:, src].copy(),
        d_r=prev.u_r[:, src].copy(),
        delta_d=delta_d,
        terminal_hold=c > h,
    )


def estimate_rho(w_r_hat: np.ndarray, w_l_hat: np.ndarray,
                 actual: mg.UncertaintySample,
                 cmds: mg.SetpointCommand,
                 d_r: np.ndarray, delta_d: np.ndarray,
                 zeta: mg.CommStatus,
                 model: mg.MicrogridModel) -> float:
    """Frequency share that rebalanced the realized uncertainty.

    Computed from the mismatch between the forecasts the last plan was built
    on and the realization, divided by the total active droop gain.
    """
    com_r = mg.com_apply(cmds.u_r, d_r, zeta.zeta_r)
    dw_r = np.minimum(com_r, w_r_hat) - np.minimum(com_r, actual.w_r)
    dw_l = np.asarray(w_l_hat, dtype=float) - actual.w_l
    eff_delta = mg.com_apply(cmds.delta_t, delta_d, zeta.zeta_t)
    chi = float(eff_delta @ model.thermal_vec("droop_gain")
                + np.sum(model.storage_vec("droop_gain")))
    assert chi > 0.0, "no active droop gain; storage droop must be positive"
    return float((np.sum(dw_l) + np.sum(dw_r)) / chi)


def estimate_storage_energy(x_prev: np.ndarray, d_s: np.ndarray,
                            chi_s: np.ndarray, rho: float,
                            eta_s: np.ndarray, t_s: float) -> np.ndarray:
    """Predicted energy after one step on defaults plus the droop share."""
    p_hat = np.asarray(d_s, dtype=float) + np.asarray(chi_s, dtype=float) * rho
    return mg.storage_step(x_prev, p_hat, eta_s, t_s)


# ---------------------------------------------------------------------------
# problem assembly
# ---------------------------------------------------------------------------

class _Assembler:
    """Accumulates rows/cost over affine expressions (row vector, constant)."""

    def __init__(self, n: int):
        self.n = n
        self.P = np.zeros((n, n))
        self.q = np.zeros(n)
        self.const = 0.0
        self.eq_rows: list[np.ndarray] = []
        self.eq_rhs: list[float] = []
        self.in_rows: list[np.ndarray] = []
        self.in_lo: list[float] = []
        self.in_hi: list[float] = []
        self.lb = np.full(n, -np.inf)
        self.ub = np.full(n, np.inf)

    def var(self, idx: int) -> tuple[np.ndarray, float]:
        r = np.zeros(self.n)
        r[idx] = 1.0
        return r, 0.0

    @staticmethod
    def const_expr(c: float) -> tuple[np.ndarray, float]:
        return None, float(c)   # row filled lazily by add-ops

    def _row(self, expr):
        r, c = expr
        if r is None:
            r = np.zeros(self.n)
        return r, c

    def add_eq(self, expr, rhs: float):
        r, c = self._row(expr)
        self.eq_rows.append(r)
        self.eq_rhs.append(rhs - c)

    def add_range(self, expr, lo: float, hi: float):
        r, c = self._row(expr)
        self.in_rows.append(r)
        self.in_lo.append(lo - c)
        self.in_hi.append(hi - c)

    def add_quad_cost(self, expr, w: float):
        r, c = self._row(expr)
        if w == 0.0:
            return
        nz = np.flatnonzero(r)
        if nz.size:
            self.P[np.ix_(nz, nz)] += 2.0 * w * np.outer(r[nz], r[nz])
            if c != 0.0:
                self.q[nz] += 2.0 * w * c * r[nz]
        self.const += w * c * c

    def add_lin_cost(self, expr, a: float):
        r, c = self._row(expr)
        self.q += a * r
        self.const += a * c

    def build_qp(self) -> QuadraticProgram:
        A_eq = np.vstack(self.eq_rows) if self.eq_rows else None
        A_in = np.vstack(self.in_rows) if self.in_rows else None
        return QuadraticProgram(
            P=self.P, q=self.q,
            A_eq=A_eq, b_eq=np.array(self.eq_rhs) if self.eq_rows else None,
            A_in=A_in,
            l_in=np.array(self.in_lo) if self.in_rows else None,
            u_in=np.array(self.in_hi) if self.in_rows else None,
            lb=self.lb, ub=self.ub)


def _expr_add(a, b):
    ra, ca = a
    rb, cb = b
    if ra is None:
        return rb, ca + cb
    if rb is None:
        return ra, ca + cb
    return ra + rb, ca + cb


def _expr_scale(a, s: float):
    r, c = a
    return (None if r is None else s * r), s * c


def build_problem(model: mg.MicrogridModel, cfg: MpcConfig,
                  x0: np.ndarray, delta_prev: np.ndarray,
                  forecasts: ForecastBundle, zeta: mg.CommStatus,
                  defaults: DefaultSchedule | None = None,
                  enforce_split: list[tuple[int, int]] | None = None,
                  ) -> tuple[MixedBinaryQp, VariableMap]:
    """Assemble one horizon problem as a mixed-binary QP.

    Communication is resolved at build time: units out of contact appear
    through their default schedule as constants (plus the droop term).
    ``enforce_split`` lists (storage, step) pairs whose charge/discharge
    split gets an explicit direction binary; used as a fallback when the
    convex split produces a simultaneous charge and discharge.
    """
    h = cfg.horizon
    nT, nS, nR = model.n_thermal, model.n_storage, model.n_renewable
    x0 = np.asarray(x0, dtype=float)
    delta_prev = np.asarray(delta_prev, dtype=float)
    if forecasts.steps < h + 1:
        raise ValueError("forecast bundle shorter than the horizon")
    x_lo, x_hi = model.storage_vec("x_min"), model.storage_vec("x_max")
    if np.any(x0 < x_lo - 1e-6) or np.any(x0 > x_hi + 1e-6):
        raise InfeasibleByConstruction("initial storage energy outside capacity")

    Tc = [i for i in range(nT) if zeta.zeta_t[i] == 1]
    Sc = [i for i in range(nS) if zeta.zeta_s[i] == 1]
    Rc = [i for i in range(nR) if zeta.zeta_r[i] == 1]
    any_cf = len(Tc) < nT or len(Sc) < nS or len(Rc) < nR
    if any_cf and defaults is None:
        raise InfeasibleByConstruction("defaults required for units without communication")
    if defaults is None:
        defaults = DefaultSchedule.zeros(model, h)
    _validate_defaults(model, defaults, zeta, h)

    if cfg.variant is MpcVariant.ENHANCED:
        if cfg.rho_min is None or cfg.rho_max is None:
            load_cap = float(np.abs(forecasts.w_l).sum(axis=0).max())
            rho_lo, rho_hi = default_rho_bounds(model, load_cap)
            if cfg.rho_min is not None:
                rho_lo = cfg.rho_min
            if cfg.rho_max is not None:
                rho_hi = cfg.rho_max
        else:
            rho_lo, rho_hi = cfg.rho_min, cfg.rho_max
    else:
        rho_lo = rho_hi = 0.0

    enforce_split = enforce_split or []

    # ---- index layout ----
    slices: dict[tuple[str, int], slice] = {}
    pos = 0

    def alloc(name: str, step: int, size: int) -> slice:
        nonlocal pos
        sl = slice(pos, pos + size)
        slices[(name, step)] = sl
        pos += size
        return sl

    for j in range(h + 1):
        alloc("u_t", j, len(Tc))
        alloc("u_s", j, len(Sc))
        alloc("u_r", j, len(Rc))
        alloc("delta", j, len(Tc))
        alloc("s_switch", j, len(Tc))
        alloc("p_dis", j, nS)
        alloc("p_chg", j, nS)
        alloc("rho", j, 1)
        alloc("z_droop", j, len(Tc))
    for j in range(1, h + 2):
        alloc("x", j, nS)
    for j in range(1, h + 1):
        alloc("e_soft", j, nS)
    split_bins: dict[tuple[int, int], int] = {}
    for (i, j) in enforce_split:
        split_bins[(i, j)] = pos
        alloc("split_dir", j * 10_000 + i, 1)
        # unique pseudo-step key keeps the (block, step) map one-to-one

    n = pos
    asm = _Assembler(n)
    gamma = cfg.discount

    chi_t = model.thermal_vec("droop_gain")
    chi_s = model.storage_vec("droop_gain")
    eta = model.storage_vec("efficiency")
    t_s = model.sampling_hours
    a_sw = model.thermal_vec("cost_switch")
    a_on = model.thermal_vec("cost_on")
    a_lin = model.thermal_vec("cost_linear")
    a_quad = model.thermal_vec("cost_quadratic")
    a_s = model.storage_vec("cost_power")
    a_s1 = model.storage_vec("cost_threshold")
    a_r = model.renewable_vec("cost_incentive")
    tp_lo, tp_hi = model.thermal_vec("p_min"), model.thermal_vec("p_max")
    sp_lo, sp_hi = model.storage_vec("p_min"), model.storage_vec("p_max")
    rp_lo, rp_hi = model.renewable_vec("p_min"), model.renewable_vec("p_max")
    soft_lo, soft_hi = model.storage_vec("x_soft_min"), model.storage_vec("x_soft_max")

    binary_indices: list[int] = []
    offset = 0.0

    # initial-step threshold cost is a constant of the current state
    dx0 = np.maximum(soft_lo - x0, 0.0) + np.maximum(x0 - soft_hi, 0.0)
    offset += float(dx0 @ (a_s1 * dx0))

    cf_delta_prev = delta_prev.copy()   # tracks CF-thermal switch chain

    for j in range(h + 1):
        g = gamma ** j
        sl_ut = slices[("u_t", j)]
        sl_us = slices[("u_s", j)]
        sl_ur = slices[("u_r", j)]
        sl_d = slices[("delta", j)]
        sl_s = slices[("s_switch", j)]
        sl_pd = slices[("p_dis", j)]
        sl_pc = slices[("p_chg", j)]
        rho_i = slices[("rho", j)].start
        sl_z = slices[("z_droop", j)]

        asm.lb[rho_i], asm.ub[rho_i] = rho_lo, rho_hi
        asm.add_quad_cost(asm.var(rho_i), _RIDGE_RHO)

        # thermal powers -------------------------------------------------
        p_t_expr = []
        for pos_c, i in enumerate(Tc):
            ui = sl_ut.start + pos_c
            di = sl_d.start + pos_c
            si = sl_s.start + pos_c
            zi = sl_z.start + pos_c
            asm.lb[di], asm.ub[di] = 0.0, 1.0
            binary_indices.append(di)
            asm.lb[si] = 0.0
            expr = _expr_add(asm.var(ui), _expr_scale(asm.var(zi), chi_t[i]))
            p_t_expr.append(expr)
            # switch-gated power window
            asm.add_range(_expr_add(expr, _expr_scale(asm.var(di), -tp_lo[i])), 0.0, np.inf)
            asm.add_range(_expr_add(expr, _expr_scale(asm.var(di), -tp_hi[i])), -np.inf, 0.0)
            # big-M envelope for z = delta * rho
            asm.add_range(_expr_add(asm.var(zi), _expr_scale(asm.var(di), -rho_lo)), 0.0, np.inf)
            asm.add_range(_expr_add(asm.var(zi), _expr_scale(asm.var(di), -rho_hi)), -np.inf, 0.0)
            asm.add_range(
                _expr_add(_expr_add(asm.var(zi), _expr_scale(asm.var(rho_i), -1.0)),
                          _expr_scale(asm.var(di), -rho_lo)),
                -np.inf, -rho_lo)
            asm.add_range(
                _expr_add(_expr_add(asm.var(zi), _expr_scale(asm.var(rho_i), -1.0)),
                          _expr_scale(asm.var(di), -rho_hi)),
                -rho_hi, np.inf)
            asm.add_quad_cost(asm.var(zi), _RIDGE_RHO)
            # switching slack vs previous step
            prev_expr = (asm.var(slices[("delta", j - 1)].start + pos_c)
                         if j > 0 else (None, float(delta_prev[i])))
            diff = _expr_add(asm.var(di), _expr_scale(prev_expr, -1.0))
            asm.add_range(_expr_add(asm.var(si), _expr_scale(diff, -1.0)), 0.0, np.inf)
            asm.add_range(_expr_add(asm.var(si), diff), 0.0, np.inf)
            asm.add_quad_cost(asm.var(si), _RIDGE_SPLIT)
            # thermal stage cost
            asm.add_lin_cost(asm.var(si), g * a_sw[i])
            asm.add_lin_cost(asm.var(di), g * a_on[i])
            asm.add_lin_cost(expr, g * a_lin[i])
            asm.add_quad_cost(expr, g * a_quad[i])
        for i in range(nT):
            if i in Tc:
                continue
            dd = float(defaults.delta_d[i, j])
            dt = float(defaults.d_t[i, j])
            expr = _expr_add((None, dt), _expr_scale(asm.var(rho_i), dd * chi_t[i]))
            p_t_expr.append(expr)
            if dd > 0:
                asm.add_range(expr, dd * tp_lo[i], dd * tp_hi[i])
            elif abs(dt) > 1e-9:
                raise InfeasibleByConstruction(
                    f"default thermal power nonzero while default switch is off (unit {i}, step {j})")
            # switching/on cost of the frozen schedule is a constant
            offset += g * (a_sw[i] * abs(dd - cf_delta_prev[i]) + a_on[i] * dd)
            asm.add_lin_cost(expr, g * a_lin[i])
            asm.add_quad_cost(expr, g * a_quad[i])
        # CF switch chain advances with the default schedule
        for i in range(nT):
            if i not in Tc:
                cf_delta_prev[i] = float(defaults.delta_d[i, j])

        # storage powers -------------------------------------------------
        p_s_expr = []
        for i in range(nS):
            pd = sl_pd.start + i
            pc = sl_pc.start + i
            asm.lb[pd], asm.ub[pd] = max(sp_lo[i], 0.0), max(sp_hi[i], 0.0)
            asm.lb[pc], asm.ub[pc] = max(-sp_hi[i], 0.0), max(-sp_lo[i], 0.0)
            net = _expr_add(asm.var(pd), _expr_scale(asm.var(pc), -1.0))
            p_s_expr.append(net)
            if i in Sc:
                ui = sl_us.start + Sc.index(i)
                src = _expr_add(asm.var(ui), _expr_scale(asm.var(rho_i), chi_s[i]))
            else:
                src = _expr_add((None, float(defaults.d_s[i, j])),
                                _expr_scale(asm.var(rho_i), chi_s[i]))
            asm.add_eq(_expr_add(net, _expr_scale(src, -1.0)), 0.0)
            asm.add_quad_cost(net, g * a_s[i])
            asm.add_quad_cost(asm.var(pd), _RIDGE_SPLIT)
            asm.add_quad_cost(asm.var(pc), _RIDGE_SPLIT)
            if (i, j) in split_bins:
                bi = split_bins[(i, j)]
                asm.lb[bi], asm.ub[bi] = 0.0, 1.0
                binary_indices.append(bi)
                big = max(abs(sp_lo[i]), abs(sp_hi[i]))
                asm.add_range(_expr_add(asm.var(pd), _expr_scale(asm.var(bi), -big)),
                              -np.inf, 0.0)
                asm.add_range(_expr_add(asm.var(pc), _expr_scale(asm.var(bi), big)),
                              -np.inf, big)

        # renewable powers -----------------------------------------------
        p_r_expr = []
        for i in range(nR):
            avail = float(forecasts.w_r[i, j])
            if i in Rc:
                ui = sl_ur.start + Rc.index(i)
                hi = min(rp_hi[i], avail)
                asm.lb[ui] = min(rp_lo[i], hi)
                asm.ub[ui] = hi
                p_r_expr.append(asm.var(ui))
                asm.add_lin_cost(asm.var(ui), -g * a_r[i])
            else:
                val = min(float(defaults.d_r[i, j]), avail)
                p_r_expr.append((None, val))
                offset += -g * a_r[i] * val
        # power balance ---------------------------------------------------
        total = (None, float(np.sum(forecasts.w_l[:, j])))
        for e in p_t_expr + p_s_expr + p_r_expr:
            total = _expr_add(total, e)
        asm.add_eq(total, 0.0)

        # line flows ------------------------------------------------------
        H = model.network.H
        for line in range(H.shape[0]):
            row = (None, 0.0)
            col = 0
            for e in p_t_expr:
                row = _expr_add(row, _expr_scale(e, H[line, col]))
                col += 1
            for e in p_s_expr:
                row = _expr_add(row, _expr_scale(e, H[line, col]))
                col += 1
            for e in p_r_expr:
                row = _expr_add(row, _expr_scale(e, H[line, col]))
                col += 1
            for li in range(model.n_loads):
                row = _expr_add(row, (None, H[line, col] * float(forecasts.w_l[li, j])))
                col += 1
            asm.add_range(row, model.network.p_el_min[line], model.network.p_el_max[line])

    # storage dynamics and energy band ------------------------------------
    for j in range(h + 1):
        sl_pd = slices[("p_dis", j)]
        sl_pc = slices[("p_chg", j)]
        sl_xn = slices[("x", j + 1)]
        for i in range(nS):
            xn = asm.var(sl_xn.start + i)
            x_cur = asm.var(slices[("x", j)].start + i) if j > 0 else (None, float(x0[i]))
            flow = _expr_add(_expr_scale(asm.var(sl_pd.start + i), -t_s / eta[i]),
                             _expr_scale(asm.var(sl_pc.start + i), t_s * eta[i]))
            asm.add_eq(_expr_add(xn, _expr_scale(_expr_add(x_cur, flow), -1.0)), 0.0)
    for j in range(1, h + 2):
        sl_x = slices[("x", j)]
        for i in range(nS):
            xi = sl_x.start + i
            if cfg.variant is MpcVariant.STANDARD and i not in Sc:
                # trajectory is not decision-dependent; leave unbounded and
                # report violations instead of going infeasible
                continue
            asm.lb[xi], asm.ub[xi] = x_lo[i], x_hi[i]
    for j in range(1, h + 1):
        g = gamma ** j
        sl_e = slices[("e_soft", j)]
        sl_x = slices[("x", j)]
        for i in range(nS):
            ei = sl_e.start + i
            xi = sl_x.start + i
            asm.lb[ei] = 0.0
            asm.add_range(_expr_add(asm.var(ei), asm.var(xi)), soft_lo[i], np.inf)
            asm.add_range(_expr_add(asm.var(ei), _expr_scale(asm.var(xi), -1.0)),
                          -soft_hi[i], np.inf)
            asm.add_quad_cost(asm.var(ei), g * a_s1[i])

    qp = asm.build_qp()
    vmap = VariableMap(
        n=n, slices=slices,
        comm_thermal=Tc, comm_storage=Sc, comm_renewable=Rc,
        binary_indices=sorted(binary_indices),
        offset=offset,
        context=dict(x0=x0.copy(), delta_prev=delta_prev.copy(),
                     forecasts=forecasts, zeta=zeta, defaults=defaults,
                     cfg=cfg, enforce_split=list(enforce_split)),
    )
    return MixedBinaryQp(qp, vmap.binary_indices), vmap


def _validate_defaults(model: mg.MicrogridModel, defaults: DefaultSchedule,
                       zeta: mg.CommStatus, h: int, tol: float = 1e-6) -> None:
    sp_lo, sp_hi = model.storage_vec("p_min"), model.storage_vec("p_max")
    for i in range(model.n_storage):
        if zeta.zeta_s[i] == 0:
            d = defaults.d_s[i, :h + 1]
            if np.any(d < sp_lo[i] - tol) or np.any(d > sp_hi[i] + tol):
                raise InfeasibleByConstruction(
                    f"default storage power outside limits for unit {i}")
    tp_lo, tp_hi = model.thermal_vec("p_min"), model.thermal_vec("p_max")
    for i in range(model.n_thermal):
        if zeta.zeta_t[i] == 0:
            d = defaults.d_t[i, :h + 1]
            dd = defaults.delta_d[i, :h + 1]
            bad = (dd > 0) & ((d < tp_lo[i] - tol) | (d > tp_hi[i] + tol))
            if np.any(bad):
                raise InfeasibleByConstruction(
                    f"default thermal power outside switched-on limits for unit {i}")
    rp_hi = model.renewable_vec("p_max")
    for i in range(model.n_renewable):
        if zeta.zeta_r[i] == 0:
            d = defaults.d_r[i, :h + 1]
            if np.any(d < -tol) or np.any(d > rp_hi[i] + tol):
                raise InfeasibleByConstruction(
                    f"default renewable set-point outside limits for unit {i}")


# ---------------------------------------------------------------------------
# solution extraction
# ---------------------------------------------------------------------------

def extract_solution(raw: np.ndarray, vmap: VariableMap,
                     model: mg.MicrogridModel, cfg: MpcConfig,
                     stats: SolverStats | None = None) -> MpcSolution:
    """Decode the stacked vector into trajectories and cross-check them
    against the unit model equations."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape[0] != vmap.n:
        raise ValueError(f"raw vector length {raw.shape[0]} != {vmap.n}")
    h = cfg.horizon
    ctx = vmap.context
    defaults: DefaultSchedule = ctx["defaults"]
    zeta: mg.CommStatus = ctx["zeta"]
    forecasts: ForecastBundle = ctx["forecasts"]
    x0 = ctx["x0"]
    nT, nS, nR = model.n_thermal, model.n_storage, model.n_renewable

    u_t = defaults.d_t.copy()
    u_s = defaults.d_s.copy()
    u_r = defaults.d_r.copy()
    delta = defaults.delta_d.copy()
    rho = np.zeros(h + 1)
    p_dis = np.zeros((nS, h + 1))
    p_chg = np.zeros((nS, h + 1))
    for j in range(h + 1):
        rho[j] = raw[vmap.get("rho", j).start]
        z = raw[vmap.get("z_droop", j)]
        for pos_c, i in enumerate(vmap.comm_thermal):
            delta[i, j] = float(np.round(raw[vmap.get("delta", j).start + pos_c]))
            u_t[i, j] = raw[vmap.get("u_t", j).start + pos_c]
        for pos_c, i in enumerate(vmap.comm_storage):
            u_s[i, j] = raw[vmap.get("u_s", j).start + pos_c]
        for pos_c, i in enumerate(vmap.comm_renewable):
            u_r[i, j] = raw[vmap.get("u_r", j).start + pos_c]
        p_dis[:, j] = raw[vmap.get("p_dis", j)]
        p_chg[:, j] = raw[vmap.get("p_chg", j)]

    warnings: list[str] = []
    simult = np.minimum(p_dis, p_chg)
    if np.any(simult > 1e-6):
        idx = np.argwhere(simult > 1e-6)
        warnings.append(
            "simultaneous charge/discharge at " +
            ", ".join(f"(storage {i}, step {j})" for i, j in idx))

    chi_t = model.thermal_vec("droop_gain")
    chi_s = model.storage_vec("droop_gain")
    eta = model.storage_vec("efficiency")

    p_t = np.zeros((nT, h + 1))
    p_s = np.zeros((nS, h + 1))
    p_r = np.zeros((nR, h + 1))
    inconsistency = 0.0
    for j in range(h + 1):
        p_t[:, j] = mg.thermal_power(u_t[:, j], defaults.d_t[:, j], delta[:, j],
                                     defaults.delta_d[:, j], zeta.zeta_t, chi_t, rho[j])
        p_s[:, j] = mg.storage_power(u_s[:, j], defaults.d_s[:, j], zeta.zeta_s,
                                     chi_s, rho[j])
        p_r[:, j] = mg.renewable_power(u_r[:, j], defaults.d_r[:, j], zeta.zeta_r,
                                       forecasts.w_r[:, j])
        # optimizer-internal values for the cross-check
        z = raw[vmap.get("z_droop", j)]
        for pos_c, i in enumerate(vmap.comm_thermal):
            internal = u_t[i, j] + chi_t[i] * z[pos_c]
            inconsistency = max(inconsistency, abs(internal - p_t[i, j]))
        net = p_dis[:, j] - p_chg[:, j]
        inconsistency = max(inconsistency, float(np.abs(net - p_s[:, j]).max(initial=0.0)))

    x = np.zeros((nS, h + 2))
    x[:, 0] = x0
    for j in range(h + 1):
        x[:, j + 1] = raw[vmap.get("x", j + 1)]
        recomputed = x[:, j] - (model.sampling_hours / eta) * p_dis[:, j] \
            + model.sampling_hours * eta * p_chg[:, j]
        inconsistency = max(inconsistency, float(np.abs(recomputed - x[:, j + 1]).max(initial=0.0)))
    if inconsistency > 1e-4:
        warnings.append(f"solver inconsistency {inconsistency:.3e} exceeds 1e-4")

    qp_obj = ctx.get("qp_objective", 0.0)
    return MpcSolution(
        u_t=u_t, u_s=u_s, u_r=u_r, delta=delta, rho=rho,
        p_t=p_t, p_s=p_s, p_r=p_r, x=x,
        objective=qp_obj + vmap.offset,
        stats=stats or SolverStats(BnbStatus.OPTIMAL, 0, 0.0, 0.0),
        inconsistency=inconsistency, warnings=warnings)


# ---------------------------------------------------------------------------
# top-level solve
# ---------------------------------------------------------------------------

class MpcSolveError(RuntimeError):
    def __init__(self, status: BnbStatus, msg: str = ""):
        super().__init__(f"MPC solve failed: {status.value}. {msg}".strip())
        self.status = status


class MpcEngine:
    """Receding-horizon solver with structure reuse across steps.

    As long as the communication pattern (and variant) is unchanged, the
    constraint matrices are identical between steps, so the same factorized
    solver serves every node of every step.
    """

    def __init__(self, model: mg.MicrogridModel, cfg: MpcConfig,
                 bnb: BnbConfig | None = None):
        self.model = model
        self.cfg = cfg
        self.bnb = bnb or BnbConfig(abs_gap=1e-8, node_polish=False,
                                    qp_settings=QpSettings(eps_prim=1e-7, eps_dual=1e-7,
                                                           max_iter=20_000))
        self._solver: QpSolver | None = None
        self._sig = None

    def _get_solver(self, qp: QuadraticProgram) -> QpSolver:
        sig_ok = (self._solver is not None
                  and self._solver.qp.P.shape == qp.P.shape
                  and self._solver.qp.A_eq.shape == qp.A_eq.shape
                  and self._solver.qp.A_in.shape == qp.A_in.shape
                  and np.array_equal(self._solver.qp.P, qp.P)
                  and np.array_equal(self._solver.qp.A_eq, qp.A_eq)
                  and np.array_equal(self._solver.qp.A_in, qp.A_in)
                  and np.array_equal(np.isfinite(self._solver.qp.lb), np.isfinite(qp.lb))
                  and np.array_equal(np.isfinite(self._solver.qp.ub), np.isfinite(qp.ub)))
        if not sig_ok:
            qp.validate()
            settings = self.bnb.qp_settings or QpSettings(eps_prim=1e-7, eps_dual=1e-7,
                                                          max_iter=20_000)
            settings.validate = False
            self._solver = QpSolver(qp, settings)
        return self._solver

    def solve(self, state: mg.PlantState, forecasts: ForecastBundle,
              zeta: mg.CommStatus, defaults: DefaultSchedule | None = None,
              delta_hint: np.ndarray | None = None) -> MpcSolution:
        return solve_mpc(self.model, self.cfg, state, forecasts, zeta, defaults,
                         bnb=self.bnb, engine=self, delta_hint=delta_hint)


def solve_mpc(model: mg.MicrogridModel, cfg: MpcConfig, state: mg.PlantState,
              forecasts: ForecastBundle, zeta: mg.CommStatus,
              defaults: DefaultSchedule | None = None,
              bnb: BnbConfig | None = None,
              engine: MpcEngine | None = None,
              delta_hint: np.ndarray | None = None) -> MpcSolution:
    """build -> branch and bound -> decode, with the split-direction fallback."""
    bnb_cfg = bnb or BnbConfig(abs_gap=1e-8)
    enforce: list[tuple[int, int]] = []
    for _attempt in range(2):
        prob, vmap = build_problem(model, cfg, state.x, state.delta_prev,
                                   forecasts, zeta, defaults, enforce_split=enforce)
        hints = list(bnb_cfg.incumbent_hints)
        if delta_hint is not None and len(vmap.comm_thermal):
            hint = _delta_hint_vector(delta_hint, vmap, cfg.horizon, enforce)
            if hint is not None:
                hints = [hint] + hints
        cfg_run = BnbConfig(abs_gap=bnb_cfg.abs_gap, rel_gap=bnb_cfg.rel_gap,
                            node_limit=bnb_cfg.node_limit,
                            integrality_tol=bnb_cfg.integrality_tol,
                            branching=bnb_cfg.branching, workers=bnb_cfg.workers,
                            qp_settings=bnb_cfg.qp_settings,
                            node_polish=bnb_cfg.node_polish,
                            incumbent_hints=hints)
        solver = engine._get_solver(prob.base) if engine is not None else None
        res = solve_miqp(prob, cfg_run, solver=solver)
        if res.x is None:
            raise MpcSolveError(res.status, f"nodes explored: {res.nodes}")
        vmap.context["qp_objective"] = res.objective
        stats = SolverStats(res.status, res.nodes, res.gap, res.bound + vmap.offset)
        sol = extract_solution(res.x, vmap, model, cfg, stats)
        bad = [(int(i), int(j)) for i, j in
               np.argwhere(np.minimum(_block_mat(res.x, vmap, "p_dis", cfg.horizon),
                                      _block_mat(res.x, vmap, "p_chg", cfg.horizon)) > 1e-6)]
        new = [t for t in bad if t not in enforce]
        if not new:
            return sol
        enforce.extend(new)   # re-solve with explicit direction binaries
    return sol


def _block_mat(raw: np.ndarray, vmap: VariableMap, name: str, h: int) -> np.ndarray:
    return np.stack([raw[vmap.get(name, j)] for j in range(h + 1)], axis=1)


def _delta_hint_vector(delta_hint: np.ndarray, vmap: VariableMap, h: int,
                       enforce: list) -> np.ndarray | None:
    """Map a (|T|, h+1) switch guess onto the problem's binary vector."""
    delta_hint = np.atleast_2d(np.asarray(delta_hint, dtype=float))
    if delta_hint.shape[1] < h + 1:
        return None
    vals = []
    for idx in vmap.binary_indices:
        found = None
        for j in range(h + 1):
            sl = vmap.get("delta", j)
            if sl.start <= idx < sl.stop:
                found = delta_hint[vmap.comm_thermal[idx - sl.start], j]
                break
        vals.append(0.0 if found is None else float(np.round(found)))
    return np.array(vals)
