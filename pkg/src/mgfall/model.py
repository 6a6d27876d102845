"""Static microgrid data and the per-step steady-state unit model.

Everything in here is a pure function of its arguments: communication
multiplexing, unit power equations, storage dynamics, operational limit
checks and the stage cost.  Powers are in pu, energies in puh, sampling
time in hours.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _arr(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# unit parameter containers
# ---------------------------------------------------------------------------

@dataclass
class ThermalUnitParams:
    """Dispatchable thermal generator: switchable, droop-capable."""
    p_min: float
    p_max: float
    droop_gain: float
    cost_switch: float      # per on/off transition
    cost_on: float          # per step while committed
    cost_linear: float      # per pu
    cost_quadratic: float   # per pu^2

    def validate(self, name: str = "thermal") -> None:
        if not (0.0 < self.p_min <= self.p_max):
            raise ValueError(f"{name}: need 0 < p_min <= p_max, got [{self.p_min}, {self.p_max}]")
        if self.droop_gain <= 0.0:
            raise ValueError(f"{name}: droop_gain must be positive")
        if min(self.cost_on, self.cost_linear, self.cost_quadratic) <= 0.0:
            raise ValueError(f"{name}: on/linear/quadratic cost weights must be positive")
        if self.cost_switch < 0.0:
            raise ValueError(f"{name}: switch cost must be nonnegative")


@dataclass
class StorageUnitParams:
    """Battery storage: signed power, capacity band, droop-capable."""
    p_min: float
    p_max: float
    x_min: float
    x_max: float
    x_soft_min: float
    x_soft_max: float
    droop_gain: float
    efficiency: float
    cost_power: float       # quadratic weight on charge/discharge power
    cost_threshold: float   # quadratic weight on soft-band excursion

    def validate(self, name: str = "storage") -> None:
        if not (self.x_min <= self.x_soft_min <= self.x_soft_max <= self.x_max):
            raise ValueError(f"{name}: energy bands must nest: "
                             f"x_min <= x_soft_min <= x_soft_max <= x_max")
        if self.p_min > self.p_max:
            raise ValueError(f"{name}: p_min > p_max")
        if not (0.0 < self.efficiency <= 1.0):
            raise ValueError(f"{name}: efficiency must lie in (0, 1]")
        if self.droop_gain <= 0.0:
            raise ValueError(f"{name}: droop_gain must be positive")


@dataclass
class RenewableUnitParams:
    """Curtailable renewable source; infeed limited by availability."""
    p_min: float
    p_max: float
    cost_incentive: float   # linear reward for injected power

    def validate(self, name: str = "renewable") -> None:
        if not (0.0 <= self.p_min <= self.p_max):
            raise ValueError(f"{name}: need 0 <= p_min <= p_max")
        if self.cost_incentive < 0.0:
            raise ValueError(f"{name}: incentive weight must be nonnegative")


@dataclass
class NetworkModel:
    """Linear line-flow sensitivities with per-line limits.

    ``H`` has one column per unit and load, in the fixed order
    [thermal..., storage..., renewable..., loads...].
    """
    H: np.ndarray
    p_el_min: np.ndarray
    p_el_max: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.p_el_min = _arr(self.p_el_min)
        self.p_el_max = _arr(self.p_el_max)

    def validate(self, n_columns: int) -> None:
        if self.H.shape[1] != n_columns:
            raise ValueError(f"network: H has {self.H.shape[1]} columns, expected {n_columns}")
        m = self.H.shape[0]
        if self.p_el_min.shape != (m,) or self.p_el_max.shape != (m,):
            raise ValueError("network: line limit length does not match H rows")
        if np.any(self.p_el_min > self.p_el_max):
            raise ValueError("network: p_el_min > p_el_max on some line")


@dataclass
class MicrogridModel:
    """Full static description of the microgrid."""
    thermal: list[ThermalUnitParams]
    storage: list[StorageUnitParams]
    renewable: list[RenewableUnitParams]
    n_loads: int
    network: NetworkModel
    sampling_hours: float
    thermal_ids: list[str] = field(default_factory=list)
    storage_ids: list[str] = field(default_factory=list)
    renewable_ids: list[str] = field(default_factory=list)
    load_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.thermal_ids:
            self.thermal_ids = [f"t{i+1}" for i in range(len(self.thermal))]
        if not self.storage_ids:
            self.storage_ids = [f"s{i+1}" for i in range(len(self.storage))]
        if not self.renewable_ids:
            self.renewable_ids = [f"r{i+1}" for i in range(len(self.renewable))]
        if not self.load_ids:
            self.load_ids = [f"l{i+1}" for i in range(self.n_loads)]

    @property
    def n_thermal(self) -> int:
        return len(self.thermal)

    @property
    def n_storage(self) -> int:
        return len(self.storage)

    @property
    def n_renewable(self) -> int:
        return len(self.renewable)

    @property
    def n_units(self) -> int:
        return self.n_thermal + self.n_storage + self.n_renewable

    # convenience parameter vectors -------------------------------------

    def thermal_vec(self, attr: str) -> np.ndarray:
        return np.array([getattr(u, attr) for u in self.thermal], dtype=float)

    def storage_vec(self, attr: str) -> np.ndarray:
        return np.array([getattr(u, attr) for u in self.storage], dtype=float)

    def renewable_vec(self, attr: str) -> np.ndarray:
        return np.array([getattr(u, attr) for u in self.renewable], dtype=float)

    def unit_ids(self) -> list[str]:
        return self.thermal_ids + self.storage_ids + self.renewable_ids

    def iter_units(self):
        """Yield (kind, index within kind, id) over all controllable units."""
        for i, uid in enumerate(self.thermal_ids):
            yield "thermal", i, uid
        for i, uid in enumerate(self.storage_ids):
            yield "storage", i, uid
        for i, uid in enumerate(self.renewable_ids):
            yield "renewable", i, uid

    def locate_unit(self, uid: str) -> tuple[str, int]:
        for kind, i, u in self.iter_units():
            if u == uid:
                return kind, i
        raise KeyError(f"unknown unit id {uid!r}")

    def validate(self) -> None:
        ids = self.thermal_ids + self.storage_ids + self.renewable_ids + self.load_ids
        if len(set(ids)) != len(ids):
            raise ValueError("model: duplicate unit/load ids")
        if self.sampling_hours <= 0.0:
            raise ValueError("model: sampling_hours must be positive")
        for i, u in enumerate(self.thermal):
            u.validate(f"thermal[{self.thermal_ids[i]}]")
        for i, u in enumerate(self.storage):
            u.validate(f"storage[{self.storage_ids[i]}]")
        for i, u in enumerate(self.renewable):
            u.validate(f"renewable[{self.renewable_ids[i]}]")
        self.network.validate(self.n_units + self.n_loads)


@dataclass
class CommStatus:
    """Per-unit binary link flags; 1 = link up, 0 = failed."""
    zeta_t: np.ndarray
    zeta_s: np.ndarray
    zeta_r: np.ndarray

    def __post_init__(self):
        self.zeta_t = _arr(self.zeta_t)
        self.zeta_s = _arr(self.zeta_s)
        self.zeta_r = _arr(self.zeta_r)
        for z in (self.zeta_t, self.zeta_s, self.zeta_r):
            if not np.all(np.isin(z, (0.0, 1.0))):
                raise ValueError("comm flags must be 0 or 1")

    @classmethod
    def all_up(cls, model: MicrogridModel) -> "CommStatus":
        return cls(np.ones(model.n_thermal), np.ones(model.n_storage),
                   np.ones(model.n_renewable))

    def all_connected(self) -> bool:
        return bool(np.all(self.zeta_t == 1) and np.all(self.zeta_s == 1)
                    and np.all(self.zeta_r == 1))


@dataclass
class SetpointCommand:
    """Set-points broadcast by the EMS for one time step."""
    u_t: np.ndarray
    u_s: np.ndarray
    u_r: np.ndarray
    delta_t: np.ndarray

    def __post_init__(self):
        self.u_t = _arr(self.u_t)
        self.u_s = _arr(self.u_s)
        self.u_r = _arr(self.u_r)
        self.delta_t = _arr(self.delta_t)


@dataclass
class UncertaintySample:
    """One realization of renewable availability and load demand."""
    w_r: np.ndarray   # >= 0
    w_l: np.ndarray   # <= 0 (consumption convention)

    def __post_init__(self):
        self.w_r = _arr(self.w_r)
        self.w_l = _arr(self.w_l)
        if np.any(self.w_r < 0):
            raise ValueError("renewable availability must be nonnegative")
        if np.any(self.w_l > 0):
            raise ValueError("load demand must be nonpositive")


@dataclass
class PlantState:
    x: np.ndarray          # storage energies
    delta_prev: np.ndarray  # thermal switch states of the previous step

    def __post_init__(self):
        self.x = _arr(self.x)
        self.delta_prev = _arr(self.delta_prev)


# ---------------------------------------------------------------------------
# per-step model equations
# ---------------------------------------------------------------------------

def com_apply(u, d, zeta) -> np.ndarray:
    """Multiplex set-point against default: (1 - zeta) * d + zeta * u."""
    u, d, zeta = _arr(u), _arr(d), _arr(zeta)
    if not (u.shape == d.shape == zeta.shape):
        raise ValueError(f"com_apply: length mismatch {u.shape}/{d.shape}/{zeta.shape}")
    return (1.0 - zeta) * d + zeta * u


def renewable_power(u_r, d_r, zeta_r, w_r) -> np.ndarray:
    """Injected renewable power: communicated set-point clipped by availability."""
    w_r = _arr(w_r)
    com = com_apply(u_r, d_r, zeta_r)
    if com.shape != w_r.shape:
        raise ValueError("renewable_power: length mismatch")
    return np.minimum(com, w_r)


def storage_power(u_s, d_s, zeta_s, chi_s, rho: float) -> np.ndarray:
    """Storage power: communicated set-point plus droop share chi_s * rho.

    The droop term is injected by the local controller and applies whether
    or not the link is up.
    """
    chi_s = _arr(chi_s)
    com = com_apply(u_s, d_s, zeta_s)
    if com.shape != chi_s.shape:
        raise ValueError("storage_power: length mismatch")
    return com + chi_s * float(rho)


def thermal_power(u_t, d_t, delta_t, delta_d, zeta_t, chi_t, rho: float) -> np.ndarray:
    """Thermal power: droop share gated by the effective switch, plus set-point."""
    chi_t = _arr(chi_t)
    eff_delta = com_apply(delta_t, delta_d, zeta_t)
    com_u = com_apply(u_t, d_t, zeta_t)
    if com_u.shape != chi_t.shape:
        raise ValueError("thermal_power: length mismatch")
    return eff_delta * chi_t * float(rho) + com_u


def power_balance_residual(p_t, p_s, p_r, w_l) -> float:
    """Sum of all injections; zero when generation matches demand."""
    return float(np.sum(_arr(p_t)) + np.sum(_arr(p_s)) + np.sum(_arr(p_r))
                 + np.sum(_arr(w_l)))


def charge_coefficient(p_s_i: float, eta_i: float, t_s: float) -> float:
    """Energy conversion factor; charging (p < 0) applies eta, otherwise 1/eta."""
    if p_s_i < 0.0:
        return t_s * eta_i
    return t_s / eta_i


def storage_step(x, p_s, eta_s, t_s: float) -> np.ndarray:
    """Advance storage energies by one step: x - b(p) * p elementwise."""
    x, p_s, eta_s = _arr(x), _arr(p_s), _arr(eta_s)
    b = np.array([charge_coefficient(p, e, t_s) for p, e in zip(p_s, eta_s)])
    return x - b * p_s


# ---------------------------------------------------------------------------
# limit checking and cost
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    constraint: str   # e.g. "storage_power", "energy_capacity", "line_flow"
    index: int
    margin: float     # signed: negative = below min, positive = above max


def check_operational_limits(p_t, p_s, p_r, w_l, delta_t, x,
                             model: MicrogridModel,
                             tol: float = 1e-9) -> list[Violation]:
    """Evaluate the box, capacity and line constraints at a realized point.

    Violations are returned as data with signed margins; nothing raises.
    """
    p_t, p_s, p_r = _arr(p_t), _arr(p_s), _arr(p_r)
    w_l, delta_t, x = _arr(w_l), _arr(delta_t), _arr(x)
    out: list[Violation] = []

    lo = model.storage_vec("p_min")
    hi = model.storage_vec("p_max")
    for i in range(model.n_storage):
        if p_s[i] < lo[i] - tol:
            out.append(Violation("storage_power", i, p_s[i] - lo[i]))
        elif p_s[i] > hi[i] + tol:
            out.append(Violation("storage_power", i, p_s[i] - hi[i]))

    lo = model.renewable_vec("p_min")
    hi = model.renewable_vec("p_max")
    for i in range(model.n_renewable):
        if p_r[i] < lo[i] - tol:
            out.append(Violation("renewable_power", i, p_r[i] - lo[i]))
        elif p_r[i] > hi[i] + tol:
            out.append(Violation("renewable_power", i, p_r[i] - hi[i]))

    lo = model.thermal_vec("p_min") * delta_t
    hi = model.thermal_vec("p_max") * delta_t
    for i in range(model.n_thermal):
        if p_t[i] < lo[i] - tol:
            out.append(Violation("thermal_power", i, p_t[i] - lo[i]))
        elif p_t[i] > hi[i] + tol:
            out.append(Violation("thermal_power", i, p_t[i] - hi[i]))

    lo = model.storage_vec("x_min")
    hi = model.storage_vec("x_max")
    for i in range(model.n_storage):
        if x[i] < lo[i] - tol:
            out.append(Violation("energy_capacity", i, x[i] - lo[i]))
        elif x[i] > hi[i] + tol:
            out.append(Violation("energy_capacity", i, x[i] - hi[i]))

    p_full = np.concatenate([p_t, p_s, p_r, w_l])
    flows = model.network.H @ p_full
    for i in range(model.network.H.shape[0]):
        if flows[i] < model.network.p_el_min[i] - tol:
            out.append(Violation("line_flow", i, flows[i] - model.network.p_el_min[i]))
        elif flows[i] > model.network.p_el_max[i] + tol:
            out.append(Violation("line_flow", i, flows[i] - model.network.p_el_max[i]))
    return out


def stage_cost(p_t, p_s, p_r, delta_t, delta_prev, x,
               model: MicrogridModel) -> float:
    """One-step operation cost: thermal + storage + renewable terms."""
    p_t, p_s, p_r = _arr(p_t), _arr(p_s), _arr(p_r)
    delta_t, delta_prev, x = _arr(delta_t), _arr(delta_prev), _arr(x)
    if p_t.shape[0] != model.n_thermal or p_s.shape[0] != model.n_storage \
            or p_r.shape[0] != model.n_renewable:
        raise ValueError("stage_cost: dimension mismatch")

    a_sw = model.thermal_vec("cost_switch")
    a_on = model.thermal_vec("cost_on")
    a_lin = model.thermal_vec("cost_linear")
    a_quad = model.thermal_vec("cost_quadratic")
    l_t = (a_sw @ np.abs(delta_t - delta_prev) + a_on @ delta_t
           + a_lin @ p_t + p_t @ (a_quad * p_t))

    a_s = model.storage_vec("cost_power")
    a_s1 = model.storage_vec("cost_threshold")
    soft_lo = model.storage_vec("x_soft_min")
    soft_hi = model.storage_vec("x_soft_max")
    dx = np.maximum(soft_lo - x, 0.0) + np.maximum(x - soft_hi, 0.0)
    l_s = p_s @ (a_s * p_s) + dx @ (a_s1 * dx)

    a_r = model.renewable_vec("cost_incentive")
    l_r = -float(a_r @ p_r)
    return float(l_t + l_s + l_r)
