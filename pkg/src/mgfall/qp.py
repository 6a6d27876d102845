"""Dense convex QP solver: operator splitting with active-set polishing.

Solves

    min  0.5 x'Px + q'x
    s.t. A_eq x = b_eq,  l_in <= A_in x <= u_in,  lb <= x <= ub

via an ADMM iteration on the stacked form ``l <= Ax <= u`` (equalities get
``l = u``), with over-relaxation, an adaptive penalty, and a reduced-KKT
polishing step that tightens residuals to factorization accuracy.  A direct
KKT solve is used for problems without inequality constraints.

Problems here are small and dense (hundreds of variables); factorizations
are cached per penalty value so repeated solves with modified bounds or
linear terms (branch and bound, receding horizon) cost only back-solves.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import get_lapack_funcs, lu_factor, lu_solve

INF = np.inf
_RHO_EQ_SCALE = 1e3
_RHO_MIN, _RHO_MAX = 1e-6, 1e6
_SCALING_LIMIT = 1e4


def _ruiz(P: np.ndarray, A: np.ndarray, q: np.ndarray,
          iters: int = 10) -> tuple[np.ndarray, np.ndarray, float]:
    """Modified Ruiz equilibration of [[P, A'], [A, 0]] plus cost scaling.

    Returns (D, E, c) such that the scaled problem uses c*D P D, c*D q,
    and E A D; mixed cost magnitudes (soft-penalty weights vs tiny ridge
    terms) otherwise stall the splitting iteration.
    """
    n, m = P.shape[0], A.shape[0]
    D, E, c = np.ones(n), np.ones(m), 1.0
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        dcol = np.abs(Ps).max(axis=0, initial=0.0)
        if m:
            dcol = np.maximum(dcol, np.abs(As).max(axis=0, initial=0.0))
        dcol[dcol == 0.0] = 1.0
        sd = np.clip(1.0 / np.sqrt(dcol), 1.0 / _SCALING_LIMIT, _SCALING_LIMIT)
        if m:
            erow = np.abs(As).max(axis=1, initial=0.0)
            erow[erow == 0.0] = 1.0
            se = np.clip(1.0 / np.sqrt(erow), 1.0 / _SCALING_LIMIT, _SCALING_LIMIT)
            As = se[:, None] * As * sd[None, :]
            E *= se
        Ps = sd[:, None] * Ps * sd[None, :]
        qs = sd * qs
        D *= sd
        gamma = max(float(np.mean(np.abs(Ps).max(axis=0, initial=0.0))),
                    float(np.abs(qs).max(initial=0.0)), 1e-8)
        g = float(np.clip(1.0 / gamma, 1.0 / _SCALING_LIMIT, _SCALING_LIMIT))
        Ps *= g
        qs *= g
        c *= g
    return D, E, c


class QpStatus(Enum):
    OPTIMAL = "optimal"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"
    ITER_LIMIT = "iteration_limit"


class MalformedProblem(ValueError):
    """Dimension mismatch or an objective that is not PSD within tolerance."""


@dataclass
class QuadraticProgram:
    P: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    l_in: np.ndarray | None = None
    u_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.shape[0]
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        else:
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        if self.A_in is None:
            self.A_in = np.zeros((0, n))
            self.l_in = np.zeros(0)
            self.u_in = np.zeros(0)
        else:
            self.A_in = np.atleast_2d(np.asarray(self.A_in, dtype=float))
            self.l_in = np.asarray(self.l_in, dtype=float).ravel()
            self.u_in = np.asarray(self.u_in, dtype=float).ravel()
        self.lb = np.full(n, -INF) if self.lb is None else np.asarray(self.lb, dtype=float).ravel().copy()
        self.ub = np.full(n, INF) if self.ub is None else np.asarray(self.ub, dtype=float).ravel().copy()

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def validate(self) -> None:
        n = self.n
        if self.P.shape != (n, n):
            raise MalformedProblem(f"P shape {self.P.shape}, expected ({n}, {n})")
        scale = 1.0 + np.abs(self.P).max() if self.P.size else 1.0
        if np.abs(self.P - self.P.T).max(initial=0.0) > 1e-8 * scale:
            raise MalformedProblem("P is not symmetric")
        if n:
            w = np.linalg.eigvalsh(0.5 * (self.P + self.P.T))
            if w.min() < -1e-9 * scale:
                raise MalformedProblem(f"P has negative eigenvalue {w.min():.3e}")
        if self.A_eq.shape[1] != n or self.A_eq.shape[0] != self.b_eq.shape[0]:
            raise MalformedProblem("equality system dimension mismatch")
        if self.A_in.shape[1] != n or self.A_in.shape[0] != self.l_in.shape[0] \
                or self.l_in.shape != self.u_in.shape:
            raise MalformedProblem("inequality system dimension mismatch")
        if np.any(self.l_in > self.u_in):
            raise MalformedProblem("l_in > u_in on some inequality row")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise MalformedProblem("bound vector dimension mismatch")
        if np.any(self.lb > self.ub):
            raise MalformedProblem("lb > ub on some variable")

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x)


@dataclass
class QpSettings:
    eps_prim: float = 1e-8
    eps_dual: float = 1e-8
    eps_infeas: float = 1e-7
    max_iter: int = 200_000
    sigma: float = 1e-6
    rho: float = 0.1
    alpha: float = 1.6
    check_every: int = 25
    adapt_every: int = 100
    adaptive_rho: bool = True
    polish: bool = True
    polish_reg: float = 1e-9
    validate: bool = True


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray            # duals for stacked rows [eq; ineq; bounds]
    status: QpStatus
    iterations: int
    objective: float
    certificate: np.ndarray | None = None
    polished: bool = False


def kkt_residuals(qp: QuadraticProgram, x: np.ndarray,
                  y: np.ndarray) -> tuple[float, float, float]:
    """Primal / dual / complementarity residual infinity norms."""
    A, l, u = _stack(qp)
    if x.shape[0] != qp.n or y.shape[0] != A.shape[0]:
        raise MalformedProblem("solution dimension mismatch")
    z = A @ x
    prim = float(np.max(np.maximum(z - u, 0.0) + np.maximum(l - z, 0.0), initial=0.0))
    dual = float(np.max(np.abs(qp.P @ x + qp.q + A.T @ y), initial=0.0))
    up = np.maximum(y, 0.0)
    dn = np.minimum(y, 0.0)
    slack_u = np.where(np.isfinite(u), u - z, 0.0)
    slack_l = np.where(np.isfinite(l), z - l, 0.0)
    comp = float(np.max(np.abs(up * slack_u) + np.abs(dn * slack_l), initial=0.0))
    return prim, dual, comp


def _stack(qp: QuadraticProgram) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = qp.n
    finite = np.isfinite(qp.lb) | np.isfinite(qp.ub)
    I = np.eye(n)[finite]
    A = np.vstack([qp.A_eq, qp.A_in, I])
    l = np.concatenate([qp.b_eq, qp.l_in, qp.lb[finite]])
    u = np.concatenate([qp.b_eq, qp.u_in, qp.ub[finite]])
    return A, l, u


class QpSolver:
    """Reusable solver bound to one constraint/objective structure.

    ``solve`` accepts per-call overrides of q, l, u (same sparsity pattern),
    which is how branch-and-bound nodes and successive MPC steps share a
    single KKT factorization.
    """

    def __init__(self, qp: QuadraticProgram, settings: QpSettings | None = None):
        self.settings = settings or QpSettings()
        if self.settings.validate:
            qp.validate()
        self.qp = qp
        self.n = qp.n
        self.A, self.l0, self.u0 = _stack(qp)
        self.m = self.A.shape[0]
        self._eq_mask = np.zeros(self.m, dtype=bool)
        self._eq_mask[:qp.A_eq.shape[0]] = True
        # map from stacked bound rows back to variable indices
        finite = np.isfinite(qp.lb) | np.isfinite(qp.ub)
        self._bound_vars = np.flatnonzero(finite)
        self._factors: dict[float, tuple] = {}
        self._AT = self.A.T.copy()
        self._D, self._E, self._c = _ruiz(qp.P, self.A, qp.q)
        self._Ps = self._c * (self._D[:, None] * qp.P * self._D[None, :])
        self._As = self._E[:, None] * self.A * self._D[None, :]
        self._AsT = self._As.T.copy()

    # -- factorization ---------------------------------------------------

    def _rho_vec(self, rho_bar: float) -> np.ndarray:
        r = np.full(self.m, rho_bar)
        r[self._eq_mask] = min(rho_bar * _RHO_EQ_SCALE, _RHO_MAX)
        return r

    def _factor(self, rho_bar: float):
        key = float(rho_bar)
        if key not in self._factors:
            rho = self._rho_vec(rho_bar)
            K = np.zeros((self.n + self.m, self.n + self.m))
            K[:self.n, :self.n] = self._Ps + self.settings.sigma * np.eye(self.n)
            K[:self.n, self.n:] = self._AsT
            K[self.n:, :self.n] = self._As
            K[self.n:, self.n:] = -np.diag(1.0 / rho)
            lu, piv = lu_factor(K, check_finite=False)
            getrs, = get_lapack_funcs(("getrs",), (lu,))
            self._factors[key] = (lu, piv, getrs, rho)
            if len(self._factors) > 32:  # keep the cache bounded
                self._factors.pop(next(iter(self._factors)))
        return self._factors[key]

    # -- bound updates for branch and bound ------------------------------

    def bounds_for_var(self, idx: int, lo: float, hi: float,
                       l: np.ndarray, u: np.ndarray) -> None:
        """Overwrite the stacked box rows of variable ``idx`` in (l, u)."""
        pos = np.searchsorted(self._bound_vars, idx)
        if pos >= len(self._bound_vars) or self._bound_vars[pos] != idx:
            raise ValueError(f"variable {idx} has no bound row")
        row = self.qp.A_eq.shape[0] + self.qp.A_in.shape[0] + pos
        l[row] = lo
        u[row] = hi

    # -- main iteration --------------------------------------------------

    def solve(self, q: np.ndarray | None = None,
              l: np.ndarray | None = None, u: np.ndarray | None = None,
              warm_x: np.ndarray | None = None,
              warm_y: np.ndarray | None = None) -> QpSolution:
        s = self.settings
        q = self.qp.q if q is None else q
        l = self.l0 if l is None else l
        u = self.u0 if u is None else u

        if self.m == 0:
            return self._solve_unconstrained(q)
        if bool(np.all(self._eq_mask)):
            sol = self._solve_equality_kkt(q, l)
            if sol is not None:
                return sol

        # iterate in the equilibrated space; report in the original one
        qs = self._c * self._D * q
        ls = self._E * l
        us = self._E * u
        x = np.zeros(self.n) if warm_x is None else warm_x / self._D
        y = np.zeros(self.m) if warm_y is None else self._c * warm_y / self._E
        z = np.clip(self._As @ x, ls, us)

        rho_bar = s.rho
        (lu, piv, getrs, rho) = self._factor(rho_bar)
        rhs = np.empty(self.n + self.m)

        status = QpStatus.ITER_LIMIT
        cert = None
        it = 0
        for it in range(1, s.max_iter + 1):
            rhs[:self.n] = s.sigma * x - qs
            rhs[self.n:] = z - y / rho
            sol, _info = getrs(lu, piv, rhs)
            x_tld = sol[:self.n]
            nu = sol[self.n:]
            z_tld = z + (nu - y) / rho

            x_prev, y_prev = x, y
            x = s.alpha * x_tld + (1.0 - s.alpha) * x_prev
            z_relaxed = s.alpha * z_tld + (1.0 - s.alpha) * z
            z_new = np.clip(z_relaxed + y / rho, ls, us)
            y = y + rho * (z_relaxed - z_new)
            z = z_new

            if it % s.check_every:
                continue

            Ax = self._As @ x
            r_prim = np.abs((Ax - z) / self._E).max(initial=0.0)
            dual_s = self._Ps @ x + qs + self._AsT @ y
            r_dual = np.abs(self._D * dual_s).max(initial=0.0) / self._c
            if r_prim <= s.eps_prim and r_dual <= s.eps_dual:
                status = QpStatus.OPTIMAL
                break

            dy = self._E * (y - y_prev) / self._c
            dx = self._D * (x - x_prev)
            cert_status, cert = self._check_infeasibility(dx, dy, l, u, q)
            if cert_status is not None:
                status = cert_status
                break

            if s.adaptive_rho and it % s.adapt_every == 0:
                rho_bar_new = self._adapt_rho(
                    rho_bar, x, z, y, qs,
                    np.abs(Ax - z).max(initial=0.0),
                    np.abs(dual_s).max(initial=0.0))
                if rho_bar_new != rho_bar:
                    rho_bar = rho_bar_new
                    (lu, piv, getrs, rho) = self._factor(rho_bar)

        x = self._D * x
        y = self._E * y / self._c

        polished = False
        if status is QpStatus.OPTIMAL and s.polish:
            px, py = self._polish(x, y, q, l, u)
            if px is not None:
                x, y = px, py
                polished = True

        return QpSolution(x=x, y=y, status=status, iterations=it,
                          objective=float(0.5 * x @ (self.qp.P @ x) + q @ x),
                          certificate=cert, polished=polished)

    # -- special cases ---------------------------------------------------

    def _solve_unconstrained(self, q: np.ndarray) -> QpSolution:
        try:
            x = np.linalg.solve(self.qp.P + self.settings.sigma * np.eye(self.n), -q)
        except np.linalg.LinAlgError:
            x = np.zeros(self.n)
        grad = self.qp.P @ x + q
        if np.abs(grad).max(initial=0.0) > max(self.settings.eps_dual, 1e-9 * (1 + np.abs(q).max(initial=0.0))):
            return QpSolution(x, np.zeros(0), QpStatus.DUAL_INFEASIBLE, 0, self.qp.objective(x))
        return QpSolution(x, np.zeros(0), QpStatus.OPTIMAL, 0, self.qp.objective(x))

    def _solve_equality_kkt(self, q: np.ndarray, b: np.ndarray) -> QpSolution | None:
        """Direct KKT solve for equality-only problems; None if singular."""
        n, m = self.n, self.m
        K = np.zeros((n + m, n + m))
        K[:n, :n] = self.qp.P
        K[:n, n:] = self._AT
        K[n:, :n] = self.A
        rhs = np.concatenate([-q, b])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            return None
        x, y = sol[:n], sol[n:]
        prim = np.abs(self.A @ x - b).max(initial=0.0)
        dual = np.abs(self.qp.P @ x + q + self._AT @ y).max(initial=0.0)
        if prim > self.settings.eps_prim or dual > self.settings.eps_dual:
            return None
        return QpSolution(x, y, QpStatus.OPTIMAL, 1,
                          float(0.5 * x @ (self.qp.P @ x) + q @ x), polished=True)

    # -- infeasibility certificates --------------------------------------

    def _check_infeasibility(self, dx, dy, l, u, q):
        eps = self.settings.eps_infeas
        ninf = np.abs(dy).max(initial=0.0)
        if ninf > 1e-10:
            v = dy / ninf
            if np.abs(self._AT @ v).max(initial=0.0) <= eps:
                vp, vn = np.maximum(v, 0.0), np.minimum(v, 0.0)
                # infinite bounds admit no certificate mass
                if np.all(vp[~np.isfinite(u)] <= eps) and np.all(-vn[~np.isfinite(l)] <= eps):
                    fu, fl = np.isfinite(u), np.isfinite(l)
                    gap = float(u[fu] @ vp[fu] + l[fl] @ vn[fl])
                    if gap <= -eps:
                        return QpStatus.PRIMAL_INFEASIBLE, v
        nd = np.abs(dx).max(initial=0.0)
        if nd > 1e-10:
            v = dx / nd
            if np.abs(self.qp.P @ v).max(initial=0.0) <= eps and q @ v <= -eps:
                Av = self.A @ v
                ok_u = np.all(Av[np.isfinite(u)] <= eps)
                ok_l = np.all(Av[np.isfinite(l)] >= -eps)
                if ok_u and ok_l:
                    return QpStatus.DUAL_INFEASIBLE, v
        return None, None

    def _adapt_rho(self, rho_bar, x, z, y, q, r_prim, r_dual) -> float:
        # operates on equilibrated quantities; the result is snapped to a
        # power of five so the factorization cache keeps hitting
        denom_p = max(np.abs(self._As @ x).max(initial=0.0), np.abs(z).max(initial=0.0), 1e-10)
        denom_d = max(np.abs(self._Ps @ x).max(initial=0.0),
                      np.abs(self._AsT @ y).max(initial=0.0),
                      np.abs(q).max(initial=0.0), 1e-10)
        ratio = (r_prim / denom_p) / max(r_dual / denom_d, 1e-12)
        raw = float(np.clip(rho_bar * np.sqrt(ratio), _RHO_MIN, _RHO_MAX))
        new = float(5.0 ** np.round(np.log(raw) / np.log(5.0)))
        if new > 4.0 * rho_bar or new < rho_bar / 4.0:
            return new
        return rho_bar

    # -- polishing -------------------------------------------------------

    def _polish(self, x, y, q, l, u):
        """Solve the reduced KKT system on the detected active set."""
        s = self.settings
        z = self.A @ x
        tol = 10.0 * max(s.eps_prim, 1e-9)
        low = self._eq_mask | ((y < 0) & (z - l <= tol)) | (np.isclose(l, u) & (z - l <= tol))
        upp = (~self._eq_mask) & (y > 0) & (u - z <= tol)
        act = low | upp
        idx = np.flatnonzero(act)
        if idx.size == 0:
            # unconstrained stationary point
            try:
                xp = np.linalg.solve(self.qp.P + s.polish_reg * np.eye(self.n), -q)
            except np.linalg.LinAlgError:
                return None, None
            if self._better(xp, np.zeros(self.m), x, y, q, l, u):
                return xp, np.zeros(self.m)
            return None, None
        Aa = self.A[idx]
        ba = np.where(upp[idx], u[idx], l[idx])
        k = idx.size
        K = np.zeros((self.n + k, self.n + k))
        K[:self.n, :self.n] = self.qp.P + s.polish_reg * np.eye(self.n)
        K[:self.n, self.n:] = Aa.T
        K[self.n:, :self.n] = Aa
        K[self.n:, self.n:] = -s.polish_reg * np.eye(k)
        rhs = np.concatenate([-q, ba])
        try:
            fac = lu_factor(K, check_finite=False)
        except Exception:
            return None, None
        sol = lu_solve(fac, rhs, check_finite=False)
        # two rounds of iterative refinement against the unregularized system
        for _ in range(2):
            res = rhs - self._kkt_apply(sol, Aa)
            sol = sol + lu_solve(fac, res, check_finite=False)
        xp = sol[:self.n]
        yp = np.zeros(self.m)
        yp[idx] = sol[self.n:]
        if self._better(xp, yp, x, y, q, l, u):
            return xp, yp
        return None, None

    def _kkt_apply(self, sol, Aa):
        xp, ya = sol[:self.n], sol[self.n:]
        return np.concatenate([self.qp.P @ xp + Aa.T @ ya, Aa @ xp])

    def _better(self, xp, yp, x, y, q, l, u) -> bool:
        def score(xx, yy):
            z = self.A @ xx
            rp = np.max(np.maximum(z - u, 0.0) + np.maximum(l - z, 0.0), initial=0.0)
            rd = np.abs(self.qp.P @ xx + q + self._AT @ yy).max(initial=0.0)
            return max(rp, rd)
        return np.all(np.isfinite(xp)) and score(xp, yp) <= score(x, y)


def solve_qp(qp: QuadraticProgram, settings: QpSettings | None = None,
             warm_x: np.ndarray | None = None,
             warm_y: np.ndarray | None = None) -> QpSolution:
    """One-shot convenience wrapper around :class:`QpSolver`."""
    return QpSolver(qp, settings).solve(warm_x=warm_x, warm_y=warm_y)
