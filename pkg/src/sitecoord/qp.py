"""Dense convex quadratic programming.

Primal active-set method over a dense KKT factorization. This kernel sits
under both the SQP solver (one QP per iteration, warm-started) and the
branch-and-bound search (one QP per node, warm-started from the parent), so
exact-ish solutions, deterministic pivoting and cheap working-set updates
matter more than raw scale.

Problem form:

    minimize    0.5 z' H z + g' z
    subject to  A_eq z  = b_eq
                A_in z >= b_in
                lb <= z <= ub        (folded into inequality rows)

Contract: H must be symmetric positive definite to at least 1e-8 * I. The
solver adds no hidden regularization; convexification is the caller's job.

Working-set KKT systems are solved through a Schur complement bordering one
LU factorization of the base matrix [[H, A_eq'], [A_eq, 0]], so adding or
removing a working constraint costs one backsolve, not a refactorization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITER_LIMIT = "iter_limit"

_FEAS_TOL = 1e-9
_DUAL_TOL = 1e-9
_DEP_TOL = 1e-11


@dataclass
class QuadraticProgram:
    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def dims(self) -> tuple[int, int, int]:
        n = self.g.shape[0]
        me = 0 if self.A_eq is None else self.A_eq.shape[0]
        mi = 0 if self.A_in is None else self.A_in.shape[0]
        return n, me, mi

    def validate(self) -> None:
        n, me, mi = self.dims()
        if self.H.shape != (n, n):
            raise ValueError("H shape mismatch")
        if not np.allclose(self.H, self.H.T, atol=1e-10):
            raise ValueError("H must be symmetric")
        if me and self.b_eq.shape != (me,):
            raise ValueError("b_eq shape mismatch")
        if mi and self.b_in.shape != (mi,):
            raise ValueError("b_in shape mismatch")


@dataclass
class QpSolution:
    z: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray          # one multiplier per A_in row, then bound rows
    status: str
    kkt_residual: float
    iterations: int = 0
    active_set: tuple[int, ...] = ()
    # Farkas-style certificate (y_eq, y_in) when infeasible: y_in >= 0 with
    # A_eq' y_eq + G' y_in ~ 0 while b_eq' y_eq + h' y_in > 0.
    certificate: tuple[np.ndarray, np.ndarray] | None = None


def _expand_bounds(problem: QuadraticProgram) -> tuple[np.ndarray, np.ndarray]:
    """Stack A_in with finite-bound identity rows: G z >= h."""
    n, _, mi = problem.dims()
    rows = []
    rhs = []
    if mi:
        rows.append(np.asarray(problem.A_in, dtype=float))
        rhs.append(np.asarray(problem.b_in, dtype=float))
    if problem.lb is not None:
        idx = np.nonzero(np.isfinite(problem.lb))[0]
        if idx.size:
            eye = np.zeros((idx.size, n))
            eye[np.arange(idx.size), idx] = 1.0
            rows.append(eye)
            rhs.append(problem.lb[idx])
    if problem.ub is not None:
        idx = np.nonzero(np.isfinite(problem.ub))[0]
        if idx.size:
            eye = np.zeros((idx.size, n))
            eye[np.arange(idx.size), idx] = -1.0
            rows.append(eye)
            rhs.append(-problem.ub[idx])
    if not rows:
        return np.zeros((0, n)), np.zeros(0)
    return np.vstack(rows), np.concatenate(rhs)


class _WorkingSetSolver:
    """KKT solves for a growing/shrinking working set over one factored base."""

    def __init__(self, H: np.ndarray, A_eq: np.ndarray, G: np.ndarray):
        n = H.shape[0]
        me = A_eq.shape[0]
        self.n = n
        self.me = me
        self.G = G
        K = np.zeros((n + me, n + me))
        K[:n, :n] = H
        if me:
            K[:n, n:] = A_eq.T
            K[n:, :n] = A_eq
        try:
            self.lu = sla.lu_factor(K)
        except (sla.LinAlgError, ValueError) as exc:
            raise ValueError("singular base KKT matrix (rank-deficient equalities?)") from exc
        self.K = K
        self.rows: list[int] = []
        self.Y = np.zeros((n + me, 0))   # base solves of bordered columns
        self.C = np.zeros((0, 0))        # Schur complement G_S K0^-1 G_S'

    def base_solve(self, rhs: np.ndarray) -> np.ndarray:
        # one round of iterative refinement: the Hessian block may sit at
        # the 1e-8 regularization floor, which makes raw solves noisy
        y = sla.lu_solve(self.lu, rhs)
        y += sla.lu_solve(self.lu, rhs - self.K @ y)
        return y

    def try_add(self, row: int) -> bool:
        """Add an inequality row to the working set; False if dependent."""
        col = np.zeros(self.n + self.me)
        col[: self.n] = self.G[row]
        y = self.base_solve(col)
        k = len(self.rows)
        c_new = self.Y[: self.n].T @ self.G[row] if k else np.zeros(0)
        gamma = float(self.G[row] @ y[: self.n])
        if k:
            try:
                w = np.linalg.solve(self.C, c_new)
            except np.linalg.LinAlgError:
                return False
            pivot = gamma - float(c_new @ w)
        else:
            pivot = gamma
        if pivot <= _DEP_TOL * max(1.0, abs(gamma)):
            return False
        C = np.zeros((k + 1, k + 1))
        C[:k, :k] = self.C
        C[:k, k] = c_new
        C[k, :k] = c_new
        C[k, k] = gamma
        self.C = C
        self.Y = np.column_stack([self.Y, y]) if k else y[:, None]
        self.rows.append(row)
        return True

    def remove(self, pos: int) -> None:
        keep = [i for i in range(len(self.rows)) if i != pos]
        self.rows.pop(pos)
        self.Y = self.Y[:, keep]
        self.C = self.C[np.ix_(keep, keep)]

    def clear(self) -> None:
        self.rows = []
        self.Y = np.zeros((self.n + self.me, 0))
        self.C = np.zeros((0, 0))

    def solve(self, q: np.ndarray, r_eq: np.ndarray, r_s: np.ndarray | None = None):
        """Solve the working-set EQP KKT system.

            H d + q + A_eq' nu + G_S' mu = 0,  A_eq d = r_eq,  G_S d = r_s

        Returns (d, nu, mu). r_s defaults to zero (hold working rows).
        """
        w0 = self.base_solve(np.concatenate([-q, r_eq]))
        if self.rows:
            t = self.G[self.rows] @ w0[: self.n]
            if r_s is not None:
                t = t - r_s
            mu = np.linalg.solve(self.C, t)
            sol = w0 - self.Y @ mu
        else:
            mu = np.zeros(0)
            sol = w0
        return sol[: self.n], sol[self.n :], mu


def _kkt_residual(H, g, A_eq, b_eq, G, h, z, lam_eq, lam_in) -> float:
    r_stat = H @ z + g
    if A_eq.shape[0]:
        r_stat -= A_eq.T @ lam_eq
    if G.shape[0]:
        r_stat -= G.T @ lam_in
    parts = [float(np.abs(r_stat).max()) if r_stat.size else 0.0]
    if A_eq.shape[0]:
        parts.append(float(np.abs(A_eq @ z - b_eq).max()))
    if G.shape[0]:
        res = G @ z - h
        parts.append(max(0.0, float(-res.min())))
        parts.append(float(np.abs(lam_in * res).max()))
        parts.append(max(0.0, float(-lam_in.min())))
    return float(max(parts))


def _active_set_loop(ws: _WorkingSetSolver, H, g, A_eq, b_eq, G, h, x0, max_iter):
    """Core primal active-set loop from a feasible x0 with ws's rows active.

    Ties in both the blocking-constraint choice and the multiplier-drop
    choice go to the smallest row index, which makes the path deterministic;
    after sustained degenerate cycling the drop rule falls back to pure
    smallest-index (Bland) selection to force termination.
    Returns (x, lam_eq, lam_in, status, iterations, working_rows).
    """
    x = np.asarray(x0, dtype=float).copy()
    in_ws = np.zeros(G.shape[0], dtype=bool)
    in_ws[ws.rows] = True
    n_iter = 0
    bland_after = max(200, 3 * (G.shape[0] + A_eq.shape[0]))
    while n_iter < max_iter:
        n_iter += 1
        # absolute-form EQP: recomputing the working-set optimum (instead of
        # a step from x) keeps repeated solves from drifting on solver noise
        x_opt, nu, mu = ws.solve(g, b_eq, r_s=h[ws.rows] if ws.rows else None)
        d = x_opt - x
        step_scale = 1.0 + float(np.abs(x).max(initial=0.0))
        if float(np.abs(d).max(initial=0.0)) <= 1e-9 * step_scale:
            lam_ws = -mu
            if lam_ws.size == 0 or float(lam_ws.min()) >= -_DUAL_TOL:
                lam_in = np.zeros(G.shape[0])
                lam_in[ws.rows] = np.maximum(lam_ws, 0.0)
                return x, -nu, lam_in, OPTIMAL, n_iter, list(ws.rows)
            cands = [i for i in range(len(ws.rows)) if lam_ws[i] < -_DUAL_TOL]
            if n_iter > bland_after:
                drop = min(cands, key=lambda i: ws.rows[i])
            else:
                drop = min(cands, key=lambda i: (lam_ws[i], ws.rows[i]))
            in_ws[ws.rows[drop]] = False
            ws.remove(drop)
            continue
        alpha = 1.0
        blocker = -1
        if G.shape[0]:
            gd = G @ d
            res = G @ x - h
            cand = np.nonzero(~in_ws & (gd < -1e-13 * step_scale))[0]
            if cand.size:
                ratios = np.maximum(res[cand], 0.0) / (-gd[cand])
                best = np.lexsort((cand, ratios))[0]
                if ratios[best] < alpha - 1e-15:
                    alpha = float(ratios[best])
                    blocker = int(cand[best])
        x = x + alpha * d
        if blocker >= 0:
            if ws.try_add(blocker):
                in_ws[blocker] = True
            elif ws.rows:
                # Dependent blocking row: free the oldest working row and retry.
                in_ws[ws.rows[0]] = False
                ws.remove(0)
    return x, np.zeros(A_eq.shape[0]), np.zeros(G.shape[0]), ITER_LIMIT, n_iter, list(ws.rows)


def _active_set_minimize(H, g, A_eq, b_eq, G, h, x0, warm_rows, max_iter):
    """Compatibility wrapper: fresh factorization, then the core loop."""
    ws = _WorkingSetSolver(H, A_eq, G)
    x = np.asarray(x0, dtype=float)
    for row in warm_rows:
        if abs(G[row] @ x - h[row]) <= 1e-8 * (1.0 + abs(h[row])):
            ws.try_add(row)
    return _active_set_loop(ws, H, g, A_eq, b_eq, G, h, x, max_iter)


def _phase1(H, A_eq, b_eq, G, h, x0):
    """Find a feasible point by minimizing total inequality violation.

    The slack problem min 1's s.t. G x + s >= h, s >= 0, A_eq x = b_eq is a
    plain LP; a near-LP quadratic treated with the active-set loop is prone
    to degenerate cycling, so it goes to the HiGHS simplex instead. Returns
    (point, farkas_certificate_or_None, feasible).
    """
    del H
    n = x0.shape[0]
    m = G.shape[0]
    me = A_eq.shape[0]
    c = np.concatenate([np.zeros(n), np.ones(m)])
    A_ub = np.hstack([-G, -np.eye(m)])
    lp_eq = np.hstack([A_eq, np.zeros((me, m))]) if me else None
    kwargs = dict(
        A_ub=A_ub,
        b_ub=-h,
        A_eq=lp_eq,
        b_eq=b_eq if me else None,
        bounds=[(None, None)] * n + [(0, None)] * m,
        method="highs",
    )
    res = linprog(
        c,
        **kwargs,
        options={
            "primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10,
        },
    )
    if not res.success and res.status != 3:
        # HiGHS can bail out at very tight tolerances; retry at defaults
        res = linprog(c, **kwargs)
    if not res.success and res.status != 3:
        raise ValueError(f"phase-1 LP failed: {res.message}")
    x = res.x[:n] if res.x is not None else x0
    total = float(res.fun) if res.fun is not None else float("inf")
    if total <= 1e-8 * (1.0 + float(np.abs(h).max(initial=0.0))):
        return x, None, True
    # Farkas-style certificate from the LP duals: y_in >= 0 combines the
    # inequalities into 0' x >= positive, possibly mixed with equalities.
    y_in = np.maximum(-np.asarray(res.ineqlin.marginals), 0.0)
    y_eq = -np.asarray(res.eqlin.marginals) if me else np.zeros(0)
    return x, (y_eq, y_in), False


def restoration_step(A_eq: np.ndarray, b_eq: np.ndarray, G: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, float]:
    """Step minimizing total linearized inequality violation (equalities hard).

    Used by the SQP feasibility restoration: returns (step, residual_slack);
    a residual that refuses to shrink across relinearizations certifies an
    infeasible problem.
    """
    n = A_eq.shape[1] if A_eq.size else G.shape[1]
    x, _, feasible = _phase1(None, A_eq, b_eq, G, h, np.zeros(n))
    slack = float(np.maximum(0.0, h - G @ x).sum()) if G.size else 0.0
    del feasible
    return x, slack


def solve_qp(problem: QuadraticProgram, warm_start: QpSolution | None = None,
             max_iter: int | None = None) -> QpSolution:
    """Solve a convex QP to KKT residual <= 1e-8, or report why not.

    Phase 1 constructs a feasible point by minimizing elastic slacks on the
    violated inequalities; a positive phase-1 optimum certifies infeasibility
    and the certificate is attached to the result. A warm start seeds the
    initial point and working set and only affects the iteration count.
    """
    problem.validate()
    n, me, mi_rows = problem.dims()
    H = np.asarray(problem.H, dtype=float)
    g = np.asarray(problem.g, dtype=float)
    A_eq = np.asarray(problem.A_eq, dtype=float) if me else np.zeros((0, n))
    b_eq = np.asarray(problem.b_eq, dtype=float) if me else np.zeros(0)
    G, h = _expand_bounds(problem)
    m = G.shape[0]
    if max_iter is None:
        max_iter = 10 * (n + me + m) + 100
    h_scale = 1.0 + float(np.abs(h).max(initial=0.0))

    ws = _WorkingSetSolver(H, A_eq, G)
    x0 = None

    # EQP warm start: jump to the optimum of the warm working set. If that
    # point is feasible it is a valid primal-AS start with the warm rows
    # active by construction, and consecutive SQP subproblems typically
    # finish within a handful of working-set changes.
    warm_rows = [r for r in (warm_start.active_set if warm_start else ()) if 0 <= r < m]
    if warm_rows:
        for row in warm_rows:
            ws.try_add(row)
        if ws.rows:
            x_eqp, _, _ = ws.solve(g, b_eq, r_s=h[ws.rows])
            viol = h - G @ x_eqp if m else np.zeros(0)
            if np.all(np.isfinite(x_eqp)) and float(viol.max(initial=0.0)) <= _FEAS_TOL * h_scale:
                x0 = x_eqp
            else:
                ws.clear()
        else:
            ws.clear()

    if x0 is None:
        # Cold start: project the seed onto the equalities in the H metric,
        # then repair any inequality violations with the slack LP.
        z_seed = (
            warm_start.z
            if warm_start is not None and warm_start.z.shape == (n,)
            else np.zeros(n)
        )
        x0 = ws.base_solve(np.concatenate([H @ z_seed, b_eq]))[:n]
        viol = h - G @ x0 if m else np.zeros(0)
        if float(viol.max(initial=0.0)) > _FEAS_TOL * h_scale:
            x0, cert, feasible = _phase1(H, A_eq, b_eq, G, h, x0)
            if not feasible:
                return QpSolution(
                    z=x0, lam_eq=np.zeros(me), lam_in=np.zeros(m),
                    status=INFEASIBLE, kkt_residual=float("inf"), certificate=cert,
                )

    x, lam_eq, lam_in, status, iters, rows = _active_set_loop(
        ws, H, g, A_eq, b_eq, G, h, x0, max_iter
    )
    kkt = _kkt_residual(H, g, A_eq, b_eq, G, h, x, lam_eq, lam_in)
    return QpSolution(
        z=x, lam_eq=lam_eq, lam_in=lam_in, status=status,
        kkt_residual=kkt, iterations=iters, active_set=tuple(rows),
    )
