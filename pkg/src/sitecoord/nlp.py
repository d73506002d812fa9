"""Multiple-shooting transcription and SQP solver for vehicle speed profiles.

One decision block per vehicle: states (t, v, a) at every grid node and one
jerk value per cell, linked by ERK4 shooting-gap equalities. On top of the
per-vehicle blocks the transcription can add either

  * pin equalities fixing conflict-zone entry/exit times to given values
    (the parametric "vehicle problem" used for schedule sensitivities), or
  * cross-vehicle timing inequalities realizing a fixed crossing order
    (the joint coordination problem).

Vehicle grids are uniform with extra nodes inserted at every conflict-zone
boundary on that vehicle's path, so all timing quantities live exactly on
grid nodes and the same grid is shared by every solve of the same scenario.

The SQP iteration uses exact constraint Jacobians through the ERK4 map, a
per-cell convexified Hessian of the objective, and an L1-merit backtracking
line search. Infeasible subproblems fall back to an elastic (slack) QP with
a large penalty; converging to a positive slack optimum reports the problem
as infeasible rather than grinding the iteration cap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import dynamics
from .dynamics import ControlSample, GridCell, SpatialState, SpeedSingularityError
from .qp import INFEASIBLE as QP_INFEASIBLE
from .qp import OPTIMAL as QP_OPTIMAL
from .qp import QpSolution, QuadraticProgram, restoration_step, solve_qp
from .site_model import MERGE_SPLIT, Scenario

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
NLP_INFEASIBLE = "infeasible"

KKT_TOL = 1e-6
EQ_TOL = 1e-8


@dataclass(frozen=True)
class Trajectory:
    """Solved per-vehicle profiles over the position grid."""

    vehicle_id: str
    grid: np.ndarray    # node positions, length M+1
    t: np.ndarray
    v: np.ndarray
    a: np.ndarray
    u: np.ndarray       # per cell, length M

    def time_at(self, p) -> np.ndarray:
        return np.interp(p, self.grid, self.t)

    def speed_at(self, p) -> np.ndarray:
        return np.interp(p, self.grid, self.v)


@dataclass
class VehicleBlock:
    """Variable layout bookkeeping for one vehicle inside the decision vector.

    Layout: [t0 v0 a0 u0 | t1 v1 a1 u1 | ... | t_M v_M a_M], size 4M + 3.
    """

    vehicle_id: str
    grid: np.ndarray
    kappa: np.ndarray
    offset: int

    @property
    def n_cells(self) -> int:
        return len(self.grid) - 1

    @property
    def n_vars(self) -> int:
        return 4 * self.n_cells + 3

    def idx_t(self, k: int) -> int:
        return self.offset + 4 * k

    def idx_v(self, k: int) -> int:
        return self.offset + 4 * k + 1

    def idx_a(self, k: int) -> int:
        return self.offset + 4 * k + 2

    def idx_u(self, k: int) -> int:
        return self.offset + 4 * k + 3

    def node_at(self, p: float) -> int:
        k = int(np.argmin(np.abs(self.grid - p)))
        if abs(self.grid[k] - p) > 1e-7:
            raise RuntimeError(
                f"position {p} is not a grid node for vehicle {self.vehicle_id}; "
                f"grid alignment should have guaranteed this"
            )
        return k

    def unpack(self, z: np.ndarray) -> Trajectory:
        m = self.n_cells
        block = z[self.offset : self.offset + self.n_vars]
        t = np.array([block[4 * k] for k in range(m + 1)])
        v = np.array([block[4 * k + 1] for k in range(m + 1)])
        a = np.array([block[4 * k + 2] for k in range(m + 1)])
        u = np.array([block[4 * k + 3] for k in range(m)])
        return Trajectory(self.vehicle_id, self.grid.copy(), t, v, a, u)

    def pack_into(self, z: np.ndarray, t, v, a, u) -> None:
        m = self.n_cells
        for k in range(m + 1):
            z[self.idx_t(k)] = t[k]
            z[self.idx_v(k)] = v[k]
            z[self.idx_a(k)] = a[k]
        for k in range(m):
            z[self.idx_u(k)] = u[k]


@dataclass
class TranscribedNlp:
    """A transcribed optimal control problem ready for the SQP solver."""

    scenario: Scenario
    vehicles: list[str]
    blocks: dict[str, VehicleBlock]
    n_vars: int
    # linear inequality rows (bounds and timing): L z >= r
    L: np.ndarray
    r: np.ndarray
    n_timing_rows: int
    # pin equalities: z[t-index] == value; boundaries of different zones can
    # coincide on a vehicle's path, in which case they share one pin
    pin_indices: list[int]
    pin_values: np.ndarray
    pin_labels: list[tuple[str, str, str]]   # (vehicle, zone, "in"/"out"), canonical
    pin_aliases: dict[tuple[str, str, str], int] = field(default_factory=dict)

    def describe(self) -> dict:
        """Constraint counts and Jacobian sparsity, for diagnostics."""
        m = sum(b.n_cells for b in self.blocks.values())
        n_eq = 3 * len(self.vehicles) + 3 * m + len(self.pin_indices)
        n_ell = m + len(self.vehicles)
        nnz_eq = 3 * 3 * len(self.vehicles) + m * 3 * 8 + len(self.pin_indices)
        return {
            "variables": self.n_vars,
            "equalities": n_eq,
            "linear_inequalities": int(self.L.shape[0]),
            "timing_rows": self.n_timing_rows,
            "ellipse_rows": n_ell,
            "jacobian_nnz_equalities": nnz_eq,
            "jacobian_density_equalities": nnz_eq / max(1, n_eq * self.n_vars),
        }

    # -- evaluation ---------------------------------------------------------

    def objective(self, z: np.ndarray) -> float:
        total = 0.0
        for vid in self.vehicles:
            b = self.blocks[vid]
            prm = self.scenario.vehicle_params[vid]
            for k in range(b.n_cells):
                total += dynamics.stage_cost(
                    SpatialState(z[b.idx_t(k)], z[b.idx_v(k)], z[b.idx_a(k)]),
                    ControlSample(z[b.idx_u(k)]),
                    b.grid[k + 1] - b.grid[k],
                    prm.weight_accel,
                    prm.weight_jerk,
                )
            total += dynamics.terminal_cost(z[b.idx_t(b.n_cells)], prm.weight_time)
        return total

    def gradient(self, z: np.ndarray) -> np.ndarray:
        g = np.zeros(self.n_vars)
        for vid in self.vehicles:
            b = self.blocks[vid]
            prm = self.scenario.vehicle_params[vid]
            P, Q = prm.weight_accel, prm.weight_jerk
            for k in range(b.n_cells):
                dp = b.grid[k + 1] - b.grid[k]
                v, a, u = z[b.idx_v(k)], z[b.idx_a(k)], z[b.idx_u(k)]
                g[b.idx_v(k)] += -(P * a * a + Q * u * u) * dp / (v * v)
                g[b.idx_a(k)] += 2.0 * P * a * dp / v
                g[b.idx_u(k)] += 2.0 * Q * u * dp / v
            g[b.idx_t(b.n_cells)] += prm.weight_time
        return g

    def convex_hessian(
        self,
        z: np.ndarray,
        lam_eq: np.ndarray | None = None,
        lam_ellipse: np.ndarray | None = None,
    ) -> np.ndarray:
        """Lagrangian Hessian projected to be positive semidefinite.

        The Lagrangian curvature decomposes into non-overlapping 4x4 blocks
        per cell (node state plus its control; the next node enters the
        shooting rows linearly), so the PSD projection is an eigenvalue
        clip per block. Multipliers default to zero, which reduces this to
        the exact objective curvature.
        """
        H = np.zeros((self.n_vars, self.n_vars))
        ell_idx = 0
        eq_row = 0
        for vid in self.vehicles:
            b = self.blocks[vid]
            prm = self.scenario.vehicle_params[vid]
            P, Q = prm.weight_accel, prm.weight_jerk
            eq_row += 3  # initial-state rows carry no curvature
            for k in range(b.n_cells):
                dp = b.grid[k + 1] - b.grid[k]
                v, a, u = z[b.idx_v(k)], z[b.idx_a(k)], z[b.idx_u(k)]
                blk = np.zeros((4, 4))  # (t, v, a, u) at node k
                blk[1:, 1:] = [
                    [2 * (P * a * a + Q * u * u) * dp / v**3, -2 * P * a * dp / v**2, -2 * Q * u * dp / v**2],
                    [-2 * P * a * dp / v**2, 2 * P * dp / v, 0.0],
                    [-2 * Q * u * dp / v**2, 0.0, 2 * Q * dp / v],
                ]
                if lam_eq is not None:
                    lam_cell = lam_eq[eq_row : eq_row + 3]
                    if np.any(lam_cell):
                        cell = GridCell(b.grid[k], b.grid[k + 1])
                        state = SpatialState(z[b.idx_t(k)], v, a)
                        Hf = dynamics.erk4_hessian(state, ControlSample(u), cell)
                        blk += np.einsum("m,mij->ij", lam_cell, Hf)
                if lam_ellipse is not None and lam_ellipse[ell_idx] > 0.0:
                    lam = lam_ellipse[ell_idx]
                    kap = b.kappa[k]
                    blk[1, 1] += lam * 12.0 * kap**2 * v**2 / prm.a_lat_max**2
                    blk[2, 2] += lam * 2.0 / prm.a_lon_max**2
                w, V = np.linalg.eigh(0.5 * (blk + blk.T))
                blk = (V * np.maximum(w, 0.0)) @ V.T
                i = b.idx_t(k)
                H[i : i + 4, i : i + 4] += blk
                eq_row += 3
                ell_idx += 1
            # terminal node: no cell block; only its ellipse row curvature
            if lam_ellipse is not None and lam_ellipse[ell_idx] > 0.0:
                k = b.n_cells
                lam = lam_ellipse[ell_idx]
                kap = b.kappa[k]
                v = z[b.idx_v(k)]
                H[b.idx_v(k), b.idx_v(k)] += lam * 12.0 * kap**2 * v**2 / prm.a_lat_max**2
                H[b.idx_a(k), b.idx_a(k)] += lam * 2.0 / prm.a_lon_max**2
            ell_idx += 1
        H[np.diag_indices_from(H)] += 1e-8
        return H

    def equality_constraints(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Residuals and Jacobian of all equality rows.

        Row order: per vehicle [initial state (3); shooting gaps (3 per
        cell)], then pin rows. Shooting residual per cell: next node state
        minus the ERK4 image of this node's state and control.
        """
        rows = 3 * len(self.vehicles) + 3 * sum(b.n_cells for b in self.blocks.values())
        rows += len(self.pin_indices)
        c = np.zeros(rows)
        J = np.zeros((rows, self.n_vars))
        r = 0
        for vid in self.vehicles:
            b = self.blocks[vid]
            prm = self.scenario.vehicle_params[vid]
            c[r] = z[b.idx_t(0)] - 0.0
            c[r + 1] = z[b.idx_v(0)] - prm.v_initial
            c[r + 2] = z[b.idx_a(0)] - prm.a_initial
            J[r, b.idx_t(0)] = 1.0
            J[r + 1, b.idx_v(0)] = 1.0
            J[r + 2, b.idx_a(0)] = 1.0
            r += 3
            for k in range(b.n_cells):
                cell = GridCell(b.grid[k], b.grid[k + 1])
                state = SpatialState(z[b.idx_t(k)], z[b.idx_v(k)], z[b.idx_a(k)])
                ctrl = ControlSample(z[b.idx_u(k)])
                nxt = dynamics.erk4_transition(state, ctrl, cell)
                A, Bc = dynamics.erk4_jacobian(state, ctrl, cell)
                i0 = b.idx_t(k)
                i1 = b.idx_t(k + 1)
                c[r : r + 3] = [
                    z[i1] - nxt.t,
                    z[i1 + 1] - nxt.v,
                    z[i1 + 2] - nxt.a,
                ]
                J[r : r + 3, i0 : i0 + 3] = -A
                J[r : r + 3, b.idx_u(k)] = -Bc
                J[r, i1] = 1.0
                J[r + 1, i1 + 1] = 1.0
                J[r + 2, i1 + 2] = 1.0
                r += 3
        for idx, val in zip(self.pin_indices, self.pin_values):
            c[r] = z[idx] - val
            J[r, idx] = 1.0
            r += 1
        return c, J

    def ellipse_constraints(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Acceleration-curvature ellipse residuals (>= 0) at every node."""
        rows = sum(b.n_cells + 1 for b in self.blocks.values())
        c = np.zeros(rows)
        J = np.zeros((rows, self.n_vars))
        r = 0
        for vid in self.vehicles:
            b = self.blocks[vid]
            prm = self.scenario.vehicle_params[vid]
            for k in range(b.n_cells + 1):
                v, a = z[b.idx_v(k)], z[b.idx_a(k)]
                kap = b.kappa[k]
                c[r] = 1.0 - (a / prm.a_lon_max) ** 2 - (kap * v * v / prm.a_lat_max) ** 2
                J[r, b.idx_v(k)] = -4.0 * kap**2 * v**3 / prm.a_lat_max**2
                J[r, b.idx_a(k)] = -2.0 * a / prm.a_lon_max**2
                r += 1
        return c, J

    def inequality_constraints(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """All inequality rows: linear (bounds, timing) then ellipse rows."""
        c_ell, J_ell = self.ellipse_constraints(z)
        if self.L.shape[0]:
            return np.concatenate([self.L @ z - self.r, c_ell]), np.vstack([self.L, J_ell])
        return c_ell, J_ell

    def lagrangian_hessian(self, z: np.ndarray, lam_eq: np.ndarray, lam_in: np.ndarray) -> np.ndarray:
        """Exact Hessian of the Lagrangian f - lam_eq'c_eq - lam_in'c_in.

        Includes second derivatives of the ERK4 shooting map and of the
        ellipse rows; needed by the schedule sensitivity analysis, not by
        the SQP iteration itself.
        """
        W = np.zeros((self.n_vars, self.n_vars))
        for vid in self.vehicles:
            b = self.blocks[vid]
            prm = self.scenario.vehicle_params[vid]
            P, Q = prm.weight_accel, prm.weight_jerk
            for k in range(b.n_cells):
                dp = b.grid[k + 1] - b.grid[k]
                v, a, u = z[b.idx_v(k)], z[b.idx_a(k)], z[b.idx_u(k)]
                blk = np.array(
                    [
                        [2 * (P * a * a + Q * u * u) * dp / v**3, -2 * P * a * dp / v**2, -2 * Q * u * dp / v**2],
                        [-2 * P * a * dp / v**2, 2 * P * dp / v, 0.0],
                        [-2 * Q * u * dp / v**2, 0.0, 2 * Q * dp / v],
                    ]
                )
                i = b.idx_v(k)
                W[i : i + 3, i : i + 3] += blk
        r = 0
        for vid in self.vehicles:
            b = self.blocks[vid]
            r += 3
            for k in range(b.n_cells):
                cell = GridCell(b.grid[k], b.grid[k + 1])
                state = SpatialState(z[b.idx_t(k)], z[b.idx_v(k)], z[b.idx_a(k)])
                ctrl = ControlSample(z[b.idx_u(k)])
                Hf = dynamics.erk4_hessian(state, ctrl, cell)
                lam = lam_eq[r : r + 3]
                # c = x_next - F(x, u): second derivative is -Hf on (x, u)
                contrib = np.einsum("m,mij->ij", lam, Hf)
                idx = [b.idx_t(k), b.idx_v(k), b.idx_a(k), b.idx_u(k)]
                W[np.ix_(idx, idx)] += contrib
                r += 3
        # ellipse rows sit after the linear rows in the inequality ordering
        n_lin = self.L.shape[0]
        r = n_lin
        for vid in self.vehicles:
            b = self.blocks[vid]
            prm = self.scenario.vehicle_params[vid]
            for k in range(b.n_cells + 1):
                lam = lam_in[r]
                if lam != 0.0:
                    kap = b.kappa[k]
                    v = z[b.idx_v(k)]
                    W[b.idx_v(k), b.idx_v(k)] -= lam * (-12.0 * kap**2 * v**2 / prm.a_lat_max**2)
                    W[b.idx_a(k), b.idx_a(k)] -= lam * (-2.0 / prm.a_lon_max**2)
                r += 1
        return W

    def default_guess(self) -> np.ndarray:
        """Constant-speed rollout at v_initial: t = p / v, a = u = 0.

        Satisfies the shooting and initial-state equalities exactly when the
        initial acceleration is zero, and all speed bounds by construction.
        """
        z = np.zeros(self.n_vars)
        for vid in self.vehicles:
            b = self.blocks[vid]
            prm = self.scenario.vehicle_params[vid]
            t = b.grid / prm.v_initial
            v = np.full(len(b.grid), prm.v_initial)
            a = np.zeros(len(b.grid))
            u = np.zeros(b.n_cells)
            if prm.a_initial != 0.0:
                a[0] = prm.a_initial
            b.pack_into(z, t, v, a, u)
        return z


@dataclass
class NlpSolution:
    status: str
    objective: float
    kkt_residual: float
    iterations: int
    trajectories: dict[str, Trajectory]
    z: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray
    multipliers: dict[str, np.ndarray]
    active_set: tuple[int, ...] = ()
    max_violation: float = 0.0
    restoration_residuals: np.ndarray | None = None

    def pin_multipliers(self, nlp: TranscribedNlp) -> np.ndarray:
        n_pins = len(nlp.pin_indices)
        return self.lam_eq[-n_pins:] if n_pins else np.zeros(0)


def _time_row(block: VehicleBlock, q: float) -> list[tuple[int, float]]:
    """Coefficients expressing t(q) linearly in the node time variables."""
    grid = block.grid
    q = float(np.clip(q, grid[0], grid[-1]))
    k = int(np.searchsorted(grid, q))
    if k < len(grid) and abs(grid[k] - q) < 1e-9:
        return [(block.idx_t(k), 1.0)]
    if k > 0 and abs(grid[k - 1] - q) < 1e-9:
        return [(block.idx_t(k - 1), 1.0)]
    k = max(1, min(k, len(grid) - 1))
    theta = (q - grid[k - 1]) / (grid[k] - grid[k - 1])
    return [(block.idx_t(k - 1), 1.0 - theta), (block.idx_t(k), theta)]


def transcribe(
    scenario: Scenario,
    vehicles: Sequence[str] | None = None,
    coupling: Mapping[str, Sequence[str]] | None = None,
    pins: Mapping[str, Mapping[str, tuple[float, float]]] | None = None,
) -> TranscribedNlp:
    """Build the NLP for a subset of vehicles.

    `coupling` maps zone ids to a crossing order (realizes the fixed-order
    coordination problem); `pins` maps vehicle -> zone -> (t_in, t_out)
    equalities (realizes the parametric vehicle problem). The two are
    mutually exclusive here: schedule sensitivities are only ever needed for
    single-vehicle problems.
    """
    if coupling is not None and pins is not None:
        raise ValueError("coupling and pins are mutually exclusive")
    vehicles = list(vehicles) if vehicles is not None else scenario.vehicle_ids
    if not vehicles:
        raise ValueError("need at least one vehicle")
    for vid in vehicles:
        if vid not in scenario.paths:
            raise ValueError(f"unknown vehicle {vid!r}")

    blocks: dict[str, VehicleBlock] = {}
    offset = 0
    for vid in vehicles:
        path = scenario.paths[vid]
        aligned = []
        for z in scenario.zones_for(vid):
            m = z.member(vid)
            aligned += [m.p_in, m.p_out]
        grid = dynamics.build_grid(path.length, scenario.grid_n, aligned)
        blocks[vid] = VehicleBlock(
            vehicle_id=vid,
            grid=grid,
            kappa=path.curvature_at(grid),
            offset=offset,
        )
        offset += blocks[vid].n_vars
    n_vars = offset

    # Linear bound rows: v_min <= v <= v_max and a <= a_lon_max at all nodes.
    # The ellipse row also implies a >= -a_lon_max; stating that box bound
    # explicitly matters because the ellipse linearization degenerates in a
    # at a = 0 and would otherwise leave acceleration unbounded in the QP.
    lin_rows: list[list[tuple[int, float]]] = []
    lin_rhs: list[float] = []
    for vid in vehicles:
        b = blocks[vid]
        prm = scenario.vehicle_params[vid]
        for k in range(b.n_cells + 1):
            lin_rows.append([(b.idx_v(k), 1.0)])
            lin_rhs.append(prm.v_min)
            lin_rows.append([(b.idx_v(k), -1.0)])
            lin_rhs.append(-prm.v_max)
            lin_rows.append([(b.idx_a(k), -1.0)])
            lin_rhs.append(-prm.a_lon_max)
            lin_rows.append([(b.idx_a(k), 1.0)])
            lin_rhs.append(-prm.a_lon_max)

    n_timing = 0
    if coupling is not None:
        zones_by_id = {z.zone_id: z for z in scenario.zones}
        for zone_id in sorted(coupling):
            zone = zones_by_id[zone_id]
            order = [vid for vid in coupling[zone_id] if vid in blocks]
            if sorted(order) != sorted(v for v in zone.vehicle_ids() if v in blocks):
                raise ValueError(f"order for zone {zone_id} must permute its members")
            for lead, follow in zip(order[:-1], order[1:]):
                bl, bf = blocks[lead], blocks[follow]
                ml, mf = zone.member(lead), zone.member(follow)
                if zone.kind == MERGE_SPLIT:
                    dt, c = mf.time_headway, mf.distance_offset
                    # Constrain the interpolated time-gap curve at all of its
                    # breakpoints: leader nodes in the zone plus the images
                    # of follower nodes; the piecewise-linear gap audited
                    # later is then bounded by these rows everywhere.
                    ps = [float(p) for p in bl.grid if ml.p_in - 1e-9 <= p <= ml.p_out + 1e-9]
                    for q in bf.grid:
                        p = q - mf.p_in - c + ml.p_in
                        if ml.p_in + 1e-9 < p < ml.p_out - 1e-9:
                            ps.append(float(p))
                    ps = sorted(set(np.round(np.array(ps), 9)))
                    for p in ps:
                        row = [(i, -w) for i, w in _time_row(bl, p)]
                        row += _time_row(bf, p - ml.p_in + mf.p_in + c)
                        lin_rows.append(row)
                        lin_rhs.append(dt)
                        n_timing += 1
                else:
                    row = [(i, -w) for i, w in _time_row(bl, ml.p_out)]
                    row += _time_row(bf, mf.p_in)
                    lin_rows.append(row)
                    lin_rhs.append(0.0)
                    n_timing += 1

    L = np.zeros((len(lin_rows), n_vars))
    for i, row in enumerate(lin_rows):
        for j, w in row:
            L[i, j] += w
    r = np.array(lin_rhs)

    pin_indices: list[int] = []
    pin_values: list[float] = []
    pin_labels: list[tuple[str, str, str]] = []
    pin_aliases: dict[tuple[str, str, str], int] = {}
    if pins is not None:
        by_index: dict[int, int] = {}
        for vid in vehicles:
            if vid not in pins:
                continue
            b = blocks[vid]
            for zone in scenario.zones_for(vid):
                if zone.zone_id not in pins[vid]:
                    continue
                m = zone.member(vid)
                for which, q, val in (
                    ("in", m.p_in, pins[vid][zone.zone_id][0]),
                    ("out", m.p_out, pins[vid][zone.zone_id][1]),
                ):
                    idx = b.idx_t(b.node_at(q))
                    label = (vid, zone.zone_id, which)
                    if idx in by_index:
                        # coinciding boundaries share one pin; values must agree
                        k = by_index[idx]
                        if abs(pin_values[k] - float(val)) > 1e-9:
                            raise ValueError(
                                f"pins for {label} and {pin_labels[k]} target the same "
                                f"grid node with different times"
                            )
                        pin_aliases[label] = k
                        continue
                    by_index[idx] = len(pin_indices)
                    pin_aliases[label] = len(pin_indices)
                    pin_indices.append(idx)
                    pin_values.append(float(val))
                    pin_labels.append(label)

    return TranscribedNlp(
        scenario=scenario,
        vehicles=vehicles,
        blocks=blocks,
        n_vars=n_vars,
        L=L,
        r=r,
        n_timing_rows=n_timing,
        pin_indices=pin_indices,
        pin_values=np.array(pin_values),
        pin_labels=pin_labels,
        pin_aliases=pin_aliases,
    )


def initial_guess_from(scenario: Scenario, vehicle: str) -> np.ndarray:
    """Constant-speed guess for a single-vehicle problem."""
    return transcribe(scenario, [vehicle]).default_guess()


def _merit(nlp: TranscribedNlp, z: np.ndarray, mu: float) -> tuple[float, float]:
    """L1 merit value and total infeasibility; inf when evaluation blows up."""
    try:
        f = nlp.objective(z)
        c_eq, _ = nlp.equality_constraints(z)
        c_in, _ = nlp.inequality_constraints(z)
    except SpeedSingularityError:
        return float("inf"), float("inf")
    theta = float(np.abs(c_eq).sum() + np.maximum(0.0, -c_in).sum())
    return f + mu * theta, theta


def _soc_step(nlp: TranscribedNlp, z: np.ndarray, d: np.ndarray) -> np.ndarray | None:
    """Second-order correction: d plus a least-norm retraction of the
    constraint residuals evaluated at the trial point z + d."""
    try:
        c_eq, _ = nlp.equality_constraints(z + d)
        c_in, _ = nlp.inequality_constraints(z + d)
    except SpeedSingularityError:
        return None
    _, J_eq = nlp.equality_constraints(z)
    _, J_in = nlp.inequality_constraints(z)
    viol = np.nonzero(c_in < -1e-10)[0]
    J = np.vstack([J_eq, J_in[viol]]) if viol.size else J_eq
    r = np.concatenate([-c_eq, -c_in[viol]]) if viol.size else -c_eq
    if J.shape[0] == 0:
        return None
    try:
        JJt = J @ J.T
        JJt[np.diag_indices_from(JJt)] += 1e-12
        delta = J.T @ np.linalg.solve(JJt, r)
    except np.linalg.LinAlgError:
        return None
    return d + delta


def _kkt_at(nlp: TranscribedNlp, z: np.ndarray, lam_eq: np.ndarray, lam_in: np.ndarray) -> float:
    """Full KKT residual (stationarity, feasibility, complementarity)."""
    try:
        grad = nlp.gradient(z)
        c_eq, J_eq = nlp.equality_constraints(z)
        c_in, G = nlp.inequality_constraints(z)
    except SpeedSingularityError:
        return float("inf")
    stat = grad - J_eq.T @ lam_eq - G.T @ lam_in
    return max(
        float(np.abs(stat).max(initial=0.0)),
        float(np.abs(lam_in * c_in).max(initial=0.0)),
        float(max(0.0, -c_in.min(initial=0.0))),
        float(np.abs(c_eq).max(initial=0.0)),
    )




def _refit_multipliers(grad, J_eq, G, c_in, lam_eq, lam_in):
    """Least-squares polish of the multipliers at the final iterate.

    The QP duals carry noise of the order of the termination tolerance;
    refitting them against the stationarity condition (active rows only)
    sharpens the value-function gradients read off the pin multipliers.
    Returns None when the refit does not improve stationarity.
    """
    active = np.nonzero((lam_in > 1e-12) | (c_in < 1e-9))[0]
    cols = J_eq.T if J_eq.size else np.zeros((grad.size, 0))
    if active.size:
        cols = np.hstack([cols, G[active].T])
    if cols.shape[1] == 0:
        return None
    sol, *_ = np.linalg.lstsq(cols, grad, rcond=None)
    me = J_eq.shape[0]
    new_eq = sol[:me]
    new_in = np.zeros_like(lam_in)
    new_in[active] = np.maximum(sol[me:], 0.0)
    old_stat = grad - J_eq.T @ lam_eq - G.T @ lam_in
    new_stat = grad - J_eq.T @ new_eq - G.T @ new_in
    if float(np.abs(new_stat).max(initial=0.0)) < float(np.abs(old_stat).max(initial=0.0)):
        return new_eq, new_in
    return None


def solve_sqp(
    nlp: TranscribedNlp,
    initial_guess: np.ndarray | NlpSolution | None = None,
    kkt_tol: float = KKT_TOL,
    max_iter: int = 200,
) -> NlpSolution:
    """SQP with exact Jacobians, convexified Hessian and L1-merit line search.

    Converged means: KKT residual <= kkt_tol, equality defects <= 1e-8 and
    inequality violations <= 1e-6, with multipliers taken from the last QP.
    """
    lam_eq = np.zeros(0)
    lam_in = np.zeros(0)
    warm: QpSolution | None = None
    seeded = False
    if isinstance(initial_guess, NlpSolution):
        seeded = True
        z = initial_guess.z.copy()
        lam_eq = initial_guess.lam_eq.copy()
        lam_in = initial_guess.lam_in.copy()
        if initial_guess.active_set:
            warm = QpSolution(
                z=np.zeros(nlp.n_vars), lam_eq=np.zeros(0), lam_in=np.zeros(0),
                status=QP_OPTIMAL, kkt_residual=0.0,
                active_set=initial_guess.active_set,
            )
    elif initial_guess is not None:
        z = np.asarray(initial_guess, dtype=float).copy()
    else:
        z = nlp.default_guess()
    if z.shape != (nlp.n_vars,):
        raise ValueError(f"initial guess has {z.shape}, expected ({nlp.n_vars},)")

    mu = 10.0
    restoring = 0
    prev_slack = float("inf")
    status = MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        f = nlp.objective(z)
        grad = nlp.gradient(z)
        c_eq, J_eq = nlp.equality_constraints(z)
        c_in, G = nlp.inequality_constraints(z)
        if lam_eq.shape != c_eq.shape:
            lam_eq = np.zeros_like(c_eq)
            seeded = False
        if lam_in.shape != c_in.shape:
            lam_in = np.zeros_like(c_in)
            seeded = False

        stat = grad - J_eq.T @ lam_eq - G.T @ lam_in
        kkt = max(
            float(np.abs(stat).max(initial=0.0)),
            float(np.abs(lam_in * c_in).max(initial=0.0)),
            float(max(0.0, -c_in.min(initial=0.0))),
            float(np.abs(c_eq).max(initial=0.0)),
        )
        eq_norm = float(np.abs(c_eq).max(initial=0.0))
        viol = float(max(0.0, -c_in.min(initial=0.0)))
        if kkt <= kkt_tol and eq_norm <= EQ_TOL and viol <= 1e-6 and (it > 1 or seeded):
            status = OPTIMAL
            break

        H = nlp.convex_hessian(z, lam_eq, lam_in[nlp.L.shape[0] :])
        qp = QuadraticProgram(H=H, g=grad, A_eq=J_eq, b_eq=-c_eq, A_in=G, b_in=-c_in)
        sol = solve_qp(qp, warm_start=warm)
        if sol.status == QP_INFEASIBLE:
            # Feasibility restoration: take the exact-penalty (slack LP) step
            # minimizing the linearized violation. If that floor stops
            # dropping across relinearizations, the problem is infeasible.
            d, slack = restoration_step(J_eq, -c_eq, G, -c_in)
            restoring += 1
            log.debug("iter %d: restoration step, violation floor %.3e", it, slack)
            if restoring >= 2 and slack > 1e-6 and slack >= prev_slack * (1.0 - 1e-8) - 1e-12:
                status = NLP_INFEASIBLE
                lam_eq = np.zeros_like(c_eq)
                lam_in = np.zeros_like(c_in)
                break
            prev_slack = slack
            warm = None
            # restoration steps are judged on infeasibility decrease alone
            theta0 = float(np.abs(c_eq).sum() + np.maximum(0.0, -c_in).sum())
            alpha = 1.0
            moved = False
            while alpha >= 1e-10:
                _, theta_trial = _merit(nlp, z + alpha * d, 0.0)
                if theta_trial <= theta0 - 1e-4 * alpha * max(theta0 - slack, 0.0):
                    z = z + alpha * d
                    moved = True
                    break
                alpha *= 0.5
            if not moved and slack > 1e-6:
                status = NLP_INFEASIBLE
                break
            continue
        else:
            restoring = 0
            prev_slack = float("inf")
            d = sol.z
            warm = sol
            new_lam_eq = sol.lam_eq
            new_lam_in = sol.lam_in

        dual_scale = max(
            float(np.abs(new_lam_eq).max(initial=0.0)),
            float(np.abs(new_lam_in).max(initial=0.0)),
        )
        mu = max(mu, 1.5 * dual_scale + 1.0)
        phi0, theta0 = _merit(nlp, z, mu)
        descent = float(grad @ d) - mu * theta0
        alpha = 1.0
        accepted = False
        full_step = False
        while alpha >= 1e-10:
            phi, _ = _merit(nlp, z + alpha * d, mu)
            if phi <= phi0 + 1e-4 * alpha * descent:
                accepted = True
                break
            if alpha == 1.0:
                # Second-order correction: retract the quadratic constraint
                # drift of the full step before judging it (Maratos effect).
                d_soc = _soc_step(nlp, z, d)
                if d_soc is not None:
                    phi_soc, _ = _merit(nlp, z + d_soc, mu)
                    if phi_soc <= phi0 + 1e-4 * descent:
                        d = d_soc
                        accepted = True
                        break
                # Fallback: accept the full step whenever it strictly
                # reduces the KKT residual under the new duals.
                if _kkt_at(nlp, z + d, new_lam_eq, new_lam_in) <= 0.9 * kkt:
                    accepted = True
                    full_step = True
                    break
            alpha *= 0.5
        if not accepted:
            log.debug("iter %d: line search stalled (|d|=%.2e)", it, np.abs(d).max(initial=0.0))
            mu *= 10.0
            if mu > 1e14:
                status = MAX_ITER
                break
            continue
        z = z + alpha * d
        if alpha == 1.0 or full_step:
            lam_eq = new_lam_eq
            lam_in = new_lam_in
        else:
            lam_eq = lam_eq + alpha * (new_lam_eq - lam_eq)
            lam_in = np.maximum(0.0, lam_in + alpha * (new_lam_in - lam_in))
        log.debug("iter %d: alpha=%.3g f=%.6f kkt=%.2e theta=%.2e", it, alpha, f, kkt, theta0)

    c_eq, J_eq = nlp.equality_constraints(z)
    c_in, G = nlp.inequality_constraints(z)
    if status == OPTIMAL:
        refit = _refit_multipliers(nlp.gradient(z), J_eq, G, c_in, lam_eq, lam_in)
        if refit is not None:
            lam_eq, lam_in = refit
    restoration = np.concatenate([np.abs(c_eq), np.maximum(0.0, -c_in)])
    trajectories = {vid: nlp.blocks[vid].unpack(z) for vid in nlp.vehicles}
    n_pins = len(nlp.pin_indices)
    multipliers = {
        "equalities": lam_eq,
        "pins": lam_eq[-n_pins:] if n_pins else np.zeros(0),
        "linear": lam_in[: nlp.L.shape[0]],
        "ellipse": lam_in[nlp.L.shape[0] :],
    }
    return NlpSolution(
        status=status,
        objective=float(nlp.objective(z)),
        kkt_residual=float(kkt) if it else float("inf"),
        iterations=it,
        trajectories=trajectories,
        z=z,
        lam_eq=lam_eq,
        lam_in=lam_in,
        multipliers=multipliers,
        active_set=warm.active_set if warm is not None else (),
        max_violation=float(restoration.max(initial=0.0)),
        restoration_residuals=restoration if status == NLP_INFEASIBLE else None,
    )


def trajectory_objective(traj: Trajectory, params) -> float:
    """Re-evaluate the objective from a trajectory (consistency checks)."""
    total = 0.0
    for k in range(len(traj.u)):
        total += dynamics.stage_cost(
            SpatialState(traj.t[k], traj.v[k], traj.a[k]),
            ControlSample(traj.u[k]),
            traj.grid[k + 1] - traj.grid[k],
            params.weight_accel,
            params.weight_jerk,
        )
    return total + dynamics.terminal_cost(traj.t[-1], params.weight_time)
