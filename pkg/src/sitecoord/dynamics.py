"""Spatial-domain triple-integrator vehicle model.

Position along the path is the independent variable, so a vehicle state is
(t, v, a): elapsed time, speed and longitudinal acceleration at a position.
The control is longitudinal jerk, held constant over each grid cell. The
right-hand side of the spatial ODE is (1/v, a/v, u/v), which is singular at
standstill; all operations require strictly positive speed.

All functions are pure. Derivatives of the ERK4 transition are hand-coded
(first and second order) because both the SQP solver and the schedule
sensitivity analysis need them exactly, not by finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Integrator guard: below this speed an intermediate ERK4 stage is considered
# to have hit the model singularity. Solver bounds keep v >= v_min >= 1 m/s;
# this only catches pathological dips during line search.
V_FLOOR = 0.1


class SpeedSingularityError(ArithmeticError):
    """Speed dropped below the integrable floor during a transition."""

    def __init__(self, position: float, speed: float):
        super().__init__(f"speed {speed:.4f} m/s below floor {V_FLOOR} at position {position:.3f} m")
        self.position = position
        self.speed = speed


@dataclass(frozen=True)
class SpatialState:
    t: float
    v: float
    a: float

    def as_array(self) -> np.ndarray:
        return np.array([self.t, self.v, self.a])


@dataclass(frozen=True)
class ControlSample:
    """Longitudinal jerk, zero-order hold over one grid cell."""

    u: float


@dataclass(frozen=True)
class GridCell:
    p_start: float
    p_end: float
    # curvature at the ERK4 stage positions (start, midpoint, end); the
    # triple-integrator RHS does not consume these, constraint evaluation does
    curvature_samples: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.p_end > self.p_start:
            raise ValueError(f"empty grid cell [{self.p_start}, {self.p_end}]")

    @property
    def width(self) -> float:
        return self.p_end - self.p_start


def _rhs(x: np.ndarray, u: float, position: float) -> np.ndarray:
    v = x[1]
    if v < V_FLOOR:
        raise SpeedSingularityError(position, v)
    return np.array([1.0 / v, x[2] / v, u / v])


def erk4_transition(state: SpatialState, control: ControlSample, cell: GridCell) -> SpatialState:
    """One explicit RK4 step of the spatial dynamics across a grid cell."""
    h = cell.width
    x = state.as_array()
    u = control.u
    k1 = _rhs(x, u, cell.p_start)
    k2 = _rhs(x + 0.5 * h * k1, u, cell.p_start + 0.5 * h)
    k3 = _rhs(x + 0.5 * h * k2, u, cell.p_start + 0.5 * h)
    k4 = _rhs(x + h * k3, u, cell.p_end)
    xn = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return SpatialState(t=float(xn[0]), v=float(xn[1]), a=float(xn[2]))


def _rhs_jac(x: np.ndarray, u: float) -> tuple[np.ndarray, np.ndarray]:
    """Jacobian of the RHS w.r.t. state (3x3) and control (3,)."""
    v, a = x[1], x[2]
    inv = 1.0 / v
    inv2 = inv * inv
    fx = np.array(
        [
            [0.0, -inv2, 0.0],
            [0.0, -a * inv2, inv],
            [0.0, -u * inv2, 0.0],
        ]
    )
    fu = np.array([0.0, 0.0, inv])
    return fx, fu


def erk4_jacobian(
    state: SpatialState, control: ControlSample, cell: GridCell
) -> tuple[np.ndarray, np.ndarray]:
    """d(next state)/d(state) and d(next state)/d(control) of the ERK4 step.

    Chain rule through the four stages; exact for the discrete map (not an
    approximation of the continuous sensitivity).
    """
    h = cell.width
    x = state.as_array()
    u = control.u
    eye = np.eye(3)

    k1 = _rhs(x, u, cell.p_start)
    A1, b1 = _rhs_jac(x, u)
    D1 = A1.copy()          # dk1/dx
    e1 = b1.copy()          # dk1/du

    x2 = x + 0.5 * h * k1
    k2 = _rhs(x2, u, cell.p_start + 0.5 * h)
    A2, b2 = _rhs_jac(x2, u)
    D2 = A2 @ (eye + 0.5 * h * D1)
    e2 = A2 @ (0.5 * h * e1) + b2

    x3 = x + 0.5 * h * k2
    k3 = _rhs(x3, u, cell.p_start + 0.5 * h)
    A3, b3 = _rhs_jac(x3, u)
    D3 = A3 @ (eye + 0.5 * h * D2)
    e3 = A3 @ (0.5 * h * e2) + b3

    x4 = x + h * k3
    _rhs(x4, u, cell.p_end)
    A4, b4 = _rhs_jac(x4, u)
    D4 = A4 @ (eye + h * D3)
    e4 = A4 @ (h * e3) + b4

    dx = eye + (h / 6.0) * (D1 + 2.0 * D2 + 2.0 * D3 + D4)
    du = (h / 6.0) * (e1 + 2.0 * e2 + 2.0 * e3 + e4)
    return dx, du


def _rhs_hess(x: np.ndarray, u: float) -> np.ndarray:
    """Hessians of the three RHS components w.r.t. w = (t, v, a, u).

    Returns shape (3, 4, 4). Only v, a, u couple; t never appears.
    """
    v, a = x[1], x[2]
    inv2 = 1.0 / (v * v)
    inv3 = inv2 / v
    H = np.zeros((3, 4, 4))
    H[0, 1, 1] = 2.0 * inv3
    H[1, 1, 1] = 2.0 * a * inv3
    H[1, 1, 2] = H[1, 2, 1] = -inv2
    H[2, 1, 1] = 2.0 * u * inv3
    H[2, 1, 3] = H[2, 3, 1] = -inv2
    return H


def erk4_hessian(state: SpatialState, control: ControlSample, cell: GridCell) -> np.ndarray:
    """Second derivatives of the ERK4 map w.r.t. w = (t, v, a, u).

    Returns shape (3, 4, 4): one symmetric 4x4 Hessian per output component
    (t+, v+, a+). Used to assemble the exact Lagrangian Hessian for the
    schedule sensitivity analysis.
    """
    h = cell.width
    x = state.as_array()
    u = control.u
    E = np.array([0.0, 0.0, 0.0, 1.0])  # du/dw
    P = np.zeros((3, 4))
    P[:, :3] = np.eye(3)                # dx/dw

    def stage(xs: np.ndarray, Ds: np.ndarray, Ts: np.ndarray, position: float):
        """Value, w-Jacobian and w-Hessians of f(xs(w), u(w)) for one stage.

        Ds: (3, 4) Jacobian of the stage state w.r.t. w.
        Ts: (3, 4, 4) Hessians of the stage state components w.r.t. w.
        """
        k = _rhs(xs, u, position)
        fx, fu = _rhs_jac(xs, u)
        G = fx @ Ds + np.outer(fu, E)
        J = np.vstack([Ds, E[None, :]])          # (4, 4): d(xs, u)/dw
        Hf = _rhs_hess(xs, u)
        K = np.einsum("qi,mqr,rj->mij", J, Hf, J)
        K += np.einsum("mq,qij->mij", fx, Ts)
        return k, G, K

    T0 = np.zeros((3, 4, 4))
    k1, G1, K1 = stage(x, P, T0, cell.p_start)
    x2 = x + 0.5 * h * k1
    k2, G2, K2 = stage(x2, P + 0.5 * h * G1, 0.5 * h * K1, cell.p_start + 0.5 * h)
    x3 = x + 0.5 * h * k2
    k3, G3, K3 = stage(x3, P + 0.5 * h * G2, 0.5 * h * K2, cell.p_start + 0.5 * h)
    x4 = x + h * k3
    _, _, K4 = stage(x4, P + h * G3, h * K3, cell.p_end)

    return (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)


# ---------------------------------------------------------------------------
# Path constraints and cost


def path_constraints(
    state: SpatialState, control: ControlSample, params, curvature: float
) -> np.ndarray:
    """Residuals of the stage inequality constraints; >= 0 means feasible.

    Order: [v - v_min, v_max - v, a_lon_max - a, acceleration ellipse].
    The ellipse couples longitudinal acceleration with the lateral
    acceleration kappa*v^2 demanded by road curvature.
    """
    del control  # jerk is unconstrained in this model
    v, a = state.v, state.a
    ellipse = (
        1.0
        - (a / params.a_lon_max) ** 2
        - (curvature * v * v / params.a_lat_max) ** 2
    )
    return np.array([v - params.v_min, params.v_max - v, params.a_lon_max - a, ellipse])


def path_constraint_jacobian(state: SpatialState, params, curvature: float) -> np.ndarray:
    """d(residuals)/d(t, v, a, u); rows match path_constraints."""
    v, a = state.v, state.a
    J = np.zeros((4, 4))
    J[0, 1] = 1.0
    J[1, 1] = -1.0
    J[2, 2] = -1.0
    J[3, 1] = -4.0 * curvature**2 * v**3 / params.a_lat_max**2
    J[3, 2] = -2.0 * a / params.a_lon_max**2
    return J


def ellipse_hessian(state: SpatialState, params, curvature: float) -> np.ndarray:
    """Hessian of the ellipse residual w.r.t. (t, v, a, u)."""
    H = np.zeros((4, 4))
    H[1, 1] = -12.0 * curvature**2 * state.v**2 / params.a_lat_max**2
    H[2, 2] = -2.0 / params.a_lon_max**2
    return H


def stage_cost(state: SpatialState, control: ControlSample, dp: float, weight_accel: float, weight_jerk: float) -> float:
    """Forward-Euler cost increment over one cell: (P a^2 + Q u^2) dp / v."""
    return (weight_accel * state.a**2 + weight_jerk * control.u**2) * dp / state.v


def terminal_cost(t_final: float, weight_time: float) -> float:
    return weight_time * t_final


def curvature_speed_limit(curvature, a_lat_max: float, v_max: float) -> np.ndarray:
    """Speed envelope sqrt(a_lat_max / kappa) from the ellipse at a = 0."""
    kappa = np.maximum(np.asarray(curvature, dtype=float), 1e-12)
    return np.minimum(v_max, np.sqrt(a_lat_max / kappa))


# ---------------------------------------------------------------------------
# Grid construction


def build_grid(length: float, n_cells: int, aligned_positions=()) -> np.ndarray:
    """Node positions of a uniform grid refined to hit given positions exactly.

    Timing constraints act on the times at conflict-zone boundaries, so those
    positions must be grid nodes, not interpolated between them. Extra nodes
    are inserted into the uniform base grid; nodes closer than 1e-9 collapse
    onto the required position.
    """
    if n_cells < 2:
        raise ValueError("need at least 2 grid cells")
    nodes = list(np.linspace(0.0, length, n_cells + 1))
    for q in sorted(set(float(q) for q in aligned_positions)):
        if not 0.0 <= q <= length:
            raise ValueError(f"aligned position {q} outside [0, {length}]")
        i = int(np.searchsorted(nodes, q))
        if i > 0 and abs(nodes[i - 1] - q) < 1e-9:
            nodes[i - 1] = q
        elif i < len(nodes) and abs(nodes[i] - q) < 1e-9:
            nodes[i] = q
        else:
            nodes.insert(i, q)
    return np.array(nodes)
