"""Schedule sensitivities of the single-vehicle value function.

For one vehicle, pin its conflict-zone entry/exit times to a reference
schedule and solve the resulting parametric problem. The optimal value V
as a function of the pinned times then has

  * gradient: the pin-constraint multipliers (envelope theorem), and
  * Hessian: one factorized-KKT solve per pinned time (implicit function
    theorem on the KKT system with the active set held fixed).

The Hessian uses the exact Lagrangian curvature, including second
derivatives of the integrator map; the SQP solver itself never needs those.
A convexified (eigenvalue-clipped) copy of the Hessian is carried alongside
the raw one because the crossing-order search requires a convex objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .nlp import NlpSolution, OPTIMAL, solve_sqp, transcribe
from .site_model import Scenario

log = logging.getLogger(__name__)

PSD_CLIP = 1e-8
DEGENERACY_TOL = 1e-8


class SensitivityError(RuntimeError):
    """The vehicle problem could not be differentiated at this schedule."""


@dataclass(frozen=True)
class ZoneSlot:
    zone_id: str
    t_in: float
    t_out: float


@dataclass
class TimeSlotSchedule:
    """Conflict-zone entry/exit times for every vehicle.

    Per vehicle the slots are ordered by entry position along its path; the
    flattened parameter vector for one vehicle is [t_in, t_out] per zone in
    that order.
    """

    slots: dict[str, list[ZoneSlot]]

    def for_vehicle(self, vehicle_id: str) -> list[ZoneSlot]:
        return self.slots.get(vehicle_id, [])

    def as_pins(self, vehicle_id: str) -> dict[str, tuple[float, float]]:
        return {s.zone_id: (s.t_in, s.t_out) for s in self.for_vehicle(vehicle_id)}

    def vector(self, vehicle_id: str) -> np.ndarray:
        out = []
        for s in self.for_vehicle(vehicle_id):
            out += [s.t_in, s.t_out]
        return np.array(out)

    def entry(self, vehicle_id: str, zone_id: str) -> ZoneSlot:
        for s in self.for_vehicle(vehicle_id):
            if s.zone_id == zone_id:
                return s
        raise KeyError(f"no slot for vehicle {vehicle_id!r} in zone {zone_id!r}")

    def replaced(self, vehicle_id: str, values: np.ndarray) -> "TimeSlotSchedule":
        """Copy with one vehicle's flattened slot vector swapped out."""
        new = {vid: list(slots) for vid, slots in self.slots.items()}
        old = new[vehicle_id]
        if values.shape != (2 * len(old),):
            raise ValueError("slot vector length mismatch")
        new[vehicle_id] = [
            ZoneSlot(s.zone_id, float(values[2 * i]), float(values[2 * i + 1]))
            for i, s in enumerate(old)
        ]
        return TimeSlotSchedule(new)

    def validate(self, scenario: Scenario) -> None:
        for vid, slots in self.slots.items():
            zones = scenario.zones_for(vid)
            order = [z.zone_id for z in zones]
            if [s.zone_id for s in slots] != order:
                raise ValueError(
                    f"slots for {vid} must cover its zones in path order {order}"
                )
            prm = scenario.vehicle_params[vid]
            for s, z in zip(slots, zones):
                m = z.member(vid)
                min_transit = (m.p_out - m.p_in) / prm.v_max
                if not s.t_in < s.t_out:
                    raise ValueError(f"{vid}/{s.zone_id}: t_in must be < t_out")
                if s.t_out - s.t_in < min_transit - 1e-9:
                    raise ValueError(
                        f"{vid}/{s.zone_id}: slot shorter than the v_max transit time"
                    )


def schedule_from_trajectories(scenario: Scenario, trajectories: dict) -> TimeSlotSchedule:
    """Read zone entry/exit times off solved trajectories (grid-aligned)."""
    slots: dict[str, list[ZoneSlot]] = {}
    for vid, traj in trajectories.items():
        slots[vid] = []
        for zone in scenario.zones_for(vid):
            m = zone.member(vid)
            slots[vid].append(
                ZoneSlot(zone.zone_id, float(traj.time_at(m.p_in)), float(traj.time_at(m.p_out)))
            )
    return TimeSlotSchedule(slots)


@dataclass
class ValueExpansion:
    """Second-order model of one vehicle's value function around T0.

    Parameters are the vehicle's distinct pinned times along its path: when
    two zone boundaries coincide at one position they share a parameter,
    and `aliases` maps every (zone_id, "in"/"out") pair to its column.
    """

    vehicle_id: str
    reference: np.ndarray                  # T0 values, one per parameter
    labels: list[tuple[str, str]]          # canonical (zone_id, "in"/"out")
    value: float
    gradient: np.ndarray
    hessian: np.ndarray                    # raw, symmetrized
    psd_projected_hessian: np.ndarray      # eigenvalues clipped at PSD_CLIP
    solution: NlpSolution | None = None
    aliases: dict[tuple[str, str], int] | None = None

    def column_of(self, zone_id: str, which: str) -> int:
        if self.aliases is not None:
            return self.aliases[(zone_id, which)]
        return self.labels.index((zone_id, which))

    def quadratic_model(self, t: np.ndarray) -> float:
        """Second-order prediction of V at a parameter vector t."""
        d = np.asarray(t) - self.reference
        return float(self.value + self.gradient @ d + 0.5 * d @ self.hessian @ d)


def project_psd(H: np.ndarray, clip: float = PSD_CLIP) -> np.ndarray:
    """Clip eigenvalues from below; idempotent on already-PSD input."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    return (V * np.maximum(w, clip)) @ V.T


def vehicle_value_and_sensitivities(
    scenario: Scenario,
    vehicle: str,
    schedule: TimeSlotSchedule,
    warm_start: NlpSolution | None = None,
    kkt_tol: float = 3e-8,
    strict_degeneracy: bool = True,
) -> ValueExpansion:
    """Solve the pinned vehicle problem and differentiate its value.

    Sign convention: pins enter the problem as t(p) - xi = 0 and the solver
    reports multipliers lam with grad f = J' lam, hence dV/dxi = +lam_pin.

    Raises SensitivityError when the inner solve fails, when the active set
    is degenerate (an active inequality with a near-zero multiplier), or
    when the KKT matrix is singular; perturbing the reference schedule
    slightly is the usual way out.
    """
    pins = {vehicle: schedule.as_pins(vehicle)}
    nlp = transcribe(scenario, [vehicle], pins=pins)
    sol = solve_sqp(nlp, initial_guess=warm_start, kkt_tol=kkt_tol)
    if sol.status != OPTIMAL:
        raise SensitivityError(
            f"vehicle problem for {vehicle!r} ended {sol.status} at the reference schedule"
        )
    n_pins = len(nlp.pin_indices)
    labels = [(zone, which) for _, zone, which in nlp.pin_labels]
    aliases = {(zone, which): k for (_, zone, which), k in nlp.pin_aliases.items()}
    grad = sol.lam_eq[-n_pins:].copy() if n_pins else np.zeros(0)
    if n_pins == 0:
        return ValueExpansion(
            vehicle_id=vehicle,
            reference=np.zeros(0),
            labels=[],
            value=sol.objective,
            gradient=grad,
            hessian=np.zeros((0, 0)),
            psd_projected_hessian=np.zeros((0, 0)),
            solution=sol,
            aliases=aliases,
        )

    c_in, G = nlp.inequality_constraints(sol.z)
    lam_in = sol.lam_in
    strongly_active = lam_in > DEGENERACY_TOL
    touching = np.abs(c_in) <= 1e-9
    degenerate = np.nonzero(touching & ~strongly_active & (np.abs(lam_in) <= DEGENERACY_TOL))[0]
    if degenerate.size:
        # Weak activity is structural on speed-limit-saturated stretches
        # (redundant bound rows share the arc's multipliers); the expansion
        # then uses strict-complementarity selection, which picks the
        # one-sided derivative. Strict mode refuses instead.
        msg = (
            f"degenerate active set for {vehicle!r}: inequality rows "
            f"{degenerate.tolist()} are active with near-zero multipliers; "
            f"perturb the reference schedule"
        )
        if strict_degeneracy:
            raise SensitivityError(msg)
        log.warning("%s (continuing with strongly active rows only)", msg)

    _, J_eq = nlp.equality_constraints(sol.z)
    J_act = G[strongly_active]
    W = nlp.lagrangian_hessian(sol.z, sol.lam_eq, lam_in)
    n = nlp.n_vars
    me = J_eq.shape[0]
    ma = J_act.shape[0]
    K = np.zeros((n + me + ma, n + me + ma))
    K[:n, :n] = W
    K[:n, n : n + me] = J_eq.T
    K[n : n + me, :n] = J_eq
    if ma:
        K[:n, n + me :] = J_act.T
        K[n + me :, :n] = J_act
    try:
        lu = sla.lu_factor(K)
    except (sla.LinAlgError, ValueError) as exc:
        raise SensitivityError(
            f"singular KKT system for {vehicle!r}; perturb the reference schedule"
        ) from exc

    pin_row0 = me - n_pins  # pin rows sit at the end of the equality block
    hess = np.zeros((n_pins, n_pins))
    for j in range(n_pins):
        rhs = np.zeros(n + me + ma)
        rhs[n + pin_row0 + j] = 1.0
        sol_j = sla.lu_solve(lu, rhs)
        if not np.all(np.isfinite(sol_j)):
            raise SensitivityError(
                f"singular KKT system for {vehicle!r}; perturb the reference schedule"
            )
        # multiplier block solves for -dlam; dV/dxi = +lam so column is -block
        hess[:, j] = -sol_j[n + pin_row0 : n + pin_row0 + n_pins]
    asym = float(np.abs(hess - hess.T).max())
    if asym > 1e-6 * max(1.0, float(np.abs(hess).max())):
        raise SensitivityError(
            f"Hessian asymmetry {asym:.2e} for {vehicle!r} indicates an unstable "
            f"active set; perturb the reference schedule"
        )
    hess = 0.5 * (hess + hess.T)
    return ValueExpansion(
        vehicle_id=vehicle,
        reference=nlp.pin_values.copy(),
        labels=labels,
        value=sol.objective,
        gradient=grad,
        hessian=hess,
        psd_projected_hessian=project_psd(hess),
        solution=sol,
        aliases=aliases,
    )
