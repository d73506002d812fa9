"""End-to-end coordination pipeline and the independent safety audit.

Pipeline stages (coordinated mode):

  1. solve every vehicle's trajectory problem without safety constraints;
  2. differentiate each vehicle's value function at the resulting schedule;
  3. search crossing orders with the convex schedule approximation;
  4. re-solve all vehicles jointly with the chosen orders fixed, including
     the interior rear-end rows the schedule step deliberately skipped.

The audit re-evaluates the safety constraints from the solved trajectories
alone, interpolating times in position at ten times the grid density inside
every zone. It shares no code with the transcription on purpose: a bug in
the constraint rows should show up as an audit violation, not vanish twice.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .nlp import NLP_INFEASIBLE, OPTIMAL, NlpSolution, Trajectory, solve_sqp, transcribe, trajectory_objective
from .scheduler import BnbStats, CrossingOrders, build_miqp, dump_miqp, solve_bnb
from .sensitivity import (
    SensitivityError,
    TimeSlotSchedule,
    ValueExpansion,
    schedule_from_trajectories,
    vehicle_value_and_sensitivities,
)
from .site_model import INTERSECTION, MERGE_SPLIT, ConflictZone, Scenario

log = logging.getLogger(__name__)

AUDIT_TOL = 1e-6
UNCOORDINATED = "uncoordinated"
COORDINATED = "coordinated"


class CoordinationError(RuntimeError):
    def __init__(self, message: str, orders: CrossingOrders | None = None,
                 restoration_residuals=None):
        super().__init__(message)
        self.orders = orders
        self.restoration_residuals = restoration_residuals


@dataclass(frozen=True)
class AuditViolation:
    zone_id: str
    kind: str
    constraint: str            # "exclusivity" | "headway"
    vehicles: tuple[str, ...]
    margin: float              # seconds; negative means violated


@dataclass
class AuditReport:
    violations: list[AuditViolation]
    # minimum time gap per merge-split zone and ordered vehicle pair
    merge_gaps: dict[tuple[str, str, str], float] = field(default_factory=dict)
    # disjointness margin per intersection zone and vehicle pair
    intersection_margins: dict[tuple[str, str, str], float] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.violations

    def worst_margin(self) -> float:
        if not self.violations:
            return float("inf")
        return min(v.margin for v in self.violations)


def _dense_positions(traj: Trajectory, lo: float, hi: float, oversample: int = 10) -> np.ndarray:
    nodes = traj.grid[(traj.grid >= lo - 1e-9) & (traj.grid <= hi + 1e-9)]
    qs = [np.array([lo, hi])]
    qs.append(nodes)
    for a, b in zip(nodes[:-1], nodes[1:]):
        qs.append(np.linspace(a, b, oversample + 1))
    return np.unique(np.concatenate(qs))


def audit(trajectories: dict[str, Trajectory], zones: tuple[ConflictZone, ...] | list[ConflictZone],
          oversample: int = 10) -> AuditReport:
    """Re-check every zone's safety constraints from solved trajectories.

    Intersections: occupancy intervals of every vehicle pair must be
    disjoint. Merge-splits: between consecutive entrants, the follower's
    time at the leader's (offset-shifted) position must trail by at least
    the follower's headway, checked densely across the zone.
    """
    violations: list[AuditViolation] = []
    merge_gaps: dict[tuple[str, str, str], float] = {}
    intersection_margins: dict[tuple[str, str, str], float] = {}

    for zone in zones:
        members = [m for m in zone.members if m.vehicle_id in trajectories]
        if len(members) < 2:
            continue
        times = {
            m.vehicle_id: (
                float(np.interp(m.p_in, trajectories[m.vehicle_id].grid, trajectories[m.vehicle_id].t)),
                float(np.interp(m.p_out, trajectories[m.vehicle_id].grid, trajectories[m.vehicle_id].t)),
            )
            for m in members
        }
        if zone.kind == INTERSECTION:
            ids = sorted(times)
            for i in range(len(ids)):
                for j in range(i + 1, len(ids)):
                    vi, vj = ids[i], ids[j]
                    margin = max(times[vj][0] - times[vi][1], times[vi][0] - times[vj][1])
                    intersection_margins[(zone.zone_id, vi, vj)] = margin
                    if margin < -AUDIT_TOL:
                        violations.append(
                            AuditViolation(zone.zone_id, zone.kind, "exclusivity", (vi, vj), margin)
                        )
        else:
            order = sorted(times, key=lambda v: (times[v][0], v))
            for lead, follow in [(a, b) for i, a in enumerate(order) for b in order[i + 1 :]]:
                ml = zone.member(lead)
                mf = zone.member(follow)
                tl = trajectories[lead]
                tf = trajectories[follow]
                qs = _dense_positions(tl, ml.p_in, ml.p_out, oversample)
                t_lead = np.interp(qs, tl.grid, tl.t)
                shifted = np.clip(qs - ml.p_in + mf.p_in + mf.distance_offset, tf.grid[0], tf.grid[-1])
                t_follow = np.interp(shifted, tf.grid, tf.t)
                gap = float((t_follow - t_lead).min())
                merge_gaps[(zone.zone_id, lead, follow)] = gap
                consecutive = order.index(follow) == order.index(lead) + 1
                if consecutive and gap - mf.time_headway < -AUDIT_TOL:
                    violations.append(
                        AuditViolation(
                            zone.zone_id, zone.kind, "headway", (lead, follow),
                            gap - mf.time_headway,
                        )
                    )
    violations.sort(key=lambda v: (v.zone_id, v.vehicles))
    return AuditReport(violations, merge_gaps, intersection_margins)


@dataclass
class CoordinationResult:
    mode: str
    trajectories: dict[str, Trajectory]
    schedule: TimeSlotSchedule
    audit: AuditReport
    objective_per_vehicle: dict[str, float]
    objective_total: float
    timing: dict[str, float]
    orders: CrossingOrders | None = None
    expansions: list[ValueExpansion] | None = None
    bnb_stats: BnbStats | None = None
    nlp_solutions: dict[str, NlpSolution] | None = None
    joint_solution: NlpSolution | None = None
    miqp_dump: str | None = None


def _solve_all_vehicles(scenario: Scenario, kkt_tol: float) -> dict[str, NlpSolution]:
    solutions = {}
    for vid in scenario.vehicle_ids:
        sol = solve_sqp(transcribe(scenario, [vid]), kkt_tol=kkt_tol)
        if sol.status != OPTIMAL:
            raise CoordinationError(f"unconstrained solve for vehicle {vid!r} ended {sol.status}")
        solutions[vid] = sol
    return solutions


def run_uncoordinated(scenario: Scenario, kkt_tol: float = 1e-6) -> CoordinationResult:
    """Independent per-vehicle optima; the audit reports any conflicts."""
    t0 = time.perf_counter()
    solutions = _solve_all_vehicles(scenario, kkt_tol)
    t_solve = time.perf_counter() - t0
    trajectories = {vid: s.trajectories[vid] for vid, s in solutions.items()}
    t0 = time.perf_counter()
    report = audit(trajectories, scenario.zones)
    t_audit = time.perf_counter() - t0
    per_vehicle = {vid: s.objective for vid, s in solutions.items()}
    return CoordinationResult(
        mode=UNCOORDINATED,
        trajectories=trajectories,
        schedule=schedule_from_trajectories(scenario, trajectories),
        audit=report,
        objective_per_vehicle=per_vehicle,
        objective_total=float(sum(per_vehicle.values())),
        timing={"vehicle_solves": t_solve, "audit": t_audit,
                "total": t_solve + t_audit},
        nlp_solutions=solutions,
    )


def _expansion_with_retry(scenario, vid, schedule0, warm) -> ValueExpansion:
    """Differentiate the vehicle problem, nudging the schedule if degenerate.

    A weakly active bound at the exact unconstrained optimum makes the
    sensitivity ill-posed; a uniform time shift of that vehicle's slots
    (alias-safe) moves the reference off the degenerate configuration, and
    the expansion is simply taken around the shifted point.
    """
    last: SensitivityError | None = None
    for shift in (0.0, 1e-4, 3e-4, 1e-3, 4e-3):
        sched = schedule0
        if shift:
            sched = schedule0.replaced(vid, schedule0.vector(vid) + shift)
        try:
            exp = vehicle_value_and_sensitivities(
                scenario, vid, sched, warm_start=warm, strict_degeneracy=False
            )
            if shift:
                log.info("sensitivities for %s taken at +%.0e s shift (degeneracy)", vid, shift)
            return exp
        except SensitivityError as exc:
            last = exc
            log.debug("sensitivity retry for %s after: %s", vid, exc)
    raise last


def run_coordinated(
    scenario: Scenario,
    kkt_tol: float = 1e-6,
    keep_miqp_dump: bool = False,
) -> CoordinationResult:
    """Full pipeline: schedule heuristic, then the joint fixed-order solve."""
    timing: dict[str, float] = {}

    t0 = time.perf_counter()
    solutions = _solve_all_vehicles(scenario, kkt_tol)
    trajectories0 = {vid: s.trajectories[vid] for vid, s in solutions.items()}
    schedule0 = schedule_from_trajectories(scenario, trajectories0)
    timing["vehicle_solves"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    expansions = [
        _expansion_with_retry(scenario, vid, schedule0, solutions[vid])
        for vid in scenario.vehicle_ids
    ]
    timing["sensitivities"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    model = build_miqp(scenario, expansions, schedule0)
    schedule_star, orders, stats = solve_bnb(model)
    timing["order_search"] = time.perf_counter() - t0
    log.info("crossing orders: %s", orders.orders)

    t0 = time.perf_counter()
    joint = transcribe(scenario, coupling=orders.as_coupling())
    guess = np.concatenate([solutions[vid].z for vid in scenario.vehicle_ids])
    joint_sol = solve_sqp(joint, initial_guess=guess, kkt_tol=kkt_tol)
    timing["fixed_order_nlp"] = time.perf_counter() - t0
    if joint_sol.status == NLP_INFEASIBLE:
        raise CoordinationError(
            f"fixed-order problem infeasible under orders {orders.orders}",
            orders=orders,
            restoration_residuals=joint_sol.restoration_residuals,
        )
    if joint_sol.status != OPTIMAL:
        raise CoordinationError(
            f"fixed-order solve ended {joint_sol.status} (kkt {joint_sol.kkt_residual:.2e})",
            orders=orders,
        )

    trajectories = dict(joint_sol.trajectories)
    t0 = time.perf_counter()
    report = audit(trajectories, scenario.zones)
    timing["audit"] = time.perf_counter() - t0
    timing["total"] = sum(timing.values())

    per_vehicle = {
        vid: trajectory_objective(trajectories[vid], scenario.vehicle_params[vid])
        for vid in scenario.vehicle_ids
    }
    return CoordinationResult(
        mode=COORDINATED,
        trajectories=trajectories,
        schedule=schedule_from_trajectories(scenario, trajectories),
        audit=report,
        objective_per_vehicle=per_vehicle,
        objective_total=float(sum(per_vehicle.values())),
        timing=timing,
        orders=orders,
        expansions=expansions,
        bnb_stats=stats,
        nlp_solutions=solutions,
        joint_solution=joint_sol,
        miqp_dump=dump_miqp(model) if keep_miqp_dump else None,
    )


def solve_with_orders(
    scenario: Scenario,
    orders: CrossingOrders | dict[str, list[str]],
    warm: dict[str, NlpSolution] | None = None,
    kkt_tol: float = 1e-6,
) -> NlpSolution:
    """Joint fixed-order solve for externally chosen orders (enumeration)."""
    coupling = orders.as_coupling() if isinstance(orders, CrossingOrders) else dict(orders)
    joint = transcribe(scenario, coupling=coupling)
    guess = None
    if warm is not None:
        guess = np.concatenate([warm[vid].z for vid in scenario.vehicle_ids])
    return solve_sqp(joint, initial_guess=guess, kkt_tol=kkt_tol)
