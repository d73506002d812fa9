"""Crossing-order search: a convex MIQP over conflict-zone time slots.

The decision variables are every vehicle's zone entry/exit times plus one
ordering binary per vehicle pair per shared zone. The objective is the sum
of the per-vehicle second-order value-function models (convexified), so the
search trades the vehicles' scheduling pain against each other without ever
touching the trajectory problems.

Constraint families:

  * intersection exclusivity: exit-before-entry in one of the two
    directions, selected by a big-M binary;
  * merge-split separation: entry-entry and exit-exit headway rows sharing
    the pair's binary (interior rear-end rows are deliberately not part of
    the schedule approximation; the fixed-order trajectory problem enforces
    them);
  * path consistency: travel-time bounds between consecutive zone
    boundaries along each vehicle's route from its speed limits.

The branch-and-bound is best-first over QP relaxations of the binaries,
warm-started from parent nodes, with deterministic branching rules.
"""

from __future__ import annotations

import heapq
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .qp import INFEASIBLE as QP_INFEASIBLE
from .qp import OPTIMAL as QP_OPTIMAL
from .qp import QpSolution, QuadraticProgram, solve_qp
from .sensitivity import TimeSlotSchedule, ValueExpansion, ZoneSlot
from .site_model import INTERSECTION, MERGE_SPLIT, ConflictZone, Scenario

log = logging.getLogger(__name__)

BINARY_TOL = 1e-6
PRUNE_TOL = 1e-9


class MiqpBuildError(ValueError):
    """The schedule model cannot be assembled from the given pieces."""


class MiqpInfeasibleError(RuntimeError):
    """No crossing order admits a feasible time-slot schedule."""

    def __init__(self, message: str, certificate=None):
        super().__init__(message)
        self.certificate = certificate


@dataclass(frozen=True)
class OrderingBinary:
    zone_id: str
    first: str    # b = 1 means `first` precedes `second` in this zone
    second: str


@dataclass
class CrossingOrders:
    """Per-zone vehicle sequences chosen by the schedule optimization."""

    orders: dict[str, list[str]]

    def __getitem__(self, zone_id: str) -> list[str]:
        return self.orders[zone_id]

    def items(self):
        return self.orders.items()

    def as_coupling(self) -> dict[str, list[str]]:
        return dict(self.orders)


@dataclass
class MiqpModel:
    scenario: Scenario
    labels: list[tuple[str, str, str]]        # (vehicle, zone, "in"/"out") per T column
    index: dict[tuple[str, str, str], int]
    binaries: list[OrderingBinary]
    H: np.ndarray
    g: np.ndarray
    A: np.ndarray                              # A x >= b over [T, binaries]
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    big_m: float
    fixed_binaries: dict[int, int] = field(default_factory=dict)
    # rows i of A paired with binary k: (row_if_one, row_if_zero) per binary
    disjunction_rows: dict[int, list[tuple[int, int]]] = field(default_factory=dict)

    @property
    def n_t(self) -> int:
        return len(self.labels)

    @property
    def n_binary(self) -> int:
        return len(self.binaries)

    def schedule_from(self, x: np.ndarray) -> TimeSlotSchedule:
        slots: dict[str, list[ZoneSlot]] = {}
        for vid in self.scenario.vehicle_ids:
            slots[vid] = []
            for zone in self.scenario.zones_for(vid):
                key_in = (vid, zone.zone_id, "in")
                if key_in not in self.index:
                    continue
                slots[vid].append(
                    ZoneSlot(
                        zone.zone_id,
                        float(x[self.index[key_in]]),
                        float(x[self.index[(vid, zone.zone_id, "out")]]),
                    )
                )
        return TimeSlotSchedule(slots)


@dataclass
class BnbStats:
    nodes: int = 0
    qp_iterations: int = 0
    presolve_fixed: int = 0
    wall_seconds: float = 0.0
    incumbent_updates: int = 0


def _headway_shift(zone: ConflictZone, follower: str, schedule0: TimeSlotSchedule) -> float:
    """Time equivalent of the follower's distance offset inside the zone.

    The schedule space only contains boundary times, so a nonzero offset c
    is mapped to c divided by the follower's reference transit speed.
    """
    m = zone.member(follower)
    if m.distance_offset == 0.0:
        return 0.0
    slot = schedule0.entry(follower, zone.zone_id)
    speed = (m.p_out - m.p_in) / max(slot.t_out - slot.t_in, 1e-9)
    return m.distance_offset / max(speed, 1e-9)


def build_miqp(
    scenario: Scenario,
    expansions: list[ValueExpansion],
    schedule0: TimeSlotSchedule,
) -> MiqpModel:
    """Assemble the convex schedule MIQP around the reference schedule."""
    by_vehicle = {e.vehicle_id: e for e in expansions}
    labels: list[tuple[str, str, str]] = []
    index: dict[tuple[str, str, str], int] = {}
    for vid in scenario.vehicle_ids:
        if vid not in by_vehicle:
            raise MiqpBuildError(f"missing value expansion for vehicle {vid!r}")
        exp = by_vehicle[vid]
        expected = [(zone, which) for zone in (z.zone_id for z in scenario.zones_for(vid)) for which in ("in", "out")]
        offset = len(labels)
        for zone_id, which in expected:
            try:
                col = exp.column_of(zone_id, which)
            except (KeyError, ValueError):
                raise MiqpBuildError(
                    f"expansion for {vid!r} does not cover ({zone_id}, {which})"
                ) from None
            # coinciding zone boundaries on one path share a column
            index[(vid, zone_id, which)] = offset + col
        for zone_id, which in exp.labels:
            labels.append((vid, zone_id, which))
        if len(labels) != offset + len(exp.reference):
            raise MiqpBuildError(f"expansion for {vid!r} has inconsistent labels")

    n_t = len(labels)
    binaries: list[OrderingBinary] = []
    for zone in sorted(scenario.zones, key=lambda z: z.zone_id):
        members = sorted(zone.vehicle_ids())
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                binaries.append(OrderingBinary(zone.zone_id, members[i], members[j]))
    n = n_t + len(binaries)

    H = np.zeros((n, n))
    g = np.zeros(n)
    col = 0
    for vid in scenario.vehicle_ids:
        exp = by_vehicle[vid]
        k = len(exp.labels)
        if k:
            Hi = exp.psd_projected_hessian
            H[col : col + k, col : col + k] = Hi
            g[col : col + k] = exp.gradient - Hi @ exp.reference
        col += k
    H[np.diag_indices(n)] += 1e-8

    # variable bounds: reachable-time windows from the speed limits
    lb = np.zeros(n)
    ub = np.zeros(n)
    for idx, (vid, zone_id, which) in enumerate(labels):
        zone = next(z for z in scenario.zones if z.zone_id == zone_id)
        m = zone.member(vid)
        q = m.p_in if which == "in" else m.p_out
        prm = scenario.vehicle_params[vid]
        lb[idx] = q / prm.v_max
        ub[idx] = q / prm.v_min
    lb[n_t:] = 0.0
    ub[n_t:] = 1.0

    longest = max(p.length for p in scenario.paths.values())
    v_min_all = min(p.v_min for p in scenario.vehicle_params.values())
    big_m = 2.0 * longest / v_min_all

    rows: list[np.ndarray] = []
    rhs: list[float] = []

    def add_row(coeffs: dict[int, float], lo: float) -> int:
        row = np.zeros(n)
        for c, w in coeffs.items():
            row[c] += w
        rows.append(row)
        rhs.append(lo)
        return len(rows) - 1

    # path consistency: consecutive boundary positions along each route
    for vid in scenario.vehicle_ids:
        prm = scenario.vehicle_params[vid]
        points = set()
        for zone in scenario.zones_for(vid):
            m = zone.member(vid)
            points.add((m.p_in, index[(vid, zone.zone_id, "in")]))
            points.add((m.p_out, index[(vid, zone.zone_id, "out")]))
        points = sorted(points)
        if not points:
            continue
        q0, c0 = points[0]
        add_row({c0: 1.0}, q0 / prm.v_max)
        add_row({c0: -1.0}, -q0 / prm.v_min)
        for (qa, ca), (qb, cb) in zip(points[:-1], points[1:]):
            dq = qb - qa
            add_row({cb: 1.0, ca: -1.0}, dq / prm.v_max)
            add_row({cb: -1.0, ca: 1.0}, -dq / prm.v_min)

    # ordering disjunctions
    disjunction_rows: dict[int, list[tuple[int, int]]] = {}
    for k, binary in enumerate(binaries):
        zone = next(z for z in scenario.zones if z.zone_id == binary.zone_id)
        bcol = n_t + k
        pairs: list[tuple[int, int]] = []
        if zone.kind == INTERSECTION:
            i_in = index[(binary.first, zone.zone_id, "in")]
            i_out = index[(binary.first, zone.zone_id, "out")]
            j_in = index[(binary.second, zone.zone_id, "in")]
            j_out = index[(binary.second, zone.zone_id, "out")]
            # b=1: first exits before second enters; b=0: the reverse
            r1 = add_row({j_in: 1.0, i_out: -1.0, bcol: -big_m}, -big_m)
            r0 = add_row({i_in: 1.0, j_out: -1.0, bcol: big_m}, 0.0)
            pairs.append((r1, r0))
        else:
            dt_second = zone.member(binary.second).time_headway
            dt_first = zone.member(binary.first).time_headway
            shift_second = _headway_shift(zone, binary.second, schedule0)
            shift_first = _headway_shift(zone, binary.first, schedule0)
            for which in ("in", "out"):
                fi = index[(binary.first, zone.zone_id, which)]
                se = index[(binary.second, zone.zone_id, which)]
                # b=1: first leads, follower is `second`
                r1 = add_row({se: 1.0, fi: -1.0, bcol: -big_m}, dt_second - shift_second - big_m)
                r0 = add_row({fi: 1.0, se: -1.0, bcol: big_m}, dt_first - shift_first)
                pairs.append((r1, r0))
        disjunction_rows[k] = pairs

    model = MiqpModel(
        scenario=scenario,
        labels=labels,
        index=index,
        binaries=binaries,
        H=H,
        g=g,
        A=np.vstack(rows) if rows else np.zeros((0, n)),
        b=np.array(rhs),
        lb=lb,
        ub=ub,
        big_m=big_m,
        disjunction_rows=disjunction_rows,
    )
    _presolve_fix_binaries(model)
    return model


def _presolve_fix_binaries(model: MiqpModel) -> None:
    """Fix ordering binaries whose opposite direction is unreachable.

    Uses the per-variable reachable-time windows: if vehicle i cannot
    possibly exit later than j can enter, the order is forced.
    """
    sc = model.scenario
    for k, binary in enumerate(model.binaries):
        zone = next(z for z in sc.zones if z.zone_id == binary.zone_id)

        def window(vid, which):
            idx = model.index[(vid, binary.zone_id, which)]
            return model.lb[idx], model.ub[idx]

        if zone.kind == INTERSECTION:
            i_lo, i_hi = window(binary.first, "out")
            j_lo, j_hi = window(binary.second, "in")
            first_possible = i_lo <= j_hi          # first can exit before second enters
            i2_lo, i2_hi = window(binary.second, "out")
            j2_lo, j2_hi = window(binary.first, "in")
            second_possible = i2_lo <= j2_hi
        else:
            dt2 = zone.member(binary.second).time_headway
            dt1 = zone.member(binary.first).time_headway
            fi_lo, _ = window(binary.first, "in")
            _, se_hi = window(binary.second, "in")
            fo_lo, _ = window(binary.first, "out")
            _, so_hi = window(binary.second, "out")
            first_possible = (fi_lo + dt2 <= se_hi) and (fo_lo + dt2 <= so_hi)
            si_lo, _ = window(binary.second, "in")
            _, fi_hi = window(binary.first, "in")
            so_lo, _ = window(binary.second, "out")
            _, fo_hi = window(binary.first, "out")
            second_possible = (si_lo + dt1 <= fi_hi) and (so_lo + dt1 <= fo_hi)
        if not first_possible and not second_possible:
            raise MiqpInfeasibleError(
                f"zone {binary.zone_id}: neither crossing order of "
                f"({binary.first}, {binary.second}) fits the reachable time windows"
            )
        if not second_possible:
            model.fixed_binaries[k] = 1
        elif not first_possible:
            model.fixed_binaries[k] = 0


def _relaxation(model: MiqpModel, fixed: dict[int, int], warm: QpSolution | None) -> QpSolution:
    """QP relaxation with fixed binaries substituted out of the problem.

    Eliminating the fixed columns (rather than pinning lb = ub) avoids
    degenerate opposing bound rows on near-curvature-free variables, which
    the active-set iteration handles poorly. Row indices are unchanged, so
    a parent node's active set warm-starts the child directly.
    """
    n = model.n_t + model.n_binary
    fixed_cols = {model.n_t + k: float(v) for k, v in fixed.items()}
    keep = [c for c in range(n) if c not in fixed_cols]
    vals = np.zeros(n)
    for c, v in fixed_cols.items():
        vals[c] = v
    b_red = model.b - model.A @ vals if model.A.size else model.b
    prob = QuadraticProgram(
        H=model.H[np.ix_(keep, keep)],
        g=model.g[keep],
        A_in=model.A[:, keep],
        b_in=b_red,
        lb=model.lb[keep],
        ub=model.ub[keep],
    )
    warm_red = None
    if warm is not None and warm.z.shape[0] == n:
        warm_red = QpSolution(
            z=warm.z[keep], lam_eq=np.zeros(0), lam_in=np.zeros(0),
            status=warm.status, kkt_residual=warm.kkt_residual,
            active_set=warm.active_set,
        )
    sol = solve_qp(prob, warm_start=warm_red)
    z_full = vals.copy()
    z_full[keep] = sol.z
    return QpSolution(
        z=z_full, lam_eq=sol.lam_eq, lam_in=sol.lam_in, status=sol.status,
        kkt_residual=sol.kkt_residual, iterations=sol.iterations,
        active_set=sol.active_set, certificate=sol.certificate,
    )


def solve_bnb(model: MiqpModel) -> tuple[TimeSlotSchedule, CrossingOrders, BnbStats]:
    """Best-first branch-and-bound to the exact MIQP optimum.

    Branches on the most fractional binary (ties to the smallest index),
    prunes against the incumbent, and warm-starts each child QP from its
    parent. The returned orders are read from the entry times of the
    incumbent schedule and cross-checked against the binaries.
    """
    t0 = time.perf_counter()
    stats = BnbStats(presolve_fixed=len(model.fixed_binaries))
    root_fix = dict(model.fixed_binaries)
    root = _relaxation(model, root_fix, None)
    stats.nodes += 1
    stats.qp_iterations += root.iterations
    if root.status == QP_INFEASIBLE:
        raise MiqpInfeasibleError(
            "schedule model infeasible at the root relaxation", certificate=root.certificate
        )

    def objective(x: np.ndarray) -> float:
        # selection objective: time variables only; the binary block carries
        # nothing but the PD regularization required by the QP contract
        t = x[: model.n_t]
        Ht = model.H[: model.n_t, : model.n_t]
        return float(0.5 * t @ Ht @ t + model.g[: model.n_t] @ t)

    incumbent: np.ndarray | None = None
    incumbent_val = float("inf")
    heap: list[tuple[float, int, dict[int, int], QpSolution]] = []
    counter = 0

    def push(bound: float, fixed: dict[int, int], sol: QpSolution):
        nonlocal counter
        heapq.heappush(heap, (bound, counter, fixed, sol))
        counter += 1

    push(objective(root.z), root_fix, root)
    while heap:
        bound, _, fixed, sol = heapq.heappop(heap)
        if bound >= incumbent_val - PRUNE_TOL:
            continue
        bvals = sol.z[model.n_t :]
        frac = np.abs(bvals - np.round(bvals))
        if model.n_binary == 0 or frac.max(initial=0.0) <= BINARY_TOL:
            val = objective(sol.z)
            if val < incumbent_val - PRUNE_TOL:
                incumbent = sol.z.copy()
                incumbent_val = val
                stats.incumbent_updates += 1
            continue
        free = [k for k in range(model.n_binary) if k not in fixed]
        k_star = max(free, key=lambda k: (frac[k], -k))
        for value in (0, 1):
            child_fixed = dict(fixed)
            child_fixed[k_star] = value
            child = _relaxation(model, child_fixed, sol)
            stats.nodes += 1
            stats.qp_iterations += child.iterations
            if child.status == QP_INFEASIBLE:
                continue
            child_bound = objective(child.z)
            if child_bound < incumbent_val - PRUNE_TOL:
                push(child_bound, child_fixed, child)

    stats.wall_seconds = time.perf_counter() - t0
    if incumbent is None:
        raise MiqpInfeasibleError("no integral schedule found (big-M too small?)")

    schedule = model.schedule_from(incumbent)
    orders = _extract_orders(model, incumbent)
    _check_binary_consistency(model, incumbent, orders)
    log.info(
        "schedule search: %d nodes, %d fixed in presolve, optimum %.6f",
        stats.nodes, stats.presolve_fixed, incumbent_val,
    )
    return schedule, orders, stats


def _extract_orders(model: MiqpModel, x: np.ndarray) -> CrossingOrders:
    orders: dict[str, list[str]] = {}
    for zone in model.scenario.zones:
        members = zone.vehicle_ids()
        entry = {vid: float(x[model.index[(vid, zone.zone_id, "in")]]) for vid in members}
        orders[zone.zone_id] = sorted(members, key=lambda vid: (entry[vid], vid))
    return CrossingOrders(orders)


def _check_binary_consistency(model: MiqpModel, x: np.ndarray, orders: CrossingOrders) -> None:
    for k, binary in enumerate(model.binaries):
        b = x[model.n_t + k]
        seq = orders[binary.zone_id]
        first_by_time = seq.index(binary.first) < seq.index(binary.second)
        if abs(b - 1.0) <= BINARY_TOL and not first_by_time:
            raise MiqpInfeasibleError(
                f"binary/time disagreement in zone {binary.zone_id}: "
                f"b says {binary.first} first, times disagree (big-M too small?)"
            )
        if abs(b) <= BINARY_TOL and first_by_time:
            # ties in entry times legitimately sort either way; only flag
            # when the big-M row for the chosen direction is truly violated
            r1, _ = model.disjunction_rows[k][0]
            if model.A[r1] @ x < model.b[r1] - 1e-6:
                raise MiqpInfeasibleError(
                    f"binary/time disagreement in zone {binary.zone_id} (big-M too small?)"
                )


def dump_miqp(model: MiqpModel) -> str:
    """Plain-text rendering of the schedule MIQP for offline cross-checks.

    Sections: VARS (column -> meaning), OBJECTIVE (H triplets, g entries),
    ROWS (coeff lists with lower bounds), BOUNDS, BINARIES.
    """
    out = ["# schedule MIQP: minimize 0.5 x'Hx + g'x  s.t.  A x >= b, lb <= x <= ub"]
    out.append("VARS")
    for i, (vid, zone, which) in enumerate(model.labels):
        out.append(f"  {i} t {vid} {zone} {which}")
    for k, binary in enumerate(model.binaries):
        fixed = model.fixed_binaries.get(k)
        tag = f" fixed={fixed}" if fixed is not None else ""
        out.append(f"  {model.n_t + k} b {binary.zone_id} {binary.first}<{binary.second}{tag}")
    out.append("OBJECTIVE_H")
    ii, jj = np.nonzero(np.triu(model.H))
    for i, j in zip(ii, jj):
        out.append(f"  {i} {j} {model.H[i, j]:.12g}")
    out.append("OBJECTIVE_G")
    for i, gi in enumerate(model.g):
        if gi != 0.0:
            out.append(f"  {i} {gi:.12g}")
    out.append("ROWS")
    for r in range(model.A.shape[0]):
        nz = np.nonzero(model.A[r])[0]
        terms = " ".join(f"{model.A[r, c]:+.12g}*x{c}" for c in nz)
        out.append(f"  {terms} >= {model.b[r]:.12g}")
    out.append("BOUNDS")
    for i in range(len(model.lb)):
        out.append(f"  {model.lb[i]:.12g} <= x{i} <= {model.ub[i]:.12g}")
    out.append(f"BIG_M {model.big_m:.12g}")
    return "\n".join(out) + "\n"
