import itertools

import numpy as np
import pytest

from sitecoord.qp import OPTIMAL, QuadraticProgram, solve_qp
from sitecoord.scheduler import (
    MiqpBuildError,
    MiqpInfeasibleError,
    build_miqp,
    dump_miqp,
    solve_bnb,
)
from sitecoord.sensitivity import TimeSlotSchedule, ValueExpansion, ZoneSlot
from sitecoord.site_model import (
    INTERSECTION,
    MERGE_SPLIT,
    ConflictZone,
    Scenario,
    VehicleParams,
    ZoneMember,
    make_path,
)


def straight_path(vid, length=900.0):
    return make_path(vid, [[0.0, 0.0], [length / 2, 0.0], [length, 0.0]])


def make_scenario(zones, vehicles=("a", "b"), v_min=1.0):
    paths = {vid: straight_path(vid) for vid in vehicles}
    params = {vid: VehicleParams(v_min=v_min) for vid in vehicles}
    return Scenario(paths=paths, zones=tuple(zones), vehicle_params=params, grid_n=10)


def quadratic_expansion(scenario, vid, preferred, weight=1.0):
    """Synthetic value model V = 0.5 * w * ||T - preferred||^2.

    Lets the ordering tests know the exact optimum without running the
    trajectory stack.
    """
    zones = scenario.zones_for(vid)
    labels = [(z.zone_id, w) for z in zones for w in ("in", "out")]
    pref = np.asarray(preferred, dtype=float)
    H = weight * np.eye(len(pref))
    return ValueExpansion(
        vehicle_id=vid,
        reference=pref.copy(),
        labels=labels,
        value=0.0,
        gradient=np.zeros(len(pref)),
        hessian=H,
        psd_projected_hessian=H,
    )


def reference_schedule(scenario, expansions):
    slots = {}
    for exp in expansions:
        vec = exp.reference
        zs = scenario.zones_for(exp.vehicle_id)
        slots[exp.vehicle_id] = [
            ZoneSlot(z.zone_id, float(vec[2 * i]), float(vec[2 * i + 1])) for i, z in enumerate(zs)
        ]
    return TimeSlotSchedule(slots)


def intersection_zone(zid="I1", members=("a", "b"), pos=(200.0, 210.0)):
    return ConflictZone(
        zid,
        INTERSECTION,
        tuple(ZoneMember(v, pos[0], pos[1]) for v in members),
    )


def merge_zone(zid="M1", members=("a", "b"), pos=(200.0, 300.0), dt=0.5, c=0.0):
    return ConflictZone(
        zid,
        MERGE_SPLIT,
        tuple(ZoneMember(v, pos[0], pos[1], dt, c) for v in members),
    )


def enumerate_miqp(model):
    """Exhaustive oracle: solve a QP per binary assignment, keep the best.

    Substitutes each assignment into the rows so the QPs contain only the
    schedule variables; evaluates the time-variable part of the objective
    (the binaries carry only the solver's tiny diagonal regularization).
    """
    best = np.inf
    nt = model.n_t
    for bits in itertools.product((0, 1), repeat=model.n_binary):
        vals = np.concatenate([np.zeros(nt), np.array(bits, dtype=float)])
        sol = solve_qp(
            QuadraticProgram(
                H=model.H[:nt, :nt],
                g=model.g[:nt],
                A_in=model.A[:, :nt],
                b_in=model.b - model.A @ vals,
                lb=model.lb[:nt],
                ub=model.ub[:nt],
            )
        )
        if sol.status == OPTIMAL:
            best = min(best, 0.5 * sol.z @ model.H[:nt, :nt] @ sol.z + model.g[:nt] @ sol.z)
    return best


class TestBuild:
    def test_two_vehicle_intersection_counts(self):
        sc = make_scenario([intersection_zone()])
        exps = [
            quadratic_expansion(sc, "a", [10.0, 10.5]),
            quadratic_expansion(sc, "b", [10.2, 10.7]),
        ]
        model = build_miqp(sc, exps, reference_schedule(sc, exps))
        assert model.n_binary == 1
        big_m_rows = [r for r in range(model.A.shape[0]) if abs(model.A[r, model.n_t]) > 0]
        assert len(big_m_rows) == 2

    def test_three_vehicle_intersection_counts(self):
        sc = make_scenario([intersection_zone(members=("a", "b", "c"))], vehicles=("a", "b", "c"))
        exps = [quadratic_expansion(sc, v, [10.0 + i, 10.5 + i]) for i, v in enumerate("abc")]
        model = build_miqp(sc, exps, reference_schedule(sc, exps))
        assert model.n_binary == 3
        rows_with_binary = [
            r for r in range(model.A.shape[0])
            if np.any(np.abs(model.A[r, model.n_t :]) > 0)
        ]
        assert len(rows_with_binary) == 6

    def test_merge_split_row_structure(self):
        sc = make_scenario([merge_zone(dt=0.5, c=0.0)])
        exps = [
            quadratic_expansion(sc, "a", [10.0, 15.0]),
            quadratic_expansion(sc, "b", [10.4, 15.4]),
        ]
        model = build_miqp(sc, exps, reference_schedule(sc, exps))
        assert model.n_binary == 1
        (r1_in, r0_in), (r1_out, r0_out) = model.disjunction_rows[0]
        ia = model.index[("a", "M1", "in")]
        ib = model.index[("b", "M1", "in")]
        # b=1 row: t_b_in - t_a_in - M b >= 0.5 - M, i.e. a leads by 0.5 s
        assert model.A[r1_in, ib] == pytest.approx(1.0)
        assert model.A[r1_in, ia] == pytest.approx(-1.0)
        assert model.A[r1_in, model.n_t] == pytest.approx(-model.big_m)
        assert model.b[r1_in] == pytest.approx(0.5 - model.big_m)
        oa = model.index[("a", "M1", "out")]
        ob = model.index[("b", "M1", "out")]
        assert model.A[r1_out, ob] == pytest.approx(1.0)
        assert model.A[r1_out, oa] == pytest.approx(-1.0)

    def test_missing_expansion_raises(self):
        sc = make_scenario([intersection_zone()])
        exps = [quadratic_expansion(sc, "a", [10.0, 10.5])]
        with pytest.raises(MiqpBuildError, match="missing value expansion"):
            build_miqp(sc, exps, reference_schedule(sc, exps))

    def test_dump_round_trips_key_counts(self):
        sc = make_scenario([intersection_zone()])
        exps = [
            quadratic_expansion(sc, "a", [10.0, 10.5]),
            quadratic_expansion(sc, "b", [10.2, 10.7]),
        ]
        model = build_miqp(sc, exps, reference_schedule(sc, exps))
        text = dump_miqp(model)
        assert text.count("\n  ") >= model.A.shape[0] + model.n_t + model.n_binary
        assert "BIG_M" in text and "OBJECTIVE_H" in text


class TestSolve:
    def test_two_vehicle_intersection_matches_exhaustive(self):
        sc = make_scenario([intersection_zone()])
        exps = [
            quadratic_expansion(sc, "a", [10.0, 10.5]),
            quadratic_expansion(sc, "b", [10.2, 10.7]),
        ]
        model = build_miqp(sc, exps, reference_schedule(sc, exps))
        schedule, orders, stats = solve_bnb(model)
        best = enumerate_miqp(model)
        assert objective_at(model, schedule) == pytest.approx(best, abs=1e-8)
        # a prefers earlier times, so a goes first
        assert orders["I1"] == ["a", "b"]

    def test_three_vehicle_orders_are_transitive_permutation(self):
        sc = make_scenario([intersection_zone(members=("a", "b", "c"))], vehicles=("a", "b", "c"))
        exps = [
            quadratic_expansion(sc, "a", [12.0, 12.5]),
            quadratic_expansion(sc, "b", [10.0, 10.5]),
            quadratic_expansion(sc, "c", [11.0, 11.5]),
        ]
        model = build_miqp(sc, exps, reference_schedule(sc, exps))
        schedule, orders, stats = solve_bnb(model)
        assert sorted(orders["I1"]) == ["a", "b", "c"]
        assert orders["I1"] == ["b", "c", "a"]
        assert enumerate_miqp(model) == pytest.approx(objective_at(model, schedule), abs=1e-8)

    def test_merge_split_headway_respected(self):
        sc = make_scenario([merge_zone(dt=0.5)])
        exps = [
            quadratic_expansion(sc, "a", [10.0, 15.0]),
            quadratic_expansion(sc, "b", [10.1, 15.1]),
        ]
        model = build_miqp(sc, exps, reference_schedule(sc, exps))
        schedule, orders, _ = solve_bnb(model)
        lead, follow = orders["M1"]
        sl = schedule.entry(lead, "M1")
        sf = schedule.entry(follow, "M1")
        assert sf.t_in - sl.t_in >= 0.5 - 1e-8
        assert sf.t_out - sl.t_out >= 0.5 - 1e-8

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_bnb_equals_exhaustive_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        zones = [
            intersection_zone("I1", ("a", "b"), (200.0, 210.0)),
            intersection_zone("I2", ("a", "c"), (400.0, 410.0)),
            merge_zone("M1", ("b", "c"), (600.0, 700.0)),
        ]
        sc = make_scenario(zones, vehicles=("a", "b", "c"))
        exps = []
        for vid in "abc":
            zs = sc.zones_for(vid)
            pref = []
            for z in zs:
                m = z.member(vid)
                t0 = m.p_in / 14.0 + rng.uniform(-1.0, 1.0)
                pref += [t0, t0 + (m.p_out - m.p_in) / 14.0]
            exps.append(quadratic_expansion(sc, vid, pref, weight=1.0 + rng.random()))
        model = build_miqp(sc, exps, reference_schedule(sc, exps))
        assert model.n_binary == 3
        schedule, orders, stats = solve_bnb(model)
        assert enumerate_miqp(model) == pytest.approx(objective_at(model, schedule), abs=1e-8)

    def test_presolve_forced_order_requires_single_qp(self):
        # a crosses near its start, b cannot reach its zone before a must
        # have left even at full speed: the binary is fixed before search
        zones = [
            ConflictZone(
                "I1",
                INTERSECTION,
                (ZoneMember("a", 20.0, 30.0), ZoneMember("b", 850.0, 860.0)),
            )
        ]
        sc = make_scenario(zones)
        exps = [
            quadratic_expansion(sc, "a", [2.0, 2.8]),
            quadratic_expansion(sc, "b", [60.0, 61.0]),
        ]
        model = build_miqp(sc, exps, reference_schedule(sc, exps))
        assert model.fixed_binaries == {0: 1}
        schedule, orders, stats = solve_bnb(model)
        assert orders["I1"] == ["a", "b"]
        assert stats.nodes == 1

    def test_big_m_off_rows_have_large_slack(self):
        sc = make_scenario([intersection_zone()])
        exps = [
            quadratic_expansion(sc, "a", [10.0, 10.5]),
            quadratic_expansion(sc, "b", [16.0, 16.5]),
        ]
        model = build_miqp(sc, exps, reference_schedule(sc, exps))
        schedule, orders, _ = solve_bnb(model)
        x = np.zeros(model.n_t + 1)
        for key, col in model.index.items():
            vid, zid, which = key
            s = schedule.entry(vid, zid)
            x[col] = s.t_in if which == "in" else s.t_out
        x[model.n_t] = 1.0 if orders["I1"] == ["a", "b"] else 0.0
        r1, r0 = model.disjunction_rows[0][0]
        off_row = r0 if x[model.n_t] > 0.5 else r1
        slack = model.A[off_row] @ x - model.b[off_row]
        assert slack >= model.big_m / 2.0

    def test_determinism(self):
        sc = make_scenario([intersection_zone()])
        exps = [
            quadratic_expansion(sc, "a", [10.0, 10.5]),
            quadratic_expansion(sc, "b", [10.05, 10.55]),
        ]
        model1 = build_miqp(sc, exps, reference_schedule(sc, exps))
        model2 = build_miqp(sc, exps, reference_schedule(sc, exps))
        s1, o1, _ = solve_bnb(model1)
        s2, o2, _ = solve_bnb(model2)
        assert o1.orders == o2.orders
        assert np.array_equal(s1.vector("a"), s2.vector("a"))

    def test_impossible_both_directions_raises(self):
        zones = [merge_zone(dt=1e5)]
        sc = make_scenario(zones)
        exps = [
            quadratic_expansion(sc, "a", [10.0, 15.0]),
            quadratic_expansion(sc, "b", [10.1, 15.1]),
        ]
        with pytest.raises(MiqpInfeasibleError, match="neither crossing order"):
            build_miqp(sc, exps, reference_schedule(sc, exps))

    def test_root_infeasible_carries_certificate(self):
        sc = make_scenario([intersection_zone()])
        exps = [
            quadratic_expansion(sc, "a", [10.0, 10.5]),
            quadratic_expansion(sc, "b", [10.2, 10.7]),
        ]
        model = build_miqp(sc, exps, reference_schedule(sc, exps))
        model.b = model.b.copy()
        (r1, r0) = model.disjunction_rows[0][0]
        model.b[r1] = 1e9  # no assignment can satisfy either branch now
        model.b[r0] = 1e9
        with pytest.raises(MiqpInfeasibleError) as err:
            solve_bnb(model)
        assert err.value.certificate is not None


def objective_at(model, schedule):
    x = np.zeros(model.n_t + model.n_binary)
    for key, col in model.index.items():
        vid, zid, which = key
        s = schedule.entry(vid, zid)
        x[col] = s.t_in if which == "in" else s.t_out
    t_part = 0.5 * x[: model.n_t] @ model.H[: model.n_t, : model.n_t] @ x[: model.n_t]
    return float(t_part + model.g[: model.n_t] @ x[: model.n_t])
