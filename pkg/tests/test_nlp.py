import itertools

import numpy as np
import pytest

from sitecoord import nlp as nlp_mod
from sitecoord.dynamics import (
    ControlSample,
    GridCell,
    SpatialState,
    SpeedSingularityError,
    erk4_transition,
    stage_cost,
    terminal_cost,
)
from sitecoord.nlp import (
    MAX_ITER,
    NLP_INFEASIBLE,
    OPTIMAL,
    solve_sqp,
    transcribe,
    trajectory_objective,
)
from sitecoord.site_model import load_scenario

STRAIGHT_DOC = """
vehicles:
  - id: solo
    waypoints: [[0, 0], [500, 0], [1000, 0]]
    v_initial: 50 km/h
zones: auto
grid: {N: 50}
"""

CROSSING_DOC = """
vehicles:
  - id: a
    waypoints: [[-200, 0], [0, 0], [200, 0]]
    v_initial: 50 km/h
  - id: b
    waypoints: [[0, -200], [0, 0], [0, 200]]
    v_initial: 50 km/h
zones: auto
grid: {N: 40}
"""


@pytest.fixture(scope="module")
def straight_scenario():
    return load_scenario(STRAIGHT_DOC)


@pytest.fixture(scope="module")
def crossing_scenario():
    return load_scenario(CROSSING_DOC)


@pytest.fixture(scope="module")
def solo_solution(straight_scenario):
    prob = transcribe(straight_scenario, ["solo"])
    return prob, solve_sqp(prob)


def brute_force_upper_bound(scenario, vehicle, n_blocks=4, jerk_levels=(-2.0, -1.0, 0.0, 1.0, 2.0)):
    """Coarse exhaustive search over block-constant jerk profiles.

    Rolls the ERK4 dynamics forward and keeps the best feasible objective.
    Loose by construction: any SQP optimum must do at least as well.
    """
    prob = transcribe(scenario, [vehicle])
    block = prob.blocks[vehicle]
    prm = scenario.vehicle_params[vehicle]
    grid = block.grid
    m = block.n_cells
    best = np.inf
    for pattern in itertools.product(jerk_levels, repeat=n_blocks):
        state = SpatialState(0.0, prm.v_initial, prm.a_initial)
        cost = 0.0
        feasible = True
        for k in range(m):
            u = pattern[min(k * n_blocks // m, n_blocks - 1)]
            cost += stage_cost(state, ControlSample(u), grid[k + 1] - grid[k], prm.weight_accel, prm.weight_jerk)
            try:
                state = erk4_transition(state, ControlSample(u), GridCell(grid[k], grid[k + 1]))
            except SpeedSingularityError:
                feasible = False
                break
            kappa = block.kappa[k + 1]
            if not (
                prm.v_min - 1e-9 <= state.v <= prm.v_max + 1e-9
                and state.a <= prm.a_lon_max + 1e-9
                and 1.0 - (state.a / prm.a_lon_max) ** 2 - (kappa * state.v**2 / prm.a_lat_max) ** 2 >= -1e-9
            ):
                feasible = False
                break
        if feasible:
            best = min(best, cost + terminal_cost(state.t, prm.weight_time))
    return best


class TestTranscription:
    def test_uncoordinated_single_vehicle_counts(self, straight_scenario):
        prob = transcribe(straight_scenario, ["solo"])
        info = prob.describe()
        m = prob.blocks["solo"].n_cells
        assert info["variables"] == 4 * m + 3
        assert info["equalities"] == 3 + 3 * m
        assert info["timing_rows"] == 0
        assert len(prob.pin_indices) == 0

    def test_pins_add_two_equality_rows_per_zone(self, crossing_scenario):
        base = transcribe(crossing_scenario, ["a"])
        pinned = transcribe(crossing_scenario, ["a"], pins={"a": {"I1": (14.0, 15.0)}})
        assert len(pinned.pin_indices) == 2
        c0, _ = base.equality_constraints(base.default_guess())
        c1, _ = pinned.equality_constraints(pinned.default_guess())
        assert c1.shape[0] == c0.shape[0] + 2

    def test_fixed_order_intersection_adds_exactly_one_row(self, crossing_scenario):
        free = transcribe(crossing_scenario, ["a", "b"])
        prob = transcribe(crossing_scenario, ["a", "b"], coupling={"I1": ["a", "b"]})
        assert prob.n_timing_rows == 1
        assert prob.L.shape[0] == free.L.shape[0] + 1
        # the row reads t_b(p_in_b) - t_a(p_out_a) >= 0
        row = prob.L[-1]
        zone = crossing_scenario.zones[0]
        ia = prob.blocks["a"].idx_t(prob.blocks["a"].node_at(zone.member("a").p_out))
        ib = prob.blocks["b"].idx_t(prob.blocks["b"].node_at(zone.member("b").p_in))
        assert row[ia] == pytest.approx(-1.0)
        assert row[ib] == pytest.approx(1.0)
        assert prob.r[-1] == pytest.approx(0.0)

    def test_coupling_and_pins_mutually_exclusive(self, crossing_scenario):
        with pytest.raises(ValueError, match="mutually exclusive"):
            transcribe(
                crossing_scenario,
                ["a", "b"],
                coupling={"I1": ["a", "b"]},
                pins={"a": {"I1": (1.0, 2.0)}},
            )

    def test_pack_unpack_round_trip(self, straight_scenario):
        prob = transcribe(straight_scenario, ["solo"])
        z = prob.default_guess()
        traj = prob.blocks["solo"].unpack(z)
        z2 = np.zeros_like(z)
        prob.blocks["solo"].pack_into(z2, traj.t, traj.v, traj.a, traj.u)
        assert np.array_equal(z, z2)

    def test_constant_speed_guess_satisfies_shooting_exactly(self, straight_scenario):
        prob = transcribe(straight_scenario, ["solo"])
        c_eq, _ = prob.equality_constraints(prob.default_guess())
        assert np.abs(c_eq).max() <= 1e-12

    def test_guess_terminal_time_is_length_over_speed(self, straight_scenario):
        prob = transcribe(straight_scenario, ["solo"])
        traj = prob.blocks["solo"].unpack(prob.default_guess())
        L = straight_scenario.paths["solo"].length
        v0 = straight_scenario.vehicle_params["solo"].v_initial
        assert traj.t[-1] == pytest.approx(L / v0, rel=1e-12)

    def test_guess_curvature_feasibility_condition(self, crossing_scenario):
        # straight paths: kappa * v_initial^2 <= a_lat_max everywhere, so the
        # constant-speed guess satisfies the ellipse at every node
        prob = transcribe(crossing_scenario, ["a"])
        prm = crossing_scenario.vehicle_params["a"]
        assert np.all(prob.blocks["a"].kappa * prm.v_initial**2 <= prm.a_lat_max)
        c_in, _ = prob.inequality_constraints(prob.default_guess())
        assert c_in.min() >= -1e-9


class TestJacobians:
    def test_equality_jacobian_matches_finite_differences(self, straight_scenario):
        prob = transcribe(straight_scenario, ["solo"])
        rng = np.random.default_rng(5)
        z = prob.default_guess()
        z += 0.05 * rng.standard_normal(z.size)
        c0, J = prob.equality_constraints(z)
        eps = 1e-6
        cols = rng.choice(z.size, size=40, replace=False)
        for i in cols:
            dz = np.zeros_like(z)
            dz[i] = eps
            cp, _ = prob.equality_constraints(z + dz)
            cm, _ = prob.equality_constraints(z - dz)
            fd = (cp - cm) / (2 * eps)
            denom = max(1.0, np.abs(fd).max())
            assert np.abs(J[:, i] - fd).max() / denom <= 1e-5

    def test_inequality_jacobian_matches_finite_differences(self, crossing_scenario):
        prob = transcribe(crossing_scenario, ["a", "b"], coupling={"I1": ["a", "b"]})
        rng = np.random.default_rng(6)
        z = prob.default_guess()
        z += 0.05 * rng.standard_normal(z.size)
        c0, J = prob.inequality_constraints(z)
        eps = 1e-6
        for i in rng.choice(z.size, size=30, replace=False):
            dz = np.zeros_like(z)
            dz[i] = eps
            cp, _ = prob.inequality_constraints(z + dz)
            cm, _ = prob.inequality_constraints(z - dz)
            fd = (cp - cm) / (2 * eps)
            assert np.abs(J[:, i] - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())

    def test_gradient_matches_finite_differences(self, straight_scenario):
        prob = transcribe(straight_scenario, ["solo"])
        rng = np.random.default_rng(7)
        z = prob.default_guess()
        z += 0.05 * rng.standard_normal(z.size)
        g = prob.gradient(z)
        eps = 1e-5  # objective is ~4e2, so central FD noise sits near 4e-9
        for i in rng.choice(z.size, size=30, replace=False):
            dz = np.zeros_like(z)
            dz[i] = eps
            fd = (prob.objective(z + dz) - prob.objective(z - dz)) / (2 * eps)
            assert g[i] == pytest.approx(fd, rel=2e-5, abs=5e-7)

    def test_lagrangian_hessian_matches_fd_of_gradient(self, straight_scenario):
        prob = transcribe(straight_scenario, ["solo"])
        rng = np.random.default_rng(8)
        z = prob.default_guess() + 0.02 * rng.standard_normal(prob.n_vars)
        c_eq, _ = prob.equality_constraints(z)
        c_in, _ = prob.inequality_constraints(z)
        lam_eq = rng.standard_normal(c_eq.size)
        lam_in = np.abs(rng.standard_normal(c_in.size)) * 0.1

        def lag_grad(zz):
            g = prob.gradient(zz)
            _, J_eq = prob.equality_constraints(zz)
            _, J_in = prob.inequality_constraints(zz)
            return g - J_eq.T @ lam_eq - J_in.T @ lam_in

        W = prob.lagrangian_hessian(z, lam_eq, lam_in)
        eps = 1e-6
        for i in rng.choice(prob.n_vars, size=20, replace=False):
            dz = np.zeros(prob.n_vars)
            dz[i] = eps
            fd = (lag_grad(z + dz) - lag_grad(z - dz)) / (2 * eps)
            assert np.abs(W[:, i] - fd).max() <= 2e-4 * max(1.0, np.abs(fd).max())


class TestSolve:
    def test_straight_run_beats_brute_force_oracle(self, straight_scenario, solo_solution):
        prob, sol = solo_solution
        assert sol.status == OPTIMAL
        assert sol.kkt_residual <= 1e-6
        oracle = brute_force_upper_bound(straight_scenario, "solo")
        assert np.isfinite(oracle)
        assert sol.objective <= oracle + 1e-6

    def test_optimal_contract_defects_and_violations(self, solo_solution):
        prob, sol = solo_solution
        c_eq, _ = prob.equality_constraints(sol.z)
        c_in, _ = prob.inequality_constraints(sol.z)
        assert np.abs(c_eq).max() <= 1e-8
        assert c_in.min() >= -1e-6
        comp = np.abs(sol.lam_in * c_in).max()
        assert comp <= 1e-6

    def test_objective_consistency_with_trajectory(self, straight_scenario, solo_solution):
        prob, sol = solo_solution
        recomputed = trajectory_objective(sol.trajectories["solo"], straight_scenario.vehicle_params["solo"])
        assert abs(recomputed - sol.objective) <= 1e-10 * max(1.0, abs(sol.objective))

    def test_time_monotone_speed_in_bounds(self, straight_scenario, solo_solution):
        _, sol = solo_solution
        tr = sol.trajectories["solo"]
        prm = straight_scenario.vehicle_params["solo"]
        assert np.all(np.diff(tr.t) > 0)
        assert tr.v.min() >= prm.v_min - 1e-6
        assert tr.v.max() <= prm.v_max + 1e-6

    def test_warm_resolve_converges_in_two_iterations(self, straight_scenario, solo_solution):
        prob, sol = solo_solution
        warm = solve_sqp(prob, initial_guess=sol)
        assert warm.status == OPTIMAL
        assert warm.iterations <= 2
        assert warm.objective == pytest.approx(sol.objective, abs=1e-8)

    def test_pins_at_unconstrained_optimum_change_nothing(self, crossing_scenario):
        free_prob = transcribe(crossing_scenario, ["a"])
        free = solve_sqp(free_prob)
        assert free.status == OPTIMAL
        zone = crossing_scenario.zones[0]
        m = zone.member("a")
        tr = free.trajectories["a"]
        pins = {"a": {zone.zone_id: (float(tr.time_at(m.p_in)), float(tr.time_at(m.p_out)))}}
        pinned_prob = transcribe(crossing_scenario, ["a"], pins=pins)
        pinned = solve_sqp(pinned_prob, initial_guess=free.z)
        assert pinned.status == OPTIMAL
        assert pinned.objective == pytest.approx(free.objective, abs=1e-6)

    def test_unreachable_pins_reported_infeasible(self, crossing_scenario):
        # earliest possible arrival at 195 m is 195 / v_max = 7.8 s
        pins = {"a": {"I1": (1.0, 1.2)}}
        prob = transcribe(crossing_scenario, ["a"], pins=pins)
        sol = solve_sqp(prob)
        assert sol.status == NLP_INFEASIBLE
        assert sol.restoration_residuals is not None
        assert sol.restoration_residuals.max() > 1e-3

    def test_doubling_grid_changes_objective_within_one_percent(self):
        doc = STRAIGHT_DOC.replace("N: 50", "N: 25")
        coarse = solve_sqp(transcribe(load_scenario(doc), ["solo"]))
        fine = solve_sqp(transcribe(load_scenario(STRAIGHT_DOC), ["solo"]))
        assert coarse.status == OPTIMAL and fine.status == OPTIMAL
        assert abs(fine.objective - coarse.objective) <= 0.01 * abs(coarse.objective)
