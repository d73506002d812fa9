import numpy as np
import pytest

from sitecoord.nlp import solve_sqp, transcribe
from sitecoord.sensitivity import (
    SensitivityError,
    TimeSlotSchedule,
    ZoneSlot,
    project_psd,
    schedule_from_trajectories,
    vehicle_value_and_sensitivities,
)
from sitecoord.site_model import load_scenario

TWO_ZONE_DOC = """
vehicles:
  - id: a
    waypoints: [[-250, 0], [0, 0], [250, 0]]
    v_initial: 50 km/h
  - id: b
    waypoints: [[-100, -150], [-100, 150]]
    v_initial: 50 km/h
  - id: c
    waypoints: [[100, -150], [100, 150]]
    v_initial: 50 km/h
zones: auto
grid: {N: 40}
"""


@pytest.fixture(scope="module")
def scenario():
    return load_scenario(TWO_ZONE_DOC)


@pytest.fixture(scope="module")
def base(scenario):
    """Uncoordinated solve of vehicle a plus its unconstrained zone times."""
    prob = transcribe(scenario, ["a"])
    sol = solve_sqp(prob, kkt_tol=1e-8)
    assert sol.status == "optimal"
    sched = schedule_from_trajectories(scenario, sol.trajectories)
    return sol, sched


def value_of(scenario, vehicle, schedule, warm=None):
    pins = {vehicle: schedule.as_pins(vehicle)}
    sol = solve_sqp(transcribe(scenario, [vehicle], pins=pins), initial_guess=warm, kkt_tol=3e-8)
    assert sol.status == "optimal", sol.status
    return sol.objective, sol


class TestScheduleType:
    def test_vector_layout_is_in_out_per_zone(self, scenario, base):
        _, sched = base
        vec = sched.vector("a")
        slots = sched.for_vehicle("a")
        assert len(vec) == 2 * len(slots) == 4
        assert vec[0] == slots[0].t_in and vec[1] == slots[0].t_out

    def test_validate_accepts_extracted_schedule(self, scenario, base):
        _, sched = base
        sched.validate(scenario)

    def test_validate_rejects_too_short_slot(self, scenario, base):
        _, sched = base
        slots = sched.for_vehicle("a")
        bad = TimeSlotSchedule({"a": [ZoneSlot(slots[0].zone_id, 5.0, 5.05)] + slots[1:]})
        with pytest.raises(ValueError, match="transit"):
            bad.validate(scenario)


class TestGradient:
    def test_zero_gradient_at_unconstrained_optimum(self, scenario, base):
        # residual multipliers reflect the composed solver tolerances: the
        # reference times come from a 1e-8-converged solve and the value
        # function is steeply curved near the speed-limit-saturated leg, so
        # ~1e-6-scale noise on the pins is the honest floor here
        sol, sched = base
        exp = vehicle_value_and_sensitivities(scenario, "a", sched, warm_start=sol, kkt_tol=1e-8)
        assert exp.value == pytest.approx(sol.objective, abs=1e-8)
        assert np.abs(exp.gradient).max() <= 2e-6

    def test_gradient_matches_central_differences(self, scenario, base):
        sol, sched0 = base
        vec = sched0.vector("a") + np.array([1.0, 1.05, 1.6, 1.7])
        sched = sched0.replaced("a", vec)
        exp = vehicle_value_and_sensitivities(scenario, "a", sched, warm_start=sol)
        h = 1e-3
        fd = np.zeros(4)
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            vp, _ = value_of(scenario, "a", sched0.replaced("a", vec + e), warm=exp.solution)
            vm, _ = value_of(scenario, "a", sched0.replaced("a", vec - e), warm=exp.solution)
            fd[j] = (vp - vm) / (2 * h)
        # vector-relative: the FD oracle's own truncation noise is absolute
        # (third-derivative terms), so near-zero components cannot be held
        # to a per-component relative bound
        assert np.linalg.norm(exp.gradient - fd) <= 1e-4 * np.linalg.norm(fd)

    def test_envelope_property_for_inactive_pin(self, scenario, base):
        # at the unconstrained optimum all pins carry zero multipliers, so
        # the value change under a slot shift is o(h): the difference-quotient
        # must collapse as h shrinks (the quadratic term is huge here because
        # the leg between the zones runs at the speed limit)
        sol, sched = base
        v0 = sol.objective
        quotients = []
        for h in (1e-3, 1e-4):
            delta = np.zeros(4)
            delta[1] = h
            v_shift, _ = value_of(scenario, "a", sched.replaced("a", sched.vector("a") + delta), warm=sol)
            quotients.append(abs(v_shift - v0) / h)
        assert quotients[1] <= 0.2 * quotients[0] + 1e-6


@pytest.fixture(scope="module")
def expansion(scenario, base):
    sol, sched0 = base
    vec = sched0.vector("a") + np.array([1.0, 1.05, 1.6, 1.7])
    return sched0, vec, vehicle_value_and_sensitivities(
        scenario, "a", sched0.replaced("a", vec), warm_start=sol
    )


class TestHessian:

    def test_columns_match_fd_of_gradient(self, scenario, expansion):
        sched0, vec, exp = expansion
        h = 1e-3
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            gp = vehicle_value_and_sensitivities(
                scenario, "a", sched0.replaced("a", vec + e), warm_start=exp.solution
            ).gradient
            gm = vehicle_value_and_sensitivities(
                scenario, "a", sched0.replaced("a", vec - e), warm_start=exp.solution
            ).gradient
            fd = (gp - gm) / (2 * h)
            assert np.linalg.norm(exp.hessian[:, j] - fd) <= 1e-2 * np.linalg.norm(fd)

    def test_symmetry_before_symmetrization(self, expansion):
        # raw asymmetry is checked inside; the stored Hessian is symmetric
        _, _, exp = expansion
        assert np.abs(exp.hessian - exp.hessian.T).max() <= 1e-10

    def test_psd_projection_properties(self, expansion):
        _, _, exp = expansion
        H = exp.psd_projected_hessian
        assert np.linalg.eigvalsh(H).min() >= 1e-8 - 1e-12
        again = project_psd(H)
        assert np.allclose(again, H, atol=1e-12)

    def test_quadratic_model_has_cubic_error_falloff(self, scenario, expansion):
        sched0, vec, exp = expansion
        direction = np.array([1.0, 1.05, 1.1, 1.15])
        errs = []
        for scale in (0.1, 0.2, 0.4):
            t = vec + scale * direction
            v, _ = value_of(scenario, "a", sched0.replaced("a", t), warm=exp.solution)
            errs.append(abs(v - exp.quadratic_model(t)))
        # cubic trend: quadrupling the step grows the error far more than 4x
        assert errs[2] > 10.0 * errs[0]
        assert errs[1] <= 0.6 * errs[2]


class TestErrors:
    def test_unreachable_schedule_raises(self, scenario, base):
        _, sched0 = base
        vec = sched0.vector("a").copy()
        vec[0] = 0.5  # cannot reach the first zone this early
        vec[1] = 0.9
        with pytest.raises(SensitivityError, match="ended"):
            vehicle_value_and_sensitivities(scenario, "a", sched0.replaced("a", vec))
