import math

import numpy as np
import pytest
from importlib import resources

from tablewipe.robot import (
    PolytopeObstacle,
    RobotState,
    forward_kinematics,
    load_robot,
    rot_z,
)
from tablewipe.sde import ConfigError, TableGeometry, WipeAction
from tablewipe.trajopt import (
    NumericError,
    OCPSpec,
    OCPWeights,
    PoseTrajectory,
    build_reference,
    constraint_report,
    objective_gradient,
    rollout,
    rotation_mask_matrix,
    running_cost,
    solve_ocp,
    total_cost,
)

TABLE = TableGeometry()


@pytest.fixture(scope="module")
def r2():
    return load_robot(resources.files("tablewipe").joinpath("assets/robot_2r.json"))


def line_reference(p0, R0, target, dt=0.25, speed=0.15, hold=6):
    dist = np.linalg.norm(target - p0)
    n = max(1, int(np.ceil(dist / speed / dt)))
    K = n + hold
    times = np.arange(K + 1) * dt
    pos = np.array([p0 + min(k / n, 1.0) * (target - p0) for k in range(K + 1)])
    return PoseTrajectory(times, pos, np.tile(R0, (K + 1, 1, 1)))


def spec_for(r2, ref, x0, obstacles=(), weights=None, mask=(True, True, True), dt=0.25):
    return OCPSpec(
        chain=r2.chain,
        cover=r2.cover,
        obstacles=tuple(obstacles),
        reference=ref,
        dt_traj=dt,
        x0=x0,
        control_lower=r2.control_lower,
        control_upper=r2.control_upper,
        weights=weights or OCPWeights(),
        rotation_mask=mask,
    )


# ---------------------------------------------------------------------------
# Reference building


class TestBuildReference:
    def setup_method(self):
        self.tool = np.eye(4)
        self.tool[:3, 3] = [0.2, 0.3, 0.4]
        self.action = WipeAction(0.2, 0.5, 0.0, 0.3).validate(TABLE)

    def test_endpoints_are_tool_pose(self):
        ref = build_reference(self.action, np.eye(4), self.tool, 0.15, 0.1)
        assert np.allclose(ref.positions[0], [0.2, 0.3, 0.4])
        assert np.allclose(ref.positions[-1], [0.2, 0.3, 0.4])
        assert np.allclose(ref.rotations[0], np.eye(3))

    def test_wipe_segment_speed_and_heading(self):
        ref = build_reference(self.action, np.eye(4), self.tool, 0.15, 0.1)
        # wipe segment: 0.3 m at 0.15 m/s sampled at 0.1 s -> 20 steps
        pos = ref.positions
        start = np.array([0.2, 0.5, 0.0])
        end = np.array([0.5, 0.5, 0.0])
        i_start = min(range(len(ref)), key=lambda k: np.linalg.norm(pos[k] - start))
        i_end = min(range(len(ref)), key=lambda k: np.linalg.norm(pos[k] - end))
        assert np.allclose(pos[i_start], start, atol=1e-12)
        assert np.allclose(pos[i_end], end, atol=1e-12)
        assert i_end - i_start == 20
        seg = pos[i_start : i_end + 1]
        steps = np.diff(seg, axis=0)
        assert np.allclose(steps[:, 0], 0.015, atol=1e-12)
        assert np.allclose(steps[:, 1:], 0.0, atol=1e-12)

    def test_wipe_orientation_aligned_with_heading(self):
        action = WipeAction(0.5, 0.5, math.pi / 2, 0.3).validate(TABLE)
        ref = build_reference(action, np.eye(4), self.tool, 0.15, 0.1)
        mid = len(ref) // 2
        R = ref.rotations[mid]
        assert np.allclose(R, rot_z(math.pi / 2), atol=1e-9)

    def test_table_pose_maps_to_world(self):
        table_pose = np.eye(4)
        table_pose[:3, :3] = rot_z(math.pi / 2)
        table_pose[:3, 3] = [1.0, 2.0, 0.5]
        ref = build_reference(self.action, table_pose, self.tool, 0.15, 0.1)
        start_world = table_pose[:3, :3] @ [0.2, 0.5, 0.0] + table_pose[:3, 3]
        dists = [np.linalg.norm(p - start_world) for p in ref.positions]
        assert min(dists) < 1e-9

    def test_constant_pose_collapses_to_two_samples(self):
        # tool already at the wipe start of a zero-length wipe
        action = WipeAction(0.2, 0.3, 0.0, 0.0)
        tool = np.eye(4)
        tool[:3, 3] = [0.2, 0.3, 0.0]
        ref = build_reference(action, np.eye(4), tool, 0.15, 0.1)
        assert len(ref) == 2
        assert np.allclose(ref.positions[0], ref.positions[1])

    def test_rotations_orthonormal_throughout(self):
        action = WipeAction(0.8, 0.2, 2.5, 0.4).validate(TABLE)
        tool = np.eye(4)
        tool[:3, :3] = rot_z(1.0)
        tool[:3, 3] = [0.0, 0.0, 0.5]
        ref = build_reference(action, np.eye(4), tool, 0.15, 0.1)
        for R in ref.rotations:
            assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
            assert np.linalg.det(R) == pytest.approx(1.0)

    def test_invalid_speed_rejected(self):
        with pytest.raises(ConfigError):
            build_reference(self.action, np.eye(4), self.tool, 0.0, 0.1)

    def test_times_uniform(self):
        ref = build_reference(self.action, np.eye(4), self.tool, 0.15, 0.1)
        assert np.allclose(np.diff(ref.times), 0.1)


class TestPoseTrajectory:
    def test_validation(self):
        with pytest.raises(ConfigError):
            PoseTrajectory(np.array([0.0]), np.zeros((1, 3)), np.eye(3)[None])
        with pytest.raises(ConfigError):
            PoseTrajectory(
                np.array([0.0, 0.0]), np.zeros((2, 3)), np.tile(np.eye(3), (2, 1, 1))
            )
        bad_rot = np.tile(np.eye(3) * 2.0, (2, 1, 1))
        with pytest.raises(ConfigError):
            PoseTrajectory(np.array([0.0, 1.0]), np.zeros((2, 3)), bad_rot)


# ---------------------------------------------------------------------------
# Costs and masks


class TestCost:
    def test_rotation_mask_matrix(self):
        assert np.array_equal(rotation_mask_matrix(True, True, True), np.ones((3, 3)))
        m = rotation_mask_matrix(True, False, True)
        assert m[0, 2] == 0 and m[2, 0] == 0
        assert m[0, 1] == 1 and m[1, 0] == 1 and m[1, 2] == 1

    def test_on_reference_zero_cost(self, r2):
        x0 = RobotState(0, 0, 0, np.array([0.4, 0.2]))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        ref = PoseTrajectory(
            np.array([0.0, 0.25]), np.tile(p0, (2, 1)), np.tile(R0, (2, 1, 1))
        )
        spec = spec_for(r2, ref, x0)
        assert running_cost(x0, np.zeros(4), 0, spec) == pytest.approx(0.0, abs=1e-30)

    def test_zero_weights_zero_cost(self, r2):
        x0 = RobotState(0, 0, 0, np.array([0.4, 0.2]))
        ref = PoseTrajectory(
            np.array([0.0, 0.25]), np.ones((2, 3)), np.tile(rot_z(1.0), (2, 1, 1))
        )
        spec = spec_for(r2, ref, x0, weights=OCPWeights(0.0, 0.0, 0.0))
        assert running_cost(x0, np.ones(4), 0, spec) == 0.0

    def test_position_error_squared(self, r2):
        x0 = RobotState(0, 0, 0, np.zeros(2))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        ref = PoseTrajectory(
            np.array([0.0, 0.25]),
            np.tile(p0 + np.array([0.1, 0, 0]), (2, 1)),
            np.tile(R0, (2, 1, 1)),
        )
        spec = spec_for(r2, ref, x0, weights=OCPWeights(w_u=0.0, w_p=1.0, w_R=0.0))
        assert running_cost(x0, np.zeros(4), 0, spec) == pytest.approx(0.01)

    def test_control_cost_quadratic(self, r2):
        x0 = RobotState(0, 0, 0, np.zeros(2))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        ref = PoseTrajectory(
            np.array([0.0, 0.25]), np.tile(p0, (2, 1)), np.tile(R0, (2, 1, 1))
        )
        spec = spec_for(r2, ref, x0, weights=OCPWeights(w_u=2.0, w_p=0.0, w_R=0.0))
        u = np.array([0.0, 0.0, 3.0, 4.0])
        assert running_cost(x0, u, 0, spec) == pytest.approx(2.0 * 25.0)


# ---------------------------------------------------------------------------
# Rollout


class TestRollout:
    def test_zero_controls_hold_state(self):
        x0 = RobotState(0.1, 0.2, 0.3, np.array([0.4]))
        states = rollout(x0, np.zeros((5, 3)), 0.1)
        assert len(states) == 6
        for s in states:
            assert s.rx == 0.1 and s.ry == 0.2 and s.psi == 0.3 and s.q[0] == 0.4

    def test_straight_drive(self):
        x0 = RobotState(0.0, 0.0, 0.0, np.zeros(1))
        U = np.zeros((4, 3))
        U[:, 0] = 1.0
        states = rollout(x0, U, 0.1)
        assert [round(s.rx, 10) for s in states] == [0.0, 0.1, 0.2, 0.3, 0.4]

    def test_rollout_deterministic(self):
        rng = np.random.default_rng(0)
        x0 = RobotState(0, 0, 0, rng.normal(size=2))
        U = rng.normal(size=(6, 4))
        a = rollout(x0, U, 0.1)
        b = rollout(x0, U, 0.1)
        for s, t in zip(a, b):
            assert np.array_equal(s.as_vector(), t.as_vector())


# ---------------------------------------------------------------------------
# Solver


class TestSolver:
    def test_constant_reference_converges_to_zero(self, r2):
        x0 = RobotState(0, 0, 0, np.array([0.3, 0.4]))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        K = 8
        ref = PoseTrajectory(
            np.arange(K + 1) * 0.25, np.tile(p0, (K + 1, 1)), np.tile(R0, (K + 1, 1, 1))
        )
        res = solve_ocp(spec_for(r2, ref, x0))
        assert res.status == "Converged"
        assert res.cost <= 1e-8
        assert np.abs(res.controls).max() <= 1e-6

    def test_gradient_matches_fd(self, r2):
        x0 = RobotState(0, 0, 0, np.array([0.3, 0.4]))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        K = 6
        ref = PoseTrajectory(
            np.arange(K + 1) * 0.25,
            np.tile(p0, (K + 1, 1)) + np.linspace(0, 0.2, K + 1)[:, None] * np.array([1.0, 0, 0]),
            np.tile(R0, (K + 1, 1, 1)),
        )
        spec = spec_for(r2, ref, x0)
        rng = np.random.default_rng(3)
        for _ in range(3):
            U = rng.uniform(-0.4, 0.4, size=(K, 4))
            cost, grad = objective_gradient(spec, U)
            eps = 1e-6
            fd = np.zeros_like(U)
            for k in range(K):
                for m in range(4):
                    up, um = U.copy(), U.copy()
                    up[k, m] += eps
                    um[k, m] -= eps
                    fd[k, m] = (objective_gradient(spec, up)[0] - objective_gradient(spec, um)[0]) / (2 * eps)
            rel = np.abs(grad - fd).max() / max(1.0, np.abs(fd).max())
            assert rel <= 1e-4

    def test_line_tracking_reaches_target(self, r2):
        x0 = RobotState(0, 0, 0, np.array([0.6, 0.8]))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        target = np.array([1.3, 0.4, 0.0])
        ref = line_reference(p0, R0, target)
        res = solve_ocp(spec_for(r2, ref, x0, weights=OCPWeights(w_u=1e-5, w_R=0.0)))
        assert res.status == "Converged"
        _, (pe, _) = forward_kinematics(r2.chain, res.states[-1])
        assert np.linalg.norm(pe - target) < 1e-3

    def test_obstacle_pushes_cost_up(self, r2):
        x0 = RobotState(0, 0, 0, np.array([0.6, 0.8]))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        target = np.array([1.3, 0.4, 0.0])
        ref = line_reference(p0, R0, target)
        w = OCPWeights(w_u=1e-5, w_R=0.0)
        free = solve_ocp(spec_for(r2, ref, x0, weights=w))
        mid = 0.5 * (p0 + target)
        box = PolytopeObstacle.from_box([mid[0], mid[1], 0.0], [0.07, 0.07, 0.4])
        spec = spec_for(r2, ref, x0, obstacles=[box], weights=w)
        res = solve_ocp(spec)
        assert res.status == "Converged"
        assert res.max_constraint_violation <= 1e-6
        assert res.cost > free.cost
        report = constraint_report(spec, res.states)
        worst = min(min(step["obstacle"]) for step in report)
        assert worst >= -1e-6

    def test_shooting_consistency_bit_identical(self, r2):
        x0 = RobotState(0, 0, 0, np.array([0.6, 0.8]))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        ref = line_reference(p0, R0, np.array([1.3, 0.4, 0.0]))
        res = solve_ocp(spec_for(r2, ref, x0))
        states = rollout(x0, res.controls, 0.25)
        for a, b in zip(states, res.states):
            assert np.array_equal(a.as_vector(), b.as_vector())

    def test_merit_never_above_initial_guess(self, r2):
        # holds for any iteration budget, so keep the budget small
        x0 = RobotState(0, 0, 0, np.array([0.6, 0.8]))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        ref = line_reference(p0, R0, np.array([1.1, 1.0, 0.0]), hold=2)
        box = PolytopeObstacle.from_box([1.0, 1.0, 0.0], [0.1, 0.1, 0.4])
        spec = spec_for(r2, ref, x0, obstacles=[box])
        rng = np.random.default_rng(6)
        for _ in range(3):
            U0 = rng.uniform(-0.5, 0.5, size=(spec.horizon, 4))
            res = solve_ocp(spec, initial_controls=U0, max_outer=5)
            assert res.merit_solution <= res.merit_initial_guess + 1e-9

    def test_pinned_base_controls_stay_zero(self, r2):
        x0 = RobotState(0, 0, 0, np.array([0.6, 0.8]))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        ref = line_reference(p0, R0, np.array([1.3, 0.4, 0.0]))
        res = solve_ocp(spec_for(r2, ref, x0))
        assert np.all(res.controls[:, :2] == 0.0)
        for s in res.states:
            assert s.rx == 0.0 and s.ry == 0.0 and s.psi == 0.0

    def test_control_bounds_respected(self, r2):
        x0 = RobotState(0, 0, 0, np.array([0.6, 0.8]))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        # target far away: unconstrained tracking would exceed the rate bound
        ref = line_reference(p0, R0, np.array([-1.8, -0.4, 0.0]), dt=0.25, speed=1.5)
        res = solve_ocp(spec_for(r2, ref, x0))
        assert res.status == "Converged"
        assert np.all(res.controls >= r2.control_lower - 1e-6)
        assert np.all(res.controls <= r2.control_upper + 1e-6)
        assert np.abs(res.controls).max() > 1.9  # the bound actually binds

    def test_total_cost_matches_result(self, r2):
        x0 = RobotState(0, 0, 0, np.array([0.6, 0.8]))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        ref = line_reference(p0, R0, np.array([1.3, 0.4, 0.0]))
        spec = spec_for(r2, ref, x0)
        res = solve_ocp(spec)
        assert total_cost(spec, res.controls) == pytest.approx(res.cost, rel=1e-12)

    def test_nan_state_raises_numeric_error(self, r2):
        x0 = RobotState(float("nan"), 0, 0, np.array([0.6, 0.8]))
        _, (p0, R0) = forward_kinematics(r2.chain, RobotState(0, 0, 0, np.array([0.6, 0.8])))
        ref = line_reference(p0, R0, np.array([1.3, 0.4, 0.0]))
        with pytest.raises(NumericError):
            solve_ocp(spec_for(r2, ref, x0))

    def test_initial_controls_shape_checked(self, r2):
        x0 = RobotState(0, 0, 0, np.array([0.6, 0.8]))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        ref = line_reference(p0, R0, np.array([1.3, 0.4, 0.0]))
        with pytest.raises(ConfigError):
            solve_ocp(spec_for(r2, ref, x0), initial_controls=np.zeros((2, 4)))

    def test_constraint_report_shape(self, r2):
        x0 = RobotState(0, 0, 0, np.array([0.6, 0.8]))
        _, (p0, R0) = forward_kinematics(r2.chain, x0)
        ref = line_reference(p0, R0, np.array([1.3, 0.4, 0.0]))
        box = PolytopeObstacle.from_box([2.0, 2.0, 0.0], [0.1, 0.1, 0.1])
        spec = spec_for(r2, ref, x0, obstacles=[box])
        res = solve_ocp(spec)
        report = constraint_report(spec, res.states)
        assert len(report) == len(res.states)
        # one obstacle x two cover spheres; the cover's only pair is excluded
        assert all(len(step["obstacle"]) == 2 for step in report)
        assert all(step["self_collision"] == [] for step in report)
