import math
import shlex
import sys

import numpy as np
import pytest

from tablewipe.baselines import (
    CovarianceAxisPolicy,
    EpisodeStats,
    ExternalPolicy,
    RotatingCenterPolicy,
    aggregate,
    covariance_axis_action,
    evaluate_policy,
    make_policy,
    rotating_center_action,
    run_episode,
    run_episodes,
)
from tablewipe.env import make_preset, render_observation
from tablewipe.sde import ParticleCloud, TableGeometry

TABLE = TableGeometry()


def obs_of(points):
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    return render_observation(ParticleCloud(xs, ys, np.zeros(len(points), np.uint8)), TABLE)


# ---------------------------------------------------------------------------
# Rotating-center schedule


class TestRotatingCenter:
    def test_step_zero(self):
        a = rotating_center_action(0, TABLE)
        assert (a.px, a.py) == (0.95, 0.5)
        assert a.theta == pytest.approx(math.pi)
        assert a.length == pytest.approx(0.45)

    def test_step_four_points_back(self):
        a = rotating_center_action(4, TABLE)
        assert a.px == pytest.approx(0.05)
        assert a.py == pytest.approx(0.5)
        assert a.theta == pytest.approx(0.0, abs=1e-12)

    def test_period_eight(self):
        for k in range(8):
            a = rotating_center_action(k, TABLE)
            b = rotating_center_action(k + 8, TABLE)
            assert (a.px, a.py, a.theta, a.length) == (b.px, b.py, b.theta, b.length)

    def test_diagonal_step(self):
        a = rotating_center_action(1, TABLE)
        r = 0.45
        assert a.px == pytest.approx(0.5 + r * math.cos(math.pi / 4))
        assert a.py == pytest.approx(0.5 + r * math.sin(math.pi / 4))
        assert a.theta == pytest.approx(math.pi / 4 + math.pi)

    def test_all_steps_valid_actions(self):
        for k in range(16):
            rotating_center_action(k, TABLE).validate(TABLE)

    def test_rectangular_table_radius(self):
        table = TableGeometry(2.0, 1.0)
        a = rotating_center_action(0, table)
        assert a.px == pytest.approx(1.0 + 0.45)  # r = 0.45 * min(w, h)
        assert a.py == pytest.approx(0.5)
        assert a.length == pytest.approx(0.45)


# ---------------------------------------------------------------------------
# Covariance-axis policy


class TestCovarianceAxis:
    def test_two_cluster_line(self):
        obs = obs_of([(0.3, 0.5), (0.7, 0.5)])
        a = covariance_axis_action(obs, TABLE)
        # pixel centers for ix=19 and ix=44 straddle the mean symmetrically
        assert a.theta == pytest.approx(0.0, abs=1e-12)
        assert a.length == pytest.approx(4 * 0.1953125)
        assert a.px == pytest.approx(0.5 - 0.5 * a.length)
        assert a.py == pytest.approx(0.5078125)

    def test_vertical_line(self):
        obs = obs_of([(0.5, 0.2), (0.5, 0.8)])
        a = covariance_axis_action(obs, TABLE)
        assert a.theta in (pytest.approx(math.pi / 2), pytest.approx(3 * math.pi / 2))

    def test_orientation_points_toward_center(self):
        # mass near the right edge: wipe should head left, toward the center
        obs = obs_of([(0.9, 0.45), (0.9, 0.55), (0.95, 0.5)])
        a = covariance_axis_action(obs, TABLE)
        d = (math.cos(a.theta), math.sin(a.theta))
        mean_x = 0.9
        assert d[0] * (0.5 - mean_x) + d[1] * 0.0 >= 0

    def test_single_pixel_degenerate(self):
        obs = obs_of([(0.8, 0.8)])
        a = covariance_axis_action(obs, TABLE)
        a.validate(TABLE)
        # degenerate cloud: aim toward the table center with the floor length
        d = (math.cos(a.theta), math.sin(a.theta))
        to_center = (0.5 - 0.8, 0.5 - 0.8)
        assert d[0] * to_center[0] + d[1] * to_center[1] > 0
        assert a.length == pytest.approx(4.0 / 64.0)

    def test_actions_always_valid(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pts = [(rng.uniform(0, 1), rng.uniform(0, 1)) for _ in range(rng.integers(1, 30))]
            covariance_axis_action(obs_of(pts), TABLE).validate(TABLE)

    def test_policy_falls_back_on_empty(self):
        pol = CovarianceAxisPolicy()
        pol.begin_episode()
        empty = obs_of([(1.5, 0.5)]) if False else render_observation(
            ParticleCloud(np.array([0.5]), np.array([0.5]), np.ones(1, np.uint8)), TABLE
        )
        a = pol.act(empty, TABLE)
        b = rotating_center_action(0, TABLE)
        assert (a.px, a.py, a.theta, a.length) == (b.px, b.py, b.theta, b.length)


# ---------------------------------------------------------------------------
# Policy construction and evaluation


class TestEvaluation:
    def test_make_policy_names(self):
        assert isinstance(make_policy("rotating-center"), RotatingCenterPolicy)
        assert isinstance(make_policy("covariance-axis"), CovarianceAxisPolicy)
        with pytest.raises(ValueError):
            make_policy("unknown")

    def test_run_episode_success_flag(self):
        cfg = make_preset("gather-train")
        stats = run_episode(cfg, RotatingCenterPolicy(), seed=0)
        assert stats.seed == 0
        assert stats.wipes <= cfg.max_steps
        assert isinstance(stats.success, bool)
        assert stats.off_table_events >= 0

    def test_run_episodes_seeds_are_sequential(self):
        cfg = make_preset("gather-train")
        stats = run_episodes(cfg, RotatingCenterPolicy(), 3, seed=10)
        assert [s.seed for s in stats] == [10, 11, 12]

    def test_evaluation_deterministic(self):
        cfg = make_preset("gather-train")
        r1 = evaluate_policy(cfg, RotatingCenterPolicy(), episodes=5, seed=3)
        r2 = evaluate_policy(cfg, RotatingCenterPolicy(), episodes=5, seed=3)
        assert r1 == r2

    def test_aggregate_moments(self):
        stats = [
            EpisodeStats(seed=0, wipes=2, success=True, off_table_events=0, total_reward=-1.0),
            EpisodeStats(seed=1, wipes=4, success=False, off_table_events=2, total_reward=-2.0),
        ]
        rep = aggregate(stats)
        assert rep.episodes == 2
        assert rep.mean_wipes == 3.0
        assert rep.std_wipes == 1.0  # population std
        assert rep.success_rate == 0.5
        assert rep.mean_off_table_events == 1.0

    def test_rotating_center_solves_gather_train(self):
        cfg = make_preset("gather-train")
        rep = evaluate_policy(cfg, RotatingCenterPolicy(), episodes=30, seed=0)
        assert rep.success_rate >= 0.9


# ---------------------------------------------------------------------------
# External policy subprocess bridge


ECHO_POLICY = r"""
import json, sys
for line in sys.stdin:
    msg = json.loads(line)
    if msg["cmd"] == "reset_policy":
        print(json.dumps({"ok": True}), flush=True)
    elif msg["cmd"] == "act":
        n = sum(1 for v in msg["obs"] if v)
        print(json.dumps({"action": [0.25, 0.75, 1.5, 0.2 if n else 0.1]}), flush=True)
"""


class TestExternalPolicy:
    def test_cmd_round_trip(self):
        endpoint = "cmd:" + shlex.join([sys.executable, "-c", ECHO_POLICY])
        pol = ExternalPolicy(endpoint)
        try:
            pol.begin_episode()
            obs = obs_of([(0.5, 0.5)])
            a = pol.act(obs, TABLE)
            assert (a.px, a.py, a.theta) == (0.25, 0.75, 1.5)
            assert a.length == 0.2
        finally:
            pol.close()

    def test_make_policy_external(self):
        endpoint = "external:cmd:" + shlex.join([sys.executable, "-c", ECHO_POLICY])
        pol = make_policy(endpoint)
        try:
            assert isinstance(pol, ExternalPolicy)
        finally:
            pol.close()
