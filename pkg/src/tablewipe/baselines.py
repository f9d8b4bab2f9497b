"""Reference wiping policies and the Monte-Carlo evaluation harness."""

from __future__ import annotations

import json
import math
import shlex
import socket
import subprocess
from dataclasses import dataclass

import numpy as np

from .env import EnvConfig, Observation, RESOLUTION, env_reset, env_step
from .sde import TableGeometry, WipeAction


class SessionError(RuntimeError):
    """External policy session failed (broken pipe, bad reply, timeout)."""


def rotating_center_action(step_index: int, table: TableGeometry) -> WipeAction:
    """Wipe toward the table center from a start point that rotates around
    the table in increments of pi/4 (period 8)."""
    if step_index < 0:
        raise ValueError("step_index must be >= 0")
    phi = (step_index % 8) * (math.pi / 4.0)
    r = 0.45 * min(table.width_m, table.height_m)
    cx, cy = table.center
    px = cx + r * math.cos(phi)
    py = cy + r * math.sin(phi)
    theta = (phi + math.pi) % (2.0 * math.pi)
    action, _ = WipeAction(px, py, theta, r).clamped(table)
    return action


def covariance_axis_action(obs: Observation, table: TableGeometry) -> WipeAction:
    """Wipe through the dirty-pixel mean along the principal covariance
    axis, oriented toward the table center.

    The wipe is long enough to sweep +/- 2 sigma of the mass (floored at
    four pixel widths so a degenerate single-pixel blob still gets a
    usable wipe). Ties -- isotropic or rank-deficient covariance -- fall
    back to the center direction, then to angle 0.
    """
    set_px = np.argwhere(obs.grid > 0.0)
    if set_px.shape[0] == 0:
        raise ValueError("empty observation: covariance axis is undefined")
    cw = table.width_m / RESOLUTION
    ch = table.height_m / RESOLUTION
    pts = np.column_stack(((set_px[:, 0] + 0.5) * cw, (set_px[:, 1] + 0.5) * ch))
    mean = pts.mean(axis=0)
    cov = np.cov(pts.T, bias=True) if pts.shape[0] > 1 else np.zeros((2, 2))
    cov = np.atleast_2d(cov)
    evals, evecs = np.linalg.eigh(cov)
    lam_max = float(evals[-1])

    center = np.array(table.center)
    to_center = center - mean
    if lam_max <= 1e-15 or (lam_max - float(evals[0])) <= 1e-12 * max(lam_max, 1.0):
        # Degenerate or isotropic: no preferred axis.
        if np.hypot(*to_center) > 1e-12:
            d = to_center / np.hypot(*to_center)
        else:
            d = np.array([1.0, 0.0])
    else:
        d = evecs[:, -1]
        s = float(d @ to_center)
        if s < 0.0:
            d = -d
        elif s == 0.0:
            angles = [math.atan2(d[1], d[0]) % (2 * math.pi), math.atan2(-d[1], -d[0]) % (2 * math.pi)]
            if angles[1] < angles[0]:
                d = -d
    length = max(4.0 * math.sqrt(max(lam_max, 0.0)), 4.0 * min(cw, ch))
    length = min(length, table.max_wipe_length())
    start = mean - 0.5 * length * d
    theta = math.atan2(d[1], d[0]) % (2.0 * math.pi)
    action, _ = WipeAction(float(start[0]), float(start[1]), theta, float(length)).clamped(table)
    return action


class Policy:
    """Per-episode stateful action source."""

    name = "policy"

    def begin_episode(self) -> None:
        pass

    def act(self, obs: Observation, table: TableGeometry) -> WipeAction:
        raise NotImplementedError

    def close(self) -> None:
        pass


class RotatingCenterPolicy(Policy):
    name = "rotating-center"

    def __init__(self):
        self._k = 0

    def begin_episode(self) -> None:
        self._k = 0

    def act(self, obs: Observation, table: TableGeometry) -> WipeAction:
        action = rotating_center_action(self._k, table)
        self._k += 1
        return action


class CovarianceAxisPolicy(Policy):
    name = "covariance-axis"

    def __init__(self):
        self._k = 0

    def begin_episode(self) -> None:
        self._k = 0

    def act(self, obs: Observation, table: TableGeometry) -> WipeAction:
        # Empty observations only occur when the episode is already
        # terminal, but fall back to the rotating baseline just in case.
        if not np.any(obs.grid > 0.0):
            action = rotating_center_action(self._k, table)
        else:
            action = covariance_axis_action(obs, table)
        self._k += 1
        return action


class ExternalPolicy(Policy):
    """Policy served by an external process over JSON lines.

    Requests:  {"cmd":"reset_policy"}
               {"cmd":"act","obs":[4096 ints],"table":[w,h]}
    Responses: {"ok":true} and {"action":[px,py,theta,length]}.

    The endpoint is either "cmd:<shell command>" (spawned subprocess) or
    "tcp:<host>:<port>".
    """

    name = "external"

    def __init__(self, endpoint: str):
        self.endpoint = endpoint
        self._proc: subprocess.Popen | None = None
        self._sock_file = None
        if endpoint.startswith("cmd:"):
            self._proc = subprocess.Popen(
                shlex.split(endpoint[4:]),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        elif endpoint.startswith("tcp:"):
            host, port = endpoint[4:].rsplit(":", 1)
            sock = socket.create_connection((host, int(port)))
            self._sock_file = sock.makefile("rw", newline="\n")
        else:
            raise ValueError("external policy endpoint must start with 'cmd:' or 'tcp:'")

    def _roundtrip(self, msg: dict) -> dict:
        line = json.dumps(msg, sort_keys=True, separators=(",", ":"))
        try:
            if self._proc is not None:
                assert self._proc.stdin is not None and self._proc.stdout is not None
                self._proc.stdin.write(line + "\n")
                self._proc.stdin.flush()
                reply = self._proc.stdout.readline()
            else:
                self._sock_file.write(line + "\n")
                self._sock_file.flush()
                reply = self._sock_file.readline()
        except (BrokenPipeError, OSError) as exc:
            raise SessionError(f"external policy transport failed: {exc}") from exc
        if not reply:
            raise SessionError("external policy closed the stream")
        try:
            obj = json.loads(reply)
        except json.JSONDecodeError as exc:
            raise SessionError(f"external policy sent invalid JSON: {reply!r}") from exc
        if "error" in obj:
            raise SessionError(f"external policy error: {obj['error']}")
        return obj

    def begin_episode(self) -> None:
        self._roundtrip({"cmd": "reset_policy"})

    def act(self, obs: Observation, table: TableGeometry) -> WipeAction:
        reply = self._roundtrip(
            {
                "cmd": "act",
                "obs": obs.flat_ints(),
                "table": [table.width_m, table.height_m],
            }
        )
        a = reply.get("action")
        if not isinstance(a, list) or len(a) != 4:
            raise SessionError(f"external policy reply lacks a 4-element action: {reply!r}")
        action, _ = WipeAction(float(a[0]), float(a[1]), float(a[2]), float(a[3])).clamped(table)
        return action

    def close(self) -> None:
        if self._proc is not None:
            try:
                if self._proc.stdin:
                    self._proc.stdin.close()
            except OSError:
                pass
            self._proc.terminate()
            self._proc.wait(timeout=5)
        if self._sock_file is not None:
            self._sock_file.close()


def make_policy(name: str) -> Policy:
    if name == "rotating-center":
        return RotatingCenterPolicy()
    if name == "covariance-axis":
        return CovarianceAxisPolicy()
    if name.startswith("external:"):
        return ExternalPolicy(name[len("external:"):])
    raise ValueError(
        f"unknown policy '{name}'; known: rotating-center, covariance-axis, external:<endpoint>"
    )


@dataclass(frozen=True)
class EpisodeStats:
    seed: int
    wipes: int
    success: bool
    off_table_events: int
    total_reward: float


@dataclass(frozen=True)
class EvalReport:
    episodes: int
    mean_wipes: float
    std_wipes: float
    success_rate: float
    mean_off_table_events: float


def run_episode(config: EnvConfig, policy: Policy, seed: int) -> EpisodeStats:
    """One seeded episode. Episodes that hit the step cap without meeting
    the termination rule count as failures with the full wipe count."""
    state, obs = env_reset(config, seed)
    policy.begin_episode()
    wipes = 0
    off_events = 0
    total_reward = 0.0
    success = state.done  # terminal at reset counts as an immediate success
    while not state.done:
        action = policy.act(state.last_obs, config.table)
        result = env_step(state, action)
        wipes += 1
        total_reward += result.reward
        if result.info["off_table_count"] > 0:
            off_events += 1
        success = result.info["terminated"]
    return EpisodeStats(seed, wipes, bool(success), off_events, total_reward)


def aggregate(stats: list[EpisodeStats]) -> EvalReport:
    if not stats:
        raise ValueError("no episodes to aggregate")
    wipes = np.array([s.wipes for s in stats], dtype=np.float64)
    return EvalReport(
        episodes=len(stats),
        mean_wipes=float(wipes.mean()),
        std_wipes=float(wipes.std()),
        success_rate=float(np.mean([1.0 if s.success else 0.0 for s in stats])),
        mean_off_table_events=float(np.mean([s.off_table_events for s in stats])),
    )


def evaluate_policy(config: EnvConfig, policy: Policy, episodes: int, seed: int) -> EvalReport:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    return aggregate(run_episodes(config, policy, episodes, seed))


def run_episodes(config: EnvConfig, policy: Policy, episodes: int, seed: int) -> list[EpisodeStats]:
    return [run_episode(config, policy, seed + k) for k in range(episodes)]
