"""Episodic wiping environment: observations, rewards, termination, presets.

An episode starts from a sampled particle cloud and proceeds by whole
wipes: each env_step executes one full wipe of the simulator, re-renders
the 64x64 dirtiness mask, and scores the step. Episodes are a pure
function of (config, seed, action sequence).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .sde import (
    ConfigError,
    GaussianComponent,
    InitialStateSpec,
    ParticleCloud,
    SdeParams,
    TableGeometry,
    WipeAction,
    sample_initial_cloud,
    simulate_wipe,
)

RESOLUTION = 64


class ProtocolError(RuntimeError):
    """Stepping a finished or uninitialized episode."""


class TaskKind(Enum):
    GATHER_CRUMBS = "gather"
    CLEAN_SPILLS = "spills"


@dataclass(frozen=True)
class Observation:
    """64x64 dirtiness mask; grid[ix, iy] covers the cell
    [ix*w/64,(ix+1)*w/64) x [iy*h/64,(iy+1)*h/64)."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.ascontiguousarray(self.grid, dtype=np.float64)
        if g.shape != (RESOLUTION, RESOLUTION):
            raise ValueError(f"observation grid must be {RESOLUTION}x{RESOLUTION}")
        if np.any(g < 0.0) or np.any(g > 1.0):
            raise ValueError("observation values must lie in [0,1]")
        object.__setattr__(self, "grid", g)

    def pixel_mass(self) -> float:
        return float(self.grid.sum())

    def is_all_zero(self) -> bool:
        return not np.any(self.grid)

    def flat_ints(self) -> list[int]:
        """Row-major 0/1 list (index = ix*64 + iy) for the wire protocol."""
        return [int(v) for v in np.rint(self.grid.ravel())]


def render_observation(cloud: ParticleCloud, table: TableGeometry) -> Observation:
    """Binary mask of unwiped on-table particles.

    A particle sitting exactly on the far table edge is clipped into the
    last cell so the mask is all-zero iff no visible particle exists.
    """
    grid = np.zeros((RESOLUTION, RESOLUTION), dtype=np.float64)
    vis = cloud.unwiped_on_table(table)
    if np.any(vis):
        xs = cloud.xs[vis]
        ys = cloud.ys[vis]
        ix = np.minimum((xs * (RESOLUTION / table.width_m)).astype(np.int64), RESOLUTION - 1)
        iy = np.minimum((ys * (RESOLUTION / table.height_m)).astype(np.int64), RESOLUTION - 1)
        grid[ix, iy] = 1.0
    return Observation(grid)


def reward_gathering(cloud: ParticleCloud, table: TableGeometry) -> float:
    """Negative mean distance of visible particles to the table center.

    With no visible particle left the reward is defined as 0 (the episode
    is terminal at that point anyway).
    """
    vis = cloud.unwiped_on_table(table)
    if not np.any(vis):
        return 0.0
    cx, cy = table.center
    d = np.hypot(cloud.xs[vis] - cx, cloud.ys[vis] - cy)
    return float(-d.mean())


def reward_spill_reduction(before: Observation, after: Observation) -> float:
    """Reduction in dirty pixel mass; positive when the wipe cleaned pixels."""
    return float(before.grid.sum() - after.grid.sum())


def off_table_penalty(cloud: ParticleCloud, table: TableGeometry, mu: float) -> float:
    return -mu if cloud.off_table_count(table) > 0 else 0.0


class InitSampler:
    """Per-episode initial-state distribution. Subclasses draw an
    InitialStateSpec (or a cloud directly) from the episode random source."""

    def sample(self, rng: np.random.Generator) -> InitialStateSpec:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class FixedInit(InitSampler):
    spec: InitialStateSpec

    def sample(self, rng: np.random.Generator) -> InitialStateSpec:
        return self.spec

    def to_dict(self) -> dict:
        return {
            "components": [
                {"mean": list(c.mean), "std": c.std, "weight": c.weight}
                for c in self.spec.components
            ],
            "particle_count": self.spec.particle_count,
        }


@dataclass(frozen=True)
class UniformGaussianInit(InitSampler):
    """Mixture whose component means/stds are themselves drawn uniformly
    at every reset, giving a fresh blob layout per episode."""

    mean_low: tuple[float, float] = (0.2, 0.2)
    mean_high: tuple[float, float] = (0.8, 0.8)
    std_low: float = 0.05
    std_high: float = 0.15
    components_min: int = 1
    components_max: int = 1
    particle_count: int = 1000

    def __post_init__(self):
        if not (1 <= self.components_min <= self.components_max):
            raise ConfigError("component count range must satisfy 1 <= min <= max")
        if not (0.0 <= self.std_low <= self.std_high):
            raise ConfigError("std range must satisfy 0 <= low <= high")

    def sample(self, rng: np.random.Generator) -> InitialStateSpec:
        n = int(rng.integers(self.components_min, self.components_max + 1))
        lo = np.asarray(self.mean_low)
        hi = np.asarray(self.mean_high)
        comps = []
        weights = rng.random(n)
        weights = weights / weights.sum()
        for i in range(n):
            mean = lo + rng.random(2) * (hi - lo)
            std = self.std_low + rng.random() * (self.std_high - self.std_low)
            comps.append(GaussianComponent((float(mean[0]), float(mean[1])), float(std), float(weights[i])))
        return InitialStateSpec(tuple(comps), self.particle_count)

    def to_dict(self) -> dict:
        return {
            "sampler": "uniform-gaussian",
            "mean_low": list(self.mean_low),
            "mean_high": list(self.mean_high),
            "std_low": self.std_low,
            "std_high": self.std_high,
            "components_min": self.components_min,
            "components_max": self.components_max,
            "particle_count": self.particle_count,
        }


@dataclass(frozen=True)
class MaskInit(InitSampler):
    """Initial cloud built from an ingested binary mask: each set pixel
    receives ceil(particle_count/set_pixels) particles placed uniformly
    within its cell."""

    mask: np.ndarray
    particle_count: int = 1000
    source: str = ""

    def __post_init__(self):
        m = np.ascontiguousarray(self.mask, dtype=np.float64)
        if m.shape != (RESOLUTION, RESOLUTION):
            raise ConfigError(f"mask must be {RESOLUTION}x{RESOLUTION}")
        if self.particle_count < 1:
            raise ConfigError("particle_count must be >= 1")
        object.__setattr__(self, "mask", m)

    def sample_cloud(self, table: TableGeometry, rng: np.random.Generator) -> ParticleCloud:
        set_px = np.argwhere(self.mask > 0.5)
        if set_px.shape[0] == 0:
            raise ConfigError("mask has no set pixels")
        per = math.ceil(self.particle_count / set_px.shape[0])
        cw = table.width_m / RESOLUTION
        ch = table.height_m / RESOLUTION
        xs = []
        ys = []
        for ix, iy in set_px:
            u = rng.random((per, 2))
            xs.append((ix + u[:, 0]) * cw)
            ys.append((iy + u[:, 1]) * ch)
        xs = np.concatenate(xs)
        ys = np.concatenate(ys)
        return ParticleCloud(xs, ys, np.zeros(xs.shape[0], dtype=np.uint8))

    def sample(self, rng: np.random.Generator) -> InitialStateSpec:
        raise ConfigError("mask-based init does not define a Gaussian spec")

    def to_dict(self) -> dict:
        return {"mask": self.source or "<inline>", "particle_count": self.particle_count}


@dataclass(frozen=True)
class EnvConfig:
    table: TableGeometry = field(default_factory=TableGeometry)
    sde: SdeParams = field(default_factory=SdeParams)
    task: TaskKind = TaskKind.GATHER_CRUMBS
    init: InitSampler = field(default_factory=UniformGaussianInit)
    max_steps: int = 20
    penalty_mu: float = 1.0
    gather_radius_m: float = 0.15
    gather_error_threshold: float = 0.02
    gather_rule: str = "radius"  # or "mean": mean center distance < threshold
    delta: float = 0.05  # documented chance-constraint level; never enforced
    backend: str | None = None

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.penalty_mu < 0.0:
            raise ConfigError("penalty_mu must be >= 0")
        if self.gather_radius_m <= 0.0:
            raise ConfigError("gather_radius_m must be > 0")
        if self.gather_error_threshold <= 0.0:
            raise ConfigError("gather_error_threshold must be > 0")
        if self.gather_rule not in ("radius", "mean"):
            raise ConfigError("gather_rule must be 'radius' or 'mean'")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError("delta must lie in (0,1)")


@dataclass
class EnvState:
    config: EnvConfig
    rng: np.random.Generator
    cloud: ParticleCloud
    last_obs: Observation
    steps: int = 0
    done: bool = False
    seed: int = 0


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict


def is_done(state: EnvState) -> bool:
    """Task termination rule (excluding the step cap)."""
    cfg = state.config
    if cfg.task is TaskKind.CLEAN_SPILLS:
        return state.last_obs.is_all_zero()
    cloud = state.cloud
    vis = cloud.unwiped_on_table(cfg.table)
    if not np.any(vis):
        return True
    cx, cy = cfg.table.center
    d = np.hypot(cloud.xs[vis] - cx, cloud.ys[vis] - cy)
    if cfg.gather_rule == "mean":
        return bool(d.mean() < cfg.gather_error_threshold)
    return bool(d.max() <= cfg.gather_radius_m)


def _info(state: EnvState, clamped: bool, terminated: bool) -> dict:
    cfg = state.config
    cloud = state.cloud
    vis = cloud.unwiped_on_table(cfg.table)
    if np.any(vis):
        cx, cy = cfg.table.center
        mean_d = float(np.hypot(cloud.xs[vis] - cx, cloud.ys[vis] - cy).mean())
    else:
        mean_d = 0.0
    return {
        "off_table_count": int(cloud.off_table_count(cfg.table)),
        "wiped_count": int(np.count_nonzero(cloud.wiped)),
        "mean_center_distance": mean_d,
        "clamped": bool(clamped),
        "terminated": bool(terminated),
        "step": int(state.steps),
        "particle_count": int(cloud.size),
    }


def initial_info(state: EnvState) -> dict:
    """Info dict describing a freshly reset episode."""
    return _info(state, clamped=False, terminated=state.done)


def env_reset(config: EnvConfig, seed: int) -> tuple[EnvState, Observation]:
    rng = np.random.default_rng(seed)
    if isinstance(config.init, MaskInit):
        cloud = config.init.sample_cloud(config.table, rng)
    else:
        spec = config.init.sample(rng)
        cloud = sample_initial_cloud(spec, config.table, rng)
    obs = render_observation(cloud, config.table)
    state = EnvState(config=config, rng=rng, cloud=cloud, last_obs=obs, seed=seed)
    state.done = is_done(state)
    return state, obs


def env_step(state: EnvState, action: WipeAction) -> StepResult:
    """Execute one wipe. Out-of-range action components are clamped (theta
    wraps) and flagged in info. Stepping a finished episode is an error."""
    if state.done:
        raise ProtocolError("episode is done; reset before stepping")
    cfg = state.config
    action, clamped = action.clamped(cfg.table)
    before = state.last_obs
    cloud, _trace = simulate_wipe(
        state.cloud, action, cfg.table, cfg.sde, state.rng, backend=cfg.backend
    )
    state.cloud = cloud
    obs = render_observation(cloud, cfg.table)
    state.last_obs = obs
    state.steps += 1

    if cfg.task is TaskKind.GATHER_CRUMBS:
        task_reward = reward_gathering(cloud, cfg.table)
    else:
        task_reward = reward_spill_reduction(before, obs)
    reward = task_reward + off_table_penalty(cloud, cfg.table, cfg.penalty_mu)

    terminated = is_done(state)
    state.done = terminated or state.steps >= cfg.max_steps
    info = _info(state, clamped, terminated)
    return StepResult(obs, float(reward), state.done, info)


def _preset_sde(task: TaskKind) -> SdeParams:
    lam = 0.0 if task is TaskKind.GATHER_CRUMBS else 2.0
    return SdeParams(alpha=1e-2, lam=lam)


# Named environment presets. The gather training preset keeps blobs inside
# the region every baseline wipe can reach (see the wide/general presets
# for the unrestricted layouts); spills presets span most of the table.
_PRESET_INITS: dict[str, UniformGaussianInit] = {
    "gather-train": UniformGaussianInit((0.4, 0.4), (0.6, 0.6), 0.03, 0.06, 1, 1),
    "gather-wide": UniformGaussianInit((0.2, 0.2), (0.8, 0.8), 0.05, 0.15, 1, 1),
    "gather-general": UniformGaussianInit((0.2, 0.2), (0.8, 0.8), 0.05, 0.15, 2, 3),
    "spills-train": UniformGaussianInit((0.2, 0.2), (0.8, 0.8), 0.05, 0.15, 1, 1),
    "spills-train-narrow": UniformGaussianInit((0.35, 0.35), (0.65, 0.65), 0.04, 0.08, 1, 1),
    "spills-general": UniformGaussianInit((0.2, 0.2), (0.8, 0.8), 0.05, 0.15, 2, 3),
}


def preset_names() -> list[str]:
    return sorted(_PRESET_INITS)


def make_preset(name: str) -> EnvConfig:
    if name not in _PRESET_INITS:
        raise ConfigError(f"unknown preset '{name}'; known: {', '.join(preset_names())}")
    task = TaskKind.GATHER_CRUMBS if name.startswith("gather") else TaskKind.CLEAN_SPILLS
    return EnvConfig(task=task, sde=_preset_sde(task), init=_PRESET_INITS[name])
