"""Particle simulation of crumbs and spills under a moving wiper.

The table state is an empirical cloud of point particles. While a particle
sits inside the wiper footprint (and on the table), it drifts with the
wiper, receives Brownian jitter, and may be absorbed by the wiper at a
Poisson rate. Everything else is frozen. Time stepping is explicit
Euler-Maruyama.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class ConfigError(ValueError):
    """Invalid configuration or scene/robot description."""


@dataclass(frozen=True)
class TableGeometry:
    """Rectangular table occupying [0, width_m] x [0, height_m]."""

    width_m: float = 1.0
    height_m: float = 1.0

    def __post_init__(self):
        if not (self.width_m > 0.0 and self.height_m > 0.0):
            raise ConfigError("table dimensions must be positive")

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * self.width_m, 0.5 * self.height_m)

    def max_wipe_length(self) -> float:
        return min(self.width_m, self.height_m)

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.width_m and 0.0 <= y <= self.height_m


@dataclass(frozen=True)
class WipeAction:
    """One straight wipe: start point, heading, and travel length."""

    px: float
    py: float
    theta: float
    length: float

    def validate(self, table: TableGeometry) -> "WipeAction":
        tol = 1e-12
        if not (-tol <= self.px <= table.width_m + tol):
            raise ValueError(f"wipe px {self.px} outside [0, {table.width_m}]")
        if not (-tol <= self.py <= table.height_m + tol):
            raise ValueError(f"wipe py {self.py} outside [0, {table.height_m}]")
        if not (0.0 <= self.theta < 2.0 * math.pi):
            raise ValueError(f"wipe theta {self.theta} outside [0, 2*pi)")
        lmax = table.max_wipe_length()
        if not (-tol <= self.length <= lmax + tol):
            raise ValueError(f"wipe length {self.length} outside [0, {lmax}]")
        return self

    def clamped(self, table: TableGeometry) -> tuple["WipeAction", bool]:
        """Project onto the action space; theta wraps, the rest clips."""
        px = min(max(self.px, 0.0), table.width_m)
        py = min(max(self.py, 0.0), table.height_m)
        theta = self.theta % (2.0 * math.pi)
        length = min(max(self.length, 0.0), table.max_wipe_length())
        clipped = WipeAction(px, py, theta, length)
        changed = (px, py, theta, length) != (self.px, self.py, self.theta, self.length)
        return clipped, changed

    def duration(self, speed: float) -> float:
        return self.length / speed


@dataclass(frozen=True)
class SdeParams:
    """Coefficients and discretization of the particle dynamics.

    alpha scales Brownian diffusion, lam is the Poisson absorption
    intensity (1/s), speed is the constant wiper speed (m/s), dt the
    Euler-Maruyama step (s). The wiper is a rectangle wiper_long_m wide
    (perpendicular to travel) and wiper_short_m deep (along travel).
    """

    alpha: float = 1e-2
    lam: float = 0.0
    speed: float = 0.15
    dt: float = 0.1
    wiper_long_m: float = 0.30
    wiper_short_m: float = 0.05

    def __post_init__(self):
        if self.alpha < 0.0:
            raise ConfigError("alpha must be >= 0")
        if self.lam < 0.0:
            raise ConfigError("lambda must be >= 0")
        if self.speed <= 0.0:
            raise ConfigError("speed must be > 0")
        if self.dt <= 0.0:
            raise ConfigError("dt must be > 0")
        if self.wiper_long_m <= 0.0 or self.wiper_short_m <= 0.0:
            raise ConfigError("wiper dimensions must be > 0")
        # A particle must not be stepped over by the footprint in one step.
        if self.dt > self.wiper_short_m / self.speed + 1e-12:
            raise ConfigError(
                f"dt={self.dt} exceeds wiper_short_m/speed="
                f"{self.wiper_short_m / self.speed:.4f}; particles could skip contact"
            )


@dataclass(frozen=True)
class WiperFootprint:
    """Oriented rectangle covered by the wiper at one instant."""

    center: tuple[float, float]
    theta: float
    half_long: float
    half_short: float

    def __post_init__(self):
        if self.half_long <= 0.0 or self.half_short <= 0.0:
            raise ConfigError("footprint half dimensions must be > 0")


@dataclass
class ParticleCloud:
    """Positions plus a sticky wiped flag per particle.

    The particle count is invariant under simulation; wiped flags only
    ever go 0 -> 1, and a wiped particle's position is frozen at its
    absorption location.
    """

    xs: np.ndarray
    ys: np.ndarray
    wiped: np.ndarray

    def __post_init__(self):
        self.xs = np.ascontiguousarray(self.xs, dtype=np.float64)
        self.ys = np.ascontiguousarray(self.ys, dtype=np.float64)
        self.wiped = np.ascontiguousarray(self.wiped, dtype=np.uint8)
        if not (self.xs.shape == self.ys.shape == self.wiped.shape) or self.xs.ndim != 1:
            raise ValueError("xs, ys, wiped must be 1-d arrays of equal length")

    @property
    def size(self) -> int:
        return self.xs.shape[0]

    def copy(self) -> "ParticleCloud":
        return ParticleCloud(self.xs.copy(), self.ys.copy(), self.wiped.copy())

    def unwiped_on_table(self, table: TableGeometry) -> np.ndarray:
        """Boolean mask of particles that are visible (dirty and on the table)."""
        return (
            (self.wiped == 0)
            & (self.xs >= 0.0)
            & (self.xs <= table.width_m)
            & (self.ys >= 0.0)
            & (self.ys <= table.height_m)
        )

    def off_table_count(self, table: TableGeometry) -> int:
        off = (self.wiped == 0) & ~(
            (self.xs >= 0.0)
            & (self.xs <= table.width_m)
            & (self.ys >= 0.0)
            & (self.ys <= table.height_m)
        )
        return int(np.count_nonzero(off))


@dataclass(frozen=True)
class GaussianComponent:
    mean: tuple[float, float]
    std: float
    weight: float


@dataclass(frozen=True)
class InitialStateSpec:
    """Gaussian-mixture initial particle distribution, truncated to the table."""

    components: tuple[GaussianComponent, ...]
    particle_count: int = 1000

    def __post_init__(self):
        if len(self.components) == 0:
            raise ConfigError("initial state needs at least one mixture component")
        if self.particle_count < 1:
            raise ConfigError("particle_count must be >= 1")
        weights = np.array([c.weight for c in self.components], dtype=np.float64)
        if np.any(weights < 0.0) or not math.isclose(float(weights.sum()), 1.0, abs_tol=1e-9):
            raise ConfigError("component weights must be >= 0 and sum to 1")
        for c in self.components:
            if c.std < 0.0:
                raise ConfigError("component std must be >= 0")


def wiper_footprint_at(action: WipeAction, t: float, params: SdeParams) -> WiperFootprint:
    """Footprint of the wiper `t` seconds into the wipe.

    The center starts at the action's start point and advances at constant
    speed along the heading; orientation is constant.
    """
    duration = action.duration(params.speed)
    if not (-1e-12 <= t <= duration + 1e-12):
        raise ValueError(f"t={t} outside wipe duration [0, {duration}]")
    cx = action.px + t * params.speed * math.cos(action.theta)
    cy = action.py + t * params.speed * math.sin(action.theta)
    return WiperFootprint(
        center=(cx, cy),
        theta=action.theta,
        half_long=0.5 * params.wiper_long_m,
        half_short=0.5 * params.wiper_short_m,
    )


def particle_in_contact(p: tuple[float, float], fp: WiperFootprint, table: TableGeometry) -> bool:
    """True iff `p` lies in the (closed) footprint rectangle and on the table."""
    x, y = p
    if not table.contains(x, y):
        return False
    ct = math.cos(fp.theta)
    st = math.sin(fp.theta)
    rx = x - fp.center[0]
    ry = y - fp.center[1]
    lx = ct * rx + st * ry  # along travel
    ly = -st * rx + ct * ry  # perpendicular to travel
    return abs(lx) <= fp.half_short and abs(ly) <= fp.half_long


def _step_arrays(
    xs: np.ndarray,
    ys: np.ndarray,
    wiped: np.ndarray,
    fp_cx: float,
    fp_cy: float,
    theta: float,
    half_long: float,
    half_short: float,
    dt: float,
    params: SdeParams,
    table: TableGeometry,
    rng: np.random.Generator,
    kernels: _kernels.Kernels,
    mask_buf: np.ndarray,
) -> None:
    """One in-place Euler-Maruyama step on raw arrays."""
    ct = math.cos(theta)
    st = math.sin(theta)
    n_contact = kernels.contact_mask(
        xs, ys, wiped, fp_cx, fp_cy, ct, st,
        half_short, half_long, table.width_m, table.height_m, mask_buf,
    )
    if n_contact == 0:
        return
    idx = np.flatnonzero(mask_buf)
    normals = rng.standard_normal((n_contact, 2))
    uniforms = rng.random(n_contact)
    drift_x = params.speed * ct * dt
    drift_y = params.speed * st * dt
    diff = params.alpha * params.speed * math.sqrt(dt)
    p_absorb = -math.expm1(-params.lam * dt)
    kernels.apply_step(
        xs, ys, wiped, idx, drift_x, drift_y, ct, st, diff, p_absorb, normals, uniforms
    )


def em_step(
    cloud: ParticleCloud,
    fp: WiperFootprint,
    params: SdeParams,
    rng: np.random.Generator,
    table: TableGeometry | None = None,
    backend: str | None = None,
) -> ParticleCloud:
    """One Euler-Maruyama step of duration params.dt against a fixed footprint.

    Particles in contact (unwiped, inside footprint and table) drift with
    the wiper, diffuse, and may absorb; all others are returned bit-exactly
    unchanged. The input cloud is not modified.
    """
    if table is None:
        table = TableGeometry()
    out = cloud.copy()
    kernels = _kernels.get_backend(backend)
    mask_buf = np.empty(out.size, dtype=np.bool_)
    _step_arrays(
        out.xs, out.ys, out.wiped,
        fp.center[0], fp.center[1], fp.theta, fp.half_long, fp.half_short,
        params.dt, params, table, rng, kernels, mask_buf,
    )
    return out


def _wipe_step_schedule(action: WipeAction, params: SdeParams) -> tuple[int, float]:
    """Number of steps and the (possibly partial) final step duration.

    The 1e-12 slack absorbs float noise in duration/dt (e.g. 0.5/0.1 is a
    hair above 5), and a final step within rounding of dt is snapped to dt
    so a chain of em_step calls reproduces simulate_wipe bit-exactly.
    """
    duration = action.duration(params.speed)
    if duration <= 0.0:
        return 0, 0.0
    n = int(math.ceil(duration / params.dt - 1e-12))
    n = max(n, 1)
    last = duration - (n - 1) * params.dt
    if abs(last - params.dt) < 1e-12:
        last = params.dt
    return n, last


def simulate_wipe(
    cloud: ParticleCloud,
    action: WipeAction,
    table: TableGeometry,
    params: SdeParams,
    rng: np.random.Generator,
    backend: str | None = None,
) -> tuple[ParticleCloud, list[WiperFootprint]]:
    """Run one full wipe and return the final cloud plus the footprint trace.

    The wipe spans length/speed seconds, stepped at params.dt with an exact
    partial final step, so the footprint's total travel equals the wipe
    length. The trace holds the footprint at the start of every executed
    step plus the final pose (a single entry for a zero-length wipe),
    which is what the swept-region rendering consumes.
    """
    action.validate(table)
    n_steps, last_dt = _wipe_step_schedule(action, params)
    out = cloud.copy()
    kernels = _kernels.get_backend(backend)
    mask_buf = np.empty(out.size, dtype=np.bool_)

    half_long = 0.5 * params.wiper_long_m
    half_short = 0.5 * params.wiper_short_m
    ct = math.cos(action.theta)
    st = math.sin(action.theta)

    trace: list[WiperFootprint] = []
    for k in range(n_steps):
        # Step k starts at t = k*dt exactly (only the final step is partial),
        # written so the center matches wiper_footprint_at(action, k*dt) bit
        # for bit.
        t = k * params.dt
        cx = action.px + t * params.speed * ct
        cy = action.py + t * params.speed * st
        trace.append(WiperFootprint((cx, cy), action.theta, half_long, half_short))
        dt_k = params.dt if k < n_steps - 1 else last_dt
        _step_arrays(
            out.xs, out.ys, out.wiped, cx, cy, action.theta, half_long, half_short,
            dt_k, params, table, rng, kernels, mask_buf,
        )
    end_t = action.duration(params.speed)
    cx = action.px + end_t * params.speed * ct
    cy = action.py + end_t * params.speed * st
    trace.append(WiperFootprint((cx, cy), action.theta, half_long, half_short))
    return out, trace


def simulate_wipe_snapshots(
    cloud: ParticleCloud,
    action: WipeAction,
    table: TableGeometry,
    params: SdeParams,
    rng: np.random.Generator,
    backend: str | None = None,
) -> tuple[list[ParticleCloud], list[WiperFootprint]]:
    """Like simulate_wipe, but keeps a cloud snapshot per step boundary
    (index k = state after k steps). Draws the same randoms in the same
    order, so the final snapshot matches simulate_wipe bit-exactly."""
    action.validate(table)
    n_steps, last_dt = _wipe_step_schedule(action, params)
    out = cloud.copy()
    kernels = _kernels.get_backend(backend)
    mask_buf = np.empty(out.size, dtype=np.bool_)
    half_long = 0.5 * params.wiper_long_m
    half_short = 0.5 * params.wiper_short_m
    ct = math.cos(action.theta)
    st = math.sin(action.theta)

    snapshots = [out.copy()]
    trace: list[WiperFootprint] = []
    for k in range(n_steps):
        t = k * params.dt
        cx = action.px + t * params.speed * ct
        cy = action.py + t * params.speed * st
        trace.append(WiperFootprint((cx, cy), action.theta, half_long, half_short))
        dt_k = params.dt if k < n_steps - 1 else last_dt
        _step_arrays(
            out.xs, out.ys, out.wiped, cx, cy, action.theta, half_long, half_short,
            dt_k, params, table, rng, kernels, mask_buf,
        )
        snapshots.append(out.copy())
    end_t = action.duration(params.speed)
    cx = action.px + end_t * params.speed * ct
    cy = action.py + end_t * params.speed * st
    trace.append(WiperFootprint((cx, cy), action.theta, half_long, half_short))
    return snapshots, trace


def sample_initial_cloud(
    spec: InitialStateSpec,
    table: TableGeometry,
    rng: np.random.Generator,
    max_rejection_rounds: int = 1000,
) -> ParticleCloud:
    """Draw the initial cloud from the Gaussian mixture, rejecting off-table samples."""
    m = spec.particle_count
    weights = np.array([c.weight for c in spec.components], dtype=np.float64)
    weights = weights / weights.sum()
    means = np.array([c.mean for c in spec.components], dtype=np.float64)
    stds = np.array([c.std for c in spec.components], dtype=np.float64)
    for c in spec.components:
        if not table.contains(c.mean[0], c.mean[1]):
            raise ConfigError(f"component mean {c.mean} lies outside the table")

    comp = rng.choice(len(spec.components), size=m, p=weights)
    xs = means[comp, 0] + stds[comp] * rng.standard_normal(m)
    ys = means[comp, 1] + stds[comp] * rng.standard_normal(m)
    outside = ~((xs >= 0.0) & (xs <= table.width_m) & (ys >= 0.0) & (ys <= table.height_m))
    rounds = 0
    while np.any(outside):
        rounds += 1
        if rounds > max_rejection_rounds:
            raise ConfigError("rejection sampling failed to place particles on the table")
        idx = np.flatnonzero(outside)
        xs[idx] = means[comp[idx], 0] + stds[comp[idx]] * rng.standard_normal(idx.size)
        ys[idx] = means[comp[idx], 1] + stds[comp[idx]] * rng.standard_normal(idx.size)
        outside[idx] = ~(
            (xs[idx] >= 0.0) & (xs[idx] <= table.width_m)
            & (ys[idx] >= 0.0) & (ys[idx] <= table.height_m)
        )
    return ParticleCloud(xs, ys, np.zeros(m, dtype=np.uint8))
