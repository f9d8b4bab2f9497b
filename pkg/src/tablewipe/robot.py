"""Mobile-manipulator kinematics and collision constraint functions.

The robot is a nonholonomic base (planar position + yaw) carrying a serial
arm described by screw axes in the product-of-exponentials form. Collision
geometry is a set of spheres rigidly attached to links; obstacles are
convex polytopes with unit-norm facet normals. Robot and scene
descriptions load from JSON files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .sde import ConfigError


class GeometryError(ValueError):
    """Degenerate geometric query (e.g. facet selection at the centroid)."""


# ---------------------------------------------------------------------------
# SE(3) helpers


def skew(w: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def exp_twist(screw: np.ndarray, angle: float) -> np.ndarray:
    """Matrix exponential of a unit screw axis times a scalar (Rodrigues)."""
    w = screw[:3]
    v = screw[3:]
    T = np.eye(4)
    wn = float(np.linalg.norm(w))
    if wn < 1e-12:
        T[:3, 3] = v * angle
        return T
    K = skew(w)
    s, c = math.sin(angle), math.cos(angle)
    T[:3, :3] = np.eye(3) + s * K + (1.0 - c) * (K @ K)
    T[:3, 3] = (np.eye(3) * angle + (1.0 - c) * K + (angle - s) * (K @ K)) @ v
    return T


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def make_transform(R: np.ndarray, p) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = p
    return T


def transform_from_xyz_rpy(xyz, rpy) -> np.ndarray:
    R = Rotation.from_euler("xyz", rpy).as_matrix()
    return make_transform(R, np.asarray(xyz, dtype=np.float64))


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]; used only when formatting output, never inside
    optimization."""
    w = a % (2.0 * math.pi)
    if w > math.pi:
        w -= 2.0 * math.pi
    return w


def _check_rotation(R: np.ndarray, what: str) -> None:
    if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
        raise ConfigError(f"{what}: rotation block is not orthonormal with det +1")


# ---------------------------------------------------------------------------
# Robot state / control


@dataclass
class RobotState:
    rx: float
    ry: float
    psi: float
    q: np.ndarray

    def __post_init__(self):
        self.q = np.ascontiguousarray(self.q, dtype=np.float64)

    @property
    def dim(self) -> int:
        return 3 + self.q.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.rx, self.ry, self.psi], self.q))

    @staticmethod
    def from_vector(x: np.ndarray) -> "RobotState":
        x = np.asarray(x, dtype=np.float64)
        return RobotState(float(x[0]), float(x[1]), float(x[2]), x[3:].copy())

    def copy(self) -> "RobotState":
        return RobotState(self.rx, self.ry, self.psi, self.q.copy())


@dataclass
class ControlInput:
    ur: float
    upsi: float
    qdot: np.ndarray

    def __post_init__(self):
        self.qdot = np.ascontiguousarray(self.qdot, dtype=np.float64)

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.ur, self.upsi], self.qdot))

    @staticmethod
    def from_vector(u: np.ndarray) -> "ControlInput":
        u = np.asarray(u, dtype=np.float64)
        return ControlInput(float(u[0]), float(u[1]), u[2:].copy())


def dynamics_step(state: RobotState, control: ControlInput, dt: float) -> RobotState:
    """Explicit Euler step of the nonholonomic-base + arm kinematics."""
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    c, s = math.cos(state.psi), math.sin(state.psi)
    return RobotState(
        state.rx + c * control.ur * dt,
        state.ry + s * control.ur * dt,
        state.psi + control.upsi * dt,
        state.q + control.qdot * dt,
    )


def dynamics_jacobians(state: RobotState, control: ControlInput, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians (A, B) of dynamics_step wrt state and control vectors."""
    n = state.q.shape[0]
    nx = 3 + n
    nu = 2 + n
    c, s = math.cos(state.psi), math.sin(state.psi)
    A = np.eye(nx)
    A[0, 2] = -s * control.ur * dt
    A[1, 2] = c * control.ur * dt
    B = np.zeros((nx, nu))
    B[0, 0] = c * dt
    B[1, 0] = s * dt
    B[2, 1] = dt
    for i in range(n):
        B[3 + i, 2 + i] = dt
    return A, B


# ---------------------------------------------------------------------------
# Kinematic chain


@dataclass(frozen=True)
class KinematicChain:
    """Product-of-exponentials chain mounted on the mobile base.

    screws[i] is the i-th joint's screw axis in the arm-root frame at the
    home configuration; link_homes[i] is link i's home transform in the
    same frame; mount maps the base frame to the arm root. Link index 0 is
    the base itself; arm link i (1-based) moves with joints 1..i.
    """

    name: str
    screws: np.ndarray  # (n, 6)
    link_homes: tuple[np.ndarray, ...]  # n transforms (arm links)
    ee_home: np.ndarray
    mount: np.ndarray
    base_height_m: float = 0.0
    joint_limits: np.ndarray | None = None  # (n, 2) or None

    def __post_init__(self):
        screws = np.ascontiguousarray(self.screws, dtype=np.float64)
        object.__setattr__(self, "screws", screws)
        if screws.ndim != 2 or screws.shape[1] != 6 or screws.shape[0] < 1:
            raise ConfigError("screws must be an (n, 6) array with n >= 1")
        for i, s in enumerate(screws):
            wn = float(np.linalg.norm(s[:3]))
            if abs(wn - 1.0) > 1e-9 and wn > 1e-12:
                raise ConfigError(f"joint {i}: screw angular part must be a unit vector or zero")
        if len(self.link_homes) != screws.shape[0]:
            raise ConfigError("need one link home transform per joint")
        for i, M in enumerate(self.link_homes):
            _check_rotation(np.asarray(M)[:3, :3], f"link {i} home")
        _check_rotation(np.asarray(self.ee_home)[:3, :3], "end-effector home")
        _check_rotation(np.asarray(self.mount)[:3, :3], "mount")
        if self.joint_limits is not None:
            jl = np.ascontiguousarray(self.joint_limits, dtype=np.float64)
            if jl.shape != (screws.shape[0], 2) or np.any(jl[:, 0] > jl[:, 1]):
                raise ConfigError("joint_limits must be (n, 2) with lo <= hi")
            object.__setattr__(self, "joint_limits", jl)

    @property
    def num_joints(self) -> int:
        return self.screws.shape[0]

    @property
    def num_links(self) -> int:
        """Base plus one link per joint."""
        return self.screws.shape[0] + 1


def base_transform(chain: KinematicChain, state: RobotState) -> np.ndarray:
    return make_transform(rot_z(state.psi), (state.rx, state.ry, chain.base_height_m))


class FkResult:
    """Forward kinematics of one state, with enough by-products to form
    analytic Jacobians of attached points and the end-effector rotation.

    joint_axes_w / joint_axes_v hold each joint's world twist (omega, v):
    a point p on a link moved by joint j has velocity omega_j x p + v_j.
    """

    def __init__(self, chain: KinematicChain, state: RobotState):
        n = chain.num_joints
        self.chain = chain
        self.state = state
        T_base = base_transform(chain, state)
        self.link_transforms: list[np.ndarray] = [T_base]
        self.joint_axes_w = np.zeros((n, 3))
        self.joint_axes_v = np.zeros((n, 3))
        self.base_origin = np.array([state.rx, state.ry, chain.base_height_m])

        G = T_base @ chain.mount
        P = np.eye(4)
        for j in range(n):
            # World twist of joint j uses the chain up to joint j-1.
            X = G @ P
            Rx = X[:3, :3]
            px = X[:3, 3]
            w = Rx @ chain.screws[j, :3]
            v = np.cross(px, w) + Rx @ chain.screws[j, 3:]
            self.joint_axes_w[j] = w
            self.joint_axes_v[j] = v
            P = P @ exp_twist(chain.screws[j], float(state.q[j]))
            self.link_transforms.append(G @ P @ chain.link_homes[j])
        T_ee = G @ P @ chain.ee_home
        self.ee_position = T_ee[:3, 3].copy()
        self.ee_rotation = T_ee[:3, :3].copy()

    def point_jacobian(self, p_world: np.ndarray, link_index: int) -> np.ndarray:
        """d p_world / d state for a point rigidly attached to link_index
        (0 = base, i = arm link i, num_links = end-effector)."""
        n = self.chain.num_joints
        J = np.zeros((3, 3 + n))
        J[0, 0] = 1.0
        J[1, 1] = 1.0
        rel = p_world - self.base_origin
        J[0, 2] = -rel[1]
        J[1, 2] = rel[0]
        njoints = min(link_index, n)
        for j in range(njoints):
            J[:, 3 + j] = np.cross(self.joint_axes_w[j], p_world) + self.joint_axes_v[j]
        return J

    def rotation_axes(self, link_index: int) -> np.ndarray:
        """World angular-velocity axes per state coordinate for the link's
        rotation: columns for (rx, ry, psi, q1..qn)."""
        n = self.chain.num_joints
        W = np.zeros((3, 3 + n))
        W[2, 2] = 1.0
        for j in range(min(link_index, n)):
            W[:, 3 + j] = self.joint_axes_w[j]
        return W


def forward_kinematics(
    chain: KinematicChain, state: RobotState
) -> tuple[list[np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """All link transforms plus the end-effector (position, rotation)."""
    if state.q.shape[0] != chain.num_joints:
        raise ConfigError(
            f"state has {state.q.shape[0]} joint angles, chain expects {chain.num_joints}"
        )
    fk = FkResult(chain, state)
    return fk.link_transforms, (fk.ee_position, fk.ee_rotation)


# ---------------------------------------------------------------------------
# Collision geometry


@dataclass(frozen=True)
class Sphere:
    link: int
    offset: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "offset", np.ascontiguousarray(self.offset, dtype=np.float64))
        if self.offset.shape != (3,):
            raise ConfigError("sphere offset must be a 3-vector")
        if self.radius <= 0.0:
            raise ConfigError("sphere radius must be > 0")


@dataclass(frozen=True)
class SphereCover:
    spheres: tuple[Sphere, ...]
    exclude: frozenset[tuple[int, int]] = frozenset()

    def validate_against(self, chain: KinematicChain) -> None:
        for i, s in enumerate(self.spheres):
            if not (0 <= s.link < chain.num_links):
                raise ConfigError(f"sphere {i} references link {s.link}, out of range")
        for a, b in self.exclude:
            if not (0 <= a < len(self.spheres) and 0 <= b < len(self.spheres)):
                raise ConfigError(f"exclusion pair ({a},{b}) out of range")

    def check_pairs(self) -> list[tuple[int, int]]:
        """All sphere index pairs to test: distinct links, not excluded.
        Same-link pairs are rigid and skipped automatically."""
        pairs = []
        ex = {(min(a, b), max(a, b)) for a, b in self.exclude}
        for i in range(len(self.spheres)):
            for j in range(i + 1, len(self.spheres)):
                if self.spheres[i].link == self.spheres[j].link:
                    continue
                if (i, j) in ex:
                    continue
                pairs.append((i, j))
        return pairs


def sphere_positions(
    chain: KinematicChain, cover: SphereCover, state: RobotState
) -> list[tuple[np.ndarray, float]]:
    cover.validate_against(chain)
    fk = FkResult(chain, state)
    return sphere_positions_fk(fk, cover)


def sphere_positions_fk(fk: FkResult, cover: SphereCover) -> list[tuple[np.ndarray, float]]:
    out = []
    for s in cover.spheres:
        T = fk.link_transforms[s.link]
        out.append((T[:3, :3] @ s.offset + T[:3, 3], s.radius))
    return out


def self_collision_residuals(
    spheres: list[tuple[np.ndarray, float]], pairs: list[tuple[int, int]]
) -> np.ndarray:
    """Residual per pair: distance minus summed radii; >= 0 means clear."""
    out = np.empty(len(pairs))
    for k, (i, j) in enumerate(pairs):
        ci, ri = spheres[i]
        cj, rj = spheres[j]
        out[k] = float(np.linalg.norm(ci - cj)) - (ri + rj)
    return out


# Fixed probe directions used to sanity-check polytope boundedness at load
# time: the 26 unit vectors with components in {-1,0,1}.
_PROBE_DIRS = np.array(
    [
        (i, j, k)
        for i in (-1, 0, 1)
        for j in (-1, 0, 1)
        for k in (-1, 0, 1)
        if (i, j, k) != (0, 0, 0)
    ],
    dtype=np.float64,
)
_PROBE_DIRS /= np.linalg.norm(_PROBE_DIRS, axis=1, keepdims=True)


@dataclass(frozen=True)
class PolytopeObstacle:
    """Convex obstacle {p : A (p - c) <= b} with unit-norm facet normals
    and strictly interior reference point c."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        A = np.ascontiguousarray(self.A, dtype=np.float64)
        b = np.ascontiguousarray(self.b, dtype=np.float64)
        c = np.ascontiguousarray(self.c, dtype=np.float64)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        if A.ndim != 2 or A.shape[1] != 3 or A.shape[0] < 4:
            raise ConfigError("polytope A must be (q, 3) with q >= 4")
        if b.shape != (A.shape[0],) or c.shape != (3,):
            raise ConfigError("polytope b must be (q,) and c a 3-vector")
        norms = np.linalg.norm(A, axis=1)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ConfigError("polytope facet normals must have unit norm")
        if np.any(b <= 0.0):
            raise ConfigError("polytope c must be strictly interior (all b > 0)")
        # Boundedness sanity check: every probe direction must exit through
        # some facet. This catches slabs and cones, not thin unbounded
        # wedges; the type invariant remains the caller's responsibility.
        if np.linalg.matrix_rank(A) < 3:
            raise ConfigError("polytope appears unbounded (rank-deficient normals)")
        if np.any((_PROBE_DIRS @ A.T).max(axis=1) <= 1e-9):
            raise ConfigError("polytope appears unbounded along a probe direction")

    @property
    def num_facets(self) -> int:
        return self.A.shape[0]

    @staticmethod
    def from_box(center, half_sizes, c=None) -> "PolytopeObstacle":
        center = np.asarray(center, dtype=np.float64)
        half = np.asarray(half_sizes, dtype=np.float64)
        if np.any(half <= 0.0):
            raise ConfigError("box half sizes must be > 0")
        A = np.vstack([np.eye(3), -np.eye(3)])
        ref = center if c is None else np.asarray(c, dtype=np.float64)
        b = np.concatenate([half, half]) - A @ (ref - center)
        return PolytopeObstacle(A, b, ref)


def facet_index(obstacle: PolytopeObstacle, p: np.ndarray) -> int:
    """Facet crossed by the ray from c through p: the row minimizing
    b_j / (A_j . (p - c)) over positive denominators (ties break to the
    smallest index)."""
    p = np.asarray(p, dtype=np.float64)
    den = obstacle.A @ (p - obstacle.c)
    gam = np.full(obstacle.num_facets, np.inf)
    pos = den > 0.0
    if not np.any(pos):
        raise GeometryError("facet selection undefined: p coincides with c")
    gam[pos] = obstacle.b[pos] / den[pos]
    return int(np.argmin(gam))


def obstacle_residual(obstacle: PolytopeObstacle, sphere: tuple[np.ndarray, float]) -> float:
    """Padded halfplane separation at the selected facet; >= 0 means the
    sphere clears the obstacle."""
    center, radius = sphere
    j = facet_index(obstacle, center)
    return float(obstacle.A[j] @ (np.asarray(center) - obstacle.c) - obstacle.b[j] - radius)


# ---------------------------------------------------------------------------
# JSON loaders


def _load_transform(obj: dict, what: str) -> np.ndarray:
    try:
        return transform_from_xyz_rpy(obj.get("xyz", [0, 0, 0]), obj.get("rpy", [0, 0, 0]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: invalid transform: {exc}") from exc


@dataclass(frozen=True)
class RobotDescription:
    chain: KinematicChain
    cover: SphereCover
    control_lower: np.ndarray
    control_upper: np.ndarray


def load_robot(path: str | Path) -> RobotDescription:
    """Load a robot description JSON: screw axes, home transforms, sphere
    cover, collision exclusions, and control bounds."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read robot file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"robot file {path} is not valid JSON: {exc}") from exc

    try:
        joints = raw["joints"]
        screws = np.array([j["screw"] for j in joints], dtype=np.float64)
        link_homes = tuple(_load_transform(j["link_home"], f"joint {i} link_home") for i, j in enumerate(joints))
        ee_home = _load_transform(raw["ee_home"], "ee_home")
        mount = _load_transform(raw.get("mount", {}), "mount")
        limits = None
        if "joint_limits" in raw:
            limits = np.array(raw["joint_limits"], dtype=np.float64)
        chain = KinematicChain(
            name=raw.get("name", path.stem),
            screws=screws,
            link_homes=link_homes,
            ee_home=ee_home,
            mount=mount,
            base_height_m=float(raw.get("base_height_m", 0.0)),
            joint_limits=limits,
        )
        spheres = tuple(
            Sphere(int(s["link"]), np.array(s["offset"], dtype=np.float64), float(s["radius"]))
            for s in raw.get("sphere_cover", [])
        )
        exclude = frozenset(
            (min(int(a), int(b)), max(int(a), int(b))) for a, b in raw.get("collision_exclude", [])
        )
        cover = SphereCover(spheres, exclude)
        cover.validate_against(chain)

        nu = 2 + chain.num_joints
        bounds = raw.get("control_bounds")
        if bounds is None:
            lower = -np.concatenate(([1.0, 2.0], np.full(chain.num_joints, 2.0)))
            upper = -lower
        else:
            lower = np.array(bounds["lower"], dtype=np.float64)
            upper = np.array(bounds["upper"], dtype=np.float64)
        if lower.shape != (nu,) or upper.shape != (nu,):
            raise ConfigError(f"control bounds must have length {nu}")
        if np.any(lower > upper) or not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ConfigError("control bounds must be finite with lower <= upper")
    except KeyError as exc:
        raise ConfigError(f"robot file {path} is missing field {exc}") from exc
    return RobotDescription(chain, cover, lower, upper)


def load_scene(path: str | Path) -> list[PolytopeObstacle]:
    """Load a scene JSON: obstacles given as boxes or explicit polytopes."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read scene file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scene file {path} is not valid JSON: {exc}") from exc
    obstacles = []
    for i, ob in enumerate(raw.get("obstacles", [])):
        kind = ob.get("type", "box")
        try:
            if kind == "box":
                obstacles.append(
                    PolytopeObstacle.from_box(ob["center"], ob["half_sizes"], ob.get("c"))
                )
            elif kind == "polytope":
                obstacles.append(
                    PolytopeObstacle(
                        np.array(ob["A"], dtype=np.float64),
                        np.array(ob["b"], dtype=np.float64),
                        np.array(ob["c"], dtype=np.float64),
                    )
                )
            else:
                raise ConfigError(f"obstacle {i}: unknown type '{kind}'")
        except KeyError as exc:
            raise ConfigError(f"obstacle {i} is missing field {exc}") from exc
    return obstacles
