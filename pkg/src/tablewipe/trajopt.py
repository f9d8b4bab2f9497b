"""End-effector reference building and shooting SQP trajectory optimization.

The optimal control problem is solved in single-shooting form: the decision
variables are the control sequence only, states follow by rolling out the
Euler dynamics. Inequality constraints (self-collision, obstacle
separation, control bounds) enter through an augmented Lagrangian whose
smooth inner problems are minimized with Gauss-Newton steps and Armijo
backtracking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .robot import (
    ControlInput,
    FkResult,
    KinematicChain,
    PolytopeObstacle,
    RobotState,
    SphereCover,
    dynamics_jacobians,
    dynamics_step,
    facet_index,
    sphere_positions_fk,
)
from .sde import ConfigError


class NumericError(RuntimeError):
    """Non-finite quantity encountered during optimization."""


OMEGA_NOMINAL = 0.5 * math.pi  # rad/s used to time pure-rotation segments


@dataclass(frozen=True)
class PoseTrajectory:
    times: np.ndarray  # (K+1,)
    positions: np.ndarray  # (K+1, 3)
    rotations: np.ndarray  # (K+1, 3, 3)

    def __post_init__(self):
        t = np.ascontiguousarray(self.times, dtype=np.float64)
        p = np.ascontiguousarray(self.positions, dtype=np.float64)
        R = np.ascontiguousarray(self.rotations, dtype=np.float64)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "rotations", R)
        n = t.shape[0]
        if n < 2 or p.shape != (n, 3) or R.shape != (n, 3, 3):
            raise ConfigError("pose trajectory needs >= 2 consistent samples")
        if np.any(np.diff(t) <= 0.0):
            raise ConfigError("pose trajectory times must be strictly increasing")
        eye = np.eye(3)
        for k in range(n):
            if np.abs(R[k] @ R[k].T - eye).max() > 1e-9:
                raise ConfigError(f"pose trajectory rotation {k} is not orthonormal")

    def __len__(self) -> int:
        return self.times.shape[0]


def _slerp(Ra: np.ndarray, Rb: np.ndarray, s: float) -> np.ndarray:
    rel = Rotation.from_matrix(Ra).inv() * Rotation.from_matrix(Rb)
    return (Rotation.from_matrix(Ra) * Rotation.from_rotvec(s * rel.as_rotvec())).as_matrix()


def _rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    rel = Rotation.from_matrix(Ra).inv() * Rotation.from_matrix(Rb)
    return float(np.linalg.norm(rel.as_rotvec()))


def build_reference(
    action,
    table_pose: np.ndarray,
    tool_pose: np.ndarray,
    v: float,
    dt_traj: float,
) -> PoseTrajectory:
    """Three-phase tool trajectory for one wipe: approach the wipe start,
    sweep the wipe at constant speed v, retreat to the original tool pose.

    Wipe-phase poses put the tool x-axis along the travel direction in the
    table frame. Approach/retreat interpolate linearly in position with
    constant-rate rotation blending; their durations come from v and a
    nominal rotation rate, rounded up to whole dt_traj steps. A fully
    degenerate wipe (tool already at the start, zero length) produces a
    two-sample constant trajectory.
    """
    if v <= 0.0 or dt_traj <= 0.0:
        raise ConfigError("speed and dt_traj must be > 0 (zero-duration trajectory)")
    table_pose = np.asarray(table_pose, dtype=np.float64)
    tool_pose = np.asarray(tool_pose, dtype=np.float64)

    ct, st = math.cos(action.theta), math.sin(action.theta)
    start_table = np.array([action.px, action.py, 0.0])
    R_wipe_table = np.array([[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]])
    Tw = table_pose @ np.vstack(
        [np.column_stack([R_wipe_table, start_table]), [0.0, 0.0, 0.0, 1.0]]
    )
    p_start, R_wipe = Tw[:3, 3], Tw[:3, :3]
    dir_world = table_pose[:3, :3] @ np.array([ct, st, 0.0])
    p_end = p_start + action.length * dir_world

    p_tool, R_tool = tool_pose[:3, 3], tool_pose[:3, :3]

    def _phase_steps(dist: float, ang: float) -> int:
        T = max(dist / v, ang / OMEGA_NOMINAL)
        if T <= 0.0:
            return 0
        return max(int(math.ceil(T / dt_traj - 1e-12)), 1)

    n_app = _phase_steps(float(np.linalg.norm(p_start - p_tool)), _rotation_angle(R_tool, R_wipe))
    n_wipe = 0 if action.length <= 0.0 else max(int(math.ceil(action.length / v / dt_traj - 1e-12)), 1)
    n_ret = _phase_steps(float(np.linalg.norm(p_tool - p_end)), _rotation_angle(R_wipe, R_tool))

    total = n_app + n_wipe + n_ret
    if total == 0:
        times = np.array([0.0, dt_traj])
        return PoseTrajectory(times, np.vstack([p_tool, p_tool]), np.stack([R_tool, R_tool]))

    positions = [p_tool.copy()]
    rotations = [R_tool.copy()]
    for k in range(1, n_app + 1):
        s = k / n_app
        positions.append((1.0 - s) * p_tool + s * p_start)
        rotations.append(_slerp(R_tool, R_wipe, s))
    for k in range(1, n_wipe + 1):
        # Constant speed v along the wipe, clamped at the wipe end so the
        # final sample lands exactly on it.
        d = min(v * k * dt_traj, action.length)
        positions.append(p_start + d * dir_world)
        rotations.append(R_wipe.copy())
    for k in range(1, n_ret + 1):
        s = k / n_ret
        positions.append((1.0 - s) * p_end + s * p_tool)
        rotations.append(_slerp(R_wipe, R_tool, s))
    times = np.arange(total + 1, dtype=np.float64) * dt_traj
    return PoseTrajectory(times, np.array(positions), np.array(rotations))


# ---------------------------------------------------------------------------
# OCP specification


@dataclass(frozen=True)
class OCPWeights:
    w_u: float = 1e-3
    w_p: float = 1.0
    w_R: float = 0.1

    def __post_init__(self):
        if self.w_u < 0 or self.w_p < 0 or self.w_R < 0:
            raise ConfigError("cost weights must be >= 0")


def rotation_mask_matrix(track_roll: bool, track_pitch: bool, track_yaw: bool) -> np.ndarray:
    """Elementwise mask on the rotation error matrix. Dropping an axis
    zeroes the skew entries that a small rotation about it generates, so
    the cost is first-order insensitive to that rotation component."""
    M = np.ones((3, 3))
    if not track_roll:
        M[1, 2] = M[2, 1] = 0.0
    if not track_pitch:
        M[0, 2] = M[2, 0] = 0.0
    if not track_yaw:
        M[0, 1] = M[1, 0] = 0.0
    return M


@dataclass(frozen=True)
class OCPSpec:
    chain: KinematicChain
    cover: SphereCover
    obstacles: tuple[PolytopeObstacle, ...]
    reference: PoseTrajectory
    dt_traj: float
    x0: RobotState
    control_lower: np.ndarray
    control_upper: np.ndarray
    weights: OCPWeights = field(default_factory=OCPWeights)
    rotation_mask: tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self):
        lo = np.ascontiguousarray(self.control_lower, dtype=np.float64)
        hi = np.ascontiguousarray(self.control_upper, dtype=np.float64)
        object.__setattr__(self, "control_lower", lo)
        object.__setattr__(self, "control_upper", hi)
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        nu = 2 + self.chain.num_joints
        if lo.shape != (nu,) or hi.shape != (nu,):
            raise ConfigError(f"control bounds must have length {nu}")
        if np.any(lo > hi):
            raise ConfigError("control bounds must satisfy lower <= upper")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigError("control bounds must be finite")
        if self.dt_traj <= 0.0:
            raise ConfigError("dt_traj must be > 0")
        if self.x0.q.shape[0] != self.chain.num_joints:
            raise ConfigError("x0 joint dimension does not match the chain")
        self.cover.validate_against(self.chain)

    @property
    def horizon(self) -> int:
        return len(self.reference) - 1

    @property
    def nu(self) -> int:
        return 2 + self.chain.num_joints

    @property
    def nx(self) -> int:
        return 3 + self.chain.num_joints


@dataclass
class SolveResult:
    controls: np.ndarray  # (K, nu)
    states: list[RobotState]  # K+1
    cost: float
    max_constraint_violation: float
    iterations: int
    status: str  # Converged | MaxIter | LineSearchFail
    kkt_residual: float
    merit_solution: float
    merit_initial_guess: float


def rollout(x0: RobotState, controls: np.ndarray, dt_traj: float) -> list[RobotState]:
    states = [x0.copy()]
    for k in range(controls.shape[0]):
        states.append(dynamics_step(states[-1], ControlInput.from_vector(controls[k]), dt_traj))
    return states


def running_cost(state: RobotState, control, k: int, spec: OCPSpec) -> float:
    """Stage cost at step k; `control` is a ControlInput or a flat vector."""
    w = spec.weights
    fk = FkResult(spec.chain, state)
    err_p = fk.ee_position - spec.reference.positions[k]
    u = control.as_vector() if isinstance(control, ControlInput) else np.asarray(control, dtype=np.float64)
    cost = w.w_u * float(u @ u)
    cost += w.w_p * float(err_p @ err_p)
    if w.w_R > 0.0:
        M = rotation_mask_matrix(*spec.rotation_mask)
        E = M * (np.eye(3) - fk.ee_rotation.T @ spec.reference.rotations[k])
        cost += w.w_R * float(np.sum(E * E))
    return cost


def total_cost(spec: OCPSpec, controls: np.ndarray) -> float:
    states = rollout(spec.x0, controls, spec.dt_traj)
    c = 0.0
    zero_u = ControlInput.from_vector(np.zeros(spec.nu))
    for k in range(spec.horizon):
        c += running_cost(states[k], ControlInput.from_vector(controls[k]), k, spec)
    c += running_cost(states[spec.horizon], zero_u, spec.horizon, spec)
    return c


# ---------------------------------------------------------------------------
# Solver internals


class _Evaluation:
    __slots__ = (
        "cost",
        "merit_ls",
        "residuals",
        "jacobian",
        "g_state",
        "g_ctrl",
        "max_violation",
    )


def _constraint_values(spec: OCPSpec, fk: FkResult, pairs) -> np.ndarray:
    """Self-collision then obstacle residuals for one state."""
    spheres = sphere_positions_fk(fk, spec.cover)
    vals = []
    for i, j in pairs:
        ci, ri = spheres[i]
        cj, rj = spheres[j]
        vals.append(float(np.linalg.norm(ci - cj)) - (ri + rj))
    for ob in spec.obstacles:
        for center, radius in spheres:
            jf = facet_index(ob, center)
            vals.append(float(ob.A[jf] @ (center - ob.c) - ob.b[jf] - radius))
    return np.array(vals) if vals else np.zeros(0)


def _constraint_rows(spec: OCPSpec, fk: FkResult, pairs) -> np.ndarray:
    """d g / d state for the constraints of _constraint_values (rows in the
    same order)."""
    spheres = sphere_positions_fk(fk, spec.cover)
    nx = spec.nx
    rows = []
    for i, j in pairs:
        ci, ri = spheres[i]
        cj, rj = spheres[j]
        diff = ci - cj
        dist = float(np.linalg.norm(diff))
        if dist < 1e-12:
            rows.append(np.zeros(nx))
            continue
        d = diff / dist
        Ji = fk.point_jacobian(ci, spec.cover.spheres[i].link)
        Jj = fk.point_jacobian(cj, spec.cover.spheres[j].link)
        rows.append(d @ (Ji - Jj))
    for ob in spec.obstacles:
        for s_idx, (center, radius) in enumerate(spheres):
            jf = facet_index(ob, center)
            Jc = fk.point_jacobian(center, spec.cover.spheres[s_idx].link)
            rows.append(ob.A[jf] @ Jc)
    return np.array(rows) if rows else np.zeros((0, nx))


def _evaluate(
    spec: OCPSpec,
    U: np.ndarray,
    lam_state: np.ndarray,
    lam_ctrl: np.ndarray,
    rho: float,
    free_cols: np.ndarray,
    need_jacobian: bool,
) -> _Evaluation:
    """Residual form of the augmented-Lagrangian subproblem.

    merit_ls = ||r||^2 = true cost + sum max(0, lam - rho g)^2 / (2 rho);
    it differs from the PHR merit by the constant -sum lam^2/(2 rho), which
    line search and comparisons at fixed (lam, rho) never notice.
    """
    K = spec.horizon
    nu = spec.nu
    nx = spec.nx
    nfree = int(free_cols.shape[0])
    w = spec.weights
    sw_u = math.sqrt(w.w_u)
    sw_p = math.sqrt(w.w_p)
    sw_R = math.sqrt(w.w_R)
    mask = rotation_mask_matrix(*spec.rotation_mask)
    pairs = spec.cover.check_pairs()

    states = rollout(spec.x0, U, spec.dt_traj)
    fks = [FkResult(spec.chain, s) for s in states]

    # Forward sensitivities of each state wrt the flattened free controls.
    S = None
    if need_jacobian:
        S = [np.zeros((nx, K * nfree))]
        for k in range(K):
            A, B = dynamics_jacobians(states[k], ControlInput.from_vector(U[k]), spec.dt_traj)
            Sk1 = A @ S[k]
            if nfree:
                Sk1[:, k * nfree:(k + 1) * nfree] += B[:, free_cols]
            S.append(Sk1)

    res_blocks: list[np.ndarray] = []
    jac_blocks: list[np.ndarray] = []
    ncols = K * nfree

    def _emit(r: np.ndarray, Jr: np.ndarray | None):
        res_blocks.append(r)
        if need_jacobian:
            jac_blocks.append(Jr if Jr is not None else np.zeros((r.shape[0], ncols)))

    cost = 0.0
    # Control effort rows.
    for k in range(K):
        u = U[k]
        cost += w.w_u * float(u @ u)
        if sw_u > 0.0:
            Jr = None
            if need_jacobian and nfree:
                Jr = np.zeros((nu, ncols))
                for c, col in enumerate(free_cols):
                    Jr[col, k * nfree + c] = sw_u
            _emit(sw_u * u, Jr)

    # Tracking rows at every knot.
    for k in range(K + 1):
        fk = fks[k]
        err_p = fk.ee_position - spec.reference.positions[k]
        cost += w.w_p * float(err_p @ err_p)
        if sw_p > 0.0:
            Jr = None
            if need_jacobian:
                Jp = fk.point_jacobian(fk.ee_position, spec.chain.num_links)
                Jr = (sw_p * Jp) @ S[k]
            _emit(sw_p * err_p, Jr)
        if sw_R > 0.0:
            Rref = spec.reference.rotations[k]
            E = mask * (np.eye(3) - fk.ee_rotation.T @ Rref)
            cost += w.w_R * float(np.sum(E * E))
            Jr = None
            if need_jacobian:
                W = fk.rotation_axes(spec.chain.num_links)
                D = np.zeros((9, nx))
                ReT = fk.ee_rotation.T
                for cidx in range(nx):
                    wax = W[:, cidx]
                    if wax[0] == 0.0 and wax[1] == 0.0 and wax[2] == 0.0:
                        continue
                    Sk = np.array(
                        [
                            [0.0, -wax[2], wax[1]],
                            [wax[2], 0.0, -wax[0]],
                            [-wax[1], wax[0], 0.0],
                        ]
                    )
                    D[:, cidx] = (mask * (ReT @ Sk @ Rref)).ravel()
                Jr = (sw_R * D) @ S[k]
            _emit(sw_R * E.ravel(), Jr)

    # Augmented-Lagrangian rows: state constraints.
    g_state = np.zeros((K + 1, lam_state.shape[1])) if lam_state.size else np.zeros((K + 1, 0))
    scale = 1.0 / math.sqrt(2.0 * rho)
    for k in range(K + 1):
        g = _constraint_values(spec, fks[k], pairs)
        g_state[k, :] = g
        if g.shape[0] == 0:
            continue
        m = lam_state[k] - rho * g
        act = m > 0.0
        r = scale * np.where(act, m, 0.0)
        Jr = None
        if need_jacobian:
            rows = _constraint_rows(spec, fks[k], pairs)
            Jr = np.zeros((g.shape[0], ncols))
            if np.any(act):
                Jr[act] = (-rho * scale) * (rows[act] @ S[k])
        _emit(r, Jr)

    # Augmented-Lagrangian rows: control bounds on free components.
    nbound = lam_ctrl.shape[1]
    g_ctrl = np.zeros((K, nbound))
    for k in range(K):
        if nbound == 0:
            break
        u = U[k]
        g_lo = u[free_cols] - spec.control_lower[free_cols]
        g_hi = spec.control_upper[free_cols] - u[free_cols]
        g = np.concatenate([g_lo, g_hi])
        g_ctrl[k, :] = g
        m = lam_ctrl[k] - rho * g
        act = m > 0.0
        r = scale * np.where(act, m, 0.0)
        Jr = None
        if need_jacobian:
            Jr = np.zeros((g.shape[0], ncols))
            for c in range(nfree):
                if act[c]:
                    Jr[c, k * nfree + c] = -rho * scale
                if act[nfree + c]:
                    Jr[nfree + c, k * nfree + c] = rho * scale
        _emit(r, Jr)

    ev = _Evaluation()
    ev.cost = cost
    ev.residuals = np.concatenate(res_blocks) if res_blocks else np.zeros(0)
    ev.jacobian = np.vstack(jac_blocks) if (need_jacobian and jac_blocks) else None
    ev.merit_ls = float(ev.residuals @ ev.residuals)
    ev.g_state = g_state
    ev.g_ctrl = g_ctrl
    viol = 0.0
    if g_state.size:
        viol = max(viol, float(np.maximum(0.0, -g_state).max()))
    if g_ctrl.size:
        viol = max(viol, float(np.maximum(0.0, -g_ctrl).max()))
    ev.max_violation = viol
    return ev


def objective_gradient(spec: OCPSpec, controls: np.ndarray) -> tuple[float, np.ndarray]:
    """True cost and its exact gradient wrt every control entry (no
    augmented-Lagrangian terms, no pinning)."""
    controls = np.ascontiguousarray(controls, dtype=np.float64)
    K, nu = controls.shape
    if K != spec.horizon or nu != spec.nu:
        raise ConfigError("controls must have shape (K, nu)")
    all_cols = np.arange(nu)
    lam_state = np.zeros((K + 1, 0))
    lam_ctrl = np.zeros((K, 0))
    spec_nc = _spec_without_constraints(spec)
    ev = _evaluate(spec_nc, controls, lam_state, lam_ctrl, 1.0, all_cols, True)
    grad_flat = 2.0 * (ev.jacobian.T @ ev.residuals)
    return ev.cost, grad_flat.reshape(K, nu)


def _spec_without_constraints(spec: OCPSpec) -> OCPSpec:
    if not spec.obstacles and not spec.cover.check_pairs():
        return spec
    return OCPSpec(
        chain=spec.chain,
        cover=SphereCover((), frozenset()),
        obstacles=(),
        reference=spec.reference,
        dt_traj=spec.dt_traj,
        x0=spec.x0,
        control_lower=spec.control_lower,
        control_upper=spec.control_upper,
        weights=spec.weights,
        rotation_mask=spec.rotation_mask,
    )


def _inner_minimize(
    spec: OCPSpec,
    U: np.ndarray,
    lam_state: np.ndarray,
    lam_ctrl: np.ndarray,
    rho: float,
    free_cols: np.ndarray,
    tol: float,
    max_iters: int = 60,
) -> tuple[np.ndarray, _Evaluation, float, bool]:
    """Gauss-Newton descent on the AL subproblem at fixed multipliers.
    Returns (U, final evaluation, gradient inf-norm, line search ok)."""
    K = spec.horizon
    nfree = int(free_cols.shape[0])
    ev = _evaluate(spec, U, lam_state, lam_ctrl, rho, free_cols, True)
    if not math.isfinite(ev.merit_ls):
        raise NumericError("merit function is not finite at the inner start")
    if nfree == 0:
        return U, ev, 0.0, True
    for _ in range(max_iters):
        J = ev.jacobian
        r = ev.residuals
        g_half = J.T @ r
        grad_inf = float(np.abs(2.0 * g_half).max()) if g_half.size else 0.0
        if grad_inf < tol:
            return U, ev, grad_inf, True
        JtJ = J.T @ J
        nu_damp = 1e-10 + 1e-9 * float(np.trace(JtJ)) / max(JtJ.shape[0], 1)
        try:
            step = np.linalg.solve(JtJ + nu_damp * np.eye(JtJ.shape[0]), -g_half)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(JtJ + nu_damp * np.eye(JtJ.shape[0]), -g_half, rcond=None)[0]
        slope = float(2.0 * (g_half @ step))
        if slope >= 0.0:
            # Not a descent direction (numerical breakdown): give up.
            return U, ev, grad_inf, False
        t = 1.0
        accepted = False
        for _bt in range(30):
            U_try = U.copy()
            flat = U_try[:, free_cols].reshape(-1) + t * step
            U_try[:, free_cols] = flat.reshape(K, nfree)
            ev_try = _evaluate(spec, U_try, lam_state, lam_ctrl, rho, free_cols, False)
            if math.isfinite(ev_try.merit_ls) and ev_try.merit_ls <= ev.merit_ls + 1e-4 * t * slope:
                U = U_try
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return U, ev, grad_inf, False
        ev = _evaluate(spec, U, lam_state, lam_ctrl, rho, free_cols, True)
    g_half = ev.jacobian.T @ ev.residuals
    return U, ev, float(np.abs(2.0 * g_half).max()) if g_half.size else 0.0, True


def solve_ocp(
    spec: OCPSpec,
    initial_controls: np.ndarray | None = None,
    max_outer: int = 100,
    kkt_tol: float = 1e-6,
    rho_init: float = 10.0,
    rho_max: float = 1e6,
) -> SolveResult:
    """Augmented-Lagrangian shooting SQP.

    Outer iterations update multipliers and the penalty; each inner stage
    is a Gauss-Newton minimization of the smooth subproblem. Converged
    means the Lagrangian gradient and the worst constraint violation are
    both below kkt_tol. The returned controls never score a worse merit
    (under the final multipliers and penalty) than the initial guess.
    """
    K = spec.horizon
    nu = spec.nu
    lo, hi = spec.control_lower, spec.control_upper
    free_cols = np.flatnonzero(hi > lo)
    pinned_cols = np.flatnonzero(hi == lo)

    if initial_controls is None:
        U = np.zeros((K, nu))
    else:
        U = np.ascontiguousarray(initial_controls, dtype=np.float64).copy()
        if U.shape != (K, nu):
            raise ConfigError(f"initial controls must have shape ({K}, {nu})")
    U[:, pinned_cols] = lo[pinned_cols]
    U[:, free_cols] = np.clip(U[:, free_cols], lo[free_cols], hi[free_cols])
    U0 = U.copy()

    npairs = len(spec.cover.check_pairs())
    nc_state = npairs + len(spec.obstacles) * len(spec.cover.spheres)
    lam_state = np.zeros((K + 1, nc_state))
    lam_ctrl = np.zeros((K, 2 * free_cols.shape[0]))
    rho = rho_init

    status = "MaxIter"
    kkt = math.inf
    prev_viol = math.inf
    ev = None
    outer_used = max_outer
    for outer in range(1, max_outer + 1):
        inner_tol = max(0.1 * kkt_tol, 1e-10)
        U, ev, grad_inf, ls_ok = _inner_minimize(
            spec, U, lam_state, lam_ctrl, rho, free_cols, inner_tol
        )
        viol = ev.max_violation
        # PHR multiplier update; afterwards grad_inf approximates the true
        # KKT stationarity residual at the updated multipliers.
        if lam_state.size:
            lam_state = np.maximum(0.0, lam_state - rho * ev.g_state)
        if lam_ctrl.size:
            lam_ctrl = np.maximum(0.0, lam_ctrl - rho * ev.g_ctrl)
        kkt = max(grad_inf, viol)
        if kkt < kkt_tol:
            status = "Converged"
            outer_used = outer
            break
        if not ls_ok:
            status = "LineSearchFail"
            outer_used = outer
            break
        if viol > 0.25 * prev_viol and viol > kkt_tol:
            rho = min(rho * 10.0, rho_max)
        prev_viol = viol
        outer_used = outer

    # Guarantee: merit of the result under the final (lam, rho) is no worse
    # than the initial guess. If the outer path somehow ended above it,
    # redo one inner descent starting from the guess.
    ev_init = _evaluate(spec, U0, lam_state, lam_ctrl, rho, free_cols, False)
    ev_res = _evaluate(spec, U, lam_state, lam_ctrl, rho, free_cols, False)
    if ev_init.merit_ls < ev_res.merit_ls - 1e-12:
        U, ev_res2, grad_inf, _ = _inner_minimize(
            spec, U0.copy(), lam_state, lam_ctrl, rho, free_cols, max(0.1 * kkt_tol, 1e-10)
        )
        ev_res = ev_res2
        kkt = max(grad_inf, ev_res.max_violation)
        if kkt < kkt_tol:
            status = "Converged"

    states = rollout(spec.x0, U, spec.dt_traj)
    return SolveResult(
        controls=U,
        states=states,
        cost=total_cost(spec, U),
        max_constraint_violation=ev_res.max_violation,
        iterations=outer_used,
        status=status,
        kkt_residual=kkt,
        merit_solution=ev_res.merit_ls,
        merit_initial_guess=ev_init.merit_ls,
    )


def constraint_report(spec: OCPSpec, states: list[RobotState]) -> list[dict]:
    """Per-step self-collision and obstacle residuals for artifact export."""
    pairs = spec.cover.check_pairs()
    out = []
    for st in states:
        fk = FkResult(spec.chain, st)
        g = _constraint_values(spec, fk, pairs)
        out.append(
            {
                "self_collision": [float(v) for v in g[: len(pairs)]],
                "obstacle": [float(v) for v in g[len(pairs):]],
            }
        )
    return out
