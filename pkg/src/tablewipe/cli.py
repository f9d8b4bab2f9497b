"""Command-line harness: config loading, subcommands, artifact export.

Subcommands: simulate (one wipe, particle CSV + images), rollout (one
policy episode transcript), evaluate (Monte-Carlo policy report), plan
(whole-body trajectory optimization), serve-env (protocol server).

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import images, server
from .baselines import (
    RotatingCenterPolicy,
    aggregate,
    make_policy,
    rotating_center_action,
    run_episodes,
)
from .env import (
    EnvConfig,
    FixedInit,
    InitSampler,
    MaskInit,
    TaskKind,
    UniformGaussianInit,
    env_reset,
    env_step,
    make_preset,
    preset_names,
    render_observation,
)
from .robot import RobotState, load_robot, load_scene, transform_from_xyz_rpy, forward_kinematics
from .sde import (
    ConfigError,
    GaussianComponent,
    InitialStateSpec,
    SdeParams,
    TableGeometry,
    WipeAction,
    simulate_wipe_snapshots,
)
from .trajopt import OCPSpec, OCPWeights, build_reference, constraint_report, solve_ocp
from ._kernels import get_backend


# ---------------------------------------------------------------------------
# Configuration


def _type_name(v) -> str:
    return type(v).__name__


def _get_number(d: dict, key: str, default: float, path: str) -> float:
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}: expected a number, got {_type_name(v)}")
    return float(v)


def _get_int(d: dict, key: str, default: int, path: str) -> int:
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}.{key}: expected an integer, got {_type_name(v)}")
    return int(v)


def _warn_unknown(d: dict, known: set[str], path: str) -> None:
    for key in d:
        if key not in known:
            print(f"warning: unknown config key {path}.{key}", file=sys.stderr)


def _parse_table(d: dict) -> TableGeometry:
    _warn_unknown(d, {"width_m", "height_m"}, "env.table")
    return TableGeometry(
        _get_number(d, "width_m", 1.0, "env.table"),
        _get_number(d, "height_m", 1.0, "env.table"),
    )


def _parse_sde(d: dict, defaults: SdeParams) -> SdeParams:
    _warn_unknown(
        d, {"alpha", "lambda", "speed", "dt", "wiper_long_m", "wiper_short_m"}, "env.sde"
    )
    return SdeParams(
        alpha=_get_number(d, "alpha", defaults.alpha, "env.sde"),
        lam=_get_number(d, "lambda", defaults.lam, "env.sde"),
        speed=_get_number(d, "speed", defaults.speed, "env.sde"),
        dt=_get_number(d, "dt", defaults.dt, "env.sde"),
        wiper_long_m=_get_number(d, "wiper_long_m", defaults.wiper_long_m, "env.sde"),
        wiper_short_m=_get_number(d, "wiper_short_m", defaults.wiper_short_m, "env.sde"),
    )


def _parse_init(d: dict, default: InitSampler, config_dir: Path) -> InitSampler:
    if not d:
        return default
    if "mask" in d:
        _warn_unknown(d, {"mask", "particle_count", "threshold", "inflate_px"}, "env.init")
        mask_path = Path(d["mask"])
        if not mask_path.is_absolute():
            mask_path = config_dir / mask_path
        mask = images.mask_from_pgm(
            mask_path,
            threshold=_get_number(d, "threshold", 0.5, "env.init"),
            inflate_px=_get_int(d, "inflate_px", 0, "env.init"),
        )
        return MaskInit(mask, _get_int(d, "particle_count", 1000, "env.init"), str(d["mask"]))
    if "components" in d:
        _warn_unknown(d, {"components", "particle_count"}, "env.init")
        comps = []
        for i, c in enumerate(d["components"]):
            mean = c.get("mean")
            if not (isinstance(mean, list) and len(mean) == 2):
                raise ConfigError(f"env.init.components[{i}].mean: expected [x, y]")
            comps.append(
                GaussianComponent(
                    (float(mean[0]), float(mean[1])),
                    _get_number(c, "std", 0.05, f"env.init.components[{i}]"),
                    _get_number(c, "weight", 1.0 / len(d["components"]), f"env.init.components[{i}]"),
                )
            )
        return FixedInit(
            InitialStateSpec(tuple(comps), _get_int(d, "particle_count", 1000, "env.init"))
        )
    _warn_unknown(
        d,
        {
            "sampler",
            "mean_low",
            "mean_high",
            "std_low",
            "std_high",
            "components_min",
            "components_max",
            "particle_count",
        },
        "env.init",
    )
    if d.get("sampler", "uniform-gaussian") != "uniform-gaussian":
        raise ConfigError(f"env.init.sampler: unknown sampler {d.get('sampler')!r}")
    base = default if isinstance(default, UniformGaussianInit) else UniformGaussianInit()
    lo = d.get("mean_low", list(base.mean_low))
    hi = d.get("mean_high", list(base.mean_high))
    return UniformGaussianInit(
        (float(lo[0]), float(lo[1])),
        (float(hi[0]), float(hi[1])),
        _get_number(d, "std_low", base.std_low, "env.init"),
        _get_number(d, "std_high", base.std_high, "env.init"),
        _get_int(d, "components_min", base.components_min, "env.init"),
        _get_int(d, "components_max", base.components_max, "env.init"),
        _get_int(d, "particle_count", base.particle_count, "env.init"),
    )


_ENV_KEYS = {
    "preset",
    "table",
    "sde",
    "task",
    "init",
    "max_steps",
    "penalty_mu",
    "gather_radius_m",
    "gather_error_threshold",
    "gather_rule",
    "delta",
}


def parse_env_config(d: dict, config_dir: Path, backend: str | None = None) -> EnvConfig:
    _warn_unknown(d, _ENV_KEYS, "env")
    if "preset" in d:
        base = make_preset(str(d["preset"]))
    else:
        base = EnvConfig(init=UniformGaussianInit())
    task = d.get("task", base.task.value)
    try:
        task_kind = TaskKind(task)
    except ValueError:
        raise ConfigError(f"env.task: expected 'gather' or 'spills', got {task!r}") from None
    return EnvConfig(
        table=_parse_table(d.get("table", {})),
        sde=_parse_sde(d.get("sde", {}), base.sde),
        task=task_kind,
        init=_parse_init(d.get("init", {}), base.init, config_dir),
        max_steps=_get_int(d, "max_steps", base.max_steps, "env"),
        penalty_mu=_get_number(d, "penalty_mu", base.penalty_mu, "env"),
        gather_radius_m=_get_number(d, "gather_radius_m", base.gather_radius_m, "env"),
        gather_error_threshold=_get_number(
            d, "gather_error_threshold", base.gather_error_threshold, "env"
        ),
        gather_rule=str(d.get("gather_rule", base.gather_rule)),
        delta=_get_number(d, "delta", base.delta, "env"),
        backend=backend,
    )


def env_config_to_dict(cfg: EnvConfig, preset: str | None = None) -> dict:
    d = {
        "table": {"width_m": cfg.table.width_m, "height_m": cfg.table.height_m},
        "sde": {
            "alpha": cfg.sde.alpha,
            "lambda": cfg.sde.lam,
            "speed": cfg.sde.speed,
            "dt": cfg.sde.dt,
            "wiper_long_m": cfg.sde.wiper_long_m,
            "wiper_short_m": cfg.sde.wiper_short_m,
        },
        "task": cfg.task.value,
        "init": cfg.init.to_dict(),
        "max_steps": cfg.max_steps,
        "penalty_mu": cfg.penalty_mu,
        "gather_radius_m": cfg.gather_radius_m,
        "gather_error_threshold": cfg.gather_error_threshold,
        "gather_rule": cfg.gather_rule,
        "delta": cfg.delta,
    }
    if preset is not None:
        d["preset"] = preset
    return d


def default_robot_path() -> Path:
    return Path(str(resources.files("tablewipe").joinpath("assets/robot_7dof.json")))


@dataclass
class RunConfig:
    env: EnvConfig
    robot_path: Path | None
    scene_path: Path | None
    simulate_action: list[float] | None
    plan: dict
    resolved: dict
    config_sha256: str


_PLAN_KEYS = {
    "action",
    "table_pose",
    "dt_traj",
    "weights",
    "rotation_mask",
    "x0",
    "max_outer",
    "kkt_tol",
}


def _parse_plan(d: dict) -> dict:
    _warn_unknown(d, _PLAN_KEYS, "plan")
    plan = {
        "action": d.get("action"),
        "table_pose": {
            "xyz": list(d.get("table_pose", {}).get("xyz", [0.0, 0.0, 0.0])),
            "rpy": list(d.get("table_pose", {}).get("rpy", [0.0, 0.0, 0.0])),
        },
        "dt_traj": _get_number(d, "dt_traj", 0.5, "plan"),
        "weights": {
            "w_u": _get_number(d.get("weights", {}), "w_u", 1e-3, "plan.weights"),
            "w_p": _get_number(d.get("weights", {}), "w_p", 1.0, "plan.weights"),
            "w_R": _get_number(d.get("weights", {}), "w_R", 0.1, "plan.weights"),
        },
        "rotation_mask": list(d.get("rotation_mask", [True, True, True])),
        "x0": d.get("x0", {}),
        "max_outer": _get_int(d, "max_outer", 100, "plan"),
        "kkt_tol": _get_number(d, "kkt_tol", 1e-6, "plan"),
    }
    if plan["action"] is not None:
        a = plan["action"]
        if not (isinstance(a, list) and len(a) == 4):
            raise ConfigError("plan.action: expected [px, py, theta, length]")
        plan["action"] = [float(v) for v in a]
    mask = plan["rotation_mask"]
    if len(mask) != 3 or not all(isinstance(v, bool) for v in mask):
        raise ConfigError("plan.rotation_mask: expected three booleans")
    return plan


def parse_config(path: str | Path | None, backend: str | None = None) -> RunConfig:
    """Load and validate a run configuration, applying defaults everywhere."""
    if path is None:
        raw = {}
        config_dir = Path.cwd()
    else:
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
        config_dir = p.parent
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _warn_unknown(raw, {"env", "robot", "scene", "simulate", "plan"}, "config")

    env_cfg = parse_env_config(raw.get("env", {}), config_dir, backend=backend)

    robot_path = None
    if raw.get("robot") is not None:
        robot_path = Path(str(raw["robot"]))
        if not robot_path.is_absolute():
            robot_path = config_dir / robot_path
    scene_path = None
    if raw.get("scene") is not None:
        scene_path = Path(str(raw["scene"]))
        if not scene_path.is_absolute():
            scene_path = config_dir / scene_path

    sim = raw.get("simulate", {})
    _warn_unknown(sim, {"action"}, "simulate")
    simulate_action = None
    if sim.get("action") is not None:
        a = sim["action"]
        if not (isinstance(a, list) and len(a) == 4):
            raise ConfigError("simulate.action: expected [px, py, theta, length]")
        simulate_action = [float(v) for v in a]

    plan = _parse_plan(raw.get("plan", {}))

    resolved = {
        "env": env_config_to_dict(env_cfg, preset=raw.get("env", {}).get("preset")),
        "robot": str(raw["robot"]) if raw.get("robot") is not None else None,
        "scene": str(raw["scene"]) if raw.get("scene") is not None else None,
        "simulate": {"action": simulate_action},
        "plan": plan,
    }
    digest = hashlib.sha256(canonical_json(resolved).encode("utf-8")).hexdigest()
    return RunConfig(env_cfg, robot_path, scene_path, simulate_action, plan, resolved, digest)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Subcommands


def _provenance(run: RunConfig, seed: int) -> dict:
    return {"config_sha256": run.config_sha256, "seed": seed}


def _out_dir(args, name: str) -> Path:
    out = Path(args.out) if args.out else Path("out") / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(run: RunConfig, args) -> int:
    out = _out_dir(args, "simulate")
    cfg = run.env
    if args.action:
        action_vals = [float(v) for v in args.action.split(",")]
        if len(action_vals) != 4:
            raise ConfigError("--action: expected px,py,theta,length")
    elif run.simulate_action is not None:
        action_vals = run.simulate_action
    else:
        a = rotating_center_action(0, cfg.table)
        action_vals = [a.px, a.py, a.theta, a.length]
    action = WipeAction(*action_vals).validate(cfg.table)

    state, obs0 = env_reset(cfg, args.seed)
    comment = f"config_sha256={run.config_sha256} seed={args.seed}"
    images.observation_to_pgm(out / "obs_initial.pgm", obs0, comment)
    images.write_pgm(
        out / "density_initial.pgm", images.density_grid(state.cloud, cfg.table), comment
    )

    snapshots, trace = simulate_wipe_snapshots(
        state.cloud, action, cfg.table, cfg.sde, state.rng, backend=cfg.backend
    )
    rows = ["step,t,particle,x,y,wiped"]
    for k, snap in enumerate(snapshots):
        t = min(k * cfg.sde.dt, action.duration(cfg.sde.speed))
        for i in range(snap.size):
            rows.append(f"{k},{t:.6f},{i},{snap.xs[i]:.9f},{snap.ys[i]:.9f},{int(snap.wiped[i])}")
    (out / "particles.csv").write_text(f"# {comment}\n" + "\n".join(rows) + "\n")

    final = snapshots[-1]
    obs1 = render_observation(final, cfg.table)
    images.observation_to_pgm(out / "obs_final.pgm", obs1, comment)
    images.write_pgm(out / "density_final.pgm", images.density_grid(final, cfg.table), comment)

    summary = {
        **_provenance(run, args.seed),
        "action": action_vals,
        "steps": len(snapshots) - 1,
        "particle_count": final.size,
        "wiped_final": int(np.count_nonzero(final.wiped)),
        "off_table_final": final.off_table_count(cfg.table),
        "footprint_trace": [
            {"center": [fp.center[0], fp.center[1]], "theta": fp.theta} for fp in trace
        ],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"simulate: {len(snapshots) - 1} steps, artifacts in {out}")
    return 0


def cmd_rollout(run: RunConfig, args) -> int:
    out = _out_dir(args, "rollout")
    policy = make_policy(args.policy)
    try:
        state, obs = env_reset(run.env, args.seed)
        policy.begin_episode()
        steps = []
        while not state.done:
            action = policy.act(state.last_obs, run.env.table)
            result = env_step(state, action)
            steps.append(
                {
                    "action": [action.px, action.py, action.theta, action.length],
                    "reward": result.reward,
                    "done": result.done,
                    "info": result.info,
                    "obs": result.observation.flat_ints(),
                }
            )
        transcript = {
            **_provenance(run, args.seed),
            "policy": args.policy,
            "initial_obs": obs.flat_ints(),
            "steps": steps,
        }
    finally:
        policy.close()
    (out / "transcript.json").write_text(json.dumps(transcript, indent=2, sort_keys=True) + "\n")
    print(f"rollout: {len(steps)} wipes, transcript in {out}")
    return 0


def cmd_evaluate(run: RunConfig, args) -> int:
    out = _out_dir(args, "evaluate")
    policy = make_policy(args.policy)
    try:
        stats = run_episodes(run.env, policy, args.episodes, args.seed)
    finally:
        policy.close()
    report = aggregate(stats)
    header = f"# config_sha256={run.config_sha256} seed={args.seed} policy={args.policy}"
    report_csv = [
        header,
        "episodes,mean_wipes,std_wipes,success_rate,mean_off_table_events",
        f"{report.episodes},{report.mean_wipes!r},{report.std_wipes!r},"
        f"{report.success_rate!r},{report.mean_off_table_events!r}",
    ]
    (out / "report.csv").write_text("\n".join(report_csv) + "\n")
    ep_csv = [header, "episode,seed,wipes,success,off_table_events,total_reward"]
    for k, s in enumerate(stats):
        ep_csv.append(f"{k},{s.seed},{s.wipes},{int(s.success)},{s.off_table_events},{s.total_reward!r}")
    (out / "episodes.csv").write_text("\n".join(ep_csv) + "\n")
    print(
        f"evaluate: {report.episodes} episodes, mean wipes {report.mean_wipes:.3f} "
        f"+/- {report.std_wipes:.3f}, success rate {report.success_rate:.3f}, "
        f"mean off-table events {report.mean_off_table_events:.3f}"
    )
    return 0


def _plan_x0(plan: dict, num_joints: int) -> RobotState:
    # Default start: base parked just off the table's low-x edge, mid-height.
    d = plan.get("x0", {}) or {}
    q = d.get("q", [0.0] * num_joints)
    if len(q) != num_joints:
        raise ConfigError(f"plan.x0.q: expected {num_joints} joint angles")
    return RobotState(
        float(d.get("rx", -0.35)),
        float(d.get("ry", 0.5)),
        float(d.get("psi", 0.0)),
        np.array([float(v) for v in q]),
    )


def cmd_plan(run: RunConfig, args) -> int:
    out = _out_dir(args, "plan")
    robot_path = run.robot_path or default_robot_path()
    robot = load_robot(robot_path)
    obstacles = load_scene(run.scene_path) if run.scene_path else []

    cfg = run.env
    plan = run.plan
    if plan["action"] is not None:
        action_vals = plan["action"]
    else:
        # Near-edge wipe pushing away from the default base position.
        a = rotating_center_action(4, cfg.table)
        action_vals = [a.px, a.py, a.theta, a.length]
    action = WipeAction(*action_vals).validate(cfg.table)

    x0 = _plan_x0(plan, robot.chain.num_joints)
    table_pose = transform_from_xyz_rpy(plan["table_pose"]["xyz"], plan["table_pose"]["rpy"])
    _, (p_tool, R_tool) = forward_kinematics(robot.chain, x0)
    tool_pose = np.eye(4)
    tool_pose[:3, :3] = R_tool
    tool_pose[:3, 3] = p_tool

    reference = build_reference(action, table_pose, tool_pose, cfg.sde.speed, plan["dt_traj"])
    spec = OCPSpec(
        chain=robot.chain,
        cover=robot.cover,
        obstacles=tuple(obstacles),
        reference=reference,
        dt_traj=plan["dt_traj"],
        x0=x0,
        control_lower=robot.control_lower,
        control_upper=robot.control_upper,
        weights=OCPWeights(**plan["weights"]),
        rotation_mask=tuple(plan["rotation_mask"]),
    )
    result = solve_ocp(spec, max_outer=plan["max_outer"], kkt_tol=plan["kkt_tol"])

    residuals = constraint_report(spec, result.states)
    steps = []
    for k, st in enumerate(result.states):
        _, (pe, Re) = forward_kinematics(robot.chain, st)
        steps.append(
            {
                "t": k * plan["dt_traj"],
                "state": [st.rx, st.ry, st.psi] + [float(v) for v in st.q],
                "control": [float(v) for v in result.controls[k]] if k < len(result.controls) else None,
                "ee_position": [float(v) for v in pe],
                "ee_rotation": [[float(v) for v in row] for row in Re],
                "residuals": residuals[k],
            }
        )
    artifact = {
        **_provenance(run, args.seed),
        "robot": str(robot_path),
        "scene": str(run.scene_path) if run.scene_path else None,
        "action": action_vals,
        "status": result.status,
        "cost": result.cost,
        "iterations": result.iterations,
        "kkt_residual": result.kkt_residual,
        "max_constraint_violation": result.max_constraint_violation,
        "merit_solution": result.merit_solution,
        "merit_initial_guess": result.merit_initial_guess,
        "steps": steps,
    }
    (out / "plan.json").write_text(json.dumps(artifact, indent=2, sort_keys=True) + "\n")
    print(
        f"plan: status {result.status}, cost {result.cost:.6g}, "
        f"max violation {result.max_constraint_violation:.3g}, artifacts in {out}"
    )
    return 0


def cmd_serve_env(run: RunConfig, args) -> int:
    if args.port is not None:
        server.serve_tcp(run.env, args.port)
    else:
        server.serve_stdio(run.env)
    return 0


# ---------------------------------------------------------------------------
# Entry point


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the documented validation code."""

    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tablewipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--out", default=None, help="artifact output directory")
        p.add_argument(
            "--backend",
            default=None,
            choices=["numba", "numpy"],
            help="simulation kernel backend (default: numba with numpy fallback)",
        )

    p = sub.add_parser("simulate", help="simulate one wipe and export particles/images")
    common(p)
    p.add_argument("--action", default=None, help="wipe as px,py,theta,length")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("rollout", help="run one policy episode and export the transcript")
    common(p)
    p.add_argument("--policy", default="rotating-center")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("evaluate", help="Monte-Carlo policy evaluation report")
    common(p)
    p.add_argument("--policy", default="rotating-center")
    p.add_argument("--episodes", type=int, default=100)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plan", help="solve the whole-body OCP for one wipe")
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("serve-env", help="serve the environment protocol (stdio or TCP)")
    common(p)
    p.add_argument("--port", type=int, default=None, help="TCP port (default: stdio)")
    p.set_defaults(func=cmd_serve_env)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.backend is not None:
            get_backend(args.backend)  # fail fast on an unavailable backend
        run = parse_config(args.config, backend=args.backend)
        return args.func(run, args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        return 0
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
