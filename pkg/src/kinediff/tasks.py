"""Desk-scale bimanual tasks: a kinematic stepper environment, scripted
experts, keyframe discovery, self-collision checking, and demonstration
persistence.

The world is planar (x, y; +y is up). Objects are points or short bars
with grasp handles; a gripper that closes within the grasp radius of a
handle attaches it, and held objects follow the holder tip. There is no
gravity or contact dynamics: released objects stay where they are.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import EmptyTrajectory, ExpertFailed, IoError, SchemaViolation, UnknownModel
from .graph import Box
from .kinematics import (
    arm_pose_from_vector,
    fk_arm_segments,
    fk_pose,
    ik_solve,
    pose_vector,
    split_theta,
    _arm_chains,
)
from .se3 import Pose, quat_from_axis_angle
from .urdf import RobotModel, builtin_model

logger = logging.getLogger(__name__)

DEMO_SCHEMA = "kstar-demo/1"

OPEN, CLOSED = 1.0, 0.0

TASK_INSTRUCTIONS = {"lift_plate_2d": 0, "handover_2d": 1, "push_box_2d": 2}

# home keeps both arms raised and apart; right mirrors left (negated)
HOME_LEFT = (2.4, -1.0, -0.6)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    workspace: Box
    success_pos_tol: float = 0.02
    step_budget: int = 50
    model_name: str = "planar_bimanual_3dof"
    grasp_radius: float = 0.03
    contact_radius: float = 0.04
    max_joint_delta: float = 0.15
    collision_clearance: float = 0.01
    success_streak: int = 2
    object_state_width: int = 2

    @property
    def instruction_id(self) -> int:
        return TASK_INSTRUCTIONS[self.name]


PLANAR_WORKSPACE = Box((-0.8, -0.8, -0.2), (0.8, 0.8, 0.2))

TASKS: dict[str, TaskSpec] = {
    "lift_plate_2d": TaskSpec("lift_plate_2d", PLANAR_WORKSPACE, success_streak=3),
    "handover_2d": TaskSpec("handover_2d", PLANAR_WORKSPACE, success_pos_tol=0.035),
    "push_box_2d": TaskSpec("push_box_2d", PLANAR_WORKSPACE),
}

PLATE_HALF_WIDTH = 0.18
PLATE_LIFT = 0.13          # expert lift height; success needs >= 0.10
BOX_HALF_WIDTH = 0.06
HANDOVER_LIFT_TOL = 0.10   # success threshold on plate rise

_MODEL_CACHE: dict[str, RobotModel] = {}


def task_model(spec: TaskSpec) -> RobotModel:
    model = _MODEL_CACHE.get(spec.model_name)
    if model is None:
        model = builtin_model(spec.model_name)
        _MODEL_CACHE[spec.model_name] = model
    return model


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise UnknownModel(f"unknown task {name!r}") from None


@dataclass(frozen=True, eq=False)
class Observation:
    timestep: int
    joint_config: np.ndarray
    ee_poses: np.ndarray          # bimanual PoseVector, 16 values
    object_state: np.ndarray
    instruction_id: int


@dataclass(frozen=True, eq=False)
class EnvState:
    task: TaskSpec
    theta: np.ndarray             # (m,)
    grippers: tuple[float, float]  # 1.0 open, 0.0 closed
    obj: np.ndarray               # (2,) object center, xy
    origin: np.ndarray            # (2,) object position at reset
    goal: np.ndarray              # (2,) task goal point
    attached: tuple[int, int]     # per handle: -1 free, 0 left, 1 right
    time: int = 0
    streak: int = 0
    succeeded: bool = False


def home_config(model: RobotModel) -> np.ndarray:
    theta = np.zeros(model.m)
    theta[:3] = HOME_LEFT
    theta[3:] = [-v for v in HOME_LEFT]
    return theta


def _tips(spec: TaskSpec, theta) -> np.ndarray:
    """(2, 2) xy tip positions, row 0 left, row 1 right."""
    model = task_model(spec)
    chains = _arm_chains(model)
    per_arm = split_theta(model, theta)
    out = np.zeros((2, 2))
    for k, arm in enumerate(("left", "right")):
        out[k] = fk_pose(chains[arm], per_arm[arm]).position[:2]
    return out


def _handles(spec: TaskSpec, obj: np.ndarray) -> list[np.ndarray]:
    if spec.name == "lift_plate_2d":
        return [obj - (PLATE_HALF_WIDTH, 0.0), obj + (PLATE_HALF_WIDTH, 0.0)]
    if spec.name == "handover_2d":
        return [obj.copy()]
    return []


def env_reset(task: TaskSpec, seed: int) -> EnvState:
    """Fresh episode state with seed-determined object placement."""
    rng = np.random.default_rng(seed)
    model = task_model(task)
    if task.name == "lift_plate_2d":
        obj = np.array([rng.uniform(-0.08, 0.08), rng.uniform(0.24, 0.32)])
        goal = obj + (0.0, PLATE_LIFT)
    elif task.name == "handover_2d":
        obj = np.array([rng.uniform(0.28, 0.42), rng.uniform(0.20, 0.30)])
        goal = np.array([-obj[0], obj[1]])  # mirror placement
    elif task.name == "push_box_2d":
        obj = np.array([rng.uniform(-0.06, 0.06), rng.uniform(0.20, 0.24)])
        goal = obj + np.array([rng.uniform(-0.04, 0.04), rng.uniform(0.08, 0.12)])
    else:
        raise UnknownModel(task.name)
    return EnvState(
        task=task, theta=home_config(model), grippers=(OPEN, OPEN),
        obj=obj, origin=obj.copy(), goal=goal, attached=(-1, -1),
    )


def _success_now(spec: TaskSpec, obj, origin, goal, attached, grippers) -> bool:
    if spec.name == "lift_plate_2d":
        return (attached[0] >= 0 and attached[1] >= 0 and attached[0] != attached[1]
                and obj[1] - origin[1] >= HANDOVER_LIFT_TOL)
    if spec.name == "handover_2d":
        return (attached[0] == 0 and grippers[1] > 0.5
                and float(np.linalg.norm(obj - goal)) <= spec.success_pos_tol)
    return float(np.linalg.norm(obj - goal)) <= spec.success_pos_tol


def env_step(state: EnvState, joint_targets, gripper_cmds) -> EnvState:
    """Kinematic step: move joints toward targets (rate-limited), apply
    gripper commands, resolve attachments, move carried objects, and
    evaluate the task's success rule. Invalid targets are clamped."""
    spec = state.task
    model = task_model(spec)
    movable = model.movable_joints
    lower = np.array([j.limits.lower for j in movable])
    upper = np.array([j.limits.upper for j in movable])

    targets = np.clip(np.asarray(joint_targets, dtype=np.float64).reshape(-1), lower, upper)
    if targets.shape[0] != model.m:
        raise ValueError(f"expected {model.m} joint targets")
    delta = np.clip(targets - state.theta, -spec.max_joint_delta, spec.max_joint_delta)
    theta = state.theta + delta

    tips_old = _tips(spec, state.theta)
    tips_new = _tips(spec, theta)
    grip = tuple(OPEN if float(g) > 0.5 else CLOSED for g in gripper_cmds)

    attached = list(state.attached)
    obj = state.obj.copy()
    handle_pos = _handles(spec, obj)

    # releases, with transfer to a closed gripper still at the handle
    for h, holder in enumerate(attached):
        if holder >= 0 and grip[holder] > 0.5:
            other = 1 - holder
            if grip[other] < 0.5 and np.linalg.norm(tips_new[other] - handle_pos[h]) <= spec.grasp_radius:
                attached[h] = other
            else:
                attached[h] = -1

    # closing transition grabs the nearest free handle in range
    for arm in (0, 1):
        if state.grippers[arm] > 0.5 and grip[arm] < 0.5:
            best, best_d = -1, spec.grasp_radius
            for h in range(len(handle_pos)):
                if attached[h] != -1 or arm in attached:
                    continue
                d = float(np.linalg.norm(tips_new[arm] - handle_pos[h]))
                if d <= best_d:
                    best, best_d = h, d
            if best >= 0:
                attached[best] = arm

    # carried objects follow holder tips; the pushed box follows contact
    if spec.name in ("lift_plate_2d", "handover_2d"):
        offsets = ([np.array([-PLATE_HALF_WIDTH, 0.0]), np.array([PLATE_HALF_WIDTH, 0.0])]
                   if spec.name == "lift_plate_2d" else [np.zeros(2)])
        held = [(h, holder) for h, holder in enumerate(attached) if holder >= 0]
        if held:
            obj = np.mean([tips_new[holder] - offsets[h] for h, holder in held], axis=0)
    else:
        # contact is tested where the motion starts, so a push holds
        # through substeps larger than the contact radius
        contacts = [obj - (BOX_HALF_WIDTH, 0.0), obj + (BOX_HALF_WIDTH, 0.0)]
        in_contact = all(
            np.linalg.norm(tips_old[arm] - contacts[arm]) <= spec.contact_radius
            for arm in (0, 1))
        if in_contact:
            obj = obj + (tips_new - tips_old).mean(axis=0)

    succ = _success_now(spec, obj, state.origin, state.goal, attached, grip)
    streak = state.streak + 1 if succ else 0
    return replace(
        state, theta=theta, grippers=grip, obj=obj, attached=tuple(attached),
        time=state.time + 1, streak=streak,
        succeeded=state.succeeded or streak >= spec.success_streak,
    )


def observe(state: EnvState) -> Observation:
    spec = state.task
    model = task_model(spec)
    if spec.name == "push_box_2d":
        object_state = np.concatenate([state.obj, state.goal])
    else:
        object_state = state.obj.copy()
    return Observation(
        timestep=state.time,
        joint_config=state.theta.copy(),
        ee_poses=pose_vector(model, state.theta, state.grippers),
        object_state=object_state,
        instruction_id=spec.instruction_id,
    )


def object_state_width(spec: TaskSpec) -> int:
    return 4 if spec.name == "push_box_2d" else 2


# --- self collision ---

@dataclass(frozen=True)
class CollisionReport:
    min_distance: float
    colliding: bool


def self_collision_check(model: RobotModel, theta, clearance: float = 0.01) -> CollisionReport:
    """Minimum distance over all inter-arm link-segment pairs."""
    segs = fk_arm_segments(model, theta)
    (la, lb), (ra, rb) = segs["left"], segs["right"]
    dist = float(kernels.min_segment_pair_distance(la, lb, ra, rb))
    return CollisionReport(min_distance=dist, colliding=dist < clearance)


# --- demonstrations ---

@dataclass(eq=False)
class DemoStep:
    t: int
    obs: Observation
    action: np.ndarray        # active keyframe action (16,)
    joint_config: np.ndarray  # (m,)
    ee: np.ndarray            # bimanual PoseVector (16,)


@dataclass(eq=False)
class Demonstration:
    task: str
    seed: int
    steps: list[DemoStep]
    keyframes: list[int] = field(default_factory=list)


def keyframe_discovery(steps: list[DemoStep]) -> list[int]:
    """Keyframes are gripper changes and entries into stillness, plus the
    final index; sorted and unique."""
    if not steps:
        raise EmptyTrajectory("no steps")
    n = len(steps)
    ks: set[int] = {n - 1}
    grips = [(s.ee[7] > 0.5, s.ee[15] > 0.5) for s in steps]
    still_prev = False
    for i in range(1, n):
        if grips[i] != grips[i - 1]:
            ks.add(i)
        speed = float(np.max(np.abs(steps[i].joint_config - steps[i - 1].joint_config)))
        still = speed < 1e-3
        if still and not still_prev:
            ks.add(i)
        still_prev = still
    return sorted(ks)


def _yaw_pose(xy, yaw: float) -> Pose:
    return Pose(np.array([xy[0], xy[1], 0.0]),
                quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw))


@dataclass
class _Waypoint:
    left: Pose | None
    right: Pose | None
    grips: tuple[float, float]
    hold: int = 2


BASE_XY = {"left": np.array([-0.25, 0.0]), "right": np.array([0.25, 0.0])}


def _radial_yaw(arm: str, point: np.ndarray) -> float:
    """Yaw pointing outward from the arm base through a point; keeps the
    wrist on the base side of the target and well inside the annulus."""
    d = point - BASE_XY[arm]
    return float(math.atan2(d[1], d[0]))


def _num_phases(spec: TaskSpec) -> int:
    return {"lift_plate_2d": 2, "handover_2d": 4, "push_box_2d": 3}[spec.name]


def _plan_phase(spec: TaskSpec, state: EnvState, phase: int) -> _Waypoint:
    """Waypoint for one plan phase, computed from the current state so a
    disturbed object is corrected for. Poses stay well inside each arm's
    annular workspace; at shared points the grippers approach in a V so
    the forearms never cross."""
    yaw_l = -math.pi / 2 + 0.45
    yaw_r = -math.pi / 2 - 0.45
    if spec.name == "lift_plate_2d":
        lh = state.obj - (PLATE_HALF_WIDTH, 0.0)
        rh = state.obj + (PLATE_HALF_WIDTH, 0.0)
        gl, gr = _radial_yaw("left", lh), _radial_yaw("right", rh)
        if phase == 0:
            return _Waypoint(_yaw_pose(lh, gl), _yaw_pose(rh, gr), (CLOSED, CLOSED), hold=2)
        up = np.array([0.0, PLATE_LIFT])
        return _Waypoint(_yaw_pose(lh + up, gl), _yaw_pose(rh + up, gr), (CLOSED, CLOSED), hold=4)
    if spec.name == "handover_2d":
        hx = 0.3 * state.origin[0] - 0.12  # seed-dependent meeting point
        meet = np.array([hx, 0.36])
        if phase == 0:
            return _Waypoint(None, _yaw_pose(state.obj, yaw_r), (OPEN, CLOSED), hold=2)
        if phase == 1:
            return _Waypoint(_yaw_pose(meet + (-0.025, 0.0), yaw_l), _yaw_pose(meet, yaw_r),
                             (OPEN, CLOSED), hold=2)
        if phase == 2:
            return _Waypoint(None, None, (CLOSED, OPEN), hold=2)
        return _Waypoint(_yaw_pose(state.goal, yaw_l), _yaw_pose(np.array([0.42, 0.30]), yaw_r),
                         (CLOSED, OPEN), hold=3)
    if spec.name == "push_box_2d":
        lc = state.obj - (BOX_HALF_WIDTH, 0.0)
        rc = state.obj + (BOX_HALF_WIDTH, 0.0)
        gl, gr = _radial_yaw("left", lc), _radial_yaw("right", rc)
        if phase == 0:
            return _Waypoint(_yaw_pose(lc, gl), _yaw_pose(rc, gr), (OPEN, OPEN), hold=2)
        if phase == 1:
            shift = state.goal - state.obj
            return _Waypoint(_yaw_pose(lc + shift, gl), _yaw_pose(rc + shift, gr),
                             (OPEN, OPEN), hold=1)
        # correction: the box lags the tips by the relative drift picked up
        # during approach, so move the tips by the box's residual error
        tips = _tips(spec, state.theta)
        residual = state.goal - state.obj
        return _Waypoint(_yaw_pose(tips[0] + residual, gl), _yaw_pose(tips[1] + residual, gr),
                         (OPEN, OPEN), hold=3)
    raise UnknownModel(spec.name)


def _waypoint_action(spec: TaskSpec, state: EnvState, wp: _Waypoint) -> np.ndarray:
    """The 16-vector keyframe action a waypoint commands."""
    model = task_model(spec)
    current = pose_vector(model, state.theta, wp.grips)
    out = current.copy()
    for k, (arm, pose) in enumerate((("left", wp.left), ("right", wp.right))):
        if pose is not None:
            o = k * 8
            out[o:o + 3] = pose.position
            out[o + 3:o + 7] = pose.orientation
        out[k * 8 + 7] = wp.grips[k]
    return out


def scripted_expert(task: TaskSpec | str, seed: int) -> Demonstration:
    """Solve one episode with the hand-authored plan and record it.

    The demonstration must succeed with zero self-collisions and in-limit
    joints throughout, otherwise ExpertFailed is raised (callers skip the
    seed and log it).
    """
    spec = get_task(task) if isinstance(task, str) else task
    model = task_model(spec)
    chains = _arm_chains(model)
    state = env_reset(spec, seed)
    steps: list[DemoStep] = []
    collisions = 0

    def record(action_vec):
        nonlocal collisions
        if self_collision_check(model, state.theta, spec.collision_clearance).colliding:
            collisions += 1
        steps.append(DemoStep(
            t=len(steps), obs=observe(state), action=action_vec.copy(),
            joint_config=state.theta.copy(), ee=pose_vector(model, state.theta, state.grippers),
        ))

    try:
        record(_waypoint_action(spec, state, _plan_phase(spec, state, 0)))
        for phase in range(_num_phases(spec)):
            wp = _plan_phase(spec, state, phase)
            per_arm = split_theta(model, state.theta)
            target = {"left": per_arm["left"], "right": per_arm["right"]}
            for arm, pose in (("left", wp.left), ("right", wp.right)):
                if pose is not None:
                    target[arm] = ik_solve(chains[arm], pose, per_arm[arm])
            tgt = np.concatenate([target["left"], target["right"]])
            action_vec = _waypoint_action(spec, state, wp)
            start = state.theta.copy()
            span = float(np.max(np.abs(tgt - start)))
            substeps = max(1, int(math.ceil(span / (spec.max_joint_delta * 0.9))))
            for s in range(1, substeps + 1):
                cmd = start + (tgt - start) * (s / substeps)
                state = env_step(state, cmd, state.grippers)
                record(action_vec)
            for _ in range(wp.hold):
                state = env_step(state, tgt, wp.grips)
                record(action_vec)
    except Exception as exc:
        raise ExpertFailed(f"{spec.name} seed {seed}: {exc}") from exc

    if not state.succeeded:
        raise ExpertFailed(f"{spec.name} seed {seed}: no success after {state.time} steps")
    if collisions:
        raise ExpertFailed(f"{spec.name} seed {seed}: {collisions} collision steps")
    if state.time > spec.step_budget:
        raise ExpertFailed(f"{spec.name} seed {seed}: used {state.time} steps")

    demo = Demonstration(task=spec.name, seed=seed, steps=steps)
    demo.keyframes = keyframe_discovery(steps)
    return demo


def generate_demos(task: TaskSpec | str, num: int, seed: int) -> list[Demonstration]:
    """Generate demos over consecutive seeds, skipping expert failures."""
    spec = get_task(task) if isinstance(task, str) else task
    demos: list[Demonstration] = []
    attempt = 0
    while len(demos) < num and attempt < num * 3:
        try:
            demos.append(scripted_expert(spec, seed + attempt))
        except ExpertFailed as exc:
            logger.warning("expert failed: %s", exc)
        attempt += 1
    if len(demos) < num:
        raise ExpertFailed(f"only {len(demos)}/{num} demos after {attempt} attempts")
    return demos


# --- persistence: line-delimited JSON, one demonstration per line ---

def _demo_to_dict(demo: Demonstration) -> dict:
    return {
        "task": demo.task,
        "seed": demo.seed,
        "keyframes": list(demo.keyframes),
        "steps": [
            {
                "t": s.t,
                "obs": {
                    "timestep": s.obs.timestep,
                    "joint_config": s.obs.joint_config.tolist(),
                    "ee_poses": s.obs.ee_poses.tolist(),
                    "object_state": s.obs.object_state.tolist(),
                    "instruction_id": s.obs.instruction_id,
                },
                "action": s.action.tolist(),
                "joint_config": s.joint_config.tolist(),
                "ee": s.ee.tolist(),
            }
            for s in demo.steps
        ],
    }


def _demo_from_dict(d: dict) -> Demonstration:
    steps = []
    for s in d["steps"]:
        o = s["obs"]
        steps.append(DemoStep(
            t=int(s["t"]),
            obs=Observation(
                timestep=int(o["timestep"]),
                joint_config=np.asarray(o["joint_config"], dtype=np.float64),
                ee_poses=np.asarray(o["ee_poses"], dtype=np.float64),
                object_state=np.asarray(o["object_state"], dtype=np.float64),
                instruction_id=int(o["instruction_id"]),
            ),
            action=np.asarray(s["action"], dtype=np.float64),
            joint_config=np.asarray(s["joint_config"], dtype=np.float64),
            ee=np.asarray(s["ee"], dtype=np.float64),
        ))
    demo = Demonstration(task=str(d["task"]), seed=int(d["seed"]), steps=steps,
                         keyframes=[int(k) for k in d["keyframes"]])
    _validate_demo(demo)
    return demo


def _validate_demo(demo: Demonstration) -> None:
    if not demo.steps:
        raise SchemaViolation("demonstration has no steps")
    n = len(demo.steps)
    if demo.keyframes != sorted(set(demo.keyframes)):
        raise SchemaViolation("keyframes not sorted unique")
    if any(k < 0 or k >= n for k in demo.keyframes):
        raise SchemaViolation("keyframe index out of range")
    if not demo.keyframes or demo.keyframes[-1] != n - 1:
        raise SchemaViolation("final index must be a keyframe")
    spec = get_task(demo.task)
    model = task_model(spec)
    lower = np.array([j.limits.lower for j in model.movable_joints])
    upper = np.array([j.limits.upper for j in model.movable_joints])
    for s in demo.steps:
        if s.joint_config.shape != (model.m,):
            raise SchemaViolation(f"step {s.t}: joint_config wrong length")
        if np.any(s.joint_config < lower - 1e-9) or np.any(s.joint_config > upper + 1e-9):
            raise SchemaViolation(f"step {s.t}: joints outside limits")


def save_demos(path: str, demos: list[Demonstration]) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"schema": DEMO_SCHEMA}) + "\n")
            for demo in demos:
                f.write(json.dumps(_demo_to_dict(demo)) + "\n")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_demos(path: str) -> list[Demonstration]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if not lines:
        return []
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"line 1: {exc}") from exc
    if not isinstance(header, dict) or header.get("schema") != DEMO_SCHEMA:
        raise SchemaViolation(f"line 1: expected header schema {DEMO_SCHEMA!r}")
    demos = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            demos.append(_demo_from_dict(json.loads(line)))
        except SchemaViolation as exc:
            raise SchemaViolation(f"line {i}: {exc}") from exc
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SchemaViolation(f"line {i}: {exc}") from exc
    return demos
