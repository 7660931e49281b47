"""Forward kinematics, Jacobian, damped-least-squares IK, and the
differentiable FK map feeding the pose-reference conditioning path.

The non-differentiable operations run on the packed-array kernels
(numba or numpy, see ``kernels``); ``dfk`` replays the same product of
transforms with tape primitives so pose-space losses can push gradients
back into predicted joint configurations.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Var
from .errors import LengthMismatch, NoConvergence, Unreachable
from .se3 import (
    Pose,
    matrix_to_quat,
    quat_angle,
    quat_conj,
    quat_log_vector,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
)
from .urdf import KinematicChain, RobotModel, arm_chain

ARMS = ("left", "right")
POSE_VEC_WIDTH = 8  # position 3 + quaternion 4 + gripper 1, per arm


class _PackedChain:
    """Kernel-ready array view of a KinematicChain."""

    def __init__(self, chain: KinematicChain):
        n = len(chain.joints)
        self.n = n
        self.origin_pos = np.zeros((n, 3))
        self.origin_rot = np.zeros((n, 3, 3))
        self.axes = np.zeros((n, 3))
        self.kinds = np.zeros(n, dtype=np.int64)
        self.lower = np.zeros(n)
        self.upper = np.zeros(n)
        for i, j in enumerate(chain.joints):
            self.origin_pos[i] = j.origin.position
            self.origin_rot[i] = j.origin.rotation_matrix()
            self.axes[i] = j.axis
            self.kinds[i] = kernels.KIND_PRISMATIC if j.kind == "prismatic" else kernels.KIND_REVOLUTE
            self.lower[i] = j.limits.lower
            self.upper[i] = j.limits.upper
        self.base_rot = chain.base_pose.rotation_matrix()
        self.base_pos = np.asarray(chain.base_pose.position)
        self.tip_rot = chain.tip_offset.rotation_matrix()
        self.tip_pos = np.asarray(chain.tip_offset.position)


def _packed(chain: KinematicChain) -> _PackedChain:
    cached = getattr(chain, "_packed", None)
    if cached is None:
        cached = _PackedChain(chain)
        object.__setattr__(chain, "_packed", cached)
    return cached


def _check_theta(chain: KinematicChain, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.shape[0] != len(chain.joints):
        raise LengthMismatch(f"theta has {theta.shape[0]} values, chain has {len(chain.joints)}")
    return theta


def fk_frames(chain: KinematicChain, theta) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-joint world frames: (pre_rot, pre_pos, post_rot, post_pos).

    ``pre`` is the joint's own frame (after its fixed origin, before its
    motion); ``post`` is the child link frame.
    """
    theta = _check_theta(chain, theta)
    pk = _packed(chain)
    return kernels.chain_fk(pk.origin_pos, pk.origin_rot, pk.axes, pk.kinds,
                            theta, pk.base_rot, pk.base_pos)


def fk_pose(chain: KinematicChain, theta) -> Pose:
    """Tip pose as the ordered product of per-joint transforms."""
    theta = _check_theta(chain, theta)
    pk = _packed(chain)
    if pk.n == 0:
        rot = pk.base_rot @ pk.tip_rot
        pos = pk.base_rot @ pk.tip_pos + pk.base_pos
    else:
        _, _, post_rot, post_pos = kernels.chain_fk(
            pk.origin_pos, pk.origin_rot, pk.axes, pk.kinds, theta, pk.base_rot, pk.base_pos)
        rot = post_rot[-1] @ pk.tip_rot
        pos = post_rot[-1] @ pk.tip_pos + post_pos[-1]
    return Pose(pos, matrix_to_quat(rot))


def _arm_chains(model: RobotModel) -> dict[str, KinematicChain]:
    cached = getattr(model, "_arm_chains", None)
    if cached is None:
        cached = {arm: arm_chain(model, arm) for arm in ARMS}
        object.__setattr__(model, "_arm_chains", cached)
    return cached


def _movable_index(model: RobotModel) -> dict[str, int]:
    cached = getattr(model, "_movable_index", None)
    if cached is None:
        cached = {j.name: i for i, j in enumerate(model.movable_joints)}
        object.__setattr__(model, "_movable_index", cached)
    return cached


def split_theta(model: RobotModel, theta) -> dict[str, np.ndarray]:
    """Per-arm slices of a full m-vector, in arm chain order."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.shape[0] != model.m:
        raise LengthMismatch(f"theta has {theta.shape[0]} values, model has {model.m}")
    index = _movable_index(model)
    return {arm: theta[[index[nm] for nm in model.arm_joint_names(arm)]] for arm in ARMS}


def fk_joint_positions(model: RobotModel, theta) -> np.ndarray:
    """World origin of every movable joint's frame, in model joint order."""
    per_arm = split_theta(model, theta)
    chains = _arm_chains(model)
    index = _movable_index(model)
    out = np.zeros((model.m, 3))
    for arm in ARMS:
        chain = chains[arm]
        pre_rot, pre_pos, _, _ = fk_frames(chain, per_arm[arm])
        for k, j in enumerate(chain.joints):
            out[index[j.name]] = pre_pos[k]
    return out


def fk_arm_segments(model: RobotModel, theta) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per arm, the link segments (joint origins chained to the tip)."""
    per_arm = split_theta(model, theta)
    chains = _arm_chains(model)
    out = {}
    for arm in ARMS:
        chain = chains[arm]
        pre_rot, pre_pos, post_rot, post_pos = fk_frames(chain, per_arm[arm])
        pk = _packed(chain)
        tip = post_rot[-1] @ pk.tip_pos + post_pos[-1]
        pts = np.vstack([pre_pos, tip[None, :]])
        out[arm] = (pts[:-1].copy(), pts[1:].copy())
    return out


def jacobian(chain: KinematicChain, theta) -> np.ndarray:
    """Geometric Jacobian, rows = (linear xyz, angular xyz)."""
    theta = _check_theta(chain, theta)
    pk = _packed(chain)
    pre_rot, pre_pos, post_rot, post_pos = fk_frames(chain, theta)
    if pk.n == 0:
        return np.zeros((6, 0))
    tip = post_rot[-1] @ pk.tip_pos + post_pos[-1]
    jac = np.zeros((6, pk.n))
    for i in range(pk.n):
        z = pre_rot[i] @ pk.axes[i]
        if pk.kinds[i] == kernels.KIND_REVOLUTE:
            jac[:3, i] = np.cross(z, tip - pre_pos[i])
            jac[3:, i] = z
        else:
            jac[:3, i] = z
    return jac


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(position distance in meters, rotation angle in radians)."""
    return float(np.linalg.norm(a.position - b.position)), quat_angle(a.orientation, b.orientation)


def workspace_radius(chain: KinematicChain) -> float:
    """Reach bound measured from the first movable joint's origin."""
    pk = _packed(chain)
    reach = 0.0
    for i in range(1, pk.n):
        reach += float(np.linalg.norm(pk.origin_pos[i]))
    for i in range(pk.n):
        if pk.kinds[i] == kernels.KIND_PRISMATIC:
            reach += max(abs(pk.lower[i]), abs(pk.upper[i]))
    reach += float(np.linalg.norm(pk.tip_pos))
    return reach


def ik_solve(chain: KinematicChain, target: Pose, theta_init, *,
             max_iters: int = 200, damping: float = 1e-2,
             pos_tol: float = 1e-4, rot_tol: float = 1e-3) -> np.ndarray:
    """Damped least squares IK with joint-limit clamping per iterate.

    Update rule: dtheta = J^T (J J^T + damping^2 I)^-1 e, with e the
    6-vector pose error (position difference, quaternion-log rotation).
    Raises Unreachable when the target position exceeds the workspace
    bound, NoConvergence when the iteration budget runs out.
    """
    theta = _check_theta(chain, theta_init)
    pk = _packed(chain)
    if pk.n == 0:
        pose = fk_pose(chain, theta)
        if max(pose_error(pose, target)) <= max(pos_tol, rot_tol):
            return theta
        raise Unreachable("empty chain cannot move")

    # world origin of the first joint is configuration-independent
    first = pk.base_rot @ pk.origin_pos[0] + pk.base_pos
    if float(np.linalg.norm(np.asarray(target.position) - first)) > workspace_radius(chain) + pos_tol:
        raise Unreachable(
            f"target {np.round(target.position, 4).tolist()} outside workspace radius "
            f"{workspace_radius(chain):.4f}")

    theta = np.clip(theta, pk.lower, pk.upper)
    eye6 = np.eye(6)
    lam2 = damping * damping
    for _ in range(max_iters):
        pre_rot, pre_pos, post_rot, post_pos = kernels.chain_fk(
            pk.origin_pos, pk.origin_rot, pk.axes, pk.kinds, theta, pk.base_rot, pk.base_pos)
        tip_rot = post_rot[-1] @ pk.tip_rot
        tip_pos = post_rot[-1] @ pk.tip_pos + post_pos[-1]
        q_cur = matrix_to_quat(tip_rot)
        pos_err = np.asarray(target.position) - tip_pos
        rot_vec = quat_log_vector(quat_normalize(quat_mul(target.orientation, quat_conj(q_cur))))
        if np.linalg.norm(pos_err) <= pos_tol and quat_angle(q_cur, target.orientation) <= rot_tol:
            return theta

        jac = np.zeros((6, pk.n))
        for i in range(pk.n):
            z = pre_rot[i] @ pk.axes[i]
            if pk.kinds[i] == kernels.KIND_REVOLUTE:
                jac[:3, i] = np.cross(z, tip_pos - pre_pos[i])
                jac[3:, i] = z
            else:
                jac[:3, i] = z
        err = np.concatenate([pos_err, rot_vec])
        step = jac.T @ np.linalg.solve(jac @ jac.T + lam2 * eye6, err)
        theta = np.clip(theta + step, pk.lower, pk.upper)
    raise NoConvergence(f"no convergence in {max_iters} iterations")


def normalize_action(raw) -> tuple[np.ndarray, dict]:
    """Project a raw 16-vector onto the valid bimanual pose-vector set.

    Quaternion blocks are scaled to unit norm (identity fallback below
    1e-8, flagged in the metadata); gripper scalars clamp to [0, 1].
    """
    vec = np.asarray(raw, dtype=np.float64).reshape(-1).copy()
    if vec.shape[0] != 2 * POSE_VEC_WIDTH:
        raise LengthMismatch(f"expected 16 values, got {vec.shape[0]}")
    meta = {"fallback_quat": [False, False]}
    for arm in range(2):
        o = arm * POSE_VEC_WIDTH
        q = vec[o + 3:o + 7]
        n = float(np.linalg.norm(q))
        if n < 1e-8:
            vec[o + 3:o + 7] = (1.0, 0.0, 0.0, 0.0)
            meta["fallback_quat"][arm] = True
        else:
            vec[o + 3:o + 7] = q / n
        vec[o + 7] = min(1.0, max(0.0, vec[o + 7]))
    return vec, meta


def pose_vector(model: RobotModel, theta, grippers) -> np.ndarray:
    """Bimanual PoseVector (left || right, 8 values each) at a configuration."""
    per_arm = split_theta(model, theta)
    chains = _arm_chains(model)
    out = np.zeros(16)
    for k, arm in enumerate(ARMS):
        pose = fk_pose(chains[arm], per_arm[arm])
        o = k * POSE_VEC_WIDTH
        out[o:o + 3] = pose.position
        out[o + 3:o + 7] = pose.orientation
        out[o + 7] = float(grippers[k])
    return out


def arm_pose_from_vector(vec, arm: str) -> tuple[Pose, float]:
    """Split one arm's Pose and gripper scalar out of a 16-vector."""
    o = 0 if arm == "left" else POSE_VEC_WIDTH
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    return Pose(vec[o:o + 3], vec[o + 3:o + 7]), float(vec[o + 7])


# --- differentiable forward kinematics ---

class _JointConsts:
    """Constant matrices for one joint's tape-side motion transform."""

    def __init__(self, spec):
        u = np.asarray(spec.axis, dtype=np.float64)
        uu = np.outer(u, u)
        self.a = np.eye(3) - uu           # cos factor
        self.b = np.array([[0.0, -u[2], u[1]],
                           [u[2], 0.0, -u[0]],
                           [-u[1], u[0], 0.0]])  # sin factor
        self.c = uu                        # constant part
        self.u = u
        self.revolute = spec.kind == "revolute"


def _dfk_consts(model: RobotModel) -> dict[str, list[_JointConsts]]:
    cached = getattr(model, "_dfk_consts", None)
    if cached is None:
        chains = _arm_chains(model)
        cached = {arm: [_JointConsts(j) for j in chains[arm].joints] for arm in ARMS}
        object.__setattr__(model, "_dfk_consts", cached)
    return cached


def _entry(mat: Var, i: int, j: int) -> Var:
    return ad.reshape(ad.slice_(ad.slice_(mat, 0, i, i + 1), 1, j, j + 1), ())


def _quat_from_matrix_tape(rot: Var) -> Var:
    """Tape twin of se3.matrix_to_quat: same branch rule, same formulas.

    The branch is chosen from forward values; gradients are therefore
    defined away from branch boundaries, which is the documented contract.
    """
    r = rot.value
    tape = rot.tape
    half = tape.const(0.25)
    one = tape.const(1.0)
    two = tape.const(2.0)

    e = {(i, j): _entry(rot, i, j) for i in range(3) for j in range(3)}
    trace = e[0, 0] + e[1, 1] + e[2, 2]
    t_val = r[0, 0] + r[1, 1] + r[2, 2]
    branch = int(np.argmax([t_val, r[0, 0], r[1, 1], r[2, 2]]))
    if branch == 0:
        s = ad.sqrt(one + trace) * two
        qw = s * half
        qx = (e[2, 1] - e[1, 2]) / s
        qy = (e[0, 2] - e[2, 0]) / s
        qz = (e[1, 0] - e[0, 1]) / s
    elif branch == 1:
        s = ad.sqrt(one + e[0, 0] - e[1, 1] - e[2, 2]) * two
        qw = (e[2, 1] - e[1, 2]) / s
        qx = s * half
        qy = (e[0, 1] + e[1, 0]) / s
        qz = (e[0, 2] + e[2, 0]) / s
    elif branch == 2:
        s = ad.sqrt(one - e[0, 0] + e[1, 1] - e[2, 2]) * two
        qw = (e[0, 2] - e[2, 0]) / s
        qx = (e[0, 1] + e[1, 0]) / s
        qy = s * half
        qz = (e[1, 2] + e[2, 1]) / s
    else:
        s = ad.sqrt(one - e[0, 0] - e[1, 1] + e[2, 2]) * two
        qw = (e[1, 0] - e[0, 1]) / s
        qx = (e[0, 2] + e[2, 0]) / s
        qy = (e[1, 2] + e[2, 1]) / s
        qz = s * half
    quat = ad.concat([ad.reshape(v, (1,)) for v in (qw, qx, qy, qz)], axis=0)
    # normalize exactly like quat_normalize, then canonicalize the sign
    norm = ad.sqrt(ad.sum_(ad.square(quat)))
    quat = quat / ad.reshape(norm, ())
    if quat.value[0] < 0.0:
        quat = ad.neg(quat)
    return quat


def _pose_vector_no_grippers(model: RobotModel, theta: np.ndarray) -> np.ndarray:
    chains = _arm_chains(model)
    index = _movable_index(model)
    out = np.zeros(2 * 7)
    for a, arm in enumerate(ARMS):
        chain = chains[arm]
        idx = [index[j.name] for j in chain.joints]
        pose = fk_pose(chain, theta[idx])
        out[a * 7:a * 7 + 3] = pose.position
        out[a * 7 + 3:a * 7 + 7] = pose.orientation
    return out


def dfk_fast(a_joint: Var, model: RobotModel) -> Var:
    """Fused twin of ``dfk``: one tape node with kernel-backed forward and
    a hand-derived vector-Jacobian product.

    Column i of the pose Jacobian is (z_i x (p - p_i)) for the position
    block and 0.5 * (0, z_i) * q for the quaternion block (z_i the world
    joint axis, * quaternion multiplication); prismatic joints contribute
    (z_i, 0). The quaternion rows are tangent to the unit sphere, so the
    rule is exact for the normalized output. Forward values match dfk to
    float64 round-off and gradients to the check_gradient tolerance; the
    parity is pinned by tests.
    """
    if a_joint.shape != (model.m,):
        raise LengthMismatch(f"expected shape ({model.m},), got {a_joint.shape}")
    chains = _arm_chains(model)
    index = _movable_index(model)

    def forward(theta):
        return _pose_vector_no_grippers(model, theta)

    def backward(input_vals, out, grad):
        theta = input_vals[0]
        g_theta = np.zeros_like(theta)
        for a, arm in enumerate(ARMS):
            pk = _packed(chains[arm])
            idx = [index[j.name] for j in chains[arm].joints]
            pre_rot, pre_pos, post_rot, post_pos = kernels.chain_fk(
                pk.origin_pos, pk.origin_rot, pk.axes, pk.kinds, theta[idx],
                pk.base_rot, pk.base_pos)
            tip = post_rot[-1] @ pk.tip_pos + post_pos[-1]
            q = out[a * 7 + 3:a * 7 + 7]
            g_pos = grad[a * 7:a * 7 + 3]
            g_quat = grad[a * 7 + 3:a * 7 + 7]
            qw, qx, qy, qz = q
            for i, joint_idx in enumerate(idx):
                z = pre_rot[i] @ pk.axes[i]
                if pk.kinds[i] == kernels.KIND_REVOLUTE:
                    r = tip - pre_pos[i]
                    dpos = (z[1] * r[2] - z[2] * r[1],
                            z[2] * r[0] - z[0] * r[2],
                            z[0] * r[1] - z[1] * r[0])
                    # 0.5 * (0, z) * q, quaternion product expanded
                    dquat = (0.5 * (-z[0] * qx - z[1] * qy - z[2] * qz),
                             0.5 * (z[0] * qw + z[1] * qz - z[2] * qy),
                             0.5 * (z[1] * qw + z[2] * qx - z[0] * qz),
                             0.5 * (z[2] * qw + z[0] * qy - z[1] * qx))
                    g_theta[joint_idx] = (
                        dpos[0] * g_pos[0] + dpos[1] * g_pos[1] + dpos[2] * g_pos[2]
                        + dquat[0] * g_quat[0] + dquat[1] * g_quat[1]
                        + dquat[2] * g_quat[2] + dquat[3] * g_quat[3])
                else:
                    g_theta[joint_idx] = float(z @ g_pos)
        return (g_theta,)

    return ad.custom([a_joint], forward, backward)


def dfk(a_joint: Var, model: RobotModel) -> Var:
    """Differentiable bimanual FK: joint vector (m,) -> pose vector (14,).

    Replays the product of per-joint transforms with tape primitives, so
    backward() yields the Jacobian of both arm poses (position plus
    quaternion, grippers excluded) with respect to the joint prediction.
    Forward values match fk_pose for the same configuration.
    """
    if a_joint.shape != (model.m,):
        raise LengthMismatch(f"expected shape ({model.m},), got {a_joint.shape}")
    tape = a_joint.tape
    chains = _arm_chains(model)
    consts = _dfk_consts(model)
    index = _movable_index(model)

    parts: list[Var] = []
    for arm in ARMS:
        chain = chains[arm]
        pk = _packed(chain)
        rot = tape.const(pk.base_rot)
        pos = tape.const(pk.base_pos)
        for k, spec in enumerate(chain.joints):
            theta_k = ad.reshape(
                ad.slice_(a_joint, 0, index[spec.name], index[spec.name] + 1), ())
            pos = ad.matmul(rot, tape.const(pk.origin_pos[k])) + pos
            rot = ad.matmul(rot, tape.const(pk.origin_rot[k]))
            jc = consts[arm][k]
            if jc.revolute:
                c = ad.cos(theta_k)
                s = ad.sin(theta_k)
                motion = c * tape.const(jc.a) + s * tape.const(jc.b) + tape.const(jc.c)
                rot = ad.matmul(rot, motion)
            else:
                pos = pos + ad.matmul(rot, theta_k * tape.const(jc.u))
        pos = ad.matmul(rot, tape.const(pk.tip_pos)) + pos
        rot = ad.matmul(rot, tape.const(pk.tip_rot))
        parts.append(pos)
        parts.append(_quat_from_matrix_tape(rot))
    return ad.concat(parts, axis=0)
