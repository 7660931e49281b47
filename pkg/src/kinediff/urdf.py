"""URDF parsing, validation, chain extraction, and built-in models.

Supported subset: robot / link / joint / origin / axis / limit. Visual,
collision, inertial, mimic, and transmission elements are ignored with a
logged warning; only kinematic content feeds the rest of the package.
Origin rotations are roll-pitch-yaw in the XYZ-extrinsic convention and
converted to unit quaternions at parse time.
"""

from __future__ import annotations

import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ArmAssignment,
    CycleDetected,
    MalformedXml,
    MissingLink,
    NotConnected,
    UnknownModel,
    UnsupportedJointKind,
)
from .se3 import Pose, matrix_to_rpy

logger = logging.getLogger(__name__)

JOINT_KINDS = ("revolute", "prismatic", "fixed")
IGNORED_ELEMENTS = ("visual", "collision", "inertial", "mimic", "transmission",
                    "gazebo", "sensor", "dynamics", "safety_controller", "calibration")


@dataclass(frozen=True)
class JointLimits:
    lower: float
    upper: float
    max_velocity: float | None = None


@dataclass(frozen=True, eq=False)
class JointSpec:
    name: str
    kind: str
    parent_link: str
    child_link: str
    origin: Pose
    axis: np.ndarray
    limits: JointLimits
    arm_label: str | None = None  # "left" | "right", None for fixed joints

    def __post_init__(self):
        ax = np.array(self.axis, dtype=np.float64).reshape(3)
        ax.flags.writeable = False
        object.__setattr__(self, "axis", ax)

    @property
    def movable(self) -> bool:
        return self.kind != "fixed"


@dataclass(frozen=True, eq=False)
class RobotModel:
    name: str
    links: tuple[str, ...]
    joints: tuple[JointSpec, ...]
    root_link: str
    arms: tuple[tuple[str, ...], tuple[str, ...]]  # (left, right) joint names

    @property
    def movable_joints(self) -> tuple[JointSpec, ...]:
        return tuple(j for j in self.joints if j.movable)

    @property
    def m(self) -> int:
        return len(self.movable_joints)

    def joint(self, name: str) -> JointSpec:
        for j in self.joints:
            if j.name == name:
                return j
        raise KeyError(name)

    def parent_joint_of(self, link: str) -> JointSpec | None:
        for j in self.joints:
            if j.child_link == link:
                return j
        return None

    def arm_joint_names(self, arm: str) -> tuple[str, ...]:
        if arm == "left":
            return self.arms[0]
        if arm == "right":
            return self.arms[1]
        raise KeyError(arm)


@dataclass(frozen=True, eq=False)
class KinematicChain:
    """Serial run of movable joints from a base link to a tip link.

    Fixed joints on the path are collapsed: their origins fold into the
    next movable joint's origin, or into ``tip_offset`` when they trail
    the last movable joint. The chain is expressed in the base link frame;
    ``base_pose`` places that frame in the world (identity when the base
    link is the model root).
    """

    joints: tuple[JointSpec, ...]
    base_pose: Pose = field(default_factory=Pose.identity)
    tip_offset: Pose = field(default_factory=Pose.identity)

    def __len__(self):
        return len(self.joints)

    def max_reach(self) -> float:
        """Upper bound on tip distance from the chain base origin."""
        reach = 0.0
        for j in self.joints:
            reach += float(np.linalg.norm(j.origin.position))
            if j.kind == "prismatic":
                reach += max(abs(j.limits.lower), abs(j.limits.upper))
        reach += float(np.linalg.norm(self.tip_offset.position))
        return reach


@dataclass(frozen=True)
class Finding:
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]

    @property
    def ok(self) -> bool:
        return not self.findings


def _parse_vec3(text: str | None, default=(0.0, 0.0, 0.0)) -> np.ndarray:
    if text is None:
        return np.array(default, dtype=np.float64)
    parts = text.split()
    if len(parts) != 3:
        raise MalformedXml(f"expected 3 numbers, got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise MalformedXml(f"bad number in {text!r}") from exc


def parse_urdf(text: str, *, left_prefix: str = "left_", right_prefix: str = "right_",
               left_joints: list[str] | None = None,
               right_joints: list[str] | None = None,
               name: str | None = None) -> RobotModel:
    """Parse a URDF document into a validated RobotModel.

    Arm membership of movable joints comes from explicit name lists when
    given, otherwise from the left/right name prefixes. Raises
    MalformedXml, MissingLink, CycleDetected, UnsupportedJointKind, or
    ArmAssignment on invalid input.
    """
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    if root.tag != "robot":
        raise MalformedXml(f"root element is <{root.tag}>, expected <robot>")

    for tag in IGNORED_ELEMENTS:
        if root.find(f".//{tag}") is not None:
            logger.warning("ignoring <%s> elements: only kinematic content is parsed", tag)

    links = tuple(ln.attrib["name"] for ln in root.findall("link") if "name" in ln.attrib)
    if not links:
        raise MalformedXml("no <link> elements")
    link_set = set(links)
    if len(link_set) != len(links):
        raise MalformedXml("duplicate link names")

    joints: list[JointSpec] = []
    for el in root.findall("joint"):
        jname = el.attrib.get("name")
        kind = el.attrib.get("type")
        if jname is None or kind is None:
            raise MalformedXml("joint missing name or type")
        if kind not in JOINT_KINDS:
            raise UnsupportedJointKind(f"joint {jname!r} has type {kind!r}")
        parent_el, child_el = el.find("parent"), el.find("child")
        if parent_el is None or child_el is None:
            raise MalformedXml(f"joint {jname!r} missing parent or child")
        parent, child = parent_el.attrib.get("link"), child_el.attrib.get("link")
        for ln in (parent, child):
            if ln not in link_set:
                raise MissingLink(f"joint {jname!r} references undeclared link {ln!r}")
        origin_el = el.find("origin")
        xyz = _parse_vec3(origin_el.attrib.get("xyz") if origin_el is not None else None)
        rpy = _parse_vec3(origin_el.attrib.get("rpy") if origin_el is not None else None)
        origin = Pose.from_xyz_rpy(xyz, rpy)
        axis_el = el.find("axis")
        axis = _parse_vec3(axis_el.attrib.get("xyz") if axis_el is not None else None,
                           default=(1.0, 0.0, 0.0))
        if kind != "fixed":
            norm = float(np.linalg.norm(axis))
            if norm < 1e-9:
                raise MalformedXml(f"joint {jname!r} has zero axis")
            axis = axis / norm
        limit_el = el.find("limit")
        if kind == "fixed":
            limits = JointLimits(0.0, 0.0)
        elif limit_el is not None:
            try:
                lower = float(limit_el.attrib.get("lower", "0"))
                upper = float(limit_el.attrib.get("upper", "0"))
            except ValueError as exc:
                raise MalformedXml(f"joint {jname!r} has non-numeric limits") from exc
            vel = limit_el.attrib.get("velocity")
            limits = JointLimits(lower, upper, float(vel) if vel is not None else None)
            if not (math.isfinite(lower) and math.isfinite(upper)) or lower > upper:
                raise MalformedXml(f"joint {jname!r} limits [{lower}, {upper}] invalid")
        else:
            logger.warning("joint %r has no <limit>; defaulting", jname)
            limits = JointLimits(-math.pi, math.pi) if kind == "revolute" else JointLimits(-1.0, 1.0)
        joints.append(JointSpec(jname, kind, parent, child, origin, axis, limits))

    if len({j.name for j in joints}) != len(joints):
        raise MalformedXml("duplicate joint names")

    # tree structure: unique root, single parent per link, no cycles
    parent_of: dict[str, str] = {}
    for j in joints:
        if j.child_link in parent_of:
            raise CycleDetected(f"link {j.child_link!r} has multiple parent joints")
        parent_of[j.child_link] = j.parent_link
    roots = [ln for ln in links if ln not in parent_of]
    if len(roots) != 1:
        raise CycleDetected(f"link graph has {len(roots)} roots, expected 1")
    root_link = roots[0]
    for ln in links:
        seen = set()
        cur = ln
        while cur in parent_of:
            if cur in seen:
                raise CycleDetected(f"cycle through link {cur!r}")
            seen.add(cur)
            cur = parent_of[cur]
        if cur != root_link:
            raise CycleDetected(f"link {ln!r} not connected to root {root_link!r}")

    # arm grouping, ordered by depth so serial arms read base to tip
    def depth(link: str) -> int:
        d = 0
        while link in parent_of:
            link = parent_of[link]
            d += 1
        return d

    left, right = [], []
    for j in sorted((j for j in joints if j.movable), key=lambda j: depth(j.child_link)):
        if left_joints is not None or right_joints is not None:
            if left_joints and j.name in left_joints:
                left.append(j.name)
            elif right_joints and j.name in right_joints:
                right.append(j.name)
            else:
                raise ArmAssignment(f"joint {j.name!r} not in either explicit arm list")
        elif j.name.startswith(left_prefix):
            left.append(j.name)
        elif j.name.startswith(right_prefix):
            right.append(j.name)
        else:
            raise ArmAssignment(
                f"joint {j.name!r} matches neither prefix {left_prefix!r} nor {right_prefix!r}")

    labeled = []
    for j in joints:
        if j.name in left:
            labeled.append(replace(j, arm_label="left"))
        elif j.name in right:
            labeled.append(replace(j, arm_label="right"))
        else:
            labeled.append(j)

    model = RobotModel(
        name=name or root.attrib.get("name", "robot"),
        links=links,
        joints=tuple(labeled),
        root_link=root_link,
        arms=(tuple(left), tuple(right)),
    )
    report = validate_model(model)
    if not report.ok:
        raise MalformedXml("; ".join(f"{f.code}: {f.message}" for f in report.findings))
    return model


def validate_model(model: RobotModel) -> ValidationReport:
    """Check every RobotModel invariant; findings are data, not failures."""
    findings: list[Finding] = []
    link_set = set(model.links)

    if model.root_link not in link_set:
        findings.append(Finding("ROOT_MISSING", f"root link {model.root_link!r} not declared"))

    parent_of: dict[str, str] = {}
    for j in model.joints:
        for ln in (j.parent_link, j.child_link):
            if ln not in link_set:
                findings.append(Finding("MISSING_LINK", f"joint {j.name!r} references {ln!r}"))
        if j.child_link in parent_of:
            findings.append(Finding("MULTIPLE_PARENTS", f"link {j.child_link!r}"))
        parent_of[j.child_link] = j.parent_link
        if j.limits.lower > j.limits.upper:
            findings.append(Finding("LIMITS_INVERTED", f"joint {j.name!r}"))
        if not (math.isfinite(j.limits.lower) and math.isfinite(j.limits.upper)):
            findings.append(Finding("LIMITS_NONFINITE", f"joint {j.name!r}"))
        if j.movable and abs(float(np.linalg.norm(j.axis)) - 1.0) > 1e-9:
            findings.append(Finding("AXIS_NOT_UNIT", f"joint {j.name!r}"))

    for ln in link_set:
        seen: set[str] = set()
        cur = ln
        while cur in parent_of and cur not in seen:
            seen.add(cur)
            cur = parent_of[cur]
        if cur in seen:
            findings.append(Finding("CYCLE", f"cycle through link {cur!r}"))
            break
        if cur != model.root_link and model.root_link in link_set:
            findings.append(Finding("DISCONNECTED", f"link {ln!r} does not reach the root"))

    left, right = model.arms
    overlap = set(left) & set(right)
    for nm in sorted(overlap):
        findings.append(Finding("ARM_OVERLAP", f"joint {nm!r} in both arms"))
    joint_names = {j.name for j in model.joints}
    movable_names = {j.name for j in model.movable_joints}
    for nm in (*left, *right):
        if nm not in joint_names:
            findings.append(Finding("ARM_UNKNOWN_JOINT", f"{nm!r}"))
        elif nm not in movable_names:
            findings.append(Finding("ARM_FIXED_JOINT", f"{nm!r} is fixed"))
    uncovered = movable_names - set(left) - set(right)
    for nm in sorted(uncovered):
        findings.append(Finding("ARM_COVERAGE", f"movable joint {nm!r} in no arm"))

    return ValidationReport(tuple(findings))


def extract_chain(model: RobotModel, base: str, tip: str) -> KinematicChain:
    """Tree path base -> tip as a serial chain of movable joints.

    Fixed joints collapse into the next movable joint's origin (or the
    tip offset). Raises NotConnected when tip is not a descendant of base,
    MissingLink when either link is undeclared.
    """
    link_set = set(model.links)
    for ln in (base, tip):
        if ln not in link_set:
            raise MissingLink(f"link {ln!r} not in model")

    path: list[JointSpec] = []
    cur = tip
    while cur != base:
        j = model.parent_joint_of(cur)
        if j is None:
            raise NotConnected(f"{tip!r} is not a descendant of {base!r}")
        path.append(j)
        cur = j.parent_link
    path.reverse()

    joints: list[JointSpec] = []
    pending = Pose.identity()
    for j in path:
        if j.movable:
            joints.append(replace(j, origin=pending.compose(j.origin)))
            pending = Pose.identity()
        else:
            pending = pending.compose(j.origin)
    return KinematicChain(joints=tuple(joints), base_pose=Pose.identity(), tip_offset=pending)


def arm_chain(model: RobotModel, arm: str) -> KinematicChain:
    """Chain from the model root to the tip link of one arm."""
    names = model.arm_joint_names(arm)
    if not names:
        raise NotConnected(f"model has no {arm} arm")
    last = model.joint(names[-1])
    tip = last.child_link
    # follow trailing fixed joints to the real tip (gripper) link
    extended = True
    while extended:
        extended = False
        for j in model.joints:
            if j.parent_link == tip and not j.movable:
                tip = j.child_link
                extended = True
                break
    return extract_chain(model, model.root_link, tip)


# --- built-in models ---

PLANAR_LINK_LENGTHS = (0.30, 0.25, 0.15)
PLANAR_BASE_X = 0.25

_PANDA_LIKE = (
    # (origin xyz, axis, lower, upper)
    ((0.0, 0.0, 0.333), (0.0, 0.0, 1.0), -2.8973, 2.8973),
    ((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), -1.7628, 1.7628),
    ((0.0, 0.0, 0.316), (0.0, 0.0, 1.0), -2.8973, 2.8973),
    ((0.0825, 0.0, 0.0), (0.0, -1.0, 0.0), -3.0718, -0.0698),
    ((-0.0825, 0.0, 0.384), (0.0, 0.0, 1.0), -2.8973, 2.8973),
    ((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), -0.0175, 3.7525),
    ((0.088, 0.0, 0.0), (0.0, 0.0, 1.0), -2.8973, 2.8973),
)


def _revolute(name, parent, child, xyz, rpy=(0.0, 0.0, 0.0), axis=(0.0, 0.0, 1.0),
              lower=-math.pi, upper=math.pi, arm=None) -> JointSpec:
    return JointSpec(name, "revolute", parent, child, Pose.from_xyz_rpy(xyz, rpy),
                     np.asarray(axis, dtype=np.float64), JointLimits(lower, upper), arm)


def _fixed(name, parent, child, xyz) -> JointSpec:
    return JointSpec(name, "fixed", parent, child, Pose.from_xyz_rpy(xyz, (0, 0, 0)),
                     np.array([1.0, 0.0, 0.0]), JointLimits(0.0, 0.0), None)


def _planar_arm(prefix: str, base_x: float, base_yaw: float) -> tuple[list[str], list[JointSpec]]:
    l1, l2, l3 = PLANAR_LINK_LENGTHS
    links = [f"{prefix}link1", f"{prefix}link2", f"{prefix}link3", f"{prefix}gripper"]
    joints = [
        JointSpec(f"{prefix}joint1", "revolute", "base", links[0],
                  Pose.from_xyz_rpy((base_x, 0.0, 0.0), (0.0, 0.0, base_yaw)),
                  np.array([0.0, 0.0, 1.0]), JointLimits(-math.pi, math.pi),
                  "left" if prefix.startswith("l") else "right"),
        _revolute(f"{prefix}joint2", links[0], links[1], (l1, 0.0, 0.0),
                  arm="left" if prefix.startswith("l") else "right"),
        _revolute(f"{prefix}joint3", links[1], links[2], (l2, 0.0, 0.0),
                  arm="left" if prefix.startswith("l") else "right"),
        _fixed(f"{prefix}gripper_joint", links[2], links[3], (l3, 0.0, 0.0)),
    ]
    return links, joints


def _spatial_arm(prefix: str, base_x: float, base_yaw: float) -> tuple[list[str], list[JointSpec]]:
    arm = "left" if prefix.startswith("l") else "right"
    links = [f"{prefix}link{i}" for i in range(1, 8)] + [f"{prefix}gripper"]
    joints = []
    parent = "base"
    for i, (xyz, axis, lo, hi) in enumerate(_PANDA_LIKE, start=1):
        child = links[i - 1]
        if i == 1:
            origin = Pose.from_xyz_rpy((base_x, xyz[1], xyz[2]), (0.0, 0.0, base_yaw))
        else:
            origin = Pose.from_xyz_rpy(xyz, (0.0, 0.0, 0.0))
        joints.append(JointSpec(f"{prefix}joint{i}", "revolute", parent, child, origin,
                                np.asarray(axis, dtype=np.float64), JointLimits(lo, hi), arm))
        parent = child
    joints.append(_fixed(f"{prefix}gripper_joint", links[6], links[7], (0.0, 0.0, 0.107)))
    return links, joints


def builtin_model(name: str) -> RobotModel:
    """Desk-scale built-in bimanual models.

    planar_bimanual_3dof: two 3R planar arms (links 0.30/0.25/0.15 m),
    bases at x = -0.25 and +0.25, the right arm yawed by pi so the arms
    mirror each other; all limits [-pi, pi]. spatial_bimanual_7dof: two
    7R serial arms.
    """
    if name == "planar_bimanual_3dof":
        l_links, l_joints = _planar_arm("left_", -PLANAR_BASE_X, 0.0)
        r_links, r_joints = _planar_arm("right_", PLANAR_BASE_X, math.pi)
    elif name == "spatial_bimanual_7dof":
        l_links, l_joints = _spatial_arm("left_", -PLANAR_BASE_X, 0.0)
        r_links, r_joints = _spatial_arm("right_", PLANAR_BASE_X, math.pi)
    else:
        raise UnknownModel(name)
    return RobotModel(
        name=name,
        links=("base", *l_links, *r_links),
        joints=tuple(l_joints + r_joints),
        root_link="base",
        arms=(tuple(j.name for j in l_joints if j.movable),
              tuple(j.name for j in r_joints if j.movable)),
    )


BUILTIN_MODELS = ("planar_bimanual_3dof", "spatial_bimanual_7dof")


def serialize_urdf(model: RobotModel) -> str:
    """Emit a model as URDF text; parse_urdf(serialize_urdf(m)) == m."""
    robot = ET.Element("robot", {"name": model.name})
    for ln in model.links:
        ET.SubElement(robot, "link", {"name": ln})
    for j in model.joints:
        el = ET.SubElement(robot, "joint", {"name": j.name, "type": j.kind})
        ET.SubElement(el, "parent", {"link": j.parent_link})
        ET.SubElement(el, "child", {"link": j.child_link})
        rpy = matrix_to_rpy(j.origin.rotation_matrix())
        ET.SubElement(el, "origin", {
            "xyz": " ".join(repr(float(v)) for v in j.origin.position),
            "rpy": " ".join(repr(float(v)) for v in rpy),
        })
        if j.movable:
            ET.SubElement(el, "axis", {"xyz": " ".join(repr(float(v)) for v in j.axis)})
            attrs = {"lower": repr(j.limits.lower), "upper": repr(j.limits.upper)}
            if j.limits.max_velocity is not None:
                attrs["velocity"] = repr(j.limits.max_velocity)
            ET.SubElement(el, "limit", attrs)
    ET.indent(robot)
    return ET.tostring(robot, encoding="unicode")


def model_to_dict(model: RobotModel) -> dict:
    """JSON-ready view of a model (the documented parse-urdf --json schema)."""
    return {
        "name": model.name,
        "root_link": model.root_link,
        "links": list(model.links),
        "m": model.m,
        "arms": {"left": list(model.arms[0]), "right": list(model.arms[1])},
        "joints": [
            {
                "name": j.name,
                "kind": j.kind,
                "parent_link": j.parent_link,
                "child_link": j.child_link,
                "origin": {
                    "xyz": [float(v) for v in j.origin.position],
                    "quat_wxyz": [float(v) for v in j.origin.orientation],
                },
                "axis": [float(v) for v in j.axis],
                "limits": {"lower": j.limits.lower, "upper": j.limits.upper,
                           "max_velocity": j.limits.max_velocity},
                "arm": j.arm_label,
            }
            for j in model.joints
        ],
    }
