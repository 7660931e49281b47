"""Exception types shared across the package.

Every error carries a machine-readable ``code`` used by the CLI when it
prints a single-line error to stderr.
"""

from __future__ import annotations


class KinediffError(Exception):
    """Base class for all domain errors."""

    code = "Error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


# --- URDF / model errors ---

class MalformedXml(KinediffError):
    code = "MalformedXml"


class MissingLink(KinediffError):
    code = "MissingLink"


class CycleDetected(KinediffError):
    code = "CycleDetected"


class UnsupportedJointKind(KinediffError):
    code = "UnsupportedJointKind"


class ArmAssignment(KinediffError):
    """A movable joint matched neither arm prefix and no explicit list."""

    code = "ArmAssignment"


class UnknownModel(KinediffError):
    code = "UnknownModel"


class NotConnected(KinediffError):
    code = "NotConnected"


# --- kinematics errors ---

class LengthMismatch(KinediffError):
    code = "LengthMismatch"


class Unreachable(KinediffError):
    code = "Unreachable"


class NoConvergence(KinediffError):
    code = "NoConvergence"


# --- tensor / graph / diffusion errors ---

class ShapeMismatch(KinediffError):
    code = "ShapeMismatch"


class NotScalar(KinediffError):
    code = "NotScalar"


class BadRange(KinediffError):
    code = "BadRange"


class BadStep(KinediffError):
    code = "BadStep"


class BadLambda(KinediffError):
    code = "BadLambda"


class InconsistentSlices(KinediffError):
    code = "InconsistentSlices"


# --- policy / training errors ---

class HistoryLengthMismatch(KinediffError):
    code = "HistoryLengthMismatch"


class NonFiniteLoss(KinediffError):
    code = "NonFiniteLoss"


# --- tasks / data errors ---

class EmptyTrajectory(KinediffError):
    code = "EmptyTrajectory"


class ExpertFailed(KinediffError):
    code = "ExpertFailed"


class SchemaViolation(KinediffError):
    code = "SchemaViolation"


class IoError(KinediffError):
    code = "IoError"
