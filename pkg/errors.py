#!/usr/bin/env python3
"""
Error Taxonomy for the Demonstration Engine
All domain and input errors raised by the toolkit
"""

from typing import Any, Dict, Optional, Sequence


class DemoEngineError(Exception):
    """Base class for every error raised by the toolkit"""


# ==================== INPUT ERRORS ====================

class InputError(DemoEngineError):
    """Malformed files, schemas or configuration (CLI exit 2)"""


class ConfigError(InputError):
    """Configuration file missing, unreadable or failing validation"""


class StreamFormatError(InputError):
    """A JSONL stream line could not be parsed"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(f"{where}{message}")


class ChecksumMismatch(InputError):
    """Episode file bytes do not match the manifest checksum"""


class DuplicateEpisode(InputError):
    """Episode id already present in the manifest"""


class UnknownStage(InputError):
    """Training stage name not recognised"""


# ==================== DOMAIN ERRORS ====================

class DomainError(DemoEngineError):
    """Numerical or geometric precondition violated"""


class DegenerateConfiguration(DomainError):
    """Too few points or points spanning less than a plane"""


class AntipodalRotation(DomainError):
    """Relative rotation of pi makes the geodesic ambiguous"""


class OutOfStroke(DomainError):
    """Slider displacement outside [0, stroke_max]"""


class LoopClosureInfeasible(DomainError):
    """Linkage loop cannot close at the requested slider position"""


class TargetUnreachable(DomainError):
    """Adaptation target cannot be attained by the mechanism"""


class NonMonotonicStroke(DomainError):
    """Fingertip displacement is not monotonic over the stroke"""


class InsufficientFrames(DomainError):
    """Too few frames to build a marker model"""


class NonRigidSequence(DomainError):
    """Marker distances vary too much across frames to be a rigid body"""


class AmbiguousAssignment(DomainError):
    """Two distinct assignments are equally consistent with the model"""

    def __init__(self, message: str, cost: float = 0.0, runner_up: float = 0.0):
        self.cost = cost
        self.runner_up = runner_up
        super().__init__(message)


class MissingFrameMarker(DomainError):
    """A marker needed to define the flange frame is absent"""


class EmptyOverlap(DomainError):
    """Pose and width streams share no time span"""


class NonMonotonicTimestamps(DomainError):
    """Timestamps are not strictly increasing"""


class IkFailure(DomainError):
    """Inverse kinematics did not converge within the iteration budget"""

    def __init__(self, position_residual: float, orientation_residual: float,
                 q: Sequence[float], iterations: int = 0):
        self.position_residual = float(position_residual)
        self.orientation_residual = float(orientation_residual)
        self.q = list(q)
        self.iterations = iterations
        super().__init__(
            f"IK failed after {iterations} iterations: "
            f"position residual {self.position_residual:.3e} m, "
            f"orientation residual {self.orientation_residual:.3e} rad"
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'position_residual_m': self.position_residual,
            'orientation_residual_rad': self.orientation_residual,
            'iterations': self.iterations,
        }


class TimelineMismatch(DomainError):
    """Left and right trajectories do not share a timeline"""


class DimensionMismatch(DomainError):
    """Array shapes do not agree"""


class NotNormalized(DomainError):
    """Embedding vectors are not unit-norm"""


class NonPositiveTemperature(DomainError):
    """Contrastive temperature must be > 0"""


class FrameOutOfRange(DomainError):
    """Frame index outside the episode"""
