#!/usr/bin/env python3
"""
Human-to-Robot Pose Transfer
Maps tracked collector poses onto the robot flange and resamples them,
with gripper widths, onto a uniform policy-rate timeline
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config_loader import config
from errors import EmptyOverlap, NonMonotonicTimestamps
from geometry import RigidTransform, compose, interpolate_pose

logger = logging.getLogger(__name__)

SOURCES = ('mocap_240hz', 'vr_100hz')
ARMS = ('left', 'right')
DEFAULT_RATE_HZ = config.get('transfer.rate_hz', 30.0)
UNIFORM_TOL_S = 1e-9


# ==================== TYPES ====================

@dataclass(frozen=True)
class PoseSample:
    """Tracker-frame pose in the world at one timestamp"""

    timestamp: float
    pose: RigidTransform
    source: str = 'mocap_240hz'

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown pose source {self.source!r}")


@dataclass(frozen=True)
class FlangeSample:
    timestamp: float
    pose: RigidTransform
    gripper_width: float
    arm: str

    def __post_init__(self):
        if self.gripper_width < 0:
            raise ValueError(f"gripper width must be >= 0, got {self.gripper_width}")
        if self.arm not in ARMS:
            raise ValueError(f"arm must be one of {ARMS}, got {self.arm!r}")


@dataclass(frozen=True)
class FlangeTrajectory:
    """Flange poses and gripper widths for one arm"""

    rate: float
    samples: Tuple[FlangeSample, ...]

    def __post_init__(self):
        object.__setattr__(self, 'samples', tuple(self.samples))
        if not self.rate > 0:
            raise ValueError("trajectory rate must be > 0")
        times = self.timestamps()
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise NonMonotonicTimestamps("trajectory timestamps must increase strictly")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> FlangeSample:
        return self.samples[index]

    @property
    def arm(self) -> Optional[str]:
        return self.samples[0].arm if self.samples else None

    def timestamps(self) -> np.ndarray:
        return np.array([s.timestamp for s in self.samples], dtype=float)

    def positions(self) -> np.ndarray:
        return np.array([s.pose.translation for s in self.samples]).reshape(-1, 3)

    def is_uniform(self, tol: float = UNIFORM_TOL_S) -> bool:
        times = self.timestamps()
        if times.size < 2:
            return True
        return bool(np.all(np.abs(np.diff(times) - 1.0 / self.rate) <= tol))

    def with_sample(self, index: int, **changes) -> 'FlangeTrajectory':
        samples = list(self.samples)
        samples[index] = replace(samples[index], **changes)
        return FlangeTrajectory(self.rate, tuple(samples))


# ==================== OPERATIONS ====================

def to_flange(tracked: PoseSample, offset: RigidTransform) -> RigidTransform:
    """Flange pose = tracked pose composed with the fixed tracker-to-flange offset"""
    return compose(tracked.pose, offset)


def transfer_stream(stream: Iterable[PoseSample], offset: RigidTransform) -> List[PoseSample]:
    return [PoseSample(s.timestamp, to_flange(s, offset), s.source) for s in stream]


def _check_increasing(times: np.ndarray, what: str):
    if times.size > 1 and np.any(np.diff(times) <= 0):
        bad = int(np.argmax(np.diff(times) <= 0)) + 1
        raise NonMonotonicTimestamps(f"{what} timestamps not strictly increasing at index {bad}")


def resample(stream: Sequence[PoseSample], widths: Sequence[Tuple[float, float]],
             target_rate: float = DEFAULT_RATE_HZ, arm: str = 'right') -> FlangeTrajectory:
    """
    Resample poses and widths at target_rate over their common time span.

    Output times are t_start + k / rate for k = 0..floor(span * rate); poses
    are interpolated geodesically between bracketing samples and widths
    linearly. Nothing is extrapolated.
    """
    if not target_rate > 0:
        raise ValueError(f"target rate must be > 0, got {target_rate}")
    if len(stream) < 2:
        raise EmptyOverlap(f"pose stream needs at least 2 samples, got {len(stream)}")
    if len(widths) == 0:
        raise EmptyOverlap("no gripper width samples")

    pose_times = np.array([s.timestamp for s in stream], dtype=float)
    width_times = np.array([w[0] for w in widths], dtype=float)
    width_values = np.array([w[1] for w in widths], dtype=float)
    _check_increasing(pose_times, "pose")
    _check_increasing(width_times, "width")
    if np.any(width_values < 0):
        raise ValueError("gripper widths must be >= 0")

    start = max(pose_times[0], width_times[0])
    end = min(pose_times[-1], width_times[-1])
    if start > end:
        raise EmptyOverlap(f"pose span [{pose_times[0]}, {pose_times[-1]}] and width span "
                           f"[{width_times[0]}, {width_times[-1]}] do not overlap")

    count = int(math.floor((end - start) * target_rate + 1e-9)) + 1
    times = np.minimum(start + np.arange(count) / target_rate, end)
    interpolated_widths = np.interp(times, width_times, width_values)

    last = len(stream) - 1
    samples = []
    for t, w in zip(times, interpolated_widths):
        i = int(np.searchsorted(pose_times, t, side='right')) - 1
        if i >= last:
            pose = stream[last].pose
        else:
            i = max(i, 0)
            s = (t - pose_times[i]) / (pose_times[i + 1] - pose_times[i])
            pose = interpolate_pose(stream[i].pose, stream[i + 1].pose, min(max(s, 0.0), 1.0))
        samples.append(FlangeSample(float(t), pose, float(w), arm))

    logger.debug(f"resampled {len(stream)} poses to {count} samples at {target_rate} Hz")
    return FlangeTrajectory(float(target_rate), tuple(samples))


def widths_from_tracking(tracked_frames: Iterable) -> List[Tuple[float, float]]:
    """(timestamp, width) pairs from tracked frames that carried jaw markers"""
    return [(f.timestamp, f.gripper_width) for f in tracked_frames if f.gripper_width is not None]
