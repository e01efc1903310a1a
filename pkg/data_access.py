#!/usr/bin/env python3
"""
File Data Access Module for Demonstration Streams
Reads and writes marker streams, models, pose streams, trajectories,
verdict logs and reports
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from config_loader import config
from errors import DomainError, StreamFormatError
from feasibility import EpisodeVerdict
from geometry import RigidTransform
from marker_tracking import MarkerFrame, MarkerObjectModel
from pose_transfer import FlangeSample, FlangeTrajectory, PoseSample

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# ==================== LINE SCHEMAS ====================

def _points(v: List[List[float]]) -> List[List[float]]:
    for p in v:
        if len(p) != 3:
            raise ValueError(f"point {p} must have 3 coordinates")
    return v


class MarkerFrameLine(BaseModel):
    model_config = ConfigDict(extra='forbid')

    t: float
    points: List[List[float]]
    gripper: Optional[List[List[float]]] = None

    @field_validator('points')
    @classmethod
    def _xyz(cls, v):
        return _points(v)

    @field_validator('gripper')
    @classmethod
    def _pair(cls, v):
        if v is not None and len(_points(v)) != 2:
            raise ValueError("gripper needs exactly 2 jaw marker positions")
        return v


class PoseLine(BaseModel):
    model_config = ConfigDict(extra='forbid')

    t: float
    pos: List[float]
    rot: List[float]


class TrajectoryLine(PoseLine):
    width: float
    arm: str


class ModelDocument(BaseModel):
    ids: List[str]
    positions: List[List[float]]


class LabeledFrameDocument(BaseModel):
    ids: List[str]
    points: List[List[float]]


def _read_lines(path: PathLike, schema) -> List[Tuple[int, Any]]:
    """(line number, validated record) for each non-blank JSONL line"""
    records = []
    try:
        with open(path, 'r') as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append((line_no, schema.model_validate_json(line)))
                except ValidationError as e:
                    logger.error(f"{path}:{line_no}: {e.errors()[0]['msg']}")
                    raise StreamFormatError(e.errors()[0]['msg'], str(path), line_no)
    except OSError as e:
        raise StreamFormatError(f"cannot read: {e}", str(path))
    return records


def _read_document(path: PathLike, schema):
    try:
        with open(path, 'r') as f:
            return schema.model_validate_json(f.read())
    except OSError as e:
        raise StreamFormatError(f"cannot read: {e}", str(path))
    except ValidationError as e:
        raise StreamFormatError(e.errors()[0]['msg'], str(path))


def _write_lines(path: PathLike, rows: Sequence[Dict[str, Any]]) -> int:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return len(rows)


class DemoDataAccess:
    """Clean interface for the toolkit's on-disk formats"""

    # ==================== Marker Streams ====================

    def read_marker_stream(self, path: PathLike) -> List[MarkerFrame]:
        """Frames of {"t", "points", optional "gripper"} lines, meters"""
        frames = []
        for line_no, record in _read_lines(path, MarkerFrameLine):
            try:
                frames.append(MarkerFrame(record.t, np.asarray(record.points, dtype=float).reshape(-1, 3),
                                          record.gripper))
            except (ValueError, DomainError) as e:
                raise StreamFormatError(str(e), str(path), line_no)
        return frames

    def write_marker_stream(self, path: PathLike, frames: Sequence[MarkerFrame]) -> int:
        rows = []
        for frame in frames:
            row: Dict[str, Any] = {'t': frame.timestamp, 'points': frame.observations.tolist()}
            if frame.gripper is not None:
                row['gripper'] = frame.gripper.tolist()
            rows.append(row)
        return _write_lines(path, rows)

    # ==================== Models ====================

    def read_model(self, path: PathLike) -> MarkerObjectModel:
        document = _read_document(path, ModelDocument)
        try:
            return MarkerObjectModel.from_dict(document.model_dump())
        except (ValueError, DomainError) as e:
            raise StreamFormatError(f"invalid model: {e}", str(path))

    def write_model(self, path: PathLike, model: MarkerObjectModel):
        self.write_report(path, model.to_dict())

    def read_labeled_frame(self, path: PathLike) -> Tuple[List[str], np.ndarray]:
        """First-frame labels for model construction: {"ids", "points"}"""
        document = _read_document(path, LabeledFrameDocument)
        points = np.asarray(document.points, dtype=float)
        if points.ndim != 2 or points.shape != (len(document.ids), 3):
            raise StreamFormatError("points must be one [x, y, z] per id", str(path))
        return document.ids, points

    # ==================== Poses and Trajectories ====================

    def read_pose_stream(self, path: PathLike, source: str = 'mocap_240hz') -> List[PoseSample]:
        samples = []
        for line_no, record in _read_lines(path, PoseLine):
            try:
                pose = RigidTransform.from_quaternion(record.rot, record.pos)
            except ValueError as e:
                raise StreamFormatError(str(e), str(path), line_no)
            samples.append(PoseSample(record.t, pose, source))
        return samples

    def write_pose_stream(self, path: PathLike, samples: Sequence[PoseSample]) -> int:
        return _write_lines(path, [{'t': s.timestamp, **s.pose.to_dict()} for s in samples])

    def read_trajectory(self, path: PathLike, rate: Optional[float] = None) -> FlangeTrajectory:
        """Trajectory JSONL; the rate defaults to the inverse median step"""
        samples = []
        for line_no, r in _read_lines(path, TrajectoryLine):
            try:
                samples.append(FlangeSample(r.t, RigidTransform.from_quaternion(r.rot, r.pos), r.width, r.arm))
            except ValueError as e:
                raise StreamFormatError(str(e), str(path), line_no)
        if rate is None:
            times = np.array([s.timestamp for s in samples])
            steps = np.diff(times)
            typical = float(np.median(steps)) if steps.size else 0.0
            rate = 1.0 / typical if typical > 0 else config.get('transfer.rate_hz', 30.0)
        return FlangeTrajectory(float(rate), tuple(samples))

    def write_trajectory(self, path: PathLike, trajectory: FlangeTrajectory) -> int:
        rows = [
            {'t': s.timestamp, **s.pose.to_dict(), 'width': s.gripper_width, 'arm': s.arm}
            for s in trajectory.samples
        ]
        return _write_lines(path, rows)

    # ==================== Reports ====================

    def write_records(self, path: PathLike, rows: Sequence[Dict[str, Any]]) -> int:
        return _write_lines(path, rows)

    def write_verdict_log(self, path: PathLike, verdict: EpisodeVerdict) -> int:
        """One line per (frame, arm) with status, detail and every triggered check"""
        return _write_lines(path, verdict.log)

    def write_report(self, path: PathLike, report: Dict[str, Any]):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(report, f, indent=2, sort_keys=True, default=_json_default)
            f.write("\n")

    def read_report(self, path: PathLike) -> Dict[str, Any]:
        try:
            with open(path, 'r') as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise StreamFormatError(f"cannot read report: {e}", str(path))

    # ==================== DataFrame Export ====================

    def to_dataframe(self, trajectory: FlangeTrajectory) -> pd.DataFrame:
        """Trajectory samples as a DataFrame"""
        columns = ['t', 'x', 'y', 'z', 'qw', 'qx', 'qy', 'qz', 'width', 'arm']
        if not len(trajectory):
            return pd.DataFrame(columns=columns)
        rows = [
            [s.timestamp, *s.pose.translation, *s.pose.quaternion_wxyz(), s.gripper_width, s.arm]
            for s in trajectory.samples
        ]
        return pd.DataFrame(rows, columns=columns)

    def verdict_dataframe(self, verdict: EpisodeVerdict) -> pd.DataFrame:
        if not verdict.log:
            return pd.DataFrame(columns=['frame', 'arm', 't', 'status'])
        return pd.DataFrame(verdict.log)[['frame', 'arm', 't', 'status']]

    def export_to_csv(self, filename: PathLike, trajectory: FlangeTrajectory) -> int:
        """Export a trajectory to CSV"""
        df = self.to_dataframe(trajectory)
        df.to_csv(filename, index=False)
        return len(df)


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


# ==================== Convenience Functions ====================

def load_episode(left_path: PathLike, right_path: PathLike) -> Tuple[FlangeTrajectory, FlangeTrajectory]:
    """Shortcut to read a bimanual episode"""
    da = DemoDataAccess()
    return da.read_trajectory(left_path), da.read_trajectory(right_path)
