#!/usr/bin/env python3
"""
Structured Marker-Object Tracking
Model construction, identity assignment under occlusion, pose estimation,
occluded-marker recovery and flange-frame construction
"""

import logging
import math
import re
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from config_loader import config
from errors import (
    AmbiguousAssignment,
    DegenerateConfiguration,
    DimensionMismatch,
    InsufficientFrames,
    MissingFrameMarker,
    NonRigidSequence,
)
from geometry import PointSet, RigidTransform, kabsch_align

logger = logging.getLogger(__name__)

GATE_RADIUS_M = config.get('tracking.gate_radius_m', 0.005)
PAIR_GATE_M = config.get('tracking.pair_gate_m', 0.005)
PRIOR_WEIGHT = config.get('tracking.prior_weight', 1.0)
AMBIGUITY_MARGIN = config.get('tracking.ambiguity_margin', 1e-9)
NONRIGID_RMS_M = config.get('tracking.nonrigid_rms_m', 0.002)
MIN_MODEL_FRAMES = config.get('tracking.min_model_frames', 10)

FLANGE_PAIRS = {
    'right': ('R1', 'R5'),
    'left': ('L1', 'L4'),
}


def marker_sort_key(marker_id: str):
    """Natural order: R2 before R10"""
    match = re.match(r'^(.*?)(\d+)$', marker_id)
    if match:
        return (match.group(1), int(match.group(2)))
    return (marker_id, -1)


# ==================== TYPES ====================

@dataclass(frozen=True, eq=False)
class MarkerObjectModel:
    """Marker identities with body-frame positions (meters)"""

    marker_ids: Tuple[str, ...]
    reference_positions: np.ndarray
    pairwise_distances: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ids = tuple(str(m) for m in self.marker_ids)
        refs = np.array(self.reference_positions, dtype=float)
        if refs.ndim != 2 or refs.shape[1] != 3 or refs.shape[0] != len(ids):
            raise DimensionMismatch("reference positions must be (N, 3) with one row per id")
        if len(set(ids)) != len(ids):
            raise ValueError("marker ids must be unique")
        if len(ids) < 4:
            raise DegenerateConfiguration(f"a marker object needs at least 4 markers, got {len(ids)}")
        sv = np.linalg.svd(refs - refs.mean(axis=0), compute_uv=False)
        if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
            raise DegenerateConfiguration("reference positions are collinear")

        refs.setflags(write=False)
        distances = squareform(pdist(refs))
        distances.setflags(write=False)
        object.__setattr__(self, 'marker_ids', ids)
        object.__setattr__(self, 'reference_positions', refs)
        object.__setattr__(self, 'pairwise_distances', distances)

    def __len__(self) -> int:
        return len(self.marker_ids)

    def index(self, marker_id: str) -> int:
        return self.marker_ids.index(marker_id)

    def reference(self, marker_id: str) -> np.ndarray:
        return self.reference_positions[self.index(marker_id)]

    def in_flange_frame(self, side: str) -> 'MarkerObjectModel':
        """Same markers expressed in the marker-defined flange frame"""
        frame = construct_flange_frame(side, dict(zip(self.marker_ids, self.reference_positions)))
        return MarkerObjectModel(self.marker_ids, frame.inverse().apply(self.reference_positions))

    def to_dict(self) -> Dict:
        return {
            'ids': list(self.marker_ids),
            'positions': self.reference_positions.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'MarkerObjectModel':
        return cls(tuple(data['ids']), np.asarray(data['positions'], dtype=float))


@dataclass(frozen=True, eq=False)
class MarkerFrame:
    """Unlabeled observations at one timestamp"""

    timestamp: float
    observations: np.ndarray
    gripper: Optional[np.ndarray] = None

    def __post_init__(self):
        obs = np.array(self.observations, dtype=float)
        if obs.size == 0:
            obs = obs.reshape(0, 3)
        if obs.ndim != 2 or obs.shape[1] != 3:
            raise DimensionMismatch(f"observations must be (M, 3), got {obs.shape}")
        if not math.isfinite(self.timestamp):
            raise ValueError("timestamp must be finite")
        object.__setattr__(self, 'observations', obs)
        if self.gripper is not None:
            object.__setattr__(self, 'gripper', np.asarray(self.gripper, dtype=float).reshape(2, 3))

    def __len__(self) -> int:
        return self.observations.shape[0]


@dataclass(frozen=True)
class Assignment:
    """marker_id -> observation index, or None when occluded"""

    mapping: Dict[str, Optional[int]]
    residual: float = 0.0
    cost: float = 0.0

    @property
    def assigned(self) -> List[str]:
        return [m for m, j in self.mapping.items() if j is not None]

    @property
    def occluded(self) -> List[str]:
        return [m for m, j in self.mapping.items() if j is None]

    def __len__(self) -> int:
        return len(self.assigned)


# ==================== ASSIGNMENT ====================

class _BranchAndBound:
    """
    Exact search over injective marker -> observation maps.

    Objective is lexicographic: most markers assigned with every assigned
    pair inside the pair gate, then least cost. Keeps the best and
    runner-up solutions of the winning count.
    """

    def __init__(self, model_distances: np.ndarray, observations: np.ndarray,
                 candidates: List[List[int]], prior_cost: np.ndarray, pair_gate: float):
        self.D = model_distances
        self.O = squareform(pdist(observations)) if len(observations) > 1 else np.zeros((1, 1))
        self.candidates = candidates
        self.prior_cost = prior_cost
        self.pair_gate = pair_gate
        self.n = model_distances.shape[0]
        self.m = observations.shape[0]

        self.best: Tuple[int, float, Optional[Tuple]] = (-1, math.inf, None)
        self.second: Tuple[int, float, Optional[Tuple]] = (-1, math.inf, None)
        self._current: List[Optional[int]] = [None] * self.n
        self._used = [False] * self.m

    def run(self):
        self._visit(0, 0, 0.0)
        return self.best, self.second

    def _record(self, count: int, cost: float):
        solution = (count, cost, tuple(self._current))
        if count > self.best[0]:
            self.best = solution
            self.second = (count, math.inf, None)
        elif count == self.best[0]:
            if cost < self.best[1]:
                self.second = self.best
                self.best = solution
            elif cost < self.second[1]:
                self.second = solution

    def _visit(self, i: int, count: int, cost: float):
        potential = count + min(self.n - i, self.m - count)
        if potential < self.best[0]:
            return
        if potential == self.best[0] and cost >= self.second[1]:
            return
        if i == self.n:
            self._record(count, cost)
            return

        options = []
        for j in self.candidates[i]:
            if self._used[j]:
                continue
            increment = self.prior_cost[i, j]
            consistent = True
            for k in range(i):
                jk = self._current[k]
                if jk is None:
                    continue
                deviation = self.O[j, jk] - self.D[i, k]
                if abs(deviation) > self.pair_gate:
                    consistent = False
                    break
                increment += deviation * deviation
            if consistent:
                options.append((increment, j))
        options.sort()

        for increment, j in options:
            self._current[i] = j
            self._used[j] = True
            self._visit(i + 1, count + 1, cost + increment)
            self._used[j] = False
        self._current[i] = None
        self._visit(i + 1, count, cost)


def topology_residual(model: MarkerObjectModel, observations: np.ndarray,
                      mapping: Dict[str, Optional[int]]) -> float:
    """RMS deviation (m) between observed and model distances over assigned pairs"""
    idx = [(model.index(m), j) for m, j in mapping.items() if j is not None]
    if len(idx) < 2:
        return 0.0
    model_idx = [i for i, _ in idx]
    obs_idx = [j for _, j in idx]
    dev = pdist(observations[obs_idx]) - pdist(model.reference_positions[model_idx])
    return float(np.sqrt(np.mean(dev ** 2)))


def _search(model: MarkerObjectModel, frame: MarkerFrame, predicted: Optional[np.ndarray],
            gate_radius: Optional[float], pair_gate: float, prior_weight: float):
    n, m = len(model), len(frame)
    if predicted is not None:
        sq = cdist(predicted, frame.observations, 'sqeuclidean')
        prior_cost = prior_weight * sq
    else:
        sq = None
        prior_cost = np.zeros((n, m))

    if gate_radius is not None and sq is not None:
        candidates = [[j for j in range(m) if sq[i, j] <= gate_radius ** 2] for i in range(n)]
    else:
        candidates = [list(range(m)) for _ in range(n)]

    return _BranchAndBound(model.pairwise_distances, frame.observations,
                           candidates, prior_cost, pair_gate).run()


def assign_identities(model: MarkerObjectModel, frame: MarkerFrame,
                      prior: Optional[Tuple[RigidTransform, Optional[Assignment]]] = None,
                      gate_radius: float = GATE_RADIUS_M,
                      pair_gate: float = PAIR_GATE_M,
                      prior_weight: float = PRIOR_WEIGHT,
                      ambiguity_margin: float = AMBIGUITY_MARGIN) -> Assignment:
    """
    Label a frame's observations with model marker ids.

    With a prior pose the search is first confined to observations inside
    the gate around each predicted marker; if that leaves observations
    unexplained the unrestricted search runs with the prior term kept.
    """
    if len(frame) < 3:
        return Assignment({m: None for m in model.marker_ids})

    predicted = None
    if prior is not None:
        predicted = prior[0].apply(model.reference_positions)

    best = second = None
    if predicted is not None:
        best, second = _search(model, frame, predicted, gate_radius, pair_gate, prior_weight)
        if best[0] < min(len(model), len(frame)):
            best = None
    if best is None:
        best, second = _search(model, frame, predicted, None, pair_gate, prior_weight)

    count, cost, solution = best
    if second[2] is not None and second[1] - cost < ambiguity_margin:
        raise AmbiguousAssignment(
            f"two assignments of {count} markers differ by {second[1] - cost:.3e} m^2",
            cost=cost, runner_up=second[1],
        )

    mapping = {m: solution[i] for i, m in enumerate(model.marker_ids)}
    return Assignment(mapping, residual=topology_residual(model, frame.observations, mapping), cost=cost)


# ==================== POSE ====================

def estimate_pose(model: MarkerObjectModel, frame: MarkerFrame,
                  assignment: Assignment) -> Tuple[RigidTransform, float]:
    """Rigid pose body -> world from the assigned markers"""
    ids = assignment.assigned
    if len(ids) < 3:
        raise DegenerateConfiguration(f"pose needs 3 assigned markers, got {len(ids)}")
    refs = np.array([model.reference(m) for m in ids])
    obs = frame.observations[[assignment.mapping[m] for m in ids]]
    return kabsch_align(PointSet(refs), PointSet(obs))


def recover_occluded(model: MarkerObjectModel, pose: RigidTransform,
                     assignment: Assignment) -> List[Tuple[str, np.ndarray]]:
    return [(m, pose.apply(model.reference(m))) for m in assignment.occluded]


def gripper_opening(p_a: Sequence[float], p_b: Sequence[float]) -> float:
    """Distance (m) between the two jaw markers"""
    a = np.asarray(p_a, dtype=float)
    b = np.asarray(p_b, dtype=float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("gripper marker positions must be finite")
    return float(np.linalg.norm(a - b))


def construct_flange_frame(side: str, labeled_points: Dict[str, Sequence[float]]) -> RigidTransform:
    """
    Local frame of a collector from its labeled markers.

    y runs from the lower- to the higher-numbered marker of the side's
    designated pair, x is the plane normal of all markers and z = x cross y.
    The origin is the marker centroid.
    """
    if side not in FLANGE_PAIRS:
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    low, high = FLANGE_PAIRS[side]
    for marker_id in (low, high):
        if marker_id not in labeled_points:
            raise MissingFrameMarker(f"{side} flange frame needs marker {marker_id}")

    ids = sorted(labeled_points, key=marker_sort_key)
    P = np.array([labeled_points[m] for m in ids], dtype=float)
    if P.shape[0] < 3:
        raise DegenerateConfiguration("flange frame needs at least 3 markers")

    y = np.asarray(labeled_points[high], dtype=float) - np.asarray(labeled_points[low], dtype=float)
    y_norm = np.linalg.norm(y)
    if y_norm == 0.0:
        raise DegenerateConfiguration(f"{low} and {high} coincide")
    y = y / y_norm

    centroid = P.mean(axis=0)
    _, sv, Vt = np.linalg.svd(P - centroid)
    if sv[0] == 0.0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("markers are collinear, plane undefined")
    normal = Vt[2]

    # first non-degenerate index-ordered triple fixes the sign
    scale = sv[0] ** 2
    for a, b, c in combinations(range(len(ids)), 3):
        cross = np.cross(P[b] - P[a], P[c] - P[a])
        if np.linalg.norm(cross) > 1e-9 * scale:
            if normal @ cross < 0:
                normal = -normal
            break

    x = normal - (normal @ y) * y
    x_norm = np.linalg.norm(x)
    if x_norm <= 1e-9:
        raise DegenerateConfiguration("plane normal is parallel to the y axis")
    x = x / x_norm
    z = np.cross(x, y)
    return RigidTransform(np.column_stack([x, y, z]), centroid)


# ==================== MODEL CONSTRUCTION ====================

def build_model(labeled_first_frame: Tuple[Sequence[str], np.ndarray],
                sequence: Sequence[MarkerFrame],
                min_frames: int = MIN_MODEL_FRAMES,
                nonrigid_rms: float = NONRIGID_RMS_M) -> MarkerObjectModel:
    """
    Average body-frame marker positions over a short recording.

    The body frame is the first frame's axes at its marker centroid. Each
    frame is labeled against the provisional first-frame model, aligned back
    to the body frame and accumulated.
    """
    if len(sequence) < min_frames:
        raise InsufficientFrames(f"model needs {min_frames} frames, got {len(sequence)}")

    ids, points = labeled_first_frame
    points = np.asarray(points, dtype=float)
    centroid = points.mean(axis=0)
    provisional = MarkerObjectModel(tuple(ids), points - centroid)
    n = len(provisional)

    sums = np.zeros((n, 3))
    counts = np.zeros(n)
    distance_rows = []
    pose = RigidTransform.from_translation(centroid)
    assignment: Optional[Assignment] = None

    for k, frame in enumerate(sequence):
        try:
            assignment = assign_identities(provisional, frame, prior=(pose, assignment), pair_gate=math.inf)
            pose, _ = estimate_pose(provisional, frame, assignment)
        except (AmbiguousAssignment, DegenerateConfiguration) as e:
            logger.warning(f"model frame {k} skipped: {e}")
            continue

        body = pose.inverse().apply(frame.observations)
        observed = np.full((n, 3), np.nan)
        for i, m in enumerate(provisional.marker_ids):
            j = assignment.mapping[m]
            if j is not None:
                sums[i] += body[j]
                counts[i] += 1
                observed[i] = frame.observations[j]
        distance_rows.append(squareform(pdist(observed)))

    if len(distance_rows) < min_frames:
        raise InsufficientFrames(f"only {len(distance_rows)} frames could be labeled")

    stack = np.array(distance_rows)
    mean_distances = np.nanmean(stack, axis=0)
    for k, matrix in enumerate(stack):
        deviation = (matrix - mean_distances)[np.triu_indices(n, 1)]
        deviation = deviation[np.isfinite(deviation)]
        if deviation.size and math.sqrt(float(np.mean(deviation ** 2))) > nonrigid_rms:
            raise NonRigidSequence(f"frame {k} deviates from the mean distance matrix beyond {nonrigid_rms} m RMS")

    reference = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None],
                         provisional.reference_positions)
    reference = reference - reference.mean(axis=0)
    logger.info(f"built marker model with {n} markers from {len(distance_rows)} frames")
    return MarkerObjectModel(provisional.marker_ids, reference)


# ==================== STREAM PROCESSOR ====================

@dataclass
class TrackedFrame:
    timestamp: float
    pose: RigidTransform
    rms: float
    assignment: Assignment
    recovered: List[Tuple[str, np.ndarray]]
    gripper_width: Optional[float] = None

    def labeled_points(self, frame: MarkerFrame) -> Dict[str, np.ndarray]:
        points = {m: frame.observations[j] for m, j in self.assignment.mapping.items() if j is not None}
        points.update(dict(self.recovered))
        return points


class MarkerTracker:
    """Per-stream tracker; the prior pose and assignment stay inside one instance"""

    def __init__(self, model: MarkerObjectModel, stats_interval: Optional[int] = None,
                 initial_pose: Optional[RigidTransform] = None, **gates):
        self.model = model
        self.gates = gates
        self.stats_interval = stats_interval or config.get('tracking.stats_interval', 1000)
        self.prior: Optional[Tuple[RigidTransform, Optional[Assignment]]] = None
        if initial_pose is not None:
            self.prior = (initial_pose, None)
        self.last_timestamp: Optional[float] = None

        self.metrics = {
            'frames_received': 0,
            'frames_tracked': 0,
            'frames_skipped': 0,
            'ambiguous_frames': 0,
            'occluded_markers': 0,
            'spurious_points': 0,
            'out_of_order': 0,
        }

    def process(self, frame: MarkerFrame) -> Optional[TrackedFrame]:
        """Track one frame; per-frame failures are counted, not raised"""
        self.metrics['frames_received'] += 1
        if self.last_timestamp is not None and frame.timestamp < self.last_timestamp:
            self.metrics['out_of_order'] += 1
            logger.warning(f"frame at t={frame.timestamp} precedes t={self.last_timestamp}")
        self.last_timestamp = frame.timestamp

        try:
            assignment = assign_identities(self.model, frame, prior=self.prior, **self.gates)
        except AmbiguousAssignment as e:
            self.metrics['ambiguous_frames'] += 1
            self.metrics['frames_skipped'] += 1
            logger.warning(f"t={frame.timestamp}: {e}")
            return None

        self.metrics['occluded_markers'] += len(assignment.occluded)
        self.metrics['spurious_points'] += len(frame) - len(assignment)

        if len(assignment) < 3:
            self.metrics['frames_skipped'] += 1
            logger.debug(f"t={frame.timestamp}: only {len(assignment)} markers assigned")
            return None

        try:
            pose, rms = estimate_pose(self.model, frame, assignment)
        except DegenerateConfiguration as e:
            self.metrics['frames_skipped'] += 1
            logger.warning(f"t={frame.timestamp}: {e}")
            return None

        self.prior = (pose, assignment)
        self.metrics['frames_tracked'] += 1
        if self.metrics['frames_received'] % self.stats_interval == 0:
            self.log_stats()

        width = gripper_opening(*frame.gripper) if frame.gripper is not None else None
        return TrackedFrame(frame.timestamp, pose, rms, assignment,
                            recover_occluded(self.model, pose, assignment), width)

    def log_stats(self):
        logger.info(
            f"Stats: {self.metrics['frames_received']:,} received, "
            f"{self.metrics['frames_tracked']:,} tracked, "
            f"{self.metrics['ambiguous_frames']:,} ambiguous, "
            f"{self.metrics['occluded_markers']:,} occluded markers"
        )

    def report(self) -> Dict[str, int]:
        return dict(self.metrics)
