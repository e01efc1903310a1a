#!/usr/bin/env python3
"""
Synthetic Benchmarks
Marker-stream and episode generators plus the tracking-robustness and
data-validity experiments built on them
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config_loader import config
from errors import FrameOutOfRange, IkFailure
from feasibility import (
    JOINT_NAMES,
    N_JOINTS,
    KinematicChain,
    Limits,
    forward_kinematics,
    load_chains,
    solve_ik,
    validate_episode,
)
from geometry import RigidTransform
from marker_tracking import MarkerFrame, MarkerObjectModel, MarkerTracker
from pose_transfer import FlangeSample, FlangeTrajectory

logger = logging.getLogger(__name__)

METHODS = ('marker_only', 'object_based')
VIOLATION_KINDS = ('tcp_jump', 'joint_limit_excursion', 'out_of_reach', 'time_gap')
DEFAULT_MAGNITUDES = {
    'tcp_jump': 10.0,               # mm
    'joint_limit_excursion': 5.0,   # deg beyond the limit
    'out_of_reach': 3.0,            # m from the arm base
    'time_gap': 0.5,                # s
}

NN_GATE_M = config.get('tracking.gate_radius_m', 0.005)

# clean-episode construction
CLEAN_AMPLITUDE_RAD = 0.25
CLEAN_JOINT_SPEED_DEG_S = 90.0
CLEAN_TCP_SPEED_MM_S = 125.0
CLEAN_RADIUS_M = 0.6
CLEAN_SCALE_STEP = 0.8
CLEAN_MAX_RESCALES = 60

# fixed 6-marker collector layout (m), pairwise spacing >= 50 mm, no near-congruent relabeling
BENCHMARK_LAYOUT = np.array([
    [0.000, 0.000, 0.000],
    [0.052, 0.011, 0.004],
    [0.087, 0.046, -0.009],
    [0.031, 0.079, 0.013],
    [-0.024, 0.058, 0.021],
    [0.046, 0.038, 0.047],
])


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; all harness randomness flows through one of these"""
    return np.random.Generator(np.random.PCG64(seed))


# ==================== PROFILES ====================

@dataclass(frozen=True)
class NoiseProfile:
    """
    Measurement corruption for synthetic marker streams.

    dropout_prob is the per-frame chance that a visible marker starts an
    occlusion burst of burst_length frames; max_simultaneous caps the
    number of markers hidden at once (None for no cap). spurious_rate is
    the Poisson mean of stray points per frame.
    """

    sigma: float = 0.0
    dropout_prob: float = 0.0
    spurious_rate: float = 0.0
    burst_length: int = 1
    max_simultaneous: Optional[int] = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must be in [0, 1]")
        if self.spurious_rate < 0:
            raise ValueError("spurious_rate must be >= 0")
        if self.burst_length < 1:
            raise ValueError("burst_length must be >= 1")


@dataclass(frozen=True)
class ViolationSpec:
    kind: str
    frame: int
    magnitude: Optional[float] = None
    arm: str = 'right'
    joint: str = 'J2'

    def __post_init__(self):
        if self.kind not in VIOLATION_KINDS:
            raise ValueError(f"unknown violation kind {self.kind!r}")
        if self.arm not in ('left', 'right'):
            raise ValueError(f"unknown arm {self.arm!r}")
        if self.joint not in JOINT_NAMES:
            raise ValueError(f"unknown joint {self.joint!r}")

    @property
    def amount(self) -> float:
        return DEFAULT_MAGNITUDES[self.kind] if self.magnitude is None else float(self.magnitude)

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'frame': self.frame, 'magnitude': self.amount,
                'arm': self.arm, 'joint': self.joint}


@dataclass(frozen=True)
class SyntheticEpisode:
    """Bimanual flange trajectories with the joint paths that produced them"""

    left: FlangeTrajectory
    right: FlangeTrajectory
    joints: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.left)

    def arm(self, name: str) -> FlangeTrajectory:
        return self.left if name == 'left' else self.right

    def with_arm(self, name: str, trajectory: FlangeTrajectory) -> 'SyntheticEpisode':
        return replace(self, **{name: trajectory})


# ==================== MARKER STREAMS ====================

def benchmark_model() -> MarkerObjectModel:
    ids = tuple(f"R{i}" for i in range(1, len(BENCHMARK_LAYOUT) + 1))
    return MarkerObjectModel(ids, BENCHMARK_LAYOUT - BENCHMARK_LAYOUT.mean(axis=0))


def sample_pose_trajectory(n_frames: int, rate: float, seed: int,
                           amplitude: float = 0.1, frequency: float = 1.0,
                           rotation_amplitude: float = 0.3,
                           center: Optional[RigidTransform] = None) -> List[RigidTransform]:
    """Smooth collector motion: sinusoidal translation and rotation about random axes"""
    rng = make_rng(seed)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phase_t, phase_r = rng.uniform(0.0, 2.0 * math.pi, size=2)
    center = center or RigidTransform.identity()

    t = np.arange(n_frames) / rate
    offsets = amplitude * np.sin(2.0 * math.pi * frequency * t + phase_t)
    angles = rotation_amplitude * np.sin(2.0 * math.pi * frequency * t + phase_r)
    return [
        center @ RigidTransform.from_rotvec(angle * axis, offset * direction)
        for offset, angle in zip(offsets, angles)
    ]


def generate_marker_stream(model: MarkerObjectModel, trajectory: Sequence[RigidTransform],
                           profile: NoiseProfile, seed: int,
                           rate: float = 240.0) -> Tuple[List[MarkerFrame], List[Dict[str, Optional[int]]]]:
    """
    Unlabeled frames of the model moving along trajectory.

    Returns the frames and, per frame, the ground-truth marker -> observation
    index map (None while a marker is occluded). Observation order is shuffled.
    """
    rng = make_rng(seed)
    ids = model.marker_ids
    n = len(ids)
    hidden_for = np.zeros(n, dtype=int)
    cap = n if profile.max_simultaneous is None else profile.max_simultaneous

    frames: List[MarkerFrame] = []
    truths: List[Dict[str, Optional[int]]] = []
    for k, pose in enumerate(trajectory):
        points = pose.apply(model.reference_positions)
        if profile.sigma > 0:
            points = points + rng.normal(0.0, profile.sigma, size=points.shape)

        starts = rng.random(n) < profile.dropout_prob
        for i in np.flatnonzero(starts):
            if hidden_for[i] == 0 and np.count_nonzero(hidden_for) < cap:
                hidden_for[i] = profile.burst_length
        visible = hidden_for == 0
        hidden_for = np.maximum(hidden_for - 1, 0)

        n_spurious = int(rng.poisson(profile.spurious_rate)) if profile.spurious_rate > 0 else 0
        if n_spurious:
            lo = points.min(axis=0) - 0.05
            hi = points.max(axis=0) + 0.05
            stray = rng.uniform(lo, hi, size=(n_spurious, 3))
        else:
            stray = np.empty((0, 3))

        observed = np.vstack([points[visible], stray])
        order = rng.permutation(observed.shape[0])
        position_of = np.empty_like(order)
        position_of[order] = np.arange(order.size)

        truth: Dict[str, Optional[int]] = {}
        row = 0
        for i, marker_id in enumerate(ids):
            if visible[i]:
                truth[marker_id] = int(position_of[row])
                row += 1
            else:
                truth[marker_id] = None

        frames.append(MarkerFrame(k / rate, observed[order]))
        truths.append(truth)
    return frames, truths


# ==================== TRACKING EXPERIMENT ====================

def marker_only_track(model: MarkerObjectModel, frames: Sequence[MarkerFrame],
                      initial_pose: RigidTransform,
                      gate: float = NN_GATE_M) -> List[Dict[str, Optional[int]]]:
    """
    Frame-to-frame nearest-neighbour identity propagation.

    Each marker takes the closest unused observation within gate of its last
    seen position; an unmatched marker keeps its stale position.
    """
    last = {m: p for m, p in zip(model.marker_ids, initial_pose.apply(model.reference_positions))}
    mappings = []
    for frame in frames:
        used = set()
        mapping: Dict[str, Optional[int]] = {}
        for marker_id in model.marker_ids:
            mapping[marker_id] = None
            if len(frame) == 0:
                continue
            distances = np.linalg.norm(frame.observations - last[marker_id], axis=1)
            for j in np.argsort(distances):
                if distances[j] > gate:
                    break
                if int(j) not in used:
                    mapping[marker_id] = int(j)
                    used.add(int(j))
                    last[marker_id] = frame.observations[j]
                    break
        mappings.append(mapping)
    return mappings


def object_based_track(model: MarkerObjectModel, frames: Sequence[MarkerFrame],
                       initial_pose: RigidTransform) -> List[Dict[str, Optional[int]]]:
    tracker = MarkerTracker(model, initial_pose=initial_pose)
    mappings = []
    for frame in frames:
        tracked = tracker.process(frame)
        if tracked is None:
            mappings.append({m: None for m in model.marker_ids})
        else:
            mappings.append(dict(tracked.assignment.mapping))
    return mappings


def _first_identity_error(mappings: Sequence[Dict[str, Optional[int]]],
                          truths: Sequence[Dict[str, Optional[int]]]) -> Optional[int]:
    for k, (mapping, truth) in enumerate(zip(mappings, truths)):
        if mapping != truth:
            return k
    return None


def tracking_experiment(model: MarkerObjectModel, trajectory: Sequence[RigidTransform],
                        profile: NoiseProfile, method: str, trials: int, seed: int,
                        rate: float = 240.0) -> Dict[str, Any]:
    """
    Fraction of trials in which every marker keeps its true identity in every frame.

    Both methods start from the true first pose. Trial i uses seed + i.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if trials < 1:
        raise ValueError("trials must be >= 1")

    track = marker_only_track if method == 'marker_only' else object_based_track
    outcomes = []
    for i in range(trials):
        trial_seed = seed + i
        frames, truths = generate_marker_stream(model, trajectory, profile, trial_seed, rate)
        failed_at = _first_identity_error(track(model, frames, trajectory[0]), truths)
        outcomes.append({'seed': trial_seed, 'success': failed_at is None, 'first_error_frame': failed_at})

    successes = sum(o['success'] for o in outcomes)
    rate_ok = successes / trials
    logger.info(f"{method}: {successes}/{trials} trials kept identities")
    return {'method': method, 'success_rate': rate_ok, 'trials': outcomes}


def crossing_trajectory(model: MarkerObjectModel, a: str, b: str,
                        n_frames: int = 10, swap_frame: int = 5) -> List[RigidTransform]:
    """Still object except one frame turned half a revolution so markers a and b trade places"""
    pa, pb = model.reference(a), model.reference(b)
    midpoint = (pa + pb) / 2.0
    ab = pb - pa
    axis = np.cross(ab, [0.0, 0.0, 1.0])
    if np.linalg.norm(axis) < 1e-9:
        axis = np.cross(ab, [1.0, 0.0, 0.0])
    axis /= np.linalg.norm(axis)
    flip = RigidTransform.from_rotvec(math.pi * axis)
    flip = RigidTransform(flip.rotation, midpoint - flip.rotation @ midpoint)
    return [flip if k == swap_frame else RigidTransform.identity() for k in range(n_frames)]


def run_tracking_benchmark(seed: int, markers: Optional[int] = None, frames: Optional[int] = None,
                           rate_hz: Optional[float] = None, sigma_m: Optional[float] = None,
                           dropout_prob: Optional[float] = None, burst_length: Optional[int] = None,
                           max_simultaneous: Optional[int] = None, spurious_rate: Optional[float] = None,
                           trials: Optional[int] = None) -> Dict[str, Any]:
    """Both methods on the occlusion benchmark; unset parameters come from config"""
    defaults = config.get('harness.tracking', {})

    def pick(value, key):
        return defaults.get(key) if value is None else value

    markers = pick(markers, 'markers')
    if markers != len(BENCHMARK_LAYOUT):
        raise ValueError(f"the benchmark layout has {len(BENCHMARK_LAYOUT)} markers, got {markers}")
    rate_hz = float(pick(rate_hz, 'rate_hz'))
    trials = int(pick(trials, 'trials'))
    profile = NoiseProfile(
        sigma=float(pick(sigma_m, 'sigma_m')),
        dropout_prob=float(pick(dropout_prob, 'dropout_prob')),
        spurious_rate=float(pick(spurious_rate, 'spurious_rate')),
        burst_length=int(pick(burst_length, 'burst_length')),
        max_simultaneous=pick(max_simultaneous, 'max_simultaneous'),
    )

    model = benchmark_model()
    trajectory = sample_pose_trajectory(int(pick(frames, 'frames')), rate_hz, seed)
    results = {
        method: tracking_experiment(model, trajectory, profile, method, trials, seed, rate_hz)
        for method in METHODS
    }
    return {
        'experiment': 'tracking',
        'seed': seed,
        'profile': asdict(profile),
        'success_rates': {method: r['success_rate'] for method, r in results.items()},
        'results': results,
    }


# ==================== EPISODES ====================

def _default_chains() -> Dict[str, KinematicChain]:
    return load_chains(config.resolve_path(config.get('feasibility.chain_file')))


def _as_chains(chains) -> Dict[str, KinematicChain]:
    if chains is None:
        return _default_chains()
    if isinstance(chains, KinematicChain):
        return {'left': chains, 'right': chains}
    return dict(chains)


def _joint_path(chain: KinematicChain, times: np.ndarray, rng: np.random.Generator):
    """q(t) = A sin(2 pi f t) from zero, amplitudes shrunk until every cap holds"""
    amplitudes = rng.uniform(-CLEAN_AMPLITUDE_RAD, CLEAN_AMPLITUDE_RAD, size=N_JOINTS)
    frequencies = rng.uniform(0.2, 0.5, size=N_JOINTS)
    dt = np.diff(times)

    for _ in range(CLEAN_MAX_RESCALES):
        q = amplitudes * np.sin(2.0 * math.pi * frequencies * times[:, None])
        poses = [forward_kinematics(chain, qk) for qk in q]
        positions = np.array([p.translation for p in poses])

        joint_speed = np.degrees(np.linalg.norm(np.diff(q, axis=0), axis=1)) / dt
        tcp_speed = 1000.0 * np.linalg.norm(np.diff(positions, axis=0), axis=1) / dt
        radius = np.linalg.norm(positions - chain.base.translation, axis=1)
        if (joint_speed.max(initial=0.0) <= CLEAN_JOINT_SPEED_DEG_S
                and tcp_speed.max(initial=0.0) <= CLEAN_TCP_SPEED_MM_S
                and radius.max() <= CLEAN_RADIUS_M):
            return q, poses
        amplitudes = amplitudes * CLEAN_SCALE_STEP

    q = np.zeros((times.size, N_JOINTS))
    return q, [forward_kinematics(chain, qk) for qk in q]


def generate_clean_episode(seed: int, chains=None, rate: Optional[float] = None,
                           duration: Optional[float] = None) -> SyntheticEpisode:
    """
    Bimanual episode that is executable by construction.

    Each arm follows a joint-space sinusoid starting at the zero pose,
    scaled to half the speed limits and kept within reach; flange poses
    come from forward kinematics.
    """
    rate = float(rate or config.get('harness.validity.rate_hz', 30.0))
    duration = float(duration or config.get('harness.validity.duration_s', 2.0))
    chains = _as_chains(chains)
    rng = make_rng(seed)

    times = np.arange(int(round(duration * rate)) + 1) / rate
    trajectories = {}
    joints = {}
    for arm in ('left', 'right'):
        q, poses = _joint_path(chains[arm], times, rng)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        widths = 0.04 + 0.03 * np.sin(2.0 * math.pi * 0.5 * times + phase)
        trajectories[arm] = FlangeTrajectory(rate, tuple(
            FlangeSample(float(t), pose, float(w), arm) for t, pose, w in zip(times, poses, widths)
        ))
        joints[arm] = q
    return SyntheticEpisode(trajectories['left'], trajectories['right'], joints)


def _motion_direction(trajectory: FlangeTrajectory, k: int) -> np.ndarray:
    positions = trajectory.positions()
    candidates = []
    if k > 0:
        candidates.append(positions[k] - positions[k - 1])
    if k + 1 < len(positions):
        candidates.append(positions[k + 1] - positions[k])
    for delta in candidates:
        norm = np.linalg.norm(delta)
        if norm > 1e-12:
            return delta / norm
    return np.array([1.0, 0.0, 0.0])


def _solved_joints(episode: SyntheticEpisode, arm: str, chain: KinematicChain, k: int) -> np.ndarray:
    if arm in episode.joints:
        return np.array(episode.joints[arm][k], dtype=float)
    q = np.zeros(N_JOINTS)
    for sample in episode.arm(arm).samples[:k + 1]:
        try:
            q = solve_ik(chain, sample.pose, q).q
        except IkFailure as e:
            q = np.asarray(e.q)
    return q


def inject_violation(episode: SyntheticEpisode, spec: ViolationSpec, chains=None,
                     limits: Optional[Limits] = None) -> SyntheticEpisode:
    """Apply exactly one corruption; every other sample object is reused unchanged"""
    n = len(episode)
    lowest = 0 if spec.kind == 'out_of_reach' else 1
    if not lowest <= spec.frame < n:
        raise FrameOutOfRange(f"{spec.kind} needs a frame in [{lowest}, {n - 1}], got {spec.frame}")

    k = spec.frame
    trajectory = episode.arm(spec.arm)
    sample = trajectory[k]

    if spec.kind == 'time_gap':
        shifted = {}
        for arm in ('left', 'right'):
            samples = list(episode.arm(arm).samples)
            for i in range(k, n):
                samples[i] = replace(samples[i], timestamp=samples[i].timestamp + spec.amount)
            shifted[arm] = FlangeTrajectory(episode.arm(arm).rate, tuple(samples))
        return replace(episode, left=shifted['left'], right=shifted['right'])

    if spec.kind == 'tcp_jump':
        offset = _motion_direction(trajectory, k) * spec.amount / 1000.0
        pose = RigidTransform(sample.pose.rotation, sample.pose.translation + offset)

    elif spec.kind == 'out_of_reach':
        base = _as_chains(chains)[spec.arm].base.translation
        direction = sample.pose.translation - base
        norm = np.linalg.norm(direction)
        direction = direction / norm if norm > 1e-12 else np.array([1.0, 0.0, 0.0])
        pose = RigidTransform(sample.pose.rotation, base + spec.amount * direction)

    else:
        chain = _as_chains(chains)[spec.arm]
        limits = limits or Limits.default()
        q = _solved_joints(episode, spec.arm, chain, k)
        j = JOINT_NAMES.index(spec.joint)
        _, upper = limits.joints.bounds(spec.joint)
        q[j] = math.radians(upper + spec.amount)
        pose = forward_kinematics(chain, q)

    return episode.with_arm(spec.arm, trajectory.with_sample(k, pose=pose))


# ==================== VALIDITY EXPERIMENT ====================

def _default_spec(index: int, n_frames: int, rng: np.random.Generator) -> ViolationSpec:
    """Violation kinds and arms rotate with the episode index"""
    return ViolationSpec(
        VIOLATION_KINDS[index % len(VIOLATION_KINDS)],
        int(rng.integers(1, n_frames - 1)),
        arm=('right', 'left')[index % 2],
    )


def validity_experiment(n_clean: int, n_corrupted: int, seed: int,
                        specs: Optional[Sequence[ViolationSpec]] = None,
                        chains=None, limits: Optional[Limits] = None,
                        rate: Optional[float] = None, duration: Optional[float] = None) -> Dict[str, Any]:
    """
    Acceptance of constructed-clean episodes and rejection of corrupted ones.

    Clean episode i uses seed + i, corrupted episode j uses seed + n_clean + j.
    A corrupted episode counts as flagged when its injected frame appears
    among the frames the verdict log marks.
    """
    if n_clean < 1 or n_corrupted < 1:
        raise ValueError("episode counts must be >= 1")
    chains = _as_chains(chains)
    limits = limits or Limits.default()

    clean = []
    for i in range(n_clean):
        episode_seed = seed + i
        episode = generate_clean_episode(episode_seed, chains, rate, duration)
        verdict = validate_episode(episode.left, episode.right, chains, limits)
        clean.append({'seed': episode_seed, 'valid': verdict.valid, 'frame_index': verdict.frame_index})

    spec_rng = make_rng(seed + n_clean + n_corrupted)
    corrupted = []
    for j in range(n_corrupted):
        episode_seed = seed + n_clean + j
        episode = generate_clean_episode(episode_seed, chains, rate, duration)
        if specs:
            spec = specs[j % len(specs)]
        else:
            spec = _default_spec(j, len(episode), spec_rng)
        broken = inject_violation(episode, spec, chains, limits)
        verdict = validate_episode(broken.left, broken.right, chains, limits)
        corrupted.append({
            'seed': episode_seed,
            'violation': spec.to_dict(),
            'valid': verdict.valid,
            'frame_index': verdict.frame_index,
            'flagged': spec.frame in verdict.flagged_frames(),
        })

    accept = sum(r['valid'] for r in clean) / n_clean
    reject = sum(not r['valid'] for r in corrupted) / n_corrupted
    flagged = sum(r['flagged'] for r in corrupted) / n_corrupted
    logger.info(f"validity: clean accept {accept:.3f}, corrupted reject {reject:.3f}")
    return {
        'experiment': 'validity',
        'seed': seed,
        'accept_rate_clean': accept,
        'reject_rate_corrupted': reject,
        'flagged_rate': flagged,
        'clean': clean,
        'corrupted': corrupted,
    }
