#!/usr/bin/env python3
"""
Online Executability Validation
Forward/inverse kinematics for the 7-DoF arms and per-frame checks for
IK solvability, joint soft limits, joint and TCP speed and stream gaps
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator
from scipy.spatial.transform import Rotation

from config_loader import config
from errors import ConfigError, IkFailure, NonMonotonicTimestamps, TimelineMismatch
from geometry import RigidTransform
from pose_transfer import FlangeTrajectory

logger = logging.getLogger(__name__)

N_JOINTS = 7
JOINT_NAMES = tuple(f"J{i}" for i in range(1, N_JOINTS + 1))
STATUSES = ('ok', 'ik_failure', 'soft_limit', 'joint_overspeed', 'tcp_overspeed', 'comm_gap')

IK_DAMPING = config.get('feasibility.ik.damping', 1e-3)
IK_STEP_CLAMP = config.get('feasibility.ik.step_clamp', 0.2)
IK_MAX_ITERATIONS = config.get('feasibility.ik.max_iterations', 200)
IK_POSITION_TOL = config.get('feasibility.ik.position_tolerance', 1e-3)
IK_ORIENTATION_TOL = config.get('feasibility.ik.orientation_tolerance', 1e-3)
IK_CONVERGENCE_TOL = config.get('feasibility.ik.convergence_tolerance', 1e-14)
IK_STALL_LIMIT = 10

# comparison slack in the reporting units (deg, deg/s, mm/s), far below any tested margin
LIMIT_EPS = 1e-7
TIMELINE_TOL_S = 1e-9


# ==================== CHAIN AND LIMITS ====================

@dataclass(frozen=True, eq=False)
class Joint:
    name: str
    axis: np.ndarray
    link: RigidTransform

    def __post_init__(self):
        axis = np.array(self.axis, dtype=float).reshape(3)
        norm = np.linalg.norm(axis)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"joint {self.name} axis must be unit length, got norm {norm}")
        axis.setflags(write=False)
        object.__setattr__(self, 'axis', axis)


@dataclass(frozen=True, eq=False)
class KinematicChain:
    """Base pose followed by 7 revolute joints, each with its fixed link"""

    name: str
    base: RigidTransform
    joints: Tuple[Joint, ...]
    _axes: np.ndarray = field(init=False, repr=False)
    _link_R: np.ndarray = field(init=False, repr=False)
    _link_t: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        joints = tuple(self.joints)
        if len(joints) != N_JOINTS:
            raise ValueError(f"chain must have exactly {N_JOINTS} joints, got {len(joints)}")
        object.__setattr__(self, 'joints', joints)
        object.__setattr__(self, '_axes', np.array([j.axis for j in joints]))
        object.__setattr__(self, '_link_R', np.array([j.link.rotation for j in joints]))
        object.__setattr__(self, '_link_t', np.array([j.link.translation for j in joints]))

    def with_base(self, base: RigidTransform) -> 'KinematicChain':
        return KinematicChain(self.name, base, self.joints)

    @property
    def reach(self) -> float:
        """Upper bound on flange distance from the first joint"""
        return float(np.sum(np.linalg.norm(self._link_t, axis=1)))


@dataclass(frozen=True)
class JointLimits:
    """Per-joint soft limits in degrees"""

    limits_deg: Dict[str, Tuple[float, float]]

    def __post_init__(self):
        for name in JOINT_NAMES:
            if name not in self.limits_deg:
                raise ValueError(f"joint limits missing {name}")
            lower, upper = self.limits_deg[name]
            if not lower < upper:
                raise ValueError(f"{name}: lower limit {lower} must be < upper {upper}")

    @classmethod
    def default(cls) -> 'JointLimits':
        return cls({
            'J1': (-360.0, 360.0),
            'J2': (-105.0, 105.0),
            'J3': (-360.0, 360.0),
            'J4': (-145.0, 30.0),
            'J5': (-360.0, 360.0),
            'J6': (-105.0, 105.0),
            'J7': (-360.0, 360.0),
        })

    def bounds(self, name: str) -> Tuple[float, float]:
        return self.limits_deg[name]


@dataclass(frozen=True)
class VelocityLimits:
    joint_max: float = 180.0   # deg/s
    tcp_max: float = 250.0     # mm/s
    max_gap: float = 0.1       # s

    def __post_init__(self):
        if not (self.joint_max > 0 and self.tcp_max > 0 and self.max_gap > 0):
            raise ValueError("velocity limits and max gap must be > 0")


@dataclass(frozen=True)
class Limits:
    joints: JointLimits
    velocity: VelocityLimits

    @classmethod
    def default(cls) -> 'Limits':
        return cls(JointLimits.default(), VelocityLimits())


# ==================== CONFIG SCHEMAS ====================

class PoseConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    pos: List[float] = [0.0, 0.0, 0.0]
    rot: List[float] = [1.0, 0.0, 0.0, 0.0]

    @field_validator('pos')
    @classmethod
    def _three(cls, v):
        if len(v) != 3:
            raise ValueError("pos needs 3 values")
        return v

    @field_validator('rot')
    @classmethod
    def _four(cls, v):
        if len(v) != 4 or not any(v):
            raise ValueError("rot needs 4 values (w, x, y, z), not all zero")
        return v

    def to_transform(self) -> RigidTransform:
        return RigidTransform.from_quaternion(self.rot, self.pos)


class JointConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    name: str
    axis: List[float]
    link: PoseConfig


class ChainConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    name: str = 'chain'
    base: PoseConfig = PoseConfig()
    arm_bases: Dict[str, PoseConfig] = {}
    joints: List[JointConfig]

    @field_validator('joints')
    @classmethod
    def _seven(cls, v):
        if len(v) != N_JOINTS:
            raise ValueError(f"exactly {N_JOINTS} joints required, got {len(v)}")
        return v

    def to_chain(self, arm: Optional[str] = None) -> KinematicChain:
        base = self.arm_bases[arm] if arm in self.arm_bases else self.base
        joints = tuple(
            Joint(j.name, np.asarray(j.axis, dtype=float) / np.linalg.norm(j.axis), j.link.to_transform())
            for j in self.joints
        )
        return KinematicChain(self.name, base.to_transform(), joints)


class VelocityConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    joint_max_deg_s: float = 180.0
    tcp_max_mm_s: float = 250.0
    max_gap_s: float = 0.1


class LimitsConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    joint_limits_deg: Dict[str, Tuple[float, float]]
    velocity: VelocityConfig = VelocityConfig()

    @field_validator('joint_limits_deg')
    @classmethod
    def _all_joints(cls, v):
        missing = [name for name in JOINT_NAMES if name not in v]
        if missing:
            raise ValueError(f"missing joint limits for {', '.join(missing)}")
        return v

    def to_limits(self) -> Limits:
        v = self.velocity
        return Limits(
            JointLimits({name: tuple(self.joint_limits_deg[name]) for name in JOINT_NAMES}),
            VelocityLimits(v.joint_max_deg_s, v.tcp_max_mm_s, v.max_gap_s),
        )


def _read_yaml(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        with open(path, 'r') as f:
            return yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read {path}: {e}")


def parse_chain_config(document: Dict[str, Any], source: str = '<chain>') -> ChainConfig:
    try:
        return ChainConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"{source}: invalid chain config: {e}")


def load_chain(path: Union[str, Path], arm: Optional[str] = None) -> KinematicChain:
    cfg = parse_chain_config(_read_yaml(path), str(path))
    try:
        return cfg.to_chain(arm)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}")


def load_chains(path: Union[str, Path]) -> Dict[str, KinematicChain]:
    """One chain per arm, using per-arm bases when the file defines them"""
    cfg = parse_chain_config(_read_yaml(path), str(path))
    try:
        return {arm: cfg.to_chain(arm) for arm in ('left', 'right')}
    except ValueError as e:
        raise ConfigError(f"{path}: {e}")


def load_limits(path: Union[str, Path]) -> Limits:
    try:
        return LimitsConfig.model_validate(_read_yaml(path)).to_limits()
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"{path}: invalid limits config: {e}")


# ==================== KINEMATICS ====================

def _kinematics(chain: KinematicChain, q: np.ndarray):
    """Flange rotation, position, and each joint's world origin and axis"""
    joint_R = Rotation.from_rotvec(chain._axes * q[:, None]).as_matrix()
    R = chain.base.rotation
    p = chain.base.translation
    origins = np.empty((N_JOINTS, 3))
    axes = np.empty((N_JOINTS, 3))
    for i in range(N_JOINTS):
        origins[i] = p
        axes[i] = R @ chain._axes[i]
        R = R @ joint_R[i]
        p = p + R @ chain._link_t[i]
        R = R @ chain._link_R[i]
    return R, p, origins, axes


def _jacobian(p: np.ndarray, origins: np.ndarray, axes: np.ndarray) -> np.ndarray:
    J = np.empty((6, N_JOINTS))
    J[:3] = np.cross(axes, p - origins).T
    J[3:] = axes.T
    return J


def _as_q(q: Sequence[float]) -> np.ndarray:
    q = np.array(q, dtype=float).reshape(N_JOINTS)
    if not np.all(np.isfinite(q)):
        raise ValueError("joint angles must be finite")
    return q


def forward_kinematics(chain: KinematicChain, q: Sequence[float]) -> RigidTransform:
    """Flange pose for joint angles q (rad)"""
    R, p, _, _ = _kinematics(chain, _as_q(q))
    return RigidTransform(R, p)


def geometric_jacobian(chain: KinematicChain, q: Sequence[float]) -> np.ndarray:
    """6x7 world-frame Jacobian, linear rows first"""
    _, p, origins, axes = _kinematics(chain, _as_q(q))
    return _jacobian(p, origins, axes)


@dataclass(frozen=True, eq=False)
class IkSolution:
    q: np.ndarray
    iterations: int
    position_residual: float
    orientation_residual: float


def _pose_error(target: RigidTransform, R: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.concatenate([
        target.translation - p,
        Rotation.from_matrix(target.rotation @ R.T).as_rotvec(),
    ])


def solve_ik(chain: KinematicChain, target: RigidTransform, q_seed: Sequence[float],
             damping: float = IK_DAMPING,
             step_clamp: float = IK_STEP_CLAMP,
             max_iterations: int = IK_MAX_ITERATIONS,
             position_tol: float = IK_POSITION_TOL,
             orientation_tol: float = IK_ORIENTATION_TOL,
             convergence_tol: float = IK_CONVERGENCE_TOL) -> IkSolution:
    """
    Damped least-squares differential IK.

    Iterates dq = J^T (J J^T + damping^2 I)^-1 e, scaled so no joint moves
    more than step_clamp per iteration, until the pose error stops
    shrinking or the budget runs out. Success is judged on the best
    iterate's position and orientation residuals.

    Raises IkFailure with the final residuals otherwise.
    """
    q = _as_q(q_seed)
    identity6 = np.eye(6) * damping ** 2

    best_q, best_e, best_iteration = q, None, 0
    best_norm = math.inf
    stall = 0
    iteration = 0
    while True:
        R, p, origins, axes = _kinematics(chain, q)
        e = _pose_error(target, R, p)
        norm = float(np.linalg.norm(e))
        if norm < best_norm:
            best_q, best_e, best_norm, best_iteration = q, e, norm, iteration
            stall = 0
        else:
            stall += 1

        if norm <= convergence_tol or stall >= IK_STALL_LIMIT or iteration >= max_iterations:
            break

        J = _jacobian(p, origins, axes)
        dq = J.T @ np.linalg.solve(J @ J.T + identity6, e)
        largest = float(np.max(np.abs(dq)))
        if largest > step_clamp:
            dq = dq * (step_clamp / largest)
        q = q + dq
        iteration += 1

    position_residual = float(np.linalg.norm(best_e[:3]))
    orientation_residual = float(np.linalg.norm(best_e[3:]))
    if position_residual < position_tol and orientation_residual < orientation_tol:
        return IkSolution(best_q, best_iteration, position_residual, orientation_residual)
    raise IkFailure(position_residual, orientation_residual, best_q, iteration)


# ==================== FRAME CHECKS ====================

@dataclass(frozen=True)
class FrameVerdict:
    """First failing check plus every check that fired"""

    status: str
    detail: Dict[str, Any] = field(default_factory=dict)
    violations: Tuple[Tuple[str, Dict[str, Any]], ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == 'ok'

    @property
    def statuses(self) -> List[str]:
        return [status for status, _ in self.violations]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'status': self.status,
            'detail': self.detail,
            'violations': [{'status': s, 'detail': d} for s, d in self.violations],
        }


def limit_violations(chain: KinematicChain, limits: Limits,
                     prev: Optional[Tuple[float, np.ndarray]], t: float,
                     q: np.ndarray) -> List[Tuple[str, Dict[str, Any]]]:
    """Soft-limit, joint-speed and TCP-speed checks for a solved configuration"""
    violations: List[Tuple[str, Dict[str, Any]]] = []
    q_deg = np.degrees(q)

    outside = []
    for name, value in zip(JOINT_NAMES, q_deg):
        lower, upper = limits.joints.bounds(name)
        if value < lower - LIMIT_EPS or value > upper + LIMIT_EPS:
            outside.append({'joint': name, 'value_deg': float(value), 'limits_deg': [lower, upper]})
    if outside:
        violations.append(('soft_limit', {'joints': outside}))

    if prev is None:
        return violations
    prev_t, prev_q = prev
    dt = t - prev_t

    speeds = np.degrees(np.abs(q - prev_q)) / dt
    fast = [
        {'joint': name, 'speed_deg_s': float(speed), 'limit_deg_s': limits.velocity.joint_max}
        for name, speed in zip(JOINT_NAMES, speeds)
        if speed > limits.velocity.joint_max + LIMIT_EPS
    ]
    if fast:
        violations.append(('joint_overspeed', {'joints': fast}))

    _, p, _, _ = _kinematics(chain, q)
    _, p_prev, _, _ = _kinematics(chain, np.asarray(prev_q, dtype=float))
    tcp_speed = 1000.0 * float(np.linalg.norm(p - p_prev)) / dt
    if tcp_speed > limits.velocity.tcp_max + LIMIT_EPS:
        violations.append(('tcp_overspeed', {'speed_mm_s': tcp_speed, 'limit_mm_s': limits.velocity.tcp_max}))

    return violations


def check_frame(chain: KinematicChain, jl: JointLimits, vl: VelocityLimits,
                prev: Optional[Tuple[float, np.ndarray]], t: float,
                target: RigidTransform) -> Tuple[FrameVerdict, np.ndarray]:
    """
    Executability of one flange target.

    Checks run in the order gap, IK, soft limits, joint speed, TCP speed.
    The verdict reports the first that fired; all of them are kept in
    violations. IK is seeded at the previous solution, or zeros.
    """
    violations: List[Tuple[str, Dict[str, Any]]] = []
    if prev is not None:
        dt = t - prev[0]
        if not dt > 0:
            raise NonMonotonicTimestamps(f"frame time {t} does not follow previous {prev[0]}")
        if dt > vl.max_gap:
            violations.append(('comm_gap', {'gap_s': dt, 'max_gap_s': vl.max_gap}))

    seed = prev[1] if prev is not None else np.zeros(N_JOINTS)
    try:
        q = solve_ik(chain, target, seed).q
    except IkFailure as e:
        violations.append(('ik_failure', e.to_dict()))
        q = np.asarray(e.q)
    else:
        violations.extend(limit_violations(chain, Limits(jl, vl), prev, t, q))

    if violations:
        status, detail = violations[0]
        return FrameVerdict(status, detail, tuple(violations)), q
    return FrameVerdict('ok'), q


# ==================== EPISODE VALIDATION ====================

class ArmValidator:
    """Online validator for one arm; keeps the last successfully solved (t, q)"""

    def __init__(self, arm: str, chain: KinematicChain, limits: Limits):
        self.arm = arm
        self.chain = chain
        self.limits = limits
        self.prev: Optional[Tuple[float, np.ndarray]] = None
        self.metrics = {status: 0 for status in STATUSES}

    def step(self, t: float, target: RigidTransform) -> Tuple[FrameVerdict, np.ndarray]:
        verdict, q = check_frame(self.chain, self.limits.joints, self.limits.velocity, self.prev, t, target)
        if 'ik_failure' not in verdict.statuses:
            self.prev = (t, q)
        self.metrics[verdict.status] += 1
        for status, detail in verdict.violations:
            logger.debug(f"{self.arm} t={t:.6f}: {status} {detail}")
        return verdict, q

    def run(self, trajectory: FlangeTrajectory) -> List[Tuple[FrameVerdict, np.ndarray]]:
        return [self.step(s.timestamp, s.pose) for s in trajectory.samples]


@dataclass
class EpisodeVerdict:
    valid: bool
    frame_index: Optional[int] = None
    frame_verdicts: Dict[str, FrameVerdict] = field(default_factory=dict)
    log: List[Dict[str, Any]] = field(default_factory=list)

    def flagged_frames(self) -> List[int]:
        return sorted({entry['frame'] for entry in self.log if entry['status'] != 'ok'})

    def summary(self) -> Dict[str, Any]:
        return {
            'valid': self.valid,
            'frame_index': self.frame_index,
            'statuses': {arm: v.status for arm, v in self.frame_verdicts.items()},
        }

    def to_dict(self) -> Dict[str, Any]:
        report = self.summary()
        report['frame_verdicts'] = {arm: v.to_dict() for arm, v in self.frame_verdicts.items()}
        report['log'] = self.log
        return report


def _check_timeline(left: FlangeTrajectory, right: FlangeTrajectory):
    if len(left) != len(right):
        raise TimelineMismatch(f"left has {len(left)} frames, right has {len(right)}")
    drift = np.abs(left.timestamps() - right.timestamps())
    if drift.size and float(drift.max()) > TIMELINE_TOL_S:
        frame = int(np.argmax(drift))
        raise TimelineMismatch(f"timestamps differ at frame {frame} by {drift[frame]:.3e} s")


def validate_episode(left_stream: FlangeTrajectory, right_stream: FlangeTrajectory,
                     chains: Union[KinematicChain, Dict[str, KinematicChain]],
                     limits: Limits) -> EpisodeVerdict:
    """Replayability of a bimanual episode; the two arms validate concurrently"""
    _check_timeline(left_stream, right_stream)
    if isinstance(chains, KinematicChain):
        chains = {'left': chains, 'right': chains}

    streams = {'left': left_stream, 'right': right_stream}
    validators = {arm: ArmValidator(arm, chains[arm], limits) for arm in ('left', 'right')}
    with ThreadPoolExecutor(max_workers=2) as pool:
        futures = {arm: pool.submit(validators[arm].run, streams[arm]) for arm in validators}
        results = {arm: future.result() for arm, future in futures.items()}

    log: List[Dict[str, Any]] = []
    first_invalid: Optional[int] = None
    for i in range(len(left_stream)):
        for arm in ('left', 'right'):
            verdict, _ = results[arm][i]
            entry = {'frame': i, 'arm': arm, 't': streams[arm][i].timestamp}
            entry.update(verdict.to_dict())
            log.append(entry)
            if not verdict.ok and first_invalid is None:
                first_invalid = i

    if first_invalid is None:
        return EpisodeVerdict(True, log=log)

    frame_verdicts = {arm: results[arm][first_invalid][0] for arm in ('left', 'right')}
    logger.warning(
        f"episode invalid at frame {first_invalid}: "
        + ", ".join(f"{arm}={v.status}" for arm, v in frame_verdicts.items())
    )
    return EpisodeVerdict(False, first_invalid, frame_verdicts, log)
