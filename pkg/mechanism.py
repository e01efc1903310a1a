#!/usr/bin/env python3
"""
Handheld Gripper Mechanisms
Forward kinematics and adaptation for the flexion-extension linkage
and the parallel-jaw crank-slider. All lengths in millimeters.
"""

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from errors import (
    ConfigError,
    LoopClosureInfeasible,
    NonMonotonicStroke,
    OutOfStroke,
    TargetUnreachable,
)

logger = logging.getLogger(__name__)

CLOSURE_TOL = 1e-12
FEASIBILITY_SAMPLES = 1000
ROOT_TOL_MM = 1e-9
ROOT_MAX_ITER = 200


# ==================== FLEXION-EXTENSION ====================

@dataclass(frozen=True)
class FlexionParams:
    l1: float
    l2: float
    l3: float
    d: float
    x3: float
    x4: float
    stroke_max: float

    def __post_init__(self):
        for name in ('l1', 'l2', 'l3', 'd'):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ('x3', 'x4', 'stroke_max'):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

        x2 = np.linspace(0.0, self.stroke_max, FEASIBILITY_SAMPLES)
        c = _closure_cosine(self.l2, self.l3, self.d, self.x4, x2)
        if np.any(np.abs(c) > 1.0 + CLOSURE_TOL):
            raise LoopClosureInfeasible("triangle inequality fails somewhere on the stroke")

    def fixed(self) -> Dict[str, float]:
        return {'l1': self.l1, 'l2': self.l2, 'l3': self.l3, 'd': self.d, 'x4': self.x4}


@dataclass(frozen=True)
class FlexionState:
    x2: float
    theta: float
    w: float
    x1: float
    phi2: float
    phi3: float


@dataclass(frozen=True)
class FlexionAdaptation:
    x2_max: float
    x3: float

    def to_params(self, fixed: Dict[str, float]) -> FlexionParams:
        return FlexionParams(stroke_max=self.x2_max, x3=self.x3, **_fixed_lengths(fixed))


def _closure_cosine(l2, l3, d, x4, x2):
    """Argument of the arccos giving phi2; vectorised over x2"""
    l4 = np.hypot(x4, d + np.asarray(x2, dtype=float))
    return (l2 * l2 + l4 * l4 - l3 * l3) / (2.0 * l2 * l4)


def _jaw_angle(l2: float, l3: float, d: float, x4: float, x2: float) -> Tuple[float, float, float]:
    """theta, phi2, phi3 at slider displacement x2"""
    span = d + x2
    l4 = math.hypot(x4, span)
    phi3 = math.atan2(x4, span)
    c = (l2 * l2 + l4 * l4 - l3 * l3) / (2.0 * l2 * l4)
    if abs(c) > 1.0 + CLOSURE_TOL:
        raise LoopClosureInfeasible(f"loop does not close at x2={x2:.6g} mm (cos={c:.12g})")
    phi2 = math.acos(min(1.0, max(-1.0, c)))
    return math.pi / 2 - phi3 - phi2, phi2, phi3


def flexion_forward(params: FlexionParams, x2: float) -> FlexionState:
    """Jaw angle, opening width and fingertip displacement at slider position x2"""
    if not 0.0 <= x2 <= params.stroke_max:
        raise OutOfStroke(f"x2={x2} outside [0, {params.stroke_max}]")

    theta, phi2, phi3 = _jaw_angle(params.l2, params.l3, params.d, params.x4, x2)
    return FlexionState(
        x2=x2,
        theta=theta,
        w=params.x3 + params.l1 * math.sin(theta),
        x1=params.l1 * (1.0 - math.cos(theta)),
        phi2=phi2,
        phi3=phi3,
    )


def flexion_sweep(params: FlexionParams, samples: int = 101) -> pd.DataFrame:
    """Tabulate the mechanism over its stroke"""
    rows = [asdict(flexion_forward(params, float(x2)))
            for x2 in np.linspace(0.0, params.stroke_max, samples)]
    return pd.DataFrame(rows, columns=['x2', 'theta', 'w', 'x1', 'phi2', 'phi3'])


def _fixed_lengths(fixed: Dict[str, float]) -> Dict[str, float]:
    try:
        return {key: float(fixed[key]) for key in ('l1', 'l2', 'l3', 'd', 'x4')}
    except KeyError as e:
        raise ConfigError(f"fixed parameters missing {e.args[0]}")


def flexion_stroke_limit(fixed: Dict[str, float]) -> float:
    """
    Largest slider displacement keeping the loop closable.

    The slider distance grows with x2, so closure holds on an interval
    starting at 0; its upper end is bracketed by [0, l2 + l3].
    """
    f = _fixed_lengths(fixed)
    l2, l3, d, x4 = f['l2'], f['l3'], f['d'], f['x4']

    def closes(x2: float) -> bool:
        return abs(float(_closure_cosine(l2, l3, d, x4, x2))) <= 1.0 + CLOSURE_TOL

    if not closes(0.0):
        raise TargetUnreachable("linkage cannot close at the foremost slider position")

    lo, hi = 0.0, l2 + l3
    if closes(hi):
        return hi
    for _ in range(ROOT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if closes(mid):
            lo = mid
        else:
            hi = mid
    return lo


def flexion_adapt(targets: Dict[str, float], fixed: Dict[str, float]) -> FlexionAdaptation:
    """
    Solve stroke and offset for target fingertip travel and jaw opening.

    The stroke x2_max comes from x1_max alone, then x3 is chosen so the
    larger endpoint opening equals w_max.
    """
    f = _fixed_lengths(fixed)
    l1 = f['l1']
    x1_max = float(targets['x1_max'])
    w_max = float(targets['w_max'])

    if not 0.0 < x1_max < l1:
        raise TargetUnreachable(f"x1_max={x1_max} must lie in (0, l1={l1})")

    upper = flexion_stroke_limit(f)

    def x1_at(x2: float) -> float:
        theta, _, _ = _jaw_angle(f['l2'], f['l3'], f['d'], f['x4'], x2)
        return l1 * (1.0 - math.cos(theta))

    def residual(x2: float) -> float:
        return x1_at(x2) - x1_max

    g0 = residual(0.0)
    if abs(g0) <= ROOT_TOL_MM:
        x2_max = 0.0
    elif upper <= 0.0:
        raise TargetUnreachable("stroke has zero length and x1(0) misses the target")
    else:
        samples = np.array([x1_at(float(x)) for x in np.linspace(0.0, upper, FEASIBILITY_SAMPLES)])
        steps = np.diff(samples)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise NonMonotonicStroke("x1 is not strictly monotonic over the feasible stroke")

        g_hi = residual(upper)
        if abs(g_hi) <= ROOT_TOL_MM:
            x2_max = upper
        elif np.sign(g0) == np.sign(g_hi):
            raise TargetUnreachable(
                f"x1_max={x1_max} outside attainable range [{min(samples[0], samples[-1]):.6g}, "
                f"{max(samples[0], samples[-1]):.6g}]"
            )
        else:
            x2_max = _bisect(residual, 0.0, upper, g0)

    theta_0, _, _ = _jaw_angle(f['l2'], f['l3'], f['d'], f['x4'], 0.0)
    theta_end, _, _ = _jaw_angle(f['l2'], f['l3'], f['d'], f['x4'], x2_max)
    x3 = w_max - max(l1 * math.sin(theta_0), l1 * math.sin(theta_end))
    if x3 < 0.0:
        raise TargetUnreachable(f"w_max={w_max} needs a negative offset x3={x3:.6g}")

    logger.debug(f"flexion adaptation: x2_max={x2_max:.9g} mm, x3={x3:.9g} mm")
    return FlexionAdaptation(x2_max=x2_max, x3=x3)


def _bisect(fn, lo: float, hi: float, f_lo: float) -> float:
    best_x, best_f = lo, abs(f_lo)
    for _ in range(ROOT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        f_mid = fn(mid)
        if abs(f_mid) < best_f:
            best_x, best_f = mid, abs(f_mid)
        if abs(f_mid) <= ROOT_TOL_MM or mid <= lo or mid >= hi:
            break
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return best_x


# ==================== PARALLEL-JAW ====================

@dataclass(frozen=True)
class ParallelParams:
    l_c: float
    l_b: float

    def __post_init__(self):
        if not (self.l_c > 0 and self.l_b > 0):
            raise ValueError("crank and driving-link lengths must be > 0")


def parallel_forward(params: ParallelParams) -> float:
    """Maximum jaw opening of the crank-slider"""
    return params.l_c + 2.0 * params.l_b


def parallel_adapt(w_max: float, l_c: float) -> float:
    """Driving-link length giving w_max with the crank fixed"""
    if not w_max > l_c:
        raise TargetUnreachable(f"w_max={w_max} must exceed crank length l_c={l_c}")
    return (w_max - l_c) / 2.0


# ==================== PARAMETER FILES ====================

MechanismParams = Union[FlexionParams, ParallelParams]


def save_mechanism_params(path: Union[str, Path], params: MechanismParams) -> None:
    template = 'flexion' if isinstance(params, FlexionParams) else 'parallel'
    document: Dict[str, Any] = {'template': template}
    document.update({k: float(v) for k, v in asdict(params).items()})
    with open(path, 'w') as f:
        yaml.safe_dump(document, f, sort_keys=False)


def load_mechanism_params(path: Union[str, Path]) -> MechanismParams:
    try:
        with open(path, 'r') as f:
            document = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read mechanism file {path}: {e}")

    template = document.pop('template', None)
    cls = {'flexion': FlexionParams, 'parallel': ParallelParams}.get(template)
    if cls is None:
        raise ConfigError(f"{path}: unknown mechanism template {template!r}")
    try:
        return cls(**{k: float(v) for k, v in document.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}")
