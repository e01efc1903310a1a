"""Shared fixtures: the documented test arm, its limits and marker layouts"""

from pathlib import Path

import numpy as np
import pytest

from feasibility import load_chain, load_chains, load_limits
from geometry import RigidTransform
from marker_tracking import MarkerObjectModel

ROOT = Path(__file__).resolve().parent.parent
CHAIN_FILE = ROOT / 'configs' / 'test_chain.yaml'
LIMITS_FILE = ROOT / 'configs' / 'limits.yaml'


@pytest.fixture(scope='session')
def chain():
    return load_chain(CHAIN_FILE)


@pytest.fixture(scope='session')
def chains():
    return load_chains(CHAIN_FILE)


@pytest.fixture(scope='session')
def limits():
    return load_limits(LIMITS_FILE)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(20240917))


def random_layout(rng, n, spacing=0.025, size=0.1):
    """n points in a size-metre cube, pairwise at least spacing apart"""
    while True:
        points = rng.uniform(0.0, size, size=(n, 3))
        d = np.linalg.norm(points[:, None] - points[None], axis=2)
        if d[np.triu_indices(n, 1)].min() >= spacing:
            return points


def random_transform(rng, max_translation=0.5):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, np.pi - 0.1)
    return RigidTransform.from_rotvec(angle * axis, rng.uniform(-max_translation, max_translation, size=3))


@pytest.fixture
def five_marker_model():
    positions = np.array([
        [0.000, 0.000, 0.000],
        [0.060, 0.005, 0.010],
        [0.020, 0.070, -0.005],
        [0.085, 0.055, 0.030],
        [0.035, 0.030, 0.065],
    ])
    return MarkerObjectModel(('R1', 'R2', 'R3', 'R4', 'R5'), positions - positions.mean(axis=0))


@pytest.fixture
def square_model():
    positions = np.array([
        [0.05, 0.05, 0.0],
        [-0.05, 0.05, 0.0],
        [-0.05, -0.05, 0.0],
        [0.05, -0.05, 0.0],
    ])
    return MarkerObjectModel(('R1', 'R2', 'R3', 'R4'), positions)

