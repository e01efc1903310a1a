"""Structured marker-object tracking"""

from itertools import permutations

import numpy as np
import pytest

from conftest import random_layout, random_transform
from errors import (
    AmbiguousAssignment,
    DegenerateConfiguration,
    DimensionMismatch,
    InsufficientFrames,
    MissingFrameMarker,
    NonRigidSequence,
)
from geometry import RigidTransform
from marker_tracking import (
    Assignment,
    MarkerFrame,
    MarkerObjectModel,
    MarkerTracker,
    assign_identities,
    build_model,
    construct_flange_frame,
    estimate_pose,
    gripper_opening,
    recover_occluded,
)


def brute_force_cost(model, observations):
    """Minimum pairwise-distance inconsistency over all complete labelings"""
    n = len(model)
    O = np.linalg.norm(observations[:, None] - observations[None], axis=2)
    perms = np.array(list(permutations(range(n))))
    iu, ku = np.triu_indices(n, 1)
    deviations = O[perms[:, iu], perms[:, ku]] - model.pairwise_distances[iu, ku]
    costs = np.sum(deviations ** 2, axis=1)
    best = int(np.argmin(costs))
    return float(costs[best]), perms[best]


def brute_force_partial(model, observations):
    """Minimum inconsistency over every labeling of the visible observations"""
    n, m = len(model), len(observations)
    O = np.linalg.norm(observations[:, None] - observations[None], axis=2)
    labelings = np.array(list(permutations(range(n), m)))
    ia, ib = np.triu_indices(m, 1)
    deviations = O[ia, ib] - model.pairwise_distances[labelings[:, ia], labelings[:, ib]]
    costs = np.sum(deviations ** 2, axis=1)
    best = int(np.argmin(costs))
    return float(costs[best]), labelings[best]


def frame_of(points, t=0.0):
    return MarkerFrame(t, np.asarray(points))


# ==================== MODEL ====================

def test_model_pairwise_distances(five_marker_model):
    refs = five_marker_model.reference_positions
    for i in range(5):
        for j in range(5):
            assert five_marker_model.pairwise_distances[i, j] == pytest.approx(
                np.linalg.norm(refs[i] - refs[j]), abs=1e-12)


def test_model_needs_four_markers():
    with pytest.raises(DegenerateConfiguration):
        MarkerObjectModel(('R1', 'R2', 'R3'), np.eye(3))


def test_model_rejects_collinear_layout():
    line = np.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0], [0.1, 0.0, 0.0], [0.15, 0.0, 0.0]])
    with pytest.raises(DegenerateConfiguration):
        MarkerObjectModel(('R1', 'R2', 'R3', 'R4'), line)


def test_model_dict_round_trip(five_marker_model):
    copy = MarkerObjectModel.from_dict(five_marker_model.to_dict())
    assert copy.marker_ids == five_marker_model.marker_ids
    assert np.array_equal(copy.reference_positions, five_marker_model.reference_positions)


# ==================== ASSIGNMENT ====================

def test_assignment_recovers_permutation(five_marker_model, rng):
    T = random_transform(rng)
    world = T.apply(five_marker_model.reference_positions)
    order = rng.permutation(5)
    assignment = assign_identities(five_marker_model, frame_of(world[order]))

    for i, marker_id in enumerate(five_marker_model.marker_ids):
        assert order[assignment.mapping[marker_id]] == i
    assert assignment.residual == pytest.approx(0.0, abs=1e-12)
    assert assignment.occluded == []


def test_assignment_with_one_marker_occluded(five_marker_model, rng):
    world = random_transform(rng).apply(five_marker_model.reference_positions)
    visible = [0, 1, 3, 4]
    order = rng.permutation(4)
    assignment = assign_identities(five_marker_model, frame_of(world[visible][order]))

    assert assignment.occluded == ['R3']
    for k, i in enumerate(visible):
        marker_id = five_marker_model.marker_ids[i]
        assert order[assignment.mapping[marker_id]] == k


def test_symmetric_layout_is_ambiguous(square_model):
    with pytest.raises(AmbiguousAssignment):
        assign_identities(square_model, frame_of(square_model.reference_positions))


def test_prior_disambiguates_symmetric_layout(square_model):
    prior = (RigidTransform.identity(), None)
    assignment = assign_identities(square_model, frame_of(square_model.reference_positions), prior=prior)
    assert assignment.mapping == {'R1': 0, 'R2': 1, 'R3': 2, 'R4': 3}


def test_too_few_observations_leave_everything_occluded(five_marker_model):
    assignment = assign_identities(five_marker_model, frame_of(five_marker_model.reference_positions[:2]))
    assert assignment.assigned == []
    assert len(assignment.occluded) == 5


def test_spurious_point_is_left_unassigned(five_marker_model, rng):
    world = five_marker_model.reference_positions
    stray = np.array([[0.4, -0.3, 0.2]])
    prior = (RigidTransform.identity(), None)
    assignment = assign_identities(five_marker_model, frame_of(np.vstack([world, stray])), prior=prior)
    assert sorted(assignment.mapping.values()) == [0, 1, 2, 3, 4]


def test_assignment_matches_exhaustive_minimum(rng):
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(4, 8))
        layout = random_layout(rng, n)
        model = MarkerObjectModel(tuple(f"R{i}" for i in range(1, n + 1)), layout - layout.mean(axis=0))
        world = random_transform(rng).apply(model.reference_positions)
        world = world + rng.normal(0.0, 1e-4, size=world.shape)
        order = rng.permutation(n)
        observations = world[order]

        assignment = assign_identities(model, frame_of(observations))
        expected_cost, labeling = brute_force_cost(model, observations)
        found = [assignment.mapping[m] for m in model.marker_ids]
        if abs(assignment.cost - expected_cost) > 1e-12 or found != list(labeling):
            mismatches += 1
    assert mismatches == 0


def test_partial_assignment_matches_exhaustive_minimum(rng):
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(4, 8))
        layout = random_layout(rng, n)
        model = MarkerObjectModel(tuple(f"R{i}" for i in range(1, n + 1)), layout - layout.mean(axis=0))
        world = random_transform(rng).apply(model.reference_positions)
        world = world + rng.normal(0.0, 1e-4, size=world.shape)
        hidden = int(rng.integers(1, n - 2))
        visible = np.sort(rng.permutation(n)[hidden:])
        observations = world[visible][rng.permutation(len(visible))]

        assignment = assign_identities(model, frame_of(observations))
        expected_cost, labeling = brute_force_partial(model, observations)
        expected = {m: None for m in model.marker_ids}
        for j, i in enumerate(labeling):
            expected[model.marker_ids[i]] = j
        if abs(assignment.cost - expected_cost) > 1e-12 or assignment.mapping != expected:
            mismatches += 1
        assert len(assignment.occluded) == hidden
    assert mismatches == 0


def test_assignment_equivariant_under_rigid_motion(five_marker_model, rng):
    world = random_transform(rng).apply(five_marker_model.reference_positions)
    world = world + rng.normal(0.0, 2e-4, size=world.shape)
    base = assign_identities(five_marker_model, frame_of(world))
    moved = assign_identities(five_marker_model, frame_of(random_transform(rng).apply(world)))
    assert moved.mapping == base.mapping


# ==================== POSE ====================

def test_pose_at_reference_is_identity(five_marker_model):
    frame = frame_of(five_marker_model.reference_positions)
    assignment = Assignment({m: i for i, m in enumerate(five_marker_model.marker_ids)})
    pose, rms = estimate_pose(five_marker_model, frame, assignment)
    assert pose.allclose(RigidTransform.identity(), atol=1e-12)
    assert rms == pytest.approx(0.0, abs=1e-12)


def test_pose_with_two_occluded(five_marker_model, rng):
    T = random_transform(rng)
    world = T.apply(five_marker_model.reference_positions)
    frame = frame_of(world[[0, 2, 4]])
    assignment = Assignment({'R1': 0, 'R2': None, 'R3': 1, 'R4': None, 'R5': 2})
    pose, _ = estimate_pose(five_marker_model, frame, assignment)
    assert pose.allclose(T, atol=1e-9)


def test_pose_under_noise(five_marker_model, rng):
    sigma = 3e-4
    worst = 0.0
    for _ in range(1000):
        T = random_transform(rng)
        world = T.apply(five_marker_model.reference_positions)
        world = world + rng.normal(0.0, sigma, size=world.shape)
        assignment = Assignment({m: i for i, m in enumerate(five_marker_model.marker_ids)})
        pose, _ = estimate_pose(five_marker_model, frame_of(world), assignment)
        worst = max(worst, float(np.linalg.norm(pose.translation - T.translation)))
    assert worst < 1e-3


def test_pose_needs_three_markers(five_marker_model):
    frame = frame_of(five_marker_model.reference_positions[:2])
    assignment = Assignment({'R1': 0, 'R2': 1, 'R3': None, 'R4': None, 'R5': None})
    with pytest.raises(DegenerateConfiguration):
        estimate_pose(five_marker_model, frame, assignment)


def test_pose_equivariance(five_marker_model, rng):
    world = random_transform(rng).apply(five_marker_model.reference_positions)
    world = world + rng.normal(0.0, 2e-4, size=world.shape)
    assignment = assign_identities(five_marker_model, frame_of(world))
    pose, _ = estimate_pose(five_marker_model, frame_of(world), assignment)

    G = random_transform(rng)
    moved_pose, _ = estimate_pose(five_marker_model, frame_of(G.apply(world)), assignment)
    assert moved_pose.allclose(G @ pose, atol=1e-9)


# ==================== RECOVERY ====================

def test_recover_nothing_when_all_visible(five_marker_model):
    assignment = Assignment({m: i for i, m in enumerate(five_marker_model.marker_ids)})
    assert recover_occluded(five_marker_model, RigidTransform.identity(), assignment) == []


def test_recover_at_identity(five_marker_model):
    assignment = Assignment({'R1': 0, 'R2': 1, 'R3': None, 'R4': 2, 'R5': 3})
    recovered = recover_occluded(five_marker_model, RigidTransform.identity(), assignment)
    assert [m for m, _ in recovered] == ['R3']
    assert np.array_equal(recovered[0][1], five_marker_model.reference('R3'))


def test_recover_under_known_pose(five_marker_model, rng):
    T = random_transform(rng)
    assignment = Assignment({'R1': 0, 'R2': None, 'R3': 1, 'R4': None, 'R5': 2})
    recovered = dict(recover_occluded(five_marker_model, T, assignment))
    for m in ('R2', 'R4'):
        assert np.allclose(recovered[m], T.apply(five_marker_model.reference(m)), rtol=0.0, atol=1e-12)


# ==================== FLANGE FRAME ====================

PLANAR_RIGHT = {
    'R1': [0.0, 0.0, 0.0],
    'R2': [0.0, 0.02, 0.03],
    'R3': [0.0, 0.05, 0.04],
    'R4': [0.0, 0.08, 0.03],
    'R5': [0.0, 0.10, 0.0],
}


def test_flange_frame_axis_aligned():
    frame = construct_flange_frame('right', PLANAR_RIGHT)
    R = frame.rotation
    assert np.allclose(R[:, 1], [0.0, 1.0, 0.0], atol=1e-12)
    # (R2 - R1) x (R3 - R1) points along -x
    assert np.allclose(R[:, 0], [-1.0, 0.0, 0.0], atol=1e-12)
    assert np.allclose(R[:, 2], np.cross(R[:, 0], R[:, 1]), atol=1e-12)
    assert np.allclose(frame.translation, np.mean(list(PLANAR_RIGHT.values()), axis=0))


def test_flange_frame_equivariant(rng):
    canonical = construct_flange_frame('right', PLANAR_RIGHT)
    G = random_transform(rng)
    moved = {m: G.apply(np.array(p)) for m, p in PLANAR_RIGHT.items()}
    frame = construct_flange_frame('right', moved)
    assert np.allclose(frame.rotation, G.rotation @ canonical.rotation, atol=1e-9)


def test_flange_frame_deterministic(rng):
    points = {m: np.array(p) + rng.normal(0.0, 1e-3, size=3) for m, p in PLANAR_RIGHT.items()}
    a = construct_flange_frame('right', points)
    b = construct_flange_frame('right', dict(points))
    assert np.array_equal(a.rotation, b.rotation)
    assert np.array_equal(a.translation, b.translation)


def test_flange_frame_needs_pair_marker():
    points = dict(PLANAR_RIGHT)
    del points['R5']
    with pytest.raises(MissingFrameMarker):
        construct_flange_frame('right', points)


def test_flange_frame_left_pair():
    points = {'L1': [0.0, 0.0, 0.0], 'L2': [0.03, 0.02, 0.0], 'L3': [0.01, 0.05, 0.0], 'L4': [0.0, 0.09, 0.0]}
    frame = construct_flange_frame('left', points)
    assert np.allclose(frame.rotation[:, 1], [0.0, 1.0, 0.0], atol=1e-12)
    assert abs(frame.rotation[:, 0][2]) == pytest.approx(1.0, abs=1e-12)


def test_flange_frame_collinear_markers():
    points = {'R1': [0.0, 0.0, 0.0], 'R2': [0.0, 0.03, 0.0], 'R3': [0.0, 0.06, 0.0], 'R5': [0.0, 0.1, 0.0]}
    with pytest.raises(DegenerateConfiguration):
        construct_flange_frame('right', points)


def test_model_in_flange_frame():
    ids = tuple(PLANAR_RIGHT)
    model = MarkerObjectModel(ids, np.array(list(PLANAR_RIGHT.values())))
    local = model.in_flange_frame('right')
    frame = construct_flange_frame('right', dict(zip(local.marker_ids, local.reference_positions)))
    assert frame.allclose(RigidTransform.identity(), atol=1e-9)


# ==================== GRIPPER ====================

def test_gripper_opening_coincident():
    assert gripper_opening([0.1, 0.2, 0.3], [0.1, 0.2, 0.3]) == 0.0


def test_gripper_opening_three_four_five():
    assert gripper_opening([0.0, 0.0, 0.0], [0.03, 0.04, 0.0]) == pytest.approx(0.05, abs=1e-15)


def test_gripper_opening_noisy(rng):
    a = np.array([0.0, 0.0, 0.0]) + rng.normal(0.0, 1e-4, size=3)
    b = np.array([0.02, 0.0, 0.0]) + rng.normal(0.0, 1e-4, size=3)
    assert gripper_opening(a, b) == pytest.approx(0.02, abs=5e-4)


# ==================== MODEL CONSTRUCTION ====================

def _moving_sequence(layout, n_frames, sigma=0.0, rng=None):
    frames = []
    for k in range(n_frames):
        T = RigidTransform.from_rotvec(k * np.array([0.002, 0.001, 0.003]), k * np.array([0.001, 0.0, 0.0005]))
        points = T.apply(layout)
        if sigma:
            points = points + rng.normal(0.0, sigma, size=points.shape)
        frames.append(frame_of(points, k / 240.0))
    return frames


def test_build_model_static(five_marker_model):
    layout = five_marker_model.reference_positions + np.array([0.3, -0.1, 0.5])
    sequence = [frame_of(layout[::-1], k / 240.0) for k in range(12)]
    model = build_model((five_marker_model.marker_ids, layout), sequence)
    assert np.allclose(model.reference_positions, layout - layout.mean(axis=0), rtol=0.0, atol=1e-9)


def test_build_model_rigid_motion(five_marker_model):
    layout = five_marker_model.reference_positions + np.array([0.3, -0.1, 0.5])
    model = build_model((five_marker_model.marker_ids, layout), _moving_sequence(layout, 30))
    assert np.allclose(model.reference_positions, layout - layout.mean(axis=0), rtol=0.0, atol=1e-9)


def test_build_model_averages_noise(five_marker_model, rng):
    layout = five_marker_model.reference_positions + np.array([0.3, -0.1, 0.5])
    sequence = _moving_sequence(layout, 100, sigma=2e-4, rng=rng)
    model = build_model((five_marker_model.marker_ids, layout), sequence)
    error = np.linalg.norm(model.reference_positions - (layout - layout.mean(axis=0)), axis=1)
    assert error.max() < 1e-4


def test_build_model_needs_frames(five_marker_model):
    layout = five_marker_model.reference_positions
    with pytest.raises(InsufficientFrames):
        build_model((five_marker_model.marker_ids, layout), [frame_of(layout)] * 3)


def test_build_model_rejects_non_rigid(five_marker_model):
    layout = five_marker_model.reference_positions
    sequence = []
    for k in range(12):
        points = layout.copy()
        points[4] += [0.0, 0.0, 0.004 * (k % 2)]
        sequence.append(frame_of(points, k / 240.0))
    with pytest.raises(NonRigidSequence):
        build_model((five_marker_model.marker_ids, layout), sequence, nonrigid_rms=5e-4)


# ==================== TRACKER ====================

def test_tracker_follows_motion_and_counts(five_marker_model):
    layout = five_marker_model.reference_positions
    frames = _moving_sequence(layout, 20)
    frames[5] = frame_of(frames[5].observations[[0, 1, 3, 4]], frames[5].timestamp)
    frames[9] = frame_of(frames[9].observations[:2], frames[9].timestamp)

    tracker = MarkerTracker(five_marker_model, initial_pose=RigidTransform.identity())
    tracked = [tracker.process(f) for f in frames]

    assert tracked[9] is None
    assert [m for m, _ in tracked[5].recovered] == ['R3']
    for k, result in enumerate(tracked):
        if result is None:
            continue
        T = RigidTransform.from_rotvec(k * np.array([0.002, 0.001, 0.003]), k * np.array([0.001, 0.0, 0.0005]))
        assert result.pose.allclose(T, atol=1e-9)

    metrics = tracker.report()
    assert metrics['frames_received'] == 20
    assert metrics['frames_tracked'] == 19
    assert metrics['frames_skipped'] == 1
    assert metrics['occluded_markers'] == 1 + 5


def test_tracker_reports_gripper_width(five_marker_model):
    frame = MarkerFrame(0.0, five_marker_model.reference_positions,
                        gripper=[[0.0, 0.0, 0.0], [0.0, 0.06, 0.0]])
    result = MarkerTracker(five_marker_model, initial_pose=RigidTransform.identity()).process(frame)
    assert result.gripper_width == pytest.approx(0.06)


def test_tracker_counts_out_of_order_frames(five_marker_model):
    tracker = MarkerTracker(five_marker_model, initial_pose=RigidTransform.identity())
    tracker.process(frame_of(five_marker_model.reference_positions, 1.0))
    tracker.process(frame_of(five_marker_model.reference_positions, 0.5))
    assert tracker.report()['out_of_order'] == 1


def test_tracker_skips_ambiguous_frames(square_model):
    tracker = MarkerTracker(square_model)
    assert tracker.process(frame_of(square_model.reference_positions)) is None
    assert tracker.report()['ambiguous_frames'] == 1


def test_marker_frame_shapes():
    with pytest.raises(DimensionMismatch):
        MarkerFrame(0.0, np.zeros((3, 2)))
    assert len(MarkerFrame(0.0, [])) == 0
