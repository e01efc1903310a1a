#!/usr/bin/env python3
"""
Demonstration Engine Command Line
Tracking, pose transfer, model building, validation, mechanism adaptation,
dataset manifests and synthetic experiments behind one entry point
"""

import argparse
import logging
import sys
from dataclasses import asdict
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from config_loader import config, setup_logging
from data_access import DemoDataAccess
from errors import ConfigError, DemoEngineError
from feasibility import load_chains, load_limits, validate_episode
from geometry import RigidTransform, compose
from harness import ViolationSpec, run_tracking_benchmark, validity_experiment
from marker_tracking import MarkerTracker, build_model
from mechanism import (
    ParallelParams,
    flexion_adapt,
    flexion_forward,
    flexion_sweep,
    parallel_adapt,
    parallel_forward,
    save_mechanism_params,
)
from pose_transfer import SOURCES, PoseSample, resample, transfer_stream, widths_from_tracking
from pyramid_data import (
    RECOVERY_LAYERS,
    STAGES,
    add_episode_files,
    init_manifest,
    pyramid_stats,
    read_manifest,
    stage_filter,
)

logger = logging.getLogger(__name__)


class ExitStatus(IntEnum):
    OK = 0
    INVALID = 1
    INPUT_ERROR = 2
    INTERNAL_ERROR = 3


def _banner(title: str):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def _report(args, body: Dict[str, Any]):
    if getattr(args, 'report', None):
        body = dict(body)
        body['config'] = config.snapshot()
        DemoDataAccess().write_report(args.report, body)
        logger.info(f"report written to {args.report}")


def _path_or_config(value: Optional[str], key: str) -> Path:
    return Path(value) if value else config.resolve_path(config.get(key))


# ==================== TRACK / TRANSFER / BUILD-MODEL ====================

def _write_trajectory(da: DemoDataAccess, path: str, stream: List[PoseSample],
                      widths: List[Tuple[float, float]], rate: Optional[float], arm: str) -> Optional[int]:
    """Resample onto a uniform timeline and write it; None when skipped"""
    if len(stream) < 2:
        logger.warning(f"{len(stream)} pose(s) available, need 2 to resample; {path} not written")
        return None
    rate = rate or config.get('transfer.rate_hz', 30.0)
    if not widths:
        logger.warning("stream carries no gripper widths, widths set to 0")
        widths = [(stream[0].timestamp, 0.0), (stream[-1].timestamp, 0.0)]
    trajectory = resample(stream, widths, rate, arm)
    da.write_trajectory(path, trajectory)
    return len(trajectory)


def cmd_track(args) -> ExitStatus:
    da = DemoDataAccess()
    model = da.read_model(args.model)
    frames = da.read_marker_stream(args.stream)
    offset = RigidTransform.from_dict(config.get('transfer.flange_offset', {}))

    if not frames:
        logger.warning(f"{args.stream} holds no frames")

    tracker = MarkerTracker(model)
    tracked = [t for t in (tracker.process(frame) for frame in frames) if t is not None]
    flange = [compose(t.pose, offset) for t in tracked]

    rows = []
    for t, pose in zip(tracked, flange):
        row = {'t': t.timestamp, **pose.to_dict(), 'rms': t.rms,
               'assigned': len(t.assignment), 'occluded': t.assignment.occluded}
        if t.gripper_width is not None:
            row['width'] = t.gripper_width
        rows.append(row)
    da.write_records(args.out, rows)

    if args.trajectory:
        stream = [PoseSample(t.timestamp, pose) for t, pose in zip(tracked, flange)]
        _write_trajectory(da, args.trajectory, stream, widths_from_tracking(tracked), args.rate, args.arm)

    metrics = tracker.report()
    _banner("TRACKING SUMMARY")
    print(f"  Frames in:        {metrics['frames_received']}")
    print(f"  Poses out:        {len(rows)}")
    print(f"  Ambiguous frames: {metrics['ambiguous_frames']}")
    print(f"  Occluded markers: {metrics['occluded_markers']}")
    _report(args, {'command': 'track', 'metrics': metrics, 'poses_written': len(rows)})
    return ExitStatus.OK


def cmd_transfer(args) -> ExitStatus:
    da = DemoDataAccess()
    tracked = da.read_pose_stream(args.poses, args.source)
    offset = RigidTransform.from_dict(config.get('transfer.flange_offset', {}))
    stream = transfer_stream(tracked, offset)
    widths = []
    if stream:
        widths = [(stream[0].timestamp, args.width), (stream[-1].timestamp, args.width)]
    written = _write_trajectory(da, args.out, stream, widths, args.rate, args.arm)

    _banner("POSE TRANSFER")
    print(f"  Poses in:      {len(stream)} ({args.source})")
    print(f"  Samples out:   {written or 0}")
    _report(args, {'command': 'transfer', 'poses_read': len(stream), 'samples_written': written or 0})
    return ExitStatus.OK


def cmd_build_model(args) -> ExitStatus:
    da = DemoDataAccess()
    labeled = da.read_labeled_frame(args.first_frame)
    frames = da.read_marker_stream(args.stream)
    model = build_model(labeled, frames)
    if args.side:
        model = model.in_flange_frame(args.side)
    da.write_model(args.out, model)

    _banner("MARKER MODEL")
    print(f"  Markers: {', '.join(model.marker_ids)}")
    print(f"  Frames:  {len(frames)}")
    _report(args, {'command': 'build-model', 'model': model.to_dict(), 'frames': len(frames)})
    return ExitStatus.OK


# ==================== VALIDATE ====================

def cmd_validate(args) -> ExitStatus:
    da = DemoDataAccess()
    chains = load_chains(_path_or_config(args.chain, 'feasibility.chain_file'))
    limits = load_limits(_path_or_config(args.limits, 'feasibility.limits_file'))
    left = da.read_trajectory(args.left)
    right = da.read_trajectory(args.right)

    verdict = validate_episode(left, right, chains, limits)
    if args.log:
        da.write_verdict_log(args.log, verdict)

    _banner("EPISODE VALIDATION")
    print(f"  Frames: {len(left)}")
    if verdict.valid:
        print("  ✓ Episode is replayable")
    else:
        statuses = ", ".join(f"{arm}={v.status}" for arm, v in verdict.frame_verdicts.items())
        print(f"  ✗ Invalid at frame {verdict.frame_index}: {statuses}")
    _report(args, {'command': 'validate', 'verdict': verdict.to_dict()})
    return ExitStatus.OK if verdict.valid else ExitStatus.INVALID


# ==================== ADAPT ====================

def _read_fixed(path: str) -> Dict[str, float]:
    try:
        with open(path, 'r') as f:
            return yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read fixed parameters {path}: {e}")


def cmd_adapt(args) -> ExitStatus:
    if args.template == 'parallel':
        if args.w_max is None or args.l_c is None:
            raise ConfigError("parallel adaptation needs --w-max and --l-c")
        params = ParallelParams(args.l_c, parallel_adapt(args.w_max, args.l_c))
        residuals = {'w_max': parallel_forward(params) - args.w_max}
    else:
        if args.fixed is None or args.w_max is None or args.x1_max is None:
            raise ConfigError("flexion adaptation needs --fixed, --x1-max and --w-max")
        fixed = _read_fixed(args.fixed)
        solution = flexion_adapt({'x1_max': args.x1_max, 'w_max': args.w_max}, fixed)
        params = solution.to_params(fixed)
        start = flexion_forward(params, 0.0)
        end = flexion_forward(params, params.stroke_max)
        residuals = {
            'x1_max': end.x1 - args.x1_max,
            'w_max': max(start.w, end.w) - args.w_max,
        }
        if args.sweep:
            flexion_sweep(params).to_csv(args.sweep, index=False)

    save_mechanism_params(args.out, params)
    _banner(f"{args.template.upper()} ADAPTATION")
    for key, value in asdict(params).items():
        print(f"  {key:<11} {value:.9g} mm")
    for key, value in residuals.items():
        print(f"  residual {key}: {value:.3e} mm")
    _report(args, {'command': 'adapt', 'template': args.template,
                   'params': asdict(params), 'residuals': residuals})
    return ExitStatus.OK


# ==================== PYRAMID ====================

def cmd_pyramid(args) -> ExitStatus:
    if args.action == 'init':
        init_manifest(args.manifest)
        print(f"Initialized empty manifest {args.manifest}")
        return ExitStatus.OK

    if args.action == 'add':
        manifest = add_episode_files(args.manifest, args.episodes)
        print(f"Manifest now holds {len(manifest.episodes)} episodes")
        _report(args, {'command': 'pyramid add', 'episodes': len(manifest.episodes)})
        return ExitStatus.OK

    manifest = read_manifest(args.manifest)
    if args.action == 'stats':
        stats = pyramid_stats(manifest)
        _banner("PYRAMID STATISTICS")
        for layer, count in stats['layers'].items():
            print(f"  {layer:<18} {count}")
        for task, row in stats['tasks'].items():
            print(f"  {task}: {row['demos']} demos, recovery ratio {row['recovery_ratio']:.3f}")
        _report(args, {'command': 'pyramid stats', 'stats': stats})
        return ExitStatus.OK

    entries = stage_filter(manifest, args.stage, args.recovery)
    for entry in entries:
        print(entry.episode_id)
    _report(args, {'command': 'pyramid stage', 'stage': args.stage, 'recovery': args.recovery,
                   'episodes': [e.model_dump() for e in entries]})
    return ExitStatus.OK


# ==================== EXPERIMENT ====================

class TrackingExperimentConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    experiment: Literal['tracking']
    markers: Optional[int] = None
    frames: Optional[int] = None
    rate_hz: Optional[float] = None
    sigma_m: Optional[float] = None
    dropout_prob: Optional[float] = None
    burst_length: Optional[int] = None
    max_simultaneous: Optional[int] = None
    spurious_rate: Optional[float] = None
    trials: Optional[int] = None


class ViolationConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    kind: Literal['tcp_jump', 'joint_limit_excursion', 'out_of_reach', 'time_gap']
    frame: int
    magnitude: Optional[float] = None
    arm: Literal['left', 'right'] = 'right'
    joint: str = 'J2'


class ValidityExperimentConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    experiment: Literal['validity']
    n_clean: Optional[int] = None
    n_corrupted: Optional[int] = None
    rate_hz: Optional[float] = None
    duration_s: Optional[float] = None
    chain_file: Optional[str] = None
    limits_file: Optional[str] = None
    violations: List[ViolationConfig] = []


def _experiment_config(path: str):
    document = DemoDataAccess().read_report(path)
    name = document.get('experiment') if isinstance(document, dict) else None
    schema = {'tracking': TrackingExperimentConfig, 'validity': ValidityExperimentConfig}.get(name)
    if schema is None:
        raise ConfigError(f"{path}: unknown experiment {name!r}; expected 'tracking' or 'validity'")
    try:
        return schema.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"{path}: invalid experiment config: {e}")


def cmd_experiment(args) -> ExitStatus:
    if args.seed is None:
        raise ConfigError("experiments are randomized; pass --seed")
    cfg = _experiment_config(args.config)

    if isinstance(cfg, TrackingExperimentConfig):
        params = cfg.model_dump(exclude={'experiment'})
        result = run_tracking_benchmark(args.seed, **params)
        _banner("TRACKING EXPERIMENT")
        for method, rate in result['success_rates'].items():
            print(f"  {method:<13} {rate:.1%}")
    else:
        defaults = config.get('harness.validity', {})
        chains = load_chains(_path_or_config(cfg.chain_file, 'feasibility.chain_file'))
        limits = load_limits(_path_or_config(cfg.limits_file, 'feasibility.limits_file'))
        n_clean = defaults.get('n_clean', 50) if cfg.n_clean is None else cfg.n_clean
        n_corrupted = defaults.get('n_corrupted', 50) if cfg.n_corrupted is None else cfg.n_corrupted
        if n_clean < 1 or n_corrupted < 1:
            raise ConfigError(f"{args.config}: n_clean and n_corrupted must be >= 1, "
                              f"got {n_clean} and {n_corrupted}")
        specs = [ViolationSpec(**v.model_dump()) for v in cfg.violations] or None
        result = validity_experiment(
            n_clean, n_corrupted,
            args.seed, specs, chains, limits, cfg.rate_hz, cfg.duration_s,
        )
        _banner("VALIDITY EXPERIMENT")
        print(f"  Clean accepted:     {result['accept_rate_clean']:.1%}")
        print(f"  Corrupted rejected: {result['reject_rate_corrupted']:.1%}")

    _report(args, result)
    return ExitStatus.OK


# ==================== ENTRY POINT ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='demo_engine', description=__doc__.strip().splitlines()[0])
    parser.add_argument('--log-level', help="override logging.level from config.yaml")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('track', help="label a marker stream and write flange poses")
    p.add_argument('--model', required=True)
    p.add_argument('--stream', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--trajectory', help="also write a resampled trajectory here")
    p.add_argument('--rate', type=float, help="trajectory rate in Hz")
    p.add_argument('--arm', choices=('left', 'right'), default='right')
    p.add_argument('--report')
    p.set_defaults(handler=cmd_track)

    p = sub.add_parser('transfer', help="map a tracked pose stream to the flange and resample it")
    p.add_argument('--poses', required=True, help="JSONL of {t, pos, rot} in the tracker frame")
    p.add_argument('--source', choices=SOURCES, default='mocap_240hz')
    p.add_argument('--out', required=True)
    p.add_argument('--rate', type=float, help="trajectory rate in Hz")
    p.add_argument('--width', type=float, default=0.0, help="constant gripper width (m)")
    p.add_argument('--arm', choices=('left', 'right'), default='right')
    p.add_argument('--report')
    p.set_defaults(handler=cmd_transfer)

    p = sub.add_parser('build-model', help="build a marker model from a short recording")
    p.add_argument('--first-frame', required=True, help="JSON {ids, points} labeling the first frame")
    p.add_argument('--stream', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--side', choices=('left', 'right'), help="express the model in the marker-defined frame")
    p.add_argument('--report')
    p.set_defaults(handler=cmd_build_model)

    p = sub.add_parser('validate', help="check a bimanual episode for replayability")
    p.add_argument('--left', required=True)
    p.add_argument('--right', required=True)
    p.add_argument('--chain')
    p.add_argument('--limits')
    p.add_argument('--log', help="write the per-frame verdict log as JSONL")
    p.add_argument('--report')
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser('adapt', help="solve gripper mechanism parameters")
    p.add_argument('template', choices=('flexion', 'parallel'))
    p.add_argument('--fixed', help="YAML with l1, l2, l3, d, x4 (mm)")
    p.add_argument('--x1-max', type=float)
    p.add_argument('--w-max', type=float)
    p.add_argument('--l-c', type=float)
    p.add_argument('--out', required=True)
    p.add_argument('--sweep', help="write a stroke sweep CSV")
    p.add_argument('--report')
    p.set_defaults(handler=cmd_adapt)

    p = sub.add_parser('pyramid', help="manage dataset manifests")
    actions = p.add_subparsers(dest='action', required=True)
    a = actions.add_parser('init')
    a.add_argument('manifest')
    a = actions.add_parser('add')
    a.add_argument('manifest')
    a.add_argument('episodes', nargs='+')
    a.add_argument('--report')
    a = actions.add_parser('stats')
    a.add_argument('manifest')
    a.add_argument('--report')
    a = actions.add_parser('stage')
    a.add_argument('manifest')
    a.add_argument('stage', choices=STAGES)
    a.add_argument('--recovery', choices=tuple(RECOVERY_LAYERS), default='all')
    a.add_argument('--report')
    p.set_defaults(handler=cmd_pyramid)

    p = sub.add_parser('experiment', help="run a synthetic benchmark")
    p.add_argument('config', help="experiment JSON")
    p.add_argument('--seed', type=int)
    p.add_argument('--report')
    p.set_defaults(handler=cmd_experiment)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 0 for --help and 2 for usage errors
        return int(ExitStatus.OK) if not e.code else int(ExitStatus.INPUT_ERROR)

    setup_logging(args.log_level)

    try:
        return int(args.handler(args))
    except (DemoEngineError, ValueError) as e:
        logger.error(f"{args.command}: {e}")
        return int(ExitStatus.INPUT_ERROR)
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        return int(ExitStatus.INTERNAL_ERROR)


if __name__ == "__main__":
    sys.exit(main())
