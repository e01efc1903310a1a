#!/usr/bin/env python3
"""
Pyramid-Structured Demonstration Data
Episode records, manifests with per-file checksums, layer statistics,
stage selection and the reference loss formulas used to check training code
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator
from scipy.special import logsumexp

from config_loader import config
from errors import (
    ChecksumMismatch,
    DimensionMismatch,
    DuplicateEpisode,
    NonPositiveTemperature,
    NotNormalized,
    StreamFormatError,
    UnknownStage,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = config.get('pyramid.schema_version', 1)
ACTION_DIM = 16
NORM_TOL = 1e-9

LAYERS = ('base_single_arm', 'task_bimanual', 'recovery_online', 'recovery_offline', 'nominal_extra')
RECOVERY_LAYERS = {
    'all': ('recovery_online', 'recovery_offline'),
    'online': ('recovery_online',),
    'offline': ('recovery_offline',),
}
STAGES = ('pretrain', 'task', 'refine', 'augment')

Layer = Literal['base_single_arm', 'task_bimanual', 'recovery_online', 'recovery_offline', 'nominal_extra']
Mode = Literal['precision', 'portable']

FNV_OFFSET = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
MASK64 = 0xffffffffffffffff


# ==================== RECORDS ====================

class PoseRecord(BaseModel):
    model_config = ConfigDict(extra='forbid')

    pos: List[float]
    rot: List[float]


class MediaRefs(BaseModel):
    """Content-addressed media ids; 2 wrist cameras, 2 to 4 tactile sensors"""

    model_config = ConfigDict(extra='forbid')

    wrist_rgb: List[str]
    tactile: List[str]

    @field_validator('wrist_rgb')
    @classmethod
    def _two_cameras(cls, v):
        if len(v) != 2:
            raise ValueError(f"expected 2 wrist RGB ids, got {len(v)}")
        return v

    @field_validator('tactile')
    @classmethod
    def _tactile_count(cls, v):
        if not 2 <= len(v) <= 4:
            raise ValueError(f"expected 2-4 tactile ids, got {len(v)}")
        return v


class FrameRecord(BaseModel):
    model_config = ConfigDict(extra='forbid')

    t: float
    left_pose: PoseRecord
    right_pose: PoseRecord
    left_width: float
    right_width: float
    action: List[float]
    media: MediaRefs

    @field_validator('action')
    @classmethod
    def _action_dim(cls, v):
        if len(v) != ACTION_DIM:
            raise ValueError(f"action must have {ACTION_DIM} entries, got {len(v)}")
        return v

    @field_validator('left_width', 'right_width')
    @classmethod
    def _width(cls, v):
        if v < 0:
            raise ValueError("gripper width must be >= 0")
        return v


class EpisodeHeader(BaseModel):
    model_config = ConfigDict(extra='forbid')

    schema_version: int = SCHEMA_VERSION
    episode_id: str
    task: str
    mode: Mode
    layer: Layer
    n_frames: int
    tactile_count: int
    feasibility: Optional[Dict[str, Any]] = None


class EpisodeRecord(BaseModel):
    model_config = ConfigDict(extra='forbid')

    episode_id: str
    task: str
    mode: Mode
    layer: Layer
    frames: List[FrameRecord]
    feasibility: Optional[Dict[str, Any]] = None

    @field_validator('frames')
    @classmethod
    def _time_ordered(cls, v):
        for a, b in zip(v, v[1:]):
            if not b.t > a.t:
                raise ValueError(f"frames not time-ordered at t={b.t}")
        counts = {len(f.media.tactile) for f in v}
        if len(counts) > 1:
            raise ValueError("tactile reference count changes within the episode")
        return v

    @property
    def tactile_count(self) -> int:
        return len(self.frames[0].media.tactile) if self.frames else 0

    def header(self) -> EpisodeHeader:
        return EpisodeHeader(
            episode_id=self.episode_id, task=self.task, mode=self.mode, layer=self.layer,
            n_frames=len(self.frames), tactile_count=self.tactile_count, feasibility=self.feasibility,
        )


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra='forbid')

    episode_id: str
    task: str
    layer: Layer
    mode: Mode
    file: str
    checksum: str
    n_frames: int
    valid: Optional[bool] = None


class PyramidManifest(BaseModel):
    model_config = ConfigDict(extra='forbid')

    schema_version: int = SCHEMA_VERSION
    episodes: List[ManifestEntry] = []
    layers: Dict[str, List[str]] = {}
    task_counts: Dict[str, Dict[str, int]] = {}

    @model_validator(mode='after')
    def _consistent(self):
        seen = set()
        for entry in self.episodes:
            if entry.episode_id in seen:
                raise ValueError(f"episode {entry.episode_id} listed twice")
            seen.add(entry.episode_id)

        listed = [eid for ids in self.layers.values() for eid in ids]
        if len(listed) != len(set(listed)):
            raise ValueError("an episode appears in more than one layer")
        expected = _layer_lists(self.episodes)
        if {k: v for k, v in self.layers.items() if v} != {k: v for k, v in expected.items() if v}:
            raise ValueError("layer lists do not match the episode entries")
        counts = _task_counts(self.episodes)
        if self.task_counts != counts:
            raise ValueError("task counts do not match the episode entries")
        return self

    def entry(self, episode_id: str) -> ManifestEntry:
        for e in self.episodes:
            if e.episode_id == episode_id:
                return e
        raise KeyError(episode_id)


def _layer_lists(entries: Iterable[ManifestEntry]) -> Dict[str, List[str]]:
    layers: Dict[str, List[str]] = {layer: [] for layer in LAYERS}
    for e in entries:
        layers[e.layer].append(e.episode_id)
    return layers


def _task_counts(entries: Iterable[ManifestEntry]) -> Dict[str, Dict[str, int]]:
    counts: Dict[str, Dict[str, int]] = {}
    for e in entries:
        per_task = counts.setdefault(e.task, {})
        per_task[e.layer] = per_task.get(e.layer, 0) + 1
    return counts


def build_manifest(entries: Sequence[ManifestEntry]) -> PyramidManifest:
    entries = list(entries)
    ids = [e.episode_id for e in entries]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise DuplicateEpisode(f"duplicate episode ids: {', '.join(duplicates)}")
    return PyramidManifest(
        schema_version=SCHEMA_VERSION,
        episodes=entries,
        layers=_layer_lists(entries),
        task_counts=_task_counts(entries),
    )


# ==================== FILES ====================

def fnv1a_64(data: bytes) -> str:
    """64-bit FNV-1a digest as 16 hex digits"""
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return f"{h:016x}"


def file_checksum(path: Union[str, Path]) -> str:
    with open(path, 'rb') as f:
        return fnv1a_64(f.read())


def write_episode(path: Union[str, Path], record: EpisodeRecord) -> str:
    """Header line then one JSON line per frame; returns the file checksum"""
    lines = [record.header().model_dump_json()]
    lines.extend(frame.model_dump_json() for frame in record.frames)
    payload = ("\n".join(lines) + "\n").encode('utf-8')
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(payload)
    return fnv1a_64(payload)


def read_episode_header(path: Union[str, Path]) -> EpisodeHeader:
    try:
        with open(path, 'r') as f:
            first = f.readline()
    except OSError as e:
        raise StreamFormatError(f"cannot read episode: {e}", str(path))
    try:
        return EpisodeHeader.model_validate_json(first)
    except ValidationError as e:
        raise StreamFormatError(f"bad episode header: {e}", str(path), 1)


def read_episode(path: Union[str, Path]) -> EpisodeRecord:
    header = read_episode_header(path)
    frames = []
    with open(path, 'r') as f:
        next(f)
        for line_no, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                frames.append(FrameRecord.model_validate_json(line))
            except ValidationError as e:
                raise StreamFormatError(f"bad episode frame: {e}", str(path), line_no)
    if len(frames) != header.n_frames:
        raise StreamFormatError(f"header announces {header.n_frames} frames, found {len(frames)}", str(path))
    return EpisodeRecord(
        episode_id=header.episode_id, task=header.task, mode=header.mode,
        layer=header.layer, frames=frames, feasibility=header.feasibility,
    )


def _entry_for(path: Path, manifest_dir: Path, checksum: str, header: EpisodeHeader) -> ManifestEntry:
    valid = header.feasibility.get('valid') if header.feasibility else None
    return ManifestEntry(
        episode_id=header.episode_id, task=header.task, layer=header.layer, mode=header.mode,
        file=os.path.relpath(path, manifest_dir), checksum=checksum,
        n_frames=header.n_frames, valid=valid,
    )


def save_manifest(path: Union[str, Path], manifest: PyramidManifest) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        f.write(manifest.model_dump_json(indent=2))


def write_manifest(path: Union[str, Path], episodes: Sequence[EpisodeRecord],
                   episode_dir: Optional[Union[str, Path]] = None) -> PyramidManifest:
    """Write each episode to its own file and a manifest indexing them"""
    path = Path(path)
    manifest_dir = path.parent
    episode_dir = Path(episode_dir) if episode_dir is not None else manifest_dir / 'episodes'

    ids = [e.episode_id for e in episodes]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise DuplicateEpisode(f"duplicate episode ids: {', '.join(duplicates)}")

    entries = []
    for record in episodes:
        file_path = episode_dir / f"{record.episode_id}.jsonl"
        checksum = write_episode(file_path, record)
        entries.append(_entry_for(file_path, manifest_dir, checksum, record.header()))

    manifest = build_manifest(entries)
    save_manifest(path, manifest)
    logger.info(f"wrote manifest {path} with {len(entries)} episodes")
    return manifest


def read_manifest(path: Union[str, Path], verify: bool = True) -> PyramidManifest:
    path = Path(path)
    try:
        with open(path, 'r') as f:
            manifest = PyramidManifest.model_validate_json(f.read())
    except OSError as e:
        raise StreamFormatError(f"cannot read manifest: {e}", str(path))
    except ValidationError as e:
        raise StreamFormatError(f"invalid manifest: {e}", str(path))

    if verify:
        for entry in manifest.episodes:
            file_path = path.parent / entry.file
            if not file_path.exists():
                raise ChecksumMismatch(f"episode {entry.episode_id}: file {file_path} missing")
            actual = file_checksum(file_path)
            if actual != entry.checksum:
                raise ChecksumMismatch(
                    f"episode {entry.episode_id}: checksum {actual} != manifest {entry.checksum}"
                )
    return manifest


def init_manifest(path: Union[str, Path]) -> PyramidManifest:
    manifest = build_manifest([])
    save_manifest(path, manifest)
    return manifest


def add_episode_files(manifest_path: Union[str, Path], files: Sequence[Union[str, Path]]) -> PyramidManifest:
    """Index existing episode files in a manifest, creating it if absent"""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path) if manifest_path.exists() else build_manifest([])
    entries = list(manifest.episodes)
    known = {e.episode_id for e in entries}

    for file_path in files:
        file_path = Path(file_path)
        header = read_episode_header(file_path)
        if header.episode_id in known:
            raise DuplicateEpisode(f"episode {header.episode_id} already in {manifest_path}")
        known.add(header.episode_id)
        entries.append(_entry_for(file_path, manifest_path.parent, file_checksum(file_path), header))

    manifest = build_manifest(entries)
    save_manifest(manifest_path, manifest)
    logger.info(f"manifest {manifest_path} now holds {len(entries)} episodes")
    return manifest


# ==================== STATISTICS ====================

def to_dataframe(manifest: PyramidManifest) -> pd.DataFrame:
    """Manifest entries as a DataFrame"""
    columns = list(ManifestEntry.model_fields)
    if not manifest.episodes:
        return pd.DataFrame(columns=columns)
    return pd.DataFrame([e.model_dump() for e in manifest.episodes], columns=columns)


def pyramid_stats(manifest: PyramidManifest) -> Dict[str, Any]:
    """
    Per-layer and per-task counts with recovery ratios.

    recovery_ratio = (online + offline recovery) / bimanual demos per task,
    0 when a task has no demos.
    """
    df = to_dataframe(manifest)
    layer_counts = {layer: 0 for layer in LAYERS}
    if not df.empty:
        layer_counts.update(df.groupby('layer').size().astype(int).to_dict())

    tasks: Dict[str, Dict[str, Any]] = {}
    if not df.empty:
        table = pd.crosstab(df['task'], df['layer']).reindex(columns=list(LAYERS), fill_value=0)
        for task, row in table.iterrows():
            demos = int(row['task_bimanual'])
            online = int(row['recovery_online'])
            offline = int(row['recovery_offline'])
            entry = {layer: int(row[layer]) for layer in LAYERS}
            entry.update({
                'demos': demos,
                'recovery': online + offline,
                'recovery_ratio': (online + offline) / demos if demos else 0.0,
                'online_ratio': online / demos if demos else 0.0,
                'offline_ratio': offline / demos if demos else 0.0,
            })
            tasks[str(task)] = entry

    return {
        'total_episodes': int(len(df)),
        'layers': layer_counts,
        'tasks': tasks,
    }


def stage_filter(manifest: PyramidManifest, stage: str, recovery: str = 'all') -> List[ManifestEntry]:
    """Episodes feeding a training stage"""
    if stage == 'pretrain':
        layers = ('base_single_arm',)
    elif stage == 'task':
        layers = ('task_bimanual',)
    elif stage == 'refine':
        if recovery not in RECOVERY_LAYERS:
            raise UnknownStage(f"unknown recovery source {recovery!r}")
        layers = ('task_bimanual',) + RECOVERY_LAYERS[recovery]
    elif stage == 'augment':
        layers = ('task_bimanual', 'nominal_extra')
    else:
        raise UnknownStage(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    return [e for e in manifest.episodes if e.layer in layers]


# ==================== LOSS REFERENCES ====================

def _check_unit_norm(name: str, x: np.ndarray):
    norms = np.linalg.norm(x, axis=1)
    worst = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
    if worst > NORM_TOL:
        raise NotNormalized(f"{name} embeddings deviate from unit norm by {worst:.3e}")


def contrastive_loss(tactile: np.ndarray, visual: np.ndarray, tau: float) -> float:
    """
    Tactile-visual contrastive loss with a temporal positive.

    For tactile t_i the positives are v_i and v_(i+1); the other visual
    embeddings of the batch are negatives. visual carries B+1 rows so the
    last tactile embedding still has its next-step positive.
    """
    t = np.asarray(tactile, dtype=float)
    v = np.asarray(visual, dtype=float)
    if t.ndim != 2 or v.ndim != 2 or t.shape[0] < 1:
        raise DimensionMismatch("embeddings must be 2-D with at least one tactile row")
    if v.shape[0] != t.shape[0] + 1 or v.shape[1] != t.shape[1]:
        raise DimensionMismatch(f"need visual of shape ({t.shape[0] + 1}, {t.shape[1]}), got {v.shape}")
    if not tau > 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {tau}")
    _check_unit_norm('tactile', t)
    _check_unit_norm('visual', v)

    B = t.shape[0]
    logits = (t @ v.T) / tau
    rows = np.arange(B)
    positives = np.stack([logits[rows, rows], logits[rows, rows + 1]], axis=1)
    terms = logsumexp(logits, axis=1) - logsumexp(positives, axis=1)
    return float(np.mean(np.maximum(terms, 0.0)))


def action_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Sum over timesteps of the L1 action error"""
    p = np.asarray(pred, dtype=float)
    a = np.asarray(target, dtype=float)
    if p.ndim != 2 or p.shape[1] != ACTION_DIM or p.shape != a.shape:
        raise DimensionMismatch(f"expected matching (T, {ACTION_DIM}) arrays, got {p.shape} and {a.shape}")
    return float(np.sum(np.abs(p - a)))
