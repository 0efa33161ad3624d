"""
Load/save every artifact the pipeline passes between stages.

Formats (UTF-8, LF line endings, floats written in shortest round-trip form):
- dataset:     '# epr-dataset key=value ...' header, then one line per
               trajectory: 'agent_id rho gamma v0,v1,...'
- features:    '# features key=value ...' header, CSV header row, then
               'dataset_id,trajectory_id,window_start,f0,...'
- scores:      CSV 'dataset_id,trajectory_id,window_start,log_likelihood'
- checkpoints: .npz of named float64 arrays plus a JSON manifest entry
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from simulation import AgentParams, DatasetManifest, Trajectory
from utils import PathLike, ShapeError, atomic_write_bytes, atomic_write_text, format_float

DATASET_TAG = "# epr-dataset"
FEATURES_TAG = "# features"
CHECKPOINT_FORMAT = "ood-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST_KEY = "__manifest__"


def _header_line(tag: str, fields: Dict[str, str]) -> str:
    for key, value in fields.items():
        if any(c.isspace() for c in f"{key}{value}") or "=" in key:
            raise ValueError(f"header field {key}={value!r} must not contain whitespace")
    return tag + " " + " ".join(f"{k}={v}" for k, v in fields.items())


def _parse_header(line: str, tag: str) -> Dict[str, str]:
    if not line.startswith(tag + " "):
        raise ValueError(f"expected a '{tag}' header line")
    fields: Dict[str, str] = {}
    for token in line[len(tag):].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ValueError(f"malformed header token '{token}'")
        fields[key] = value
    return fields


# ----- datasets ----------------------------------------------------------------
def dataset_text(manifest: DatasetManifest, trajectories: Sequence[Trajectory]) -> str:
    lines = [_header_line(DATASET_TAG, manifest.to_fields())]
    for traj in trajectories:
        visits = ",".join(str(int(v)) for v in traj.visits)
        lines.append(f"{traj.agent_id} {format_float(traj.params.rho)} {format_float(traj.params.gamma)} {visits}")
    return "\n".join(lines) + "\n"


def write_dataset(path: PathLike, manifest: DatasetManifest, trajectories: Sequence[Trajectory]) -> None:
    atomic_write_text(path, dataset_text(manifest, trajectories))


def read_dataset(path: PathLike) -> Tuple[DatasetManifest, List[Trajectory]]:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = DatasetManifest.from_fields(_parse_header(fh.readline().rstrip("\n"), DATASET_TAG))
        trajectories = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, found {len(parts)}")
            visits = np.fromiter((int(v) for v in parts[3].split(",")), dtype=np.int64)
            if visits.min() < 0 or visits.max() >= manifest.n_locations:
                raise ValueError(f"{path}:{lineno}: location id outside [0, {manifest.n_locations})")
            trajectories.append(Trajectory(int(parts[0]), visits, AgentParams(float(parts[1]), float(parts[2]))))
    if len(trajectories) != manifest.n_trajectories:
        raise ValueError(f"{path}: manifest says N={manifest.n_trajectories}, found {len(trajectories)}")
    return manifest, trajectories


# ----- features ------------------------------------------------------------------
def write_features(path: PathLike, rows: np.ndarray, dataset_id: str, trajectory_ids: np.ndarray,
                   window_starts: np.ndarray, meta: Dict[str, str]) -> None:
    rows = np.asarray(rows, dtype=np.float64)
    fields = {"dataset_id": dataset_id, "d_f": str(rows.shape[1]), **meta}
    out = io.StringIO()
    out.write(_header_line(FEATURES_TAG, fields) + "\n")
    out.write(",".join(["dataset_id", "trajectory_id", "window_start"] + [f"f{i}" for i in range(rows.shape[1])]) + "\n")
    for row, tid, start in zip(rows, trajectory_ids, window_starts):
        out.write(",".join([dataset_id, str(int(tid)), str(int(start))] + [format_float(v) for v in row]) + "\n")
    atomic_write_text(path, out.getvalue())


def read_features(path: PathLike) -> Tuple[Dict[str, str], np.ndarray, np.ndarray, np.ndarray]:
    """Returns (header fields, rows, trajectory_ids, window_starts)."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        fields = _parse_header(fh.readline().rstrip("\n"), FEATURES_TAG)
        reader = csv.reader(fh)
        next(reader)
        d_f = int(fields["d_f"])
        rows, tids, starts = [], [], []
        for rec in reader:
            if len(rec) != 3 + d_f:
                raise ShapeError(f"{path}: expected {3 + d_f} columns, found {len(rec)}")
            tids.append(int(rec[1]))
            starts.append(int(rec[2]))
            rows.append([float(v) for v in rec[3:]])
    return (fields, np.asarray(rows, dtype=np.float64).reshape(-1, d_f),
            np.asarray(tids, dtype=np.int64), np.asarray(starts, dtype=np.int64))


# ----- scores ----------------------------------------------------------------------
@dataclass
class ScoreTable:
    dataset_id: str
    estimator: str
    trajectory_ids: np.ndarray
    window_starts: np.ndarray
    values: np.ndarray


SCORE_COLUMNS = ["dataset_id", "trajectory_id", "window_start", "log_likelihood"]


def write_scores(path: PathLike, table: ScoreTable) -> None:
    out = io.StringIO()
    out.write(",".join(SCORE_COLUMNS) + "\n")
    for tid, start, value in zip(table.trajectory_ids, table.window_starts, table.values):
        out.write(f"{table.dataset_id},{int(tid)},{int(start)},{format_float(value)}\n")
    atomic_write_text(path, out.getvalue())


def read_scores(path: PathLike, estimator: str = "") -> ScoreTable:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SCORE_COLUMNS:
            raise ValueError(f"{path}: unexpected score header {header}")
        recs = [r for r in reader if r]
    if not recs:
        raise ValueError(f"{path}: no score rows")
    return ScoreTable(
        dataset_id=recs[0][0],
        estimator=estimator,
        trajectory_ids=np.array([int(r[1]) for r in recs], dtype=np.int64),
        window_starts=np.array([int(r[2]) for r in recs], dtype=np.int64),
        values=np.array([float(r[3]) for r in recs], dtype=np.float64),
    )


# ----- checkpoints -----------------------------------------------------------------
def save_checkpoint(path: PathLike, arrays: Dict[str, np.ndarray], manifest: Dict) -> None:
    """Named float64 arrays plus a JSON manifest recording names and shapes."""
    if MANIFEST_KEY in arrays:
        raise ValueError(f"array name '{MANIFEST_KEY}' is reserved")
    full = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arrays": {k: list(np.shape(v)) for k, v in sorted(arrays.items())},
        **manifest,
    }
    buffer = io.BytesIO()
    payload = {k: np.asarray(v, dtype=np.float64) for k, v in sorted(arrays.items())}
    payload[MANIFEST_KEY] = np.array(json.dumps(full, sort_keys=True))
    np.savez(buffer, **payload)
    atomic_write_bytes(path, buffer.getvalue())


def load_checkpoint(path: PathLike, kind: str = "") -> Tuple[Dict[str, np.ndarray], Dict]:
    with np.load(Path(path), allow_pickle=False) as npz:
        if MANIFEST_KEY not in npz.files:
            raise ValueError(f"{path}: not a checkpoint (no manifest)")
        manifest = json.loads(str(npz[MANIFEST_KEY]))
        arrays = {k: np.array(npz[k]) for k in npz.files if k != MANIFEST_KEY}
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format")
    if kind and manifest.get("kind") != kind:
        raise ValueError(f"{path}: expected a '{kind}' checkpoint, found '{manifest.get('kind')}'")
    for name, shape in manifest["arrays"].items():
        if list(arrays[name].shape) != shape:
            raise ShapeError(f"{path}: array '{name}' has shape {arrays[name].shape}, manifest says {shape}")
    return arrays, manifest
