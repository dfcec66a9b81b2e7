"""
Output files.

- trajectories.jsonl: a header line, then per trajectory its sample rows and a summary row
- histogram_p<i>.csv: "# key: value" metadata lines, then x,t,density
- *.json reports
- *.snap state snapshots: a magic line, a JSON header line, then a .npy payload

Every file carries the schema version, config hash and seed.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .analysis import SpacetimeHistogram
from .dynamics import TrajectoryRecord
from .errors import ConfigError
from .grid import Basis, GridSpec, WaveFunction

logger = logging.getLogger("spacetime-collapse.persistence")

SNAPSHOT_MAGIC = b"SPACETIME-COLLAPSE-SNAPSHOT v1\n"


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_trajectories(path: Path, metadata: dict, records: Iterable[TrajectoryRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(_dumps({"type": "header", **metadata}) + "\n")
        for record in records:
            for row in record.to_rows():
                f.write(_dumps({"type": "sample", **row}) + "\n")
            f.write(_dumps({"type": "summary", **record.summary()}) + "\n")
    logger.debug(f"Wrote {path}")
    return path


def read_trajectories(path: Path) -> tuple[dict, list[TrajectoryRecord]]:
    header: dict | None = None
    records = []
    pending: list[dict] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigError(f"malformed JSON: {e}", str(path), lineno) from e
            kind = row.pop("type", None)
            if kind == "header":
                header = row
            elif kind == "sample":
                pending.append(row)
            elif kind == "summary":
                records.append(TrajectoryRecord.from_rows(pending, row))
                pending = []
            else:
                raise ConfigError(f"unknown row type {kind!r}", str(path), lineno)
    if header is None:
        raise ConfigError("trajectory file has no header line", str(path))
    return header, records


def write_histogram_csv(path: Path, metadata: dict, hist: SpacetimeHistogram, particle: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key in sorted(metadata):
            f.write(f"# {key}: {metadata[key]}\n")
        f.write(f"# particle: {particle}\n# S: {hist.S!r}\n# samples: {hist.samples}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["x", "t", "density"])
        for x, t, density in hist.to_rows(particle):
            writer.writerow([repr(x), repr(t), repr(density)])
    return path


def read_histogram_csv(path: Path) -> tuple[dict, np.ndarray]:
    """Metadata and an array of (x, t, density) rows"""
    metadata = {}
    rows = []
    with open(path, encoding="utf-8", newline="") as f:
        lines = []
        for line in f:
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                metadata[key.strip()] = value.strip()
            else:
                lines.append(line)
    reader = csv.reader(lines)
    next(reader, None)
    for row in reader:
        rows.append([float(v) for v in row])
    return metadata, np.array(rows)


def write_report(path: Path, metadata: dict, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump({"metadata": metadata, **report}, f, sort_keys=True, indent=2)
        f.write("\n")
    return path


def write_snapshot(path: Path, metadata: dict, psi: WaveFunction, s: float) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        **metadata,
        "s": s,
        "shape": list(psi.amplitudes.shape),
        "basis_tag": psi.basis.value,
        "grids": [g.to_dict() for g in psi.grids],
    }
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write((_dumps(header) + "\n").encode("utf-8"))
        np.save(f, np.ascontiguousarray(psi.amplitudes), allow_pickle=False)
    return path


def read_snapshot(path: Path) -> tuple[WaveFunction, dict]:
    with open(path, "rb") as f:
        if f.readline() != SNAPSHOT_MAGIC:
            raise ConfigError("not a snapshot file", str(path), 1)
        header = json.loads(f.readline().decode("utf-8"))
        amplitudes = np.load(f, allow_pickle=False)
    grids: Sequence[GridSpec] = tuple(GridSpec(**g) for g in header["grids"])
    return WaveFunction(grids, amplitudes, Basis(header["basis_tag"])), header
