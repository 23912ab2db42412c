"""Per-point score files.

Format::

    geoscore v1 <count>
    # key=value            (metadata lines: config_hash, source_sha256, ...)
    <index> <score>        (count lines, in sampled-point order)

``index`` is the pixel of origin for points taken from an organized scan,
otherwise the point's row in the source cloud.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .errors import FormatError


@dataclass
class ScoreFile:
    indices: np.ndarray
    scores: np.ndarray
    meta: Dict[str, str] = field(default_factory=dict)


def save_scores(path, indices, scores, meta: Mapping[str, str]) -> None:
    indices = np.asarray(indices, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if indices.shape != scores.shape or indices.ndim != 1:
        raise ValueError("indices and scores must be matching 1-d arrays")
    lines = [f"geoscore v1 {len(scores)}"]
    for k in sorted(meta):
        v = str(meta[k])
        if "\n" in v or "=" in k:
            raise ValueError(f"metadata entry {k!r} cannot be stored")
        lines.append(f"# {k}={v}")
    lines += [f"{i} {s!r}" for i, s in zip(indices.tolist(), scores.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_scores(path) -> ScoreFile:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty score file")
    head = lines[0].split()
    if len(head) != 3 or head[:2] != ["geoscore", "v1"] or not head[2].isdigit():
        raise FormatError(f"{path}: malformed header {lines[0]!r}")
    count = int(head[2])
    meta = {}
    body = []
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key] = value
        elif line.strip():
            body.append(line)
    if len(body) != count:
        raise FormatError(f"{path}: count mismatch, header says {count}, found {len(body)} rows")
    idx = np.empty(count, dtype=np.int64)
    val = np.empty(count)
    for j, line in enumerate(body):
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}: row {j + 1} must hold 'index score'")
        try:
            idx[j], val[j] = int(parts[0]), float(parts[1])
        except ValueError:
            raise FormatError(f"{path}: row {j + 1} is not numeric") from None
    if not np.all(np.isfinite(val)) or (val < 0).any():
        raise FormatError(f"{path}: scores must be finite and non-negative")
    return ScoreFile(idx, val, meta)
