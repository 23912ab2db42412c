"""Readers and writers for the ``geopc`` point-cloud and ``geoscan`` scan formats.

Text cloud::

    geopc v1 <count>
    x y z            (count lines, full-precision decimal)

Binary cloud: magic ``GPC1``, little-endian uint64 count, then count*3
little-endian float64 values.

Scan::

    geoscan v1 <width> <height>
    x y z valid gt   (width*height lines, row-major; invalid pixels store nan)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import FormatError
from .cloud import PointCloud, as_points
from .scan import OrganizedScan

PathLike = Union[str, Path]
BINARY_MAGIC = b"GPC1"


def _fmt(v: float) -> str:
    return repr(float(v))


def save_cloud(path: PathLike, cloud, binary: bool = False) -> None:
    pts = as_points(cloud)
    path = Path(path)
    if binary:
        with path.open("wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<Q", len(pts)))
            fh.write(pts.astype("<f8").tobytes())
        return
    lines = [f"geopc v1 {len(pts)}"]
    lines += [f"{_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in pts]
    path.write_text("\n".join(lines) + "\n")


def load_cloud(path: PathLike) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw.startswith(BINARY_MAGIC):
        if len(raw) < 12:
            raise FormatError(f"{path}: truncated binary header")
        (count,) = struct.unpack("<Q", raw[4:12])
        payload = raw[12:]
        if len(payload) != count * 24:
            raise FormatError(f"{path}: count mismatch, header says {count} points, payload holds {len(payload) / 24:g}")
        pts = np.frombuffer(payload, dtype="<f8").reshape(count, 3).astype(np.float64)
    else:
        lines = raw.decode("ascii").splitlines()
        head = lines[0].split() if lines else []
        if len(head) != 3 or head[:2] != ["geopc", "v1"]:
            raise FormatError(f"{path}: malformed header {lines[:1]}")
        try:
            count = int(head[2])
        except ValueError as exc:
            raise FormatError(f"{path}: malformed count {head[2]!r}") from exc
        body = [ln for ln in lines[1:] if ln.strip()]
        if len(body) != count:
            raise FormatError(f"{path}: count mismatch, header says {count} points, file holds {len(body)}")
        try:
            pts = np.array([[float(v) for v in ln.split()] for ln in body], dtype=np.float64).reshape(count, 3)
        except ValueError as exc:
            raise FormatError(f"{path}: malformed point line") from exc
    if not np.all(np.isfinite(pts)):
        raise FormatError(f"{path}: non-finite coordinates")
    return PointCloud(pts)


def save_scan(path: PathLike, scan: OrganizedScan) -> None:
    lines = [f"geoscan v1 {scan.width} {scan.height}"]
    xyz = scan.xyz.reshape(-1, 3)
    valid = scan.valid.ravel()
    gt = scan.gt_mask.ravel()
    for p, v, g in zip(xyz, valid, gt):
        if v:
            lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} 1 {int(g)}")
        else:
            lines.append(f"nan nan nan 0 {int(g)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_scan(path: PathLike) -> OrganizedScan:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[:2] != ["geoscan", "v1"]:
        raise FormatError(f"{path}: malformed header {lines[:1]}")
    try:
        width, height = int(head[2]), int(head[3])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed dimensions") from exc
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != width * height:
        raise FormatError(f"{path}: count mismatch, expected {width * height} pixels, file holds {len(body)}")
    xyz = np.full((width * height, 3), np.nan)
    valid = np.zeros(width * height, dtype=bool)
    gt = np.zeros(width * height, dtype=bool)
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != 5 or parts[3] not in ("0", "1") or parts[4] not in ("0", "1"):
            raise FormatError(f"{path}: malformed pixel line {i + 2}")
        valid[i] = parts[3] == "1"
        gt[i] = parts[4] == "1"
        if valid[i]:
            try:
                xyz[i] = [float(v) for v in parts[:3]]
            except ValueError as exc:
                raise FormatError(f"{path}: malformed coordinate on line {i + 2}") from exc
            if not np.all(np.isfinite(xyz[i])):
                raise FormatError(f"{path}: non-finite coordinate at valid pixel on line {i + 2}")
    return OrganizedScan(xyz.reshape(height, width, 3), valid.reshape(height, width), gt.reshape(height, width))
