"""Synthetic organized scans of height-field surfaces with planted defects.

Surfaces live on ``[-0.5, 0.5]^2`` with pixel centers on a regular grid.
Every coordinate carries Gaussian noise with sigma equal to 0.1% of the
clean surface's bounding-box diagonal; that sigma is also the noise floor
used to decide which pixels a defect modified.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .pointcloud import OrganizedScan, save_scan

SURFACES = ("plane", "sinusoid", "spherecap")
DEFECT_KINDS = ("bump", "dent", "cut", "contamination")
NOISE_FRACTION = 1e-3


@dataclass(frozen=True)
class DefectSpec:
    kind: str
    center: Tuple[float, float]
    radius: float
    amplitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFECT_KINDS:
            raise ValueError(f"unknown defect kind {self.kind!r}")
        if not self.radius > 0 or not abs(self.amplitude) > 0:
            raise ValueError("defect radius and amplitude must be non-zero")


def _grid(resolution: int):
    c = (np.arange(resolution) + 0.5) / resolution - 0.5
    v, u = np.meshgrid(c, c, indexing="ij")
    return u, v


def _height(kind: str, u, v, rng) -> np.ndarray:
    if kind == "plane":
        a, b = rng.uniform(-0.1, 0.1, size=2)
        return a * u + b * v
    if kind == "sinusoid":
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
        return 0.04 * np.sin(3 * np.pi * u + p1) * np.cos(2 * np.pi * v + p2)
    if kind == "spherecap":
        r = rng.uniform(1.0, 1.4)
        return np.sqrt(r**2 - u**2 - v**2) - r
    raise ValueError(f"unknown surface kind {kind!r}; expected one of {SURFACES}")


def _base(kind: str, resolution: int, seed: int):
    if resolution < 16:
        raise ValueError("resolution must be at least 16")
    rng = np.random.default_rng(seed)
    u, v = _grid(resolution)
    clean = np.stack([u, v, _height(kind, u, v, rng)], axis=-1)
    flat = clean.reshape(-1, 3)
    sigma = NOISE_FRACTION * float(np.linalg.norm(flat.max(axis=0) - flat.min(axis=0)))
    noise = rng.normal(scale=sigma, size=clean.shape)
    return clean, noise, sigma


def noise_floor(kind: str, resolution: int, seed: int) -> float:
    return _base(kind, resolution, seed)[2]


def make_train_scan(kind: str, resolution: int = 64, seed: int = 0) -> OrganizedScan:
    clean, noise, _ = _base(kind, resolution, seed)
    valid = np.ones(clean.shape[:2], dtype=bool)
    return OrganizedScan(clean + noise, valid)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _segment_distance(u, v, center, half_length, theta):
    du, dv = u - center[0], v - center[1]
    d = np.array([np.cos(theta), np.sin(theta)])
    t = np.clip(du * d[0] + dv * d[1], -half_length, half_length)
    return np.hypot(du - t * d[0], dv - t * d[1])


def defect_field(spec: DefectSpec, u, v):
    """Height displacement, support mask and invalidated pixels of one defect."""
    r = np.hypot(u - spec.center[0], v - spec.center[1])
    amp = abs(spec.amplitude)
    invalid = np.zeros(u.shape, dtype=bool)
    if spec.kind in ("bump", "dent"):
        support = r < spec.radius
        disp = amp * _smoothstep((spec.radius - r) / (0.25 * spec.radius))
        if spec.kind == "dent":
            disp = -disp
    elif spec.kind == "contamination":
        support = r < spec.radius
        disp = amp * np.sqrt(np.clip(1 - (r / spec.radius) ** 2, 0, None))
    else:
        theta = np.random.default_rng(spec.seed).uniform(0, np.pi)
        width = 0.3 * spec.radius
        s = _segment_distance(u, v, spec.center, spec.radius - width, theta)
        support = s < width
        disp = -amp * _smoothstep((width - s) / (0.5 * width))
        invalid = s < 0.35 * width
    disp = np.where(support, disp, 0.0)
    return disp, support, invalid


def make_test_scan(kind: str, defects: Sequence[DefectSpec], resolution: int = 64, seed: int = 0) -> OrganizedScan:
    """Training-distribution surface (same seed gives the defect-free twin) with defects applied.

    Defects displace along z, so ``gt_mask`` is exactly the set of pixels that
    moved by more than the noise floor plus the pixels a cut invalidated.
    """
    clean, noise, sigma = _base(kind, resolution, seed)
    u, v = clean[..., 0], clean[..., 1]
    disp = np.zeros(u.shape)
    invalid = np.zeros(u.shape, dtype=bool)
    covered = np.zeros(u.shape, dtype=bool)
    for spec in defects:
        cu, cv = spec.center
        if not (-0.5 + spec.radius <= cu <= 0.5 - spec.radius and -0.5 + spec.radius <= cv <= 0.5 - spec.radius):
            raise ValueError(f"{spec.kind} at {spec.center} with radius {spec.radius} leaves the surface")
        d, support, inv = defect_field(spec, u, v)
        if np.any(covered & support):
            raise ValueError(f"{spec.kind} at {spec.center} overlaps another defect")
        covered |= support
        disp += d
        invalid |= inv
    xyz = clean + noise
    xyz[..., 2] += disp
    gt = (np.abs(disp) > sigma) | invalid
    return OrganizedScan(xyz, ~invalid, gt)


def random_defects(kinds: Sequence[str], count: int, rng: np.random.Generator, floor: float,
                   radius_range=(0.06, 0.1), amplitude_range=(5.0, 15.0), attempts: int = 200) -> List[DefectSpec]:
    """Non-overlapping random defects; amplitudes are multiples of the noise floor."""
    out: List[DefectSpec] = []
    for _ in range(count):
        for _ in range(attempts):
            kind = str(kinds[rng.integers(len(kinds))])
            radius = float(rng.uniform(*radius_range))
            lim = 0.5 - radius - 0.02
            center = (float(rng.uniform(-lim, lim)), float(rng.uniform(-lim, lim)))
            if any(np.hypot(center[0] - o.center[0], center[1] - o.center[1]) < radius + o.radius + 0.02 for o in out):
                continue
            amp = float(rng.uniform(*amplitude_range)) * floor
            out.append(DefectSpec(kind, center, radius, amp, int(rng.integers(2**31))))
            break
        else:
            raise RuntimeError("could not place non-overlapping defects")
    return out


@dataclass(frozen=True)
class SynthConfig:
    surfaces: Tuple[str, ...] = ("plane",)
    train: int = 20
    test: int = 10
    resolution: int = 64
    defects: Tuple[str, ...] = DEFECT_KINDS
    defects_per_scan: int = 2

    def to_dict(self) -> dict:
        return asdict(self)


def scan_seed(seed: int, category: int, split: str, index: int) -> int:
    code = {"train": 0, "test": 1}[split]
    return int(np.random.default_rng([seed, category, code, index]).integers(2**31))


def generate_benchmark(out: Path, cfg: SynthConfig, seed: int, extra_meta: Optional[Dict] = None) -> dict:
    """Write ``<out>/<surface>/{train,test}/NNN.geoscan`` plus ``manifest.json``."""
    out = Path(out)
    entries = []
    for ci, kind in enumerate(cfg.surfaces):
        for split, count in (("train", cfg.train), ("test", cfg.test)):
            folder = out / kind / split
            folder.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                s = scan_seed(seed, ci, split, i)
                if split == "train":
                    scan, defects = make_train_scan(kind, cfg.resolution, s), []
                else:
                    rng = np.random.default_rng([s, 99])
                    defects = random_defects(cfg.defects, cfg.defects_per_scan, rng,
                                             noise_floor(kind, cfg.resolution, s))
                    scan = make_test_scan(kind, defects, cfg.resolution, s)
                rel = f"{kind}/{split}/{i:03d}.geoscan"
                save_scan(out / rel, scan)
                entries.append({
                    "file": rel,
                    "category": kind,
                    "split": split,
                    "seed": s,
                    "defects": [asdict(d) for d in defects],
                })
    manifest = {"format": "geost-synth v1", "seed": seed, "config": cfg.to_dict(), "scans": entries}
    manifest.update(extra_meta or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
