"""Procedural shape bank and synthetic pretraining scenes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .cloud import PointCloud, farthest_point_sample


@dataclass(frozen=True)
class SceneConfig:
    models_per_scene: int = 10
    placement_range: float = 3.0
    points_per_scene: int = 64000
    seed: int = 0
    rotate: bool = True

    def __post_init__(self):
        if self.models_per_scene <= 0 or self.points_per_scene <= 0:
            raise ValueError("scene counts must be positive")
        if not self.placement_range > 0:
            raise ValueError("placement_range must be positive")


def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box(rng, n, size):
    size = np.asarray(size, dtype=np.float64)
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = (rng.random((n, 3)) - 0.5) * size
    sign = rng.choice([-0.5, 0.5], size=n)
    pts[np.arange(n), face_axis] = sign * size[face_axis]
    return pts


def _cylinder(rng, n, radius, height):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2
    kind = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.random(n) * 2 * np.pi
    r = np.where(kind == 0, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(kind == 0, (rng.random(n) - 0.5) * height, np.where(kind == 1, height / 2, -height / 2))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(rng, n, major, minor):
    u = rng.random(n) * 2 * np.pi
    v = rng.random(n) * 2 * np.pi
    return np.stack(
        [(major + minor * np.cos(v)) * np.cos(u), (major + minor * np.cos(v)) * np.sin(u), minor * np.sin(v)],
        axis=1,
    )


def _cone(rng, n, radius, height):
    slant = np.sqrt(radius**2 + height**2)
    side = np.pi * radius * slant
    base = np.pi * radius**2
    on_side = rng.random(n) < side / (side + base)
    theta = rng.random(n) * 2 * np.pi
    t = np.sqrt(rng.random(n))
    r = np.where(on_side, radius * t, radius * np.sqrt(rng.random(n)))
    z = np.where(on_side, height * (1 - t), 0.0)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _capsule(rng, n, radius, length):
    pts = _cylinder(rng, n, radius, length)
    caps = np.abs(pts[:, 2]) >= length / 2 - 1e-12
    s = _sphere(rng, int(caps.sum())) * radius
    s[:, 2] = np.abs(s[:, 2]) * np.sign(pts[caps, 2])
    s[:, 2] += np.sign(pts[caps, 2]) * length / 2
    pts[caps] = s
    return pts


def synth_shape_bank(seed: int = 0, points_per_model: int = 4096) -> Dict[str, np.ndarray]:
    """Dense surface samples of simple primitives, keyed by name.

    Deterministic in ``seed``. Every model is centered at the origin.
    """
    rng = np.random.default_rng(seed)
    n = points_per_model
    bank = {
        "sphere": _sphere(rng, n),
        "cube": _box(rng, n, (1.0, 1.0, 1.0)),
        "slab": _box(rng, n, (2.0, 1.0, 0.25)),
        "beam": _box(rng, n, (2.0, 0.4, 0.4)),
        "ellipsoid": _sphere(rng, n) * np.array([1.0, 0.6, 0.35]),
        "cylinder": _cylinder(rng, n, 0.4, 1.6),
        "disc": _cylinder(rng, n, 1.0, 0.2),
        "torus": _torus(rng, n, 1.0, 0.3),
        "ring": _torus(rng, n, 1.0, 0.12),
        "cone": _cone(rng, n, 0.6, 1.5),
        "capsule": _capsule(rng, n, 0.3, 1.2),
    }
    return bank


def _rotation(angles: np.ndarray) -> np.ndarray:
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def generate_scene(bank, cfg: SceneConfig) -> PointCloud:
    """Random arrangement of bank models, reduced by farthest point sampling.

    Each model's bounding box is centered and its longest side scaled to 1,
    then it is rotated about x, y, z by angles in [0, 2pi) and translated
    uniformly into [-r, r]^3.
    """
    models: List[np.ndarray] = list(bank.values()) if isinstance(bank, dict) else list(bank)
    if not models:
        raise ValueError("shape bank is empty")
    rng = np.random.default_rng(cfg.seed)
    picks = rng.integers(len(models), size=cfg.models_per_scene)
    parts = []
    for idx in picks:
        pts = np.asarray(models[idx], dtype=np.float64)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pts = (pts - (lo + hi) / 2) / (hi - lo).max()
        angles = rng.random(3) * 2 * np.pi
        if cfg.rotate:
            pts = pts @ _rotation(angles).T
        offset = rng.uniform(-cfg.placement_range, cfg.placement_range, size=3)
        parts.append(pts + offset)
    pool = np.concatenate(parts)
    if cfg.points_per_scene > len(pool):
        raise ValueError(f"scene pools {len(pool)} points, cannot sample {cfg.points_per_scene}")
    sel = farthest_point_sample(pool, cfg.points_per_scene, seed=int(rng.integers(2**31)))
    return PointCloud(pool[sel])
