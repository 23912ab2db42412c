from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cloud import PointCloud


@dataclass(frozen=True)
class OrganizedScan:
    """Pixel-grid range image.

    ``xyz`` has shape (height, width, 3) and holds NaN at invalid pixels.
    ``gt_mask`` marks anomalous pixels and is only meaningful for test scans.
    """

    xyz: np.ndarray
    valid: np.ndarray
    gt_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if xyz.ndim != 3 or xyz.shape[2] != 3 or valid.shape != xyz.shape[:2]:
            raise ValueError("scan arrays have inconsistent shapes")
        if not np.all(np.isfinite(xyz[valid])):
            raise ValueError("valid pixels must carry finite coordinates")
        xyz[~valid] = np.nan
        gt = np.zeros(valid.shape, dtype=bool) if self.gt_mask is None else np.asarray(self.gt_mask, dtype=bool)
        if gt.shape != valid.shape:
            raise ValueError("gt_mask shape does not match the scan")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "gt_mask", gt)

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    def to_cloud(self) -> PointCloud:
        """Valid pixels in row-major order, with their pixel of origin."""
        flat = np.nonzero(self.valid.ravel())[0]
        return PointCloud(self.xyz.reshape(-1, 3)[flat], origin=flat)
