"""Anomaly maps on organized scans, PRO curves and AU-PRO summaries."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .pointcloud import OrganizedScan

DEFAULT_LIMITS = (0.01, 0.05, 0.1, 0.2, 0.3)

# Published mean AU-PRO per integration limit, kept for side-by-side reporting only.
REFERENCE_AU_PRO = {
    "d128": {0.01: 0.414, 0.05: 0.628, 0.1: 0.709, 0.2: 0.786, 0.3: 0.833},
    "d64": {0.01: 0.367, 0.05: 0.592, 0.1: 0.682, 0.2: 0.768, 0.3: 0.818},
}
RANDOM_SCORE_AU_PRO_03 = 0.15

_FOUR = ndimage.generate_binary_structure(2, 1)
_EIGHT = ndimage.generate_binary_structure(2, 2)


@dataclass(frozen=True)
class AnomalyMap:
    scores: np.ndarray
    valid: np.ndarray

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


def seed_grid(shape, pixels, scores) -> Tuple[np.ndarray, np.ndarray]:
    """Average scores that land on the same pixel; returns (values, seeded mask)."""
    size = shape[0] * shape[1]
    pixels = np.asarray(pixels, dtype=np.int64).ravel()
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if pixels.shape != scores.shape:
        raise ValueError("pixel and score lists differ in length")
    if pixels.size and (pixels.min() < 0 or pixels.max() >= size):
        raise IndexError("seed pixel out of range")
    if not np.all(np.isfinite(scores)):
        raise ValueError("seed scores must be finite")
    total = np.bincount(pixels, weights=scores, minlength=size)
    count = np.bincount(pixels, minlength=size)
    seeded = count > 0
    values = np.zeros(size)
    values[seeded] = total[seeded] / count[seeded]
    return values.reshape(shape), seeded.reshape(shape)


def _neighbor_sum(u: np.ndarray) -> np.ndarray:
    p = np.pad(u, 1)
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]


def harmonic_interpolate(scan: OrganizedScan, pixels, scores, tol: float = 1e-10,
                         max_iter: int = 200000) -> AnomalyMap:
    """Fill every valid pixel by solving the 4-neighbor Laplace equation.

    Seeded pixels (flat indices into the scan) are Dirichlet data. The
    stencil only couples valid pixels. Red-black successive over-relaxation
    runs until the max-norm residual ``|mean(valid neighbors) - u|`` over
    the free pixels is below ``tol``. The default sits far below 1e-6
    because the solution error grows like residual times the squared
    domain diameter.
    """
    valid = scan.valid
    values, seeded = seed_grid(valid.shape, pixels, scores)
    if np.any(seeded & ~valid):
        raise ValueError("seed pixels must be valid pixels")

    labels, count = ndimage.label(valid, structure=_FOUR)
    if count:
        has_seed = ndimage.maximum(seeded, labels, index=np.arange(1, count + 1)) > 0
        missing = np.nonzero(~has_seed)[0] + 1
        if missing.size:
            parts = []
            for lab in missing[:5]:
                rows, cols = np.nonzero(labels == lab)
                parts.append(f"region {int(lab)} ({rows.size} px, first at row {rows[0]}, col {cols[0]})")
            more = f" and {missing.size - 5} more" if missing.size > 5 else ""
            raise ValueError("valid regions without any scored pixel: " + ", ".join(parts) + more)

    free = valid & ~seeded
    validf = valid.astype(np.float64)
    degree = _neighbor_sum(validf)
    u = np.where(valid, values, 0.0)
    if free.any():
        # Warm start from the nearest seed.
        _, (ri, ci) = ndimage.distance_transform_edt(~seeded, return_indices=True)
        u = np.where(free, values[ri, ci], u)
        rows, cols = np.indices(valid.shape)
        red = free & ((rows + cols) % 2 == 0)
        black = free & ~red
        deg = np.where(free, degree, 1.0)
        omega = 2.0 / (1.0 + np.sin(np.pi / max(valid.shape)))
        for it in range(max_iter):
            for color in (red, black):
                avg = _neighbor_sum(u) / deg
                u = np.where(color, u + omega * (avg - u), u)
            if it % 8 == 0 or it == max_iter - 1:
                res = np.abs(_neighbor_sum(u) / deg - u)[free]
                if res.max() < tol:
                    break
        else:
            raise RuntimeError(f"harmonic interpolation did not converge in {max_iter} sweeps")
    return AnomalyMap(np.where(valid, u, np.nan), valid.copy())


def mean_value_residual(amap: AnomalyMap, seeded: np.ndarray) -> np.ndarray:
    """``|u - mean(valid 4-neighbors)|`` at un-seeded valid pixels (zero elsewhere)."""
    u = np.where(amap.valid, amap.scores, 0.0)
    deg = _neighbor_sum(amap.valid.astype(np.float64))
    free = amap.valid & ~seeded & (deg > 0)
    out = np.zeros_like(u)
    out[free] = np.abs(_neighbor_sum(u)[free] / deg[free] - u[free])
    return out


def connected_components(mask) -> Tuple[np.ndarray, int]:
    """8-connected labels 1..count, numbered by row-major first pixel; 0 is background."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=_EIGHT)
    if count == 0:
        return labels, 0
    flat = labels.ravel()
    firsts = np.full(count + 1, flat.size)
    np.minimum.at(firsts, flat, np.arange(flat.size))
    order = np.argsort(firsts[1:], kind="stable") + 1
    remap = np.zeros(count + 1, dtype=labels.dtype)
    remap[order] = np.arange(1, count + 1)
    return remap[labels], count


@dataclass(frozen=True)
class ProCurve:
    """Exact curve: one sample per distinct score, starting at (0, 0) for threshold +inf."""

    thresholds: np.ndarray
    fpr: np.ndarray
    pro: np.ndarray
    regions: int
    negatives: int


def _pixel_tables(maps: Sequence[AnomalyMap], scans: Sequence[OrganizedScan]):
    if len(maps) != len(scans):
        raise ValueError("need one anomaly map per scan")
    scores, weights, negative = [], [], []
    region_sizes = []
    for amap, scan in zip(maps, scans):
        if amap.scores.shape != scan.valid.shape:
            raise ValueError(f"map shape {amap.scores.shape} does not match scan {scan.valid.shape}")
        valid = scan.valid
        labels, count = connected_components(scan.gt_mask)
        # Regions are labelled on the full mask; only their valid pixels are scored.
        sizes = np.bincount(labels[valid], minlength=count + 1)
        lab = labels[valid]
        s = amap.scores[valid]
        if not np.all(np.isfinite(s)):
            raise ValueError("anomaly map has non-finite scores at valid pixels")
        scores.append(s)
        negative.append(lab == 0)
        region_sizes.append(sizes)
        weights.append((lab, sizes))
    n_regions = sum(int((sz[1:] > 0).sum()) for sz in region_sizes)
    if n_regions == 0:
        raise ValueError("no ground-truth anomaly regions with valid pixels")
    w = []
    for lab, sizes in weights:
        inv = np.zeros(len(sizes))
        inv[1:][sizes[1:] > 0] = 1.0 / (n_regions * sizes[1:][sizes[1:] > 0])
        w.append(np.where(lab > 0, inv[lab], 0.0))
    neg = np.concatenate(negative)
    if not neg.any():
        raise ValueError("no anomaly-free valid pixels")
    return np.concatenate(scores), np.concatenate(w), neg, n_regions


def pro_curve(maps: Sequence[AnomalyMap], scans: Sequence[OrganizedScan]) -> ProCurve:
    """Sweep every distinct score as a threshold (prediction: score >= t), highest first.

    PRO averages coverage over all regions of all scans; FPR is over
    anomaly-free valid pixels.
    """
    s, w, neg, n_regions = _pixel_tables(maps, scans)
    order = np.argsort(-s, kind="stable")
    s, w, neg = s[order], w[order], neg[order]
    cum_fp = np.cumsum(neg)
    cum_pro = np.cumsum(w)
    last = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    n_neg = int(neg.sum())
    fpr = np.concatenate([[0.0], cum_fp[last] / n_neg])
    pro = np.concatenate([[0.0], np.minimum(cum_pro[last], 1.0)])
    thr = np.concatenate([[np.inf], s[last]])
    return ProCurve(thr, fpr, pro, n_regions, n_neg)


def au_pro(curve: ProCurve, limit: float = 0.3) -> float:
    """Trapezoidal area under PRO over FPR in ``[0, limit]``, divided by ``limit``."""
    if not 0 < limit <= 1:
        raise ValueError(f"integration limit must lie in (0, 1], got {limit}")
    fpr, pro = curve.fpr, curve.pro
    inside = fpr <= limit
    x, y = fpr[inside], pro[inside]
    if inside.all():
        # Curve stops short of the limit: hold the final PRO.
        x, y = np.append(x, limit), np.append(y, pro[-1])
    elif x[-1] < limit:
        j = np.argmax(~inside)
        t = (limit - fpr[j - 1]) / (fpr[j] - fpr[j - 1])
        x, y = np.append(x, limit), np.append(y, pro[j - 1] + t * (pro[j] - pro[j - 1]))
    area = float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))
    return area / limit


# Reports -----------------------------------------------------------------

REPORT_SCHEMA = {
    "type": "object",
    "required": ["format", "config_hash", "limits", "categories", "mean", "reference"],
    "properties": {
        "format": {"const": "geost-report v1"},
        "config_hash": {"type": "string"},
        "limits": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
        "categories": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["au_pro", "regions", "negatives", "scans"],
                "properties": {
                    "au_pro": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
                    "regions": {"type": "integer", "minimum": 1},
                    "negatives": {"type": "integer", "minimum": 1},
                    "scans": {"type": "integer", "minimum": 1},
                },
            },
        },
        "mean": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "reference": {"type": "object"},
    },
}


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _limit_key(limit: float) -> str:
    return repr(float(limit))


@dataclass
class CategoryResult:
    curve: ProCurve
    scans: int


def summarize(results: Mapping[str, CategoryResult], limits: Sequence[float]) -> Dict[str, Dict[float, float]]:
    table = {cat: {lim: au_pro(r.curve, lim) for lim in limits} for cat, r in sorted(results.items())}
    table["mean"] = {lim: float(np.mean([table[c][lim] for c in sorted(results)])) for lim in limits}
    return table


def report_csv(results: Mapping[str, CategoryResult], limits: Sequence[float], config_hash: str) -> str:
    table = summarize(results, limits)
    lines = [f"# config_hash={config_hash}", "category,limit,au_pro"]
    for cat in list(sorted(results)) + ["mean"]:
        lines += [f"{cat},{lim:g},{_fmt(table[cat][lim])}" for lim in limits]
    return "\n".join(lines) + "\n"


def curves_csv(results: Mapping[str, CategoryResult], config_hash: str) -> str:
    lines = [f"# config_hash={config_hash}", "category,threshold,fpr,pro"]
    for cat in sorted(results):
        c = results[cat].curve
        lines += [f"{cat},{t!r},{f!r},{p!r}" for t, f, p in zip(c.thresholds.tolist(), c.fpr.tolist(), c.pro.tolist())]
    return "\n".join(lines) + "\n"


def report_json(results: Mapping[str, CategoryResult], limits: Sequence[float], config_hash: str) -> dict:
    table = summarize(results, limits)
    return {
        "format": "geost-report v1",
        "config_hash": config_hash,
        "limits": [float(x) for x in limits],
        "categories": {
            cat: {
                "au_pro": {_limit_key(lim): table[cat][lim] for lim in limits},
                "regions": results[cat].curve.regions,
                "negatives": results[cat].curve.negatives,
                "scans": results[cat].scans,
            }
            for cat in sorted(results)
        },
        "mean": {_limit_key(lim): table["mean"][lim] for lim in limits},
        "reference": {
            "published_mean_au_pro": {k: {_limit_key(l): v for l, v in sorted(t.items())} for k, t in REFERENCE_AU_PRO.items()},
            "random_scores_au_pro_0.3": RANDOM_SCORE_AU_PRO_03,
        },
    }


def write_report(out_dir, results: Mapping[str, CategoryResult], limits: Sequence[float], config_hash: str,
                 csv_name: str = "report.csv") -> Dict[str, Path]:
    """Write the AU-PRO table, the curve dump and the JSON report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / csv_name, "curves": out_dir / "curves.csv", "json": out_dir / "report.json"}
    paths["csv"].write_text(report_csv(results, limits, config_hash))
    paths["curves"].write_text(curves_csv(results, config_hash))
    paths["json"].write_text(json.dumps(report_json(results, limits, config_hash), indent=1, sort_keys=True) + "\n")
    return paths


def read_report_csv(text: str) -> Tuple[Optional[str], List[Tuple[str, float, float]]]:
    """Parse a report CSV; returns (config hash, rows)."""
    config_hash = None
    body = []
    for line in text.splitlines():
        if line.startswith("# config_hash="):
            config_hash = line.split("=", 1)[1]
        elif not line.startswith("#"):
            body.append(line)
    reader = csv.DictReader(io.StringIO("\n".join(body)))
    if reader.fieldnames != ["category", "limit", "au_pro"]:
        raise ValueError(f"unexpected report columns {reader.fieldnames}")
    return config_hash, [(r["category"], float(r["limit"]), float(r["au_pro"])) for r in reader]


def format_table(table: Mapping[str, Mapping[float, float]], limits: Sequence[float]) -> str:
    """Plain-text AU-PRO table for terminals."""
    head = "category".ljust(14) + "".join(f"{lim:>9g}" for lim in limits)
    rows = [head]
    for cat, vals in table.items():
        rows.append(cat.ljust(14) + "".join(f"{vals[lim]:>9.3f}" for lim in limits))
    return "\n".join(rows)
