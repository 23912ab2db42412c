"""Independent, deliberately naive reference implementations for the evaluation metrics."""
from collections import deque

import numpy as np

from geost.evaluation import AnomalyMap
from geost.pointcloud import OrganizedScan


def components_oracle(mask):
    """Flood fill with 8-connectivity, labelling in row-major discovery order."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=int)
    count = 0
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not labels[r, c]:
                count += 1
                labels[r, c] = count
                queue = deque([(r, c)])
                while queue:
                    y, x = queue.popleft()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not labels[yy, xx]:
                                labels[yy, xx] = count
                                queue.append((yy, xx))
    return labels, count


def pro_oracle(maps, scans):
    """Recompute FPR and per-region overlap from scratch at every distinct threshold."""
    regions, negatives, scores = [], [], []
    for amap, scan in zip(maps, scans):
        labels, count = components_oracle(scan.gt_mask)
        for lab in range(1, count + 1):
            pix = (labels == lab) & scan.valid
            if pix.any():
                regions.append((len(scores), pix))
        negatives.append(scan.valid & ~scan.gt_mask)
        scores.append(amap.scores)
    thresholds = sorted({float(v) for s, sc in zip(scores, scans) for v in s[sc.valid]}, reverse=True)
    n_neg = sum(int(n.sum()) for n in negatives)
    fpr, pro = [0.0], [0.0]
    for t in thresholds:
        pred = [np.where(sc.valid, s >= t, False) for s, sc in zip(scores, scans)]
        fpr.append(sum(int((p & n).sum()) for p, n in zip(pred, negatives)) / n_neg)
        pro.append(float(np.mean([(pred[i] & pix).sum() / pix.sum() for i, pix in regions])))
    return np.array([np.inf] + thresholds), np.array(fpr), np.array(pro)


def au_pro_oracle(fpr, pro, limit):
    """Integrate the piecewise-linear curve segment by segment, clipped at the limit."""
    area = 0.0
    for i in range(len(fpr) - 1):
        x0, x1, y0, y1 = fpr[i], fpr[i + 1], pro[i], pro[i + 1]
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2
    if fpr[-1] < limit:
        area += (limit - fpr[-1]) * pro[-1]
    return area / limit


def dense_harmonic_oracle(valid, seeded, values):
    """Assemble and solve the graph-Laplacian system directly."""
    h, w = valid.shape
    free = valid & ~seeded
    idx = -np.ones(h * w, dtype=int)
    idx[free.ravel()] = np.arange(free.sum())
    A = np.zeros((free.sum(), free.sum()))
    b = np.zeros(free.sum())
    for p in np.flatnonzero(free):
        r, c = divmod(p, w)
        i = idx[p]
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < h and 0 <= cc < w and valid[rr, cc]:
                A[i, i] += 1
                q = rr * w + cc
                if free.ravel()[q]:
                    A[i, idx[q]] -= 1
                else:
                    b[i] += values.ravel()[q]
    out = values.astype(float).copy()
    out[free] = np.linalg.solve(A, b)
    return out


def random_scene(rng, size=16, regions=3, invalid=0.1):
    gt = np.zeros((size, size), dtype=bool)
    for _ in range(regions):
        r, c = rng.integers(0, size - 3, size=2)
        gt[r:r + rng.integers(1, 4), c:c + rng.integers(1, 5)] = True
    valid = rng.random((size, size)) > invalid
    valid[gt] |= rng.random(gt.sum()) > 0.2
    xyz = np.zeros((size, size, 3))
    scan = OrganizedScan(xyz, valid, gt)
    # Quantized scores force many ties.
    scores = np.round(rng.random((size, size)) * 8 + 3 * gt, 0)
    return AnomalyMap(np.where(valid, scores, np.nan), valid), scan
