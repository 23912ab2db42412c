"""Student regression onto normalized teacher descriptors, and per-point scoring."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, adam_step
from .errors import TrainingError
from .nets import DescriptorNet, NetConfig, descriptor_graph, init_descriptor_params
from .parallel import thread_map
from .pointcloud.cloud import CloudLike
from .pretrain import Prepared, prepare

log = logging.getLogger(__name__)

MIN_SIGMA = 1e-12
# Teacher init uses seed, the decoder seed + 1; the student gets its own stream
# so it never starts from the teacher's initial weights.
STUDENT_SEED_OFFSET = 2
# Students start from 1/sqrt(fan_in) weights; teachers use the He range.
STUDENT_INIT = "uniform"


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def d(self) -> int:
        return len(self.mu)

    def normalize(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mu) / self.sigma


def stats_from_features(features: Iterable[np.ndarray]) -> FeatureStats:
    """Population mean and std over all rows, merged cloud by cloud in float64."""
    count = 0
    mean = None
    m2 = None
    for f in features:
        f = np.asarray(f, dtype=np.float64)
        n_b = len(f)
        if n_b == 0:
            continue
        mean_b = f.mean(axis=0)
        m2_b = ((f - mean_b) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = n_b, mean_b, m2_b
            continue
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta**2 * (count * n_b / total)
        count = total
    if mean is None:
        raise ValueError("feature statistics of an empty training set")
    sigma = np.sqrt(m2 / count)
    bad = np.nonzero(sigma < MIN_SIGMA)[0]
    if bad.size:
        raise TrainingError(f"teacher feature dimensions {bad.tolist()} are constant over the training set")
    return FeatureStats(mean, sigma)


def compute_feature_stats(teacher: Callable[[CloudLike], np.ndarray], clouds: Sequence[CloudLike]) -> FeatureStats:
    return stats_from_features(teacher(c) for c in clouds)


@dataclass(frozen=True)
class StudentConfig:
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-5
    n: int = 64000
    seed: int = 0
    val_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs <= 0 or self.n <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("student hyperparameters must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def regression_loss(student, prep: Prepared, target: np.ndarray, net: NetConfig,
                    tape: Optional[Tape] = None) -> ad.Var:
    """Mean over points of the squared distance to the normalized teacher target."""
    tape = tape if tape is not None else Tape()
    fs = descriptor_graph(tape, prep.geo, prep.graph, student, net)
    if fs.shape != target.shape:
        raise ValueError(f"student output {fs.shape} does not match target {target.shape}")
    return ad.mean(ad.squared_l2_rows(ad.sub(fs, target)))


def student_loss_and_grads(store: ParamStore, prep: Prepared, target: np.ndarray, net: NetConfig):
    tape = Tape()
    leaves = {k: tape.param(v) for k, v in store.params.items()}
    loss = regression_loss(leaves, prep, target, net, tape)
    tape.backward(loss)
    return float(loss.value), {k: v.grad for k, v in leaves.items() if v.grad is not None}


def split_validation(count: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation index split; validation is empty when it would leave no training data."""
    n_val = int(round(count * fraction))
    if fraction > 0 and count >= 2:
        n_val = max(1, n_val)
    n_val = min(n_val, count - 1)
    perm = np.random.default_rng([seed, 1]).permutation(count)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class StudentResult:
    best: ParamStore
    last: ParamStore
    best_epoch: int
    curve: List[Tuple[int, float, float]]


def train_student(
    teacher: DescriptorNet,
    stats: FeatureStats,
    clouds: Sequence[CloudLike],
    cfg: StudentConfig,
    threads: int = 1,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> StudentResult:
    """Fit a freshly initialized student to the teacher on anomaly-free clouds.

    Clouds must already be reduced to the working point count and normalized.
    Teacher weights are never touched. Model selection uses the held-out
    validation clouds, or the training loss when there are none.
    """
    net = teacher.cfg
    if stats.d != net.d:
        raise ValueError(f"feature statistics have d={stats.d}, teacher has d={net.d}")
    if not clouds:
        raise ValueError("student training needs at least one cloud")
    preps = thread_map(lambda c: prepare(c, net), clouds, threads)
    dtype = np.dtype(net.dtype)
    targets = [stats.normalize(teacher(p.points, p.graph)).astype(dtype) for p in preps]
    train_idx, val_idx = split_validation(len(preps), cfg.val_fraction, cfg.seed)

    store = ParamStore(init_descriptor_params(net, cfg.seed + STUDENT_SEED_OFFSET, STUDENT_INIT))
    best, best_epoch, best_val = store.copy(), 0, math.inf
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        losses = []
        for i in rng.permutation(train_idx):
            loss, grads = student_loss_and_grads(store, preps[i], targets[i], net)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite student loss at epoch {epoch}, cloud {i}")
            adam_step(store, grads, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(loss)
        train_loss = float(np.mean(losses))
        if len(val_idx):
            val_loss = float(np.mean([
                regression_loss(store.params, preps[i], targets[i], net).value for i in val_idx
            ]))
        else:
            val_loss = train_loss
        curve.append((epoch, train_loss, val_loss))
        log.info("student epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_epoch, best = val_loss, epoch, store.copy()
    return StudentResult(best, store, best_epoch, curve)


def score_cloud(teacher: DescriptorNet, student: DescriptorNet, stats: FeatureStats, cloud: CloudLike) -> np.ndarray:
    """Per-point norm of the student residual against the normalized teacher."""
    if teacher.cfg.d != student.cfg.d or stats.d != teacher.cfg.d:
        raise ValueError("teacher, student and statistics disagree on the descriptor width")
    prep = prepare(cloud, teacher.cfg)
    ft = stats.normalize(teacher(prep.points, prep.graph).astype(np.float64))
    fs = student(prep.points, prep.graph).astype(np.float64)
    return np.sqrt(((fs - ft) ** 2).sum(axis=-1))
