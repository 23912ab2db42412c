"""Self-supervised teacher pretraining by reconstructing local receptive fields."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, adam_step
from .errors import TrainingError
from .nets import (
    DecoderConfig,
    NetConfig,
    decoder_graph,
    descriptor_graph,
    geometric_feature_tensor,
    init_decoder_params,
    init_descriptor_params,
)
from .parallel import thread_map
from .pointcloud import NeighborGraph, build_knn_graph, center_receptive_field, receptive_field
from .pointcloud.cloud import CloudLike, as_points

log = logging.getLogger(__name__)

TEACHER = "teacher."
DECODER = "decoder."
# Separate RNG stream for the fixed validation query sets.
_VAL_STREAM = 7919


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 250
    lr: float = 1e-3
    weight_decay: float = 1e-6
    queries_per_step: int = 16
    n: int = 64000
    m: int = 1024
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.epochs, self.queries_per_step, self.n, self.m) <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("pretraining hyperparameters must be positive")

    @property
    def decoder(self) -> DecoderConfig:
        return DecoderConfig(d=self.net.d, m=self.m, dtype=self.net.dtype)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["net"] = self.net.to_dict()
        return out


@dataclass
class Prepared:
    """A cloud with its kNN graph and pairwise geometric features."""

    points: np.ndarray
    graph: NeighborGraph
    geo: np.ndarray


def prepare(cloud: CloudLike, net: NetConfig) -> Prepared:
    pts = as_points(cloud)
    graph = build_knn_graph(pts, net.k)
    return Prepared(pts, graph, geometric_feature_tensor(pts, graph, net.use_absolute_coords))


def centered_fields(prep: Prepared, queries: Sequence[int], hops: int, dtype) -> List[np.ndarray]:
    return [
        center_receptive_field(prep.points, receptive_field(prep.graph, int(q), hops)).astype(dtype)
        for q in queries
    ]


def reconstruction_loss(teacher: Mapping, decoder: Mapping, prep: Prepared, queries: Sequence[int],
                        net: NetConfig, dec: DecoderConfig, tape: Optional[Tape] = None,
                        targets: Optional[List[np.ndarray]] = None) -> ad.Var:
    """Mean Chamfer distance between decoded descriptors and their centered receptive fields."""
    queries = np.asarray(queries, dtype=np.int64)
    if queries.size == 0:
        raise ValueError("query set is empty")
    if queries.min() < 0 or queries.max() >= len(prep.points):
        raise IndexError("query index out of range")
    tape = tape if tape is not None else Tape()
    if targets is None:
        targets = centered_fields(prep, queries, net.hops, np.dtype(net.dtype))
    feats = descriptor_graph(tape, prep.geo, prep.graph, teacher, net)
    recon = decoder_graph(ad.take_rows(feats, queries), decoder, dec)
    terms = [ad.chamfer(ad.take_rows(recon, i), targets[i]) for i in range(len(queries))]
    return ad.scale(ad.add_n(terms), 1.0 / len(queries))


def init_store(cfg: PretrainConfig) -> ParamStore:
    teacher = init_descriptor_params(cfg.net, cfg.seed)
    decoder = init_decoder_params(cfg.decoder, cfg.seed + 1)
    params = {TEACHER + k: v for k, v in teacher.items()}
    params.update({DECODER + k: v for k, v in decoder.items()})
    return ParamStore(params)


def _leaves(tape: Tape, store: ParamStore):
    leaves = {name: tape.param(p) for name, p in store.params.items()}
    teacher = {k[len(TEACHER):]: v for k, v in leaves.items() if k.startswith(TEACHER)}
    decoder = {k[len(DECODER):]: v for k, v in leaves.items() if k.startswith(DECODER)}
    return leaves, teacher, decoder


def loss_and_grads(store: ParamStore, prep: Prepared, queries, cfg: PretrainConfig,
                   targets=None) -> Tuple[float, Dict[str, np.ndarray]]:
    tape = Tape()
    leaves, teacher, decoder = _leaves(tape, store)
    loss = reconstruction_loss(teacher, decoder, prep, queries, cfg.net, cfg.decoder, tape, targets)
    tape.backward(loss)
    grads = {name: leaf.grad for name, leaf in leaves.items() if leaf.grad is not None}
    return float(loss.value), grads


def check_normalized(preps: Sequence[Prepared], tol: float = 1e-6) -> float:
    """Scaling factor of already-normalized data; must be 1."""
    total = sum(float(p.graph.distances.sum()) for p in preps)
    count = sum(p.graph.distances.size for p in preps)
    s = total / count
    if abs(s - 1.0) > tol:
        raise TrainingError(
            f"pretraining scenes are not normalized: their scaling factor is {s:.6g}, expected 1"
        )
    return s


@dataclass
class PretrainResult:
    best: ParamStore
    last: ParamStore
    best_epoch: int
    curve: List[Tuple[int, float, float]]
    meta: dict


def pretrain_teacher(
    train: Sequence[CloudLike],
    val: Sequence[CloudLike],
    cfg: PretrainConfig,
    scale: float,
    threads: int = 1,
    resume: Optional[PretrainResult] = None,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
    extra_meta: Optional[Mapping] = None,
) -> PretrainResult:
    """Jointly train teacher and decoder with Adam; keep the lowest-validation model.

    ``train`` and ``val`` must already be divided by ``scale``. Per-epoch RNG
    streams are derived from ``(seed, epoch)``, so resuming from ``resume``
    reproduces an uninterrupted run exactly.
    """
    if not train or not val:
        raise ValueError("pretraining needs non-empty training and validation sets")
    preps = thread_map(lambda c: prepare(c, cfg.net), train, threads)
    val_preps = thread_map(lambda c: prepare(c, cfg.net), val, threads)
    check_normalized(preps)
    dtype = np.dtype(cfg.net.dtype)
    hops = cfg.net.hops

    val_sets = []
    for j, vp in enumerate(val_preps):
        rng = np.random.default_rng([cfg.seed, _VAL_STREAM, j])
        q = rng.choice(len(vp.points), size=min(cfg.queries_per_step, len(vp.points)), replace=False)
        val_sets.append((q, centered_fields(vp, q, hops, dtype)))

    meta = {
        "kind": "teacher",
        "scale": scale,
        "pretrain": cfg.to_dict(),
        "net": cfg.net.to_dict(),
        "decoder": cfg.decoder.to_dict(),
        "adam": {"beta1": cfg.beta1, "beta2": cfg.beta2, "eps": cfg.eps},
    }
    meta.update(extra_meta or {})

    if resume is not None:
        store = resume.last.copy()
        best = resume.best.copy()
        best_epoch = resume.best_epoch
        curve = list(resume.curve)
    else:
        store = init_store(cfg)
        best, best_epoch, curve = store.copy(), 0, []
    best_val = min((c[2] for c in curve if c[0] == best_epoch), default=math.inf)

    for epoch in range(len(curve) + 1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        losses = []
        for si in rng.permutation(len(preps)):
            prep = preps[si]
            q = rng.choice(len(prep.points), size=min(cfg.queries_per_step, len(prep.points)), replace=False)
            loss, grads = loss_and_grads(store, prep, q, cfg)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite reconstruction loss at epoch {epoch}, scene {si}, step {store.step + 1}")
            adam_step(store, grads, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
            losses.append(loss)
        val_loss = validation_loss(store, val_preps, val_sets, cfg)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        train_loss = float(np.mean(losses))
        curve.append((epoch, train_loss, val_loss))
        log.info("pretrain epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val, best_epoch, best = val_loss, epoch, store.copy()

    meta = dict(meta, best_epoch=best_epoch, best_val_loss=best_val if curve else None)
    return PretrainResult(best, store, best_epoch, curve, meta)


def validation_loss(store: ParamStore, val_preps, val_sets, cfg: PretrainConfig) -> float:
    teacher = store.subset(TEACHER)
    decoder = store.subset(DECODER)
    vals = []
    for vp, (q, targets) in zip(val_preps, val_sets):
        vals.append(float(reconstruction_loss(teacher, decoder, vp, q, cfg.net, cfg.decoder, targets=targets).value))
    return float(np.mean(vals))


def write_curve(path, curve) -> None:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{e},{tr!r},{va!r}" for e, tr, va in curve]
    Path(path).write_text("\n".join(lines) + "\n")


def read_curve(path) -> List[Tuple[int, float, float]]:
    rows = Path(path).read_text().splitlines()[1:]
    out = []
    for row in rows:
        e, tr, va = row.split(",")
        out.append((int(e), float(tr), float(va)))
    return out
