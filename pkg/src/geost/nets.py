"""Local-feature-aggregation descriptor network and receptive-field decoder.

Residual block wiring for width ``d`` (all shared MLPs are one dense layer
followed by LeakyReLU)::

    entry   d    -> d/4
    LFA 1   d/4  -> d/2     (geometric MLP 4 -> d/4, concat neighbor features, mean)
    LFA 2   d/2  -> d       (geometric MLP 4 -> d/2, ...)
    exit    d    -> d
    skip    d    -> d       (applied to the block input)
    output  exit + skip

The network starts from zero features of width ``d``, applies ``blocks``
residual blocks and a head ``d -> d (LeakyReLU) -> d`` with linear output.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Mapping, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .pointcloud import NeighborGraph, build_knn_graph
from .pointcloud.cloud import CloudLike, as_points

Operand = Union[Var, np.ndarray]


@dataclass(frozen=True)
class NetConfig:
    d: int = 64
    k: int = 32
    blocks: int = 4
    use_absolute_coords: bool = False
    slope: float = 0.2
    dtype: str = "float32"

    def __post_init__(self):
        if self.d < 4 or self.d % 4:
            raise ValueError(f"descriptor width must be a positive multiple of 4, got {self.d}")
        if self.k < 1 or self.blocks < 1:
            raise ValueError("k and blocks must be positive")

    @property
    def hops(self) -> int:
        """Receptive-field radius in kNN hops (two LFA blocks per residual block)."""
        return 2 * self.blocks

    @property
    def geo_width(self) -> int:
        return 10 if self.use_absolute_coords else 4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DecoderConfig:
    d: int = 64
    m: int = 1024
    hidden: int = 128
    slope: float = 0.05
    dtype: str = "float32"

    def to_dict(self) -> dict:
        return asdict(self)


def geometric_features(p, p_j) -> np.ndarray:
    """``(p - p_j)`` followed by ``|p - p_j|``."""
    diff = np.asarray(p, dtype=np.float64) - np.asarray(p_j, dtype=np.float64)
    return np.concatenate([diff, [np.sqrt((diff**2).sum())]])


def geometric_feature_tensor(cloud: CloudLike, graph: NeighborGraph, absolute: bool = False) -> np.ndarray:
    """Pairwise features for every (point, neighbor) edge, shape ``[n, k, 4]``.

    With ``absolute`` the absolute coordinates of both points are appended
    (``[n, k, 10]``), which removes translation invariance.
    """
    pts = as_points(cloud)
    nb = pts[graph.neighbors]
    diff = pts[:, None, :] - nb
    dist = np.sqrt((diff**2).sum(-1, keepdims=True))
    parts = [diff, dist]
    if absolute:
        parts += [np.broadcast_to(pts[:, None, :], nb.shape), nb]
    return np.concatenate(parts, axis=-1)


def _layer_shapes(cfg: NetConfig):
    d = cfg.d
    shapes = {}
    for i in range(cfg.blocks):
        shapes[f"block{i}.entry"] = (d, d // 4)
        shapes[f"block{i}.lfa1"] = (cfg.geo_width, d // 4)
        shapes[f"block{i}.lfa2"] = (cfg.geo_width, d // 2)
        shapes[f"block{i}.exit"] = (d, d)
        shapes[f"block{i}.skip"] = (d, d)
    shapes["head.hidden"] = (d, d)
    shapes["head.out"] = (d, d)
    return shapes


def _decoder_shapes(cfg: DecoderConfig):
    return {
        "l1": (cfg.d, cfg.hidden),
        "l2": (cfg.hidden, cfg.hidden),
        "out": (cfg.hidden, 3 * cfg.m),
    }


INIT_SCHEMES = ("he", "uniform")


def init_bound(fan_in: int, slope: float, scheme: str = "he") -> float:
    """Half-width of the uniform weight distribution.

    ``he``: variance-preserving range for a LeakyReLU layer (Kaiming uniform).
    ``uniform``: ``1/sqrt(fan_in)``.
    """
    if scheme == "he":
        return float(np.sqrt(6.0 / ((1.0 + slope**2) * fan_in)))
    if scheme == "uniform":
        return float(1.0 / np.sqrt(fan_in))
    raise ValueError(f"unknown init scheme {scheme!r}; choose from {INIT_SCHEMES}")


def _init(shapes, seed: int, dtype, slope: float, scheme: str) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, (fan_in, fan_out) in shapes.items():
        bound = init_bound(fan_in, slope, scheme)
        params[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        params[f"{name}.b"] = np.zeros(fan_out, dtype=dtype)
    return params


def init_descriptor_params(cfg: NetConfig, seed: int, scheme: str = "he") -> Dict[str, np.ndarray]:
    """Weights uniform in ``[-init_bound, init_bound]``, zero biases."""
    return _init(_layer_shapes(cfg), seed, np.dtype(cfg.dtype), cfg.slope, scheme)


def init_decoder_params(cfg: DecoderConfig, seed: int, scheme: str = "he") -> Dict[str, np.ndarray]:
    return _init(_decoder_shapes(cfg), seed, np.dtype(cfg.dtype), cfg.slope, scheme)


def _mlp(x: Operand, P: Mapping[str, Operand], name: str, slope: float) -> Var:
    return ad.leaky_relu(ad.affine(x, P[f"{name}.W"], P[f"{name}.b"]), slope)


def lfa_forward(features: Operand, geo: Operand, neighbors: np.ndarray, P: Mapping[str, Operand],
                name: str, slope: float) -> Var:
    """One local feature aggregation block: ``[n, d_lfa] -> [n, 2 d_lfa]``."""
    width = P[f"{name}.W"].shape[1]
    fshape = features.shape
    if fshape[-1] != width:
        raise ValueError(f"{name}: input width {fshape[-1]} does not match d_lfa={width}")
    g = _mlp(geo, P, name, slope)
    nb = ad.gather_rows(features, neighbors)
    return ad.mean_pool_neighbors(ad.concat_last(g, nb))


def residual_block_forward(features: Operand, geo: Operand, neighbors: np.ndarray,
                           P: Mapping[str, Operand], block: int, slope: float) -> Var:
    d = features.shape[-1]
    if d % 4:
        raise ValueError(f"residual block width {d} is not divisible by 4")
    pre = f"block{block}"
    h = _mlp(features, P, f"{pre}.entry", slope)
    h = lfa_forward(h, geo, neighbors, P, f"{pre}.lfa1", slope)
    h = lfa_forward(h, geo, neighbors, P, f"{pre}.lfa2", slope)
    h = _mlp(h, P, f"{pre}.exit", slope)
    return ad.add(h, _mlp(features, P, f"{pre}.skip", slope))


def descriptor_graph(tape: Tape, geo: np.ndarray, graph: NeighborGraph, P: Mapping[str, Operand],
                     cfg: NetConfig) -> Var:
    """Record a full descriptor forward pass on ``tape``; returns ``[n, d]``."""
    if graph.k != cfg.k:
        raise ValueError(f"graph has k={graph.k} but the network expects k={cfg.k}")
    if geo.shape[-1] != cfg.geo_width:
        raise ValueError("geometric feature width does not match the absolute-coordinate setting")
    dtype = np.dtype(cfg.dtype)
    n = len(graph)
    geo_v = tape.constant(geo.astype(dtype))
    f = tape.constant(np.zeros((n, cfg.d), dtype=dtype))
    for i in range(cfg.blocks):
        f = residual_block_forward(f, geo_v, graph.neighbors, P, i, cfg.slope)
    h = _mlp(f, P, "head.hidden", cfg.slope)
    return ad.affine(h, P["head.out.W"], P["head.out.b"])


def decoder_graph(f: Var, P: Mapping[str, Operand], cfg: DecoderConfig) -> Var:
    """``[q, d] -> [q, m, 3]``; two LeakyReLU hidden layers, linear output."""
    if f.shape[-1] != cfg.d:
        raise ValueError(f"decoder expects width {cfg.d}, got {f.shape[-1]}")
    h = _mlp(f, P, "l1", cfg.slope)
    h = _mlp(h, P, "l2", cfg.slope)
    out = ad.affine(h, P["out.W"], P["out.b"])
    return ad.reshape(out, (f.shape[0], cfg.m, 3))


def descriptor_forward(cloud: CloudLike, graph: Optional[NeighborGraph], params: Mapping[str, np.ndarray],
                       cfg: NetConfig) -> np.ndarray:
    pts = as_points(cloud)
    if graph is None:
        graph = build_knn_graph(pts, cfg.k)
    geo = geometric_feature_tensor(pts, graph, cfg.use_absolute_coords)
    return descriptor_graph(Tape(), geo, graph, params, cfg).value


def decoder_forward(f: np.ndarray, params: Mapping[str, np.ndarray], cfg: DecoderConfig) -> np.ndarray:
    f = np.asarray(f)
    single = f.ndim == 1
    tape = Tape()
    out = decoder_graph(tape.constant(np.atleast_2d(f)), params, cfg).value
    return out[0] if single else out


class DescriptorNet:
    """Frozen network: a config plus parameter arrays, callable on clouds."""

    def __init__(self, cfg: NetConfig, params: Mapping[str, np.ndarray]):
        self.cfg = cfg
        self.params = dict(params)

    @property
    def d(self) -> int:
        return self.cfg.d

    def __call__(self, cloud: CloudLike, graph: Optional[NeighborGraph] = None) -> np.ndarray:
        return descriptor_forward(cloud, graph, self.params, self.cfg)
