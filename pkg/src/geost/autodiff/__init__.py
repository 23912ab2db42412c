from .checkpoint import load_checkpoint, load_container, save_checkpoint, save_container
from .engine import (
    Tape,
    Var,
    add,
    add_n,
    affine,
    chamfer,
    concat_last,
    gather_rows,
    l2_rows,
    leaky_relu,
    mean,
    mean_pool_neighbors,
    reshape,
    scale,
    squared_l2_rows,
    sub,
    take_rows,
    total,
)
from .optim import ADAM_DEFAULTS, ParamStore, adam_step

__all__ = [
    "ADAM_DEFAULTS",
    "ParamStore",
    "Tape",
    "Var",
    "adam_step",
    "add",
    "add_n",
    "affine",
    "chamfer",
    "concat_last",
    "gather_rows",
    "l2_rows",
    "leaky_relu",
    "load_checkpoint",
    "load_container",
    "mean",
    "mean_pool_neighbors",
    "reshape",
    "save_checkpoint",
    "save_container",
    "scale",
    "squared_l2_rows",
    "sub",
    "take_rows",
    "total",
]
