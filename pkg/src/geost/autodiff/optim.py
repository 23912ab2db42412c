from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

ADAM_DEFAULTS = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


@dataclass
class ParamStore:
    """Named trainable arrays plus Adam moments and step counter."""

    params: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: p.copy() for k, p in self.params.items()},
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
        )

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        """Parameters under ``prefix`` with the prefix stripped."""
        return {k[len(prefix):]: p for k, p in self.params.items() if k.startswith(prefix)}


def adam_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    wd: float = 0.0,
    beta1: float = ADAM_DEFAULTS["beta1"],
    beta2: float = ADAM_DEFAULTS["beta2"],
    eps: float = ADAM_DEFAULTS["eps"],
) -> ParamStore:
    """Bias-corrected Adam with L2 weight decay added to the gradient.

    Parameters without an entry in ``grads`` still take a step driven by
    weight decay and their existing moments. Updates happen in place.
    """
    for name, g in grads.items():
        if name not in store.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != store.params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {store.params[name].shape}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        dt = p.dtype.type
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g.astype(p.dtype, copy=False)
        if wd:
            g = g + dt(wd) * p
        m = store.m[name]
        v = store.v[name]
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
    return store
