"""Run configuration: flat ``section.key = value`` text with presets and a stable hash.

Defaults follow the published hyperparameters where they exist (the
``paper`` preset); ``desk`` shrinks everything to a laptop-sized run.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

from .anomaly import StudentConfig
from .errors import ConfigError
from .nets import NetConfig
from .pointcloud import SceneConfig
from .pretrain import PretrainConfig
from .synth import DEFECT_KINDS, SURFACES, SynthConfig

Value = Union[int, float, bool, str, Tuple]

DEFAULTS: Dict[str, Value] = {
    "run.seed": 0,
    "scene.models_per_scene": 10,
    "scene.placement_range": 3.0,
    "scene.points_per_model": 8192,
    "scene.train": 1000,
    "scene.val": 50,
    "model.d": 64,
    "model.k": 32,
    "model.blocks": 4,
    "model.use_absolute_coords": False,
    "model.random_teacher": False,
    "model.dtype": "float32",
    "pretrain.epochs": 250,
    "pretrain.lr": 1e-3,
    "pretrain.weight_decay": 1e-6,
    "pretrain.queries": 16,
    "pretrain.n": 64000,
    "pretrain.m": 1024,
    "student.epochs": 100,
    "student.lr": 1e-3,
    "student.weight_decay": 1e-5,
    "student.n": 64000,
    "student.val_fraction": 0.1,
    "synth.surfaces": ("plane",),
    "synth.train": 20,
    "synth.test": 10,
    "synth.resolution": 256,
    "synth.defects": DEFECT_KINDS,
    "synth.defects_per_scan": 2,
    "eval.limits": (0.01, 0.05, 0.1, 0.2, 0.3),
}

PRESETS: Dict[str, Dict[str, Value]] = {
    "paper": {},
    "desk": {
        "scene.train": 30,
        "scene.val": 5,
        "model.d": 16,
        "model.k": 8,
        "pretrain.epochs": 30,
        "pretrain.n": 2048,
        "pretrain.m": 128,
        "model.blocks": 2,
        "student.epochs": 100,
        "student.n": 2048,
        "scene.points_per_model": 4096,
        "synth.resolution": 45,
    },
}

_CHOICES = {
    "synth.surfaces": SURFACES,
    "synth.defects": DEFECT_KINDS,
    "model.dtype": ("float32", "float64"),
}


def _parse_value(key: str, raw: str) -> Value:
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = tuple(x.strip() for x in raw.split(",") if x.strip())
            if not items:
                raise ValueError("empty list")
            return tuple(float(x) for x in items) if isinstance(default[0], float) else items
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None


def _format_value(v: Value) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _validate(values: Mapping[str, Value]) -> None:
    for key, allowed in _CHOICES.items():
        v = values[key]
        bad = [x for x in (v if isinstance(v, tuple) else (v,)) if x not in allowed]
        if bad:
            raise ConfigError(f"{key}: unknown value(s) {bad}; choose from {list(allowed)}")
    limits = values["eval.limits"]
    if any(not 0 < x <= 1 for x in limits):
        raise ConfigError("eval.limits must lie in (0, 1]")
    positive = [k for k, v in values.items()
                if isinstance(v, (int, float)) and not isinstance(v, bool) and k not in ("run.seed", "student.val_fraction")
                and v <= 0]
    if positive:
        raise ConfigError(f"must be positive: {', '.join(sorted(positive))}")
    pooled = values["scene.models_per_scene"] * values["scene.points_per_model"]
    if pooled < values["pretrain.n"]:
        raise ConfigError(f"scenes pool {pooled} points, fewer than pretrain.n = {values['pretrain.n']}")
    if not 0 <= values["student.val_fraction"] < 1:
        raise ConfigError("student.val_fraction must lie in [0, 1)")


class RunConfig:
    """Fully resolved settings for every stage."""

    def __init__(self, values: Mapping[str, Value]):
        unknown = sorted(set(values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = dict(DEFAULTS)
        # Round-trip through text so e.g. an int given for a float key hashes the same.
        merged.update({k: _parse_value(k, _format_value(v)) for k, v in values.items()})
        _validate(merged)
        self.values = merged
        # Construct once so invalid combinations fail early.
        self.net, self.pretrain, self.student, self.synth
        self.scene(0)

    def __getitem__(self, key: str) -> Value:
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["run.seed"])

    def with_overrides(self, overrides: Mapping[str, Value]) -> "RunConfig":
        return RunConfig({**self.values, **overrides})

    @property
    def net(self) -> NetConfig:
        v = self.values
        return NetConfig(d=v["model.d"], k=v["model.k"], blocks=v["model.blocks"],
                         use_absolute_coords=v["model.use_absolute_coords"], dtype=v["model.dtype"])

    @property
    def pretrain(self) -> PretrainConfig:
        v = self.values
        return PretrainConfig(epochs=v["pretrain.epochs"], lr=v["pretrain.lr"], weight_decay=v["pretrain.weight_decay"],
                              queries_per_step=v["pretrain.queries"], n=v["pretrain.n"], m=v["pretrain.m"],
                              seed=self.seed, net=self.net)

    @property
    def student(self) -> StudentConfig:
        v = self.values
        return StudentConfig(epochs=v["student.epochs"], lr=v["student.lr"], weight_decay=v["student.weight_decay"],
                             n=v["student.n"], seed=self.seed, val_fraction=v["student.val_fraction"])

    @property
    def synth(self) -> SynthConfig:
        v = self.values
        return SynthConfig(surfaces=v["synth.surfaces"], train=v["synth.train"], test=v["synth.test"],
                           resolution=v["synth.resolution"], defects=v["synth.defects"],
                           defects_per_scan=v["synth.defects_per_scan"])

    def scene(self, seed: int) -> SceneConfig:
        v = self.values
        return SceneConfig(models_per_scene=v["scene.models_per_scene"], placement_range=v["scene.placement_range"],
                           points_per_scene=v["pretrain.n"], seed=seed)

    @property
    def limits(self) -> Tuple[float, ...]:
        return tuple(self.values["eval.limits"])

    def dumps(self) -> str:
        lines = ["# geost resolved config"]
        lines += [f"{k} = {_format_value(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    def write(self, directory) -> Path:
        path = Path(directory) / "config.resolved.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Value]:
    out: Dict[str, Value] = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'section.key = value'")
        key, raw = (x.strip() for x in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{no}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{no}: duplicate key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def load_config(path=None, preset: Optional[str] = None, overrides: Optional[Mapping[str, Value]] = None) -> RunConfig:
    """Preset values, then the file, then explicit overrides."""
    values: Dict[str, Value] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(p)))
    values.update(overrides or {})
    return RunConfig(values)
