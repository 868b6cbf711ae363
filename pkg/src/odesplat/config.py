"""Training configuration and its JSON file format."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .autodiff import ContractError
from .decoder import Caps, DecoderConfig
from .dynamics import FieldConfig, SolveConfig
from .encoder import EncoderConfig, GlobalEncoderConfig, HashGridConfig


@dataclass
class TrainConfig:
    lambda_dssim: float = 0.2
    warmup_steps: int = 3000
    total_steps: int = 8000
    seed: int = 0

    # ablation switches
    latent_space: bool = True
    neural_ode: bool = True
    affine: bool = True

    # kernel learning rates; positions decay exponentially over the run
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 1e-2
    lr_network: float = 1e-3
    lr_ode: float = 1e-4
    lr_hash: float = 1e-3

    # densification (steps counted over the whole run)
    densify: bool = True
    densify_from: int = 500
    densify_until: int | None = None  # None -> total_steps // 2
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-3
    percent_dense: float = 0.01
    prune_opacity: float = 5e-3
    max_particles: int = 2000
    regroup_interval: int = 500

    init: str = "points"  # "points" (t=0 ground-truth point set) or "unit_cube"
    init_count: int = 200
    init_opacity: float = 0.1
    split_threshold: float = 0.75
    split_inclusive: bool = False
    log_every: int = 50
    checkpoint_every: int = 0

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    dynamics: FieldConfig = field(default_factory=FieldConfig)
    solver: SolveConfig = field(default_factory=SolveConfig)

    def __post_init__(self):
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ContractError("lambda_dssim must lie in [0, 1]")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ContractError("need 0 <= warmup_steps < total_steps")
        if self.init not in ("points", "unit_cube"):
            raise ContractError(f"unknown init {self.init!r}")

    @property
    def densify_stop(self) -> int:
        return self.total_steps // 2 if self.densify_until is None else self.densify_until

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        validate(d)
        return _build(cls, d)

    def replace(self, **kw) -> "TrainConfig":
        return _build(TrainConfig, {**self.to_dict(), **kw})


_NESTED = {
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "dynamics": FieldConfig,
    "solver": SolveConfig,
    "hash_grid": HashGridConfig,
    "global_encoder": GlobalEncoderConfig,
    "caps": Caps,
}


def _build(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ContractError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        if k in _NESTED and isinstance(v, dict):
            v = _build(_NESTED[k], v)
        elif isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    return cls(**kw)


def _schema_for(cls) -> dict:
    props = {}
    for f in dataclasses.fields(cls):
        if f.name in _NESTED:
            props[f.name] = _schema_for(_NESTED[f.name])
            continue
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        if t.startswith("bool"):
            props[f.name] = {"type": "boolean"}
        elif t.startswith("int |"):
            props[f.name] = {"type": ["integer", "null"]}
        elif t.startswith("int"):
            props[f.name] = {"type": "integer"}
        elif t.startswith("float"):
            props[f.name] = {"type": "number"}
        elif t.startswith("str"):
            props[f.name] = {"type": "string"}
        elif t.startswith("tuple"):
            props[f.name] = {"type": "array", "items": {"type": "number"}}
        else:
            props[f.name] = {}
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = _schema_for(TrainConfig)


def validate(d: dict) -> None:
    try:
        jsonschema.validate(d, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ContractError(f"invalid config: {exc.message}") from exc


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def desk_config(**kw) -> TrainConfig:
    """Reduced network and table sizes that keep a run within minutes on one CPU core.

    The rotation and translation caps are raised so the affine head can express
    the full motion of the synthetic scenes, and the ODE field is autonomous.
    """
    cfg = TrainConfig(
        warmup_steps=600,
        total_steps=3000,
        encoder=EncoderConfig(
            HashGridConfig(levels=8, n_min=4, n_max=64, table_size=2**12),
            GlobalEncoderConfig(n_centers=32, k_neighbors=8, group_feat_dim=32, point_hidden=32, global_dim=32),
        ),
        decoder=DecoderConfig(width=64, caps=Caps(rotation=math.pi, translation=1.0)),
        dynamics=FieldConfig(width=64, autonomous=True),
    )
    return cfg.replace(**kw) if kw else cfg
