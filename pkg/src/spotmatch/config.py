"""Run configuration from ``key = value`` text with dotted section prefixes.

Example::

    # comments and blank lines are ignored
    seed = 3
    model.channels = 32, 48, 64, 64, 64
    spot.top_k = 4
    train.epochs = 8

Unknown keys, repeated keys and malformed values are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import aggregation as agg
from . import backbone as bb
from . import fine, geometry, spot
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    pairs: int = 500
    held_out: int = 20
    size: int = 128
    scale_min: float = 1.0
    scale_max: float = 2.5
    max_rotation: float = 0.3
    seed: int = 1
    held_out_seed: int = 99


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ransac: geometry.RansacConfig = field(default_factory=geometry.RansacConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    checkpoint: str = ""
    log: str = ""


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(t) for t in s.split(","))


def _floats(s: str) -> tuple:
    return tuple(float(t) for t in s.split(","))


def _opt_float(s: str):
    return None if s.strip().lower() in ("none", "") else float(s)


def _opt_int(s: str):
    return None if s.strip().lower() in ("none", "") else int(s)


_MODEL_KEYS = {
    "model.channels": _ints,
    "model.coarse_dim": int,
    "model.fine_dim": int,
    "model.heads": int,
    "model.blocks": int,
    "model.layer_norm": _bool,
    "model.sequential": _bool,
    "model.fine_heads": int,
    "model.temperature": _opt_float,
    "model.threshold": float,
    "model.s_i": int,
    "model.clamp": _floats,
    "model.train_size": _ints,
    "spot.local_size": int,
    "spot.top_k": int,
    "spot.temperature": _opt_float,
    "spot.matrix": str,
    "spot.similarity": str,
}


_ANNOTATION_PARSERS = {
    "int": int, "float": float, "bool": _bool, "str": str,
    "float | None": _opt_float, "int | None": _opt_int,
}


def _section_keys(prefix: str, cls) -> dict:
    """Parsers for the scalar fields of a dataclass (annotations are strings)."""
    return {
        f"{prefix}.{f.name}": _ANNOTATION_PARSERS[str(f.type)]
        for f in fields(cls)
        if str(f.type) in _ANNOTATION_PARSERS
    }


KEYS = {
    **_MODEL_KEYS,
    **_section_keys("train", TrainConfig),
    **_section_keys("ransac", geometry.RansacConfig),
    **_section_keys("data", DataConfig),
    "seed": int,
    "io.checkpoint": str,
    "io.log": str,
}


def parse_pairs(text: str, origin: str = "<config>") -> dict:
    """Raw ``key -> value string`` map with line-numbered errors."""
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{no}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{origin}:{no}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{origin}:{no}: repeated key {key!r}")
        try:
            KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{no}: bad value for {key}: {exc}") from None
        out[key] = value
    return out


def _pick(vals: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: KEYS[k](v) for k, v in vals.items() if k.startswith(prefix + ".")}


def build_config(vals: dict) -> RunConfig:
    m = {k: KEYS[k](v) for k, v in vals.items() if k.startswith(("model.", "spot."))}
    base = ModelConfig()
    pyr = bb.PyramidConfig(
        channels=m.get("model.channels", base.pyramid.channels),
        coarse_dim=m.get("model.coarse_dim", base.pyramid.coarse_dim),
        fine_dim=m.get("model.fine_dim", base.pyramid.fine_dim),
    )
    sp = spot.SpotConfig(
        local_size=m.get("spot.local_size", 5),
        top_k=m.get("spot.top_k", 4),
        temperature=m.get("spot.temperature"),
        matrix=m.get("spot.matrix", "dual"),
        similarity=m.get("spot.similarity", "same"),
    )
    ag = agg.AggregationConfig(
        channels=pyr.coarse_dim,
        n_heads=m.get("model.heads", base.aggregation.n_heads),
        n_blocks=m.get("model.blocks", base.aggregation.n_blocks),
        layer_norm=m.get("model.layer_norm", False),
        sequential=m.get("model.sequential", False),
        spot=sp,
    )
    clamp = m.get("model.clamp", base.fine.clamp)
    if len(clamp) != 2 or not 0 < clamp[0] <= clamp[1]:
        raise ConfigError("model.clamp needs two increasing positive numbers")
    fc = fine.FineConfig(
        channels=pyr.fine_dim, n_heads=m.get("model.fine_heads", base.fine.n_heads),
        s_i=m.get("model.s_i", base.fine.s_i), clamp=tuple(clamp),
    )
    if fc.s_i < 1 or fc.s_i % 2 == 0:
        raise ConfigError("model.s_i must be a positive odd integer")
    ts = m.get("model.train_size", base.train_size)
    if len(ts) != 2:
        raise ConfigError("model.train_size needs two integers")
    model = ModelConfig(
        pyramid=pyr, aggregation=ag, fine=fc, temperature=m.get("model.temperature"),
        threshold=m.get("model.threshold", base.threshold), train_size=tuple(ts),
    )
    return RunConfig(
        model=model,
        train=replace(TrainConfig(), **_pick(vals, "train")),
        ransac=replace(geometry.RansacConfig(), **_pick(vals, "ransac")),
        data=replace(DataConfig(), **_pick(vals, "data")),
        seed=KEYS["seed"](vals.get("seed", "0")),
        checkpoint=vals.get("io.checkpoint", ""),
        log=vals.get("io.log", ""),
    )


def parse_config(text: str, origin: str = "<config>") -> RunConfig:
    try:
        return build_config(parse_pairs(text, origin))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{origin}: {exc}") from None


def load_config(path) -> RunConfig:
    p = Path(path)
    return parse_config(p.read_text(encoding="utf-8"), str(p))
