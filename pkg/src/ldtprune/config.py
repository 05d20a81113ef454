"""Experiment configuration: a flat dotted key-value text format.

Unknown keys are rejected outright so a typo in a hyperparameter name can
never silently run a wrong experiment.  ``parse(render(cfg)) == cfg``.
"""

import dataclasses
from dataclasses import dataclass, field

from .data import DatasetConfig
from .detector import ArchConfig
from .errors import ConfigError
from .ldt import LdtConfig
from .pruning import PruneConfig


@dataclass
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 5.0
    batch_size: int = 16
    epochs: int = 30


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ldt: LdtConfig = field(default_factory=LdtConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)


_SECTIONS = ("data", "arch", "optim", "ldt", "prune")


def _coerce(raw, typ, key):
    try:
        if typ is int:
            v = int(raw)
        elif typ is float:
            v = float(raw)
        elif typ is bool:
            if raw not in ("true", "false"):
                raise ValueError(raw)
            v = raw == "true"
        elif typ is str:
            v = raw
        elif typ is tuple:
            v = tuple(int(p) for p in raw.split(","))
        else:
            raise ConfigError(f"unsupported field type for {key}")
        return v
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {key}") from None


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render(cfg):
    """Serialize a config to the text format, keys in stable order."""
    lines = [f"seed = {cfg.seed}", f"out_dir = {cfg.out_dir}"]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse(text):
    """Parse the text format; unknown keys raise ConfigError."""
    cfg = ExperimentConfig()
    section_fields = {
        s: {f.name: f for f in dataclasses.fields(getattr(cfg, s))}
        for s in _SECTIONS
    }
    overrides = {s: {} for s in _SECTIONS}
    top = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in stripped.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in section_fields or name not in section_fields[section]:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            typ = type(getattr(getattr(cfg, section), name))
            overrides[section][name] = _coerce(raw, typ, key)
        elif key == "seed":
            top["seed"] = _coerce(raw, int, key)
        elif key == "out_dir":
            top["out_dir"] = raw
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")

    kwargs = dict(top)
    for s in _SECTIONS:
        base = dataclasses.asdict(getattr(cfg, s))
        base.update(overrides[s])
        cls = type(getattr(cfg, s))
        try:
            kwargs[s] = cls(**base)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    return ExperimentConfig(**kwargs)


def load(path):
    with open(path) as fh:
        return parse(fh.read())


def save(cfg, path):
    with open(path, "w") as fh:
        fh.write(render(cfg))
