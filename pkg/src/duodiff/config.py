"""Run configuration: one flat key-value file, overridable from the CLI.

Keys are namespaced (``model.full.embed_dim = 128``). Every output
artifact embeds the hash of the fully-resolved configuration, so a run is
reproducible from its artifacts alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .data import DatasetSpec
from .diffusion import SamplerSpec
from .duo import TrainConfig
from .uvit import DenoiserConfig

__all__ = ["ConfigError", "RunConfig", "ScheduleConfig", "parse_config",
           "config_hash", "DEFAULT_SHALLOW_LAYERS"]

DEFAULT_SHALLOW_LAYERS = 3


class ConfigError(Exception):
    """Unknown key, bad value, or missing required field (exit code 2)."""


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DatasetSpec = None
    schedule: ScheduleConfig = None
    model_full: DenoiserConfig = None
    model_shallow: DenoiserConfig = None
    train: TrainConfig = None
    adadiff: TrainConfig = None
    sampler: SamplerSpec = None

    def __post_init__(self):
        if self.data is None:
            self.data = DatasetSpec()
        if self.schedule is None:
            self.schedule = ScheduleConfig()
        if self.model_full is None:
            self.model_full = DenoiserConfig()
        if self.model_shallow is None:
            self.model_shallow = replace(self.model_full,
                                         num_layers=DEFAULT_SHALLOW_LAYERS)
        if self.train is None:
            self.train = TrainConfig(seed=self.seed)
        if self.adadiff is None:
            self.adadiff = TrainConfig(steps=2000, seed=self.seed,
                                       freeze_backbone=True)
        if self.sampler is None:
            self.sampler = SamplerSpec(seed=self.seed)


# section prefix -> (RunConfig attribute, dataclass type)
_SECTIONS = {
    "data": ("data", DatasetSpec),
    "schedule": ("schedule", ScheduleConfig),
    "model.full": ("model_full", DenoiserConfig),
    "model.shallow": ("model_shallow", DenoiserConfig),
    "train": ("train", TrainConfig),
    "adadiff": ("adadiff", TrainConfig),
    "sampler": ("sampler", SamplerSpec),
}

_SCALARS = {"seed": int, "out_dir": str}


def _coerce(field_type: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if field_type == "int":
            return int(raw)
        if field_type == "float":
            return float(raw)
        if field_type == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


def _read_kv_lines(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def parse_config(path: str | None = None,
                 overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an optional file plus 'key=value' overrides.

    CLI overrides win over file values; unknown keys are a ConfigError
    naming the key.
    """
    flat: dict[str, str] = {}
    if path is not None:
        try:
            with open(path) as fh:
                flat.update(_read_kv_lines(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path!r}: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, _, value = item.partition("=")
        flat[key.strip()] = value.strip()

    scalars: dict[str, object] = {}
    section_kwargs: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
    for key, raw in flat.items():
        if key in _SCALARS:
            scalars[key] = _coerce(_SCALARS[key].__name__, raw, key)
            continue
        section = next((s for s in sorted(_SECTIONS, key=len, reverse=True)
                        if key.startswith(s + ".")), None)
        if section is None:
            raise ConfigError(f"unknown config key {key!r}")
        fname = key[len(section) + 1:]
        ftypes = {f.name: f.type for f in fields(_SECTIONS[section][1])}
        if fname not in ftypes:
            raise ConfigError(f"unknown config key {key!r} "
                              f"(no field {fname!r} in {section})")
        section_kwargs[section][fname] = _coerce(str(ftypes[fname]), raw, key)

    cfg = RunConfig(**scalars)
    for section, (attr, cls) in _SECTIONS.items():
        kw = section_kwargs[section]
        if section == "model.shallow" and "num_layers" not in kw:
            kw["num_layers"] = DEFAULT_SHALLOW_LAYERS
        if section == "model.shallow":
            base = {f.name: getattr(cfg.model_full, f.name)
                    for f in fields(DenoiserConfig)}
            base.update(kw)
            kw = base
        if not kw and section != "model.shallow":
            continue
        current = getattr(cfg, attr)
        merged = {f.name: getattr(current, f.name) for f in fields(cls)}
        merged.update(kw)
        try:
            setattr(cfg, attr, cls(**merged))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid {section} config: {exc}") from exc
    return cfg


def to_flat(cfg: RunConfig) -> dict[str, str]:
    """Canonical flat representation used for hashing and provenance."""
    out = {"seed": str(cfg.seed), "out_dir": cfg.out_dir}
    for section, (attr, cls) in _SECTIONS.items():
        obj = getattr(cfg, attr)
        for f in fields(cls):
            out[f"{section}.{f.name}"] = repr(getattr(obj, f.name))
    return out


def config_hash(cfg: RunConfig) -> str:
    flat = to_flat(cfg)
    flat.pop("out_dir", None)  # where outputs land must not change identity
    canon = "\n".join(f"{k}={flat[k]}" for k in sorted(flat))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]
