"""Run configuration: a flat ``dotted.key = value`` text file.

Example::

    seed = 0
    data.source = synth
    data.synth.kind = sine_mixture
    model.layers = 8
    train.lr = 1e-3
    importance.preset = family

Every key can be overridden on the command line as ``--dotted.key value``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .analysis import ImportanceConfig
from .data import SynthSpec
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synth"  # synth | csv
    path: str = ""
    time_column: bool = False
    split: str = "ratio_7_1_2"
    train_frac: float | None = None
    val_frac: float | None = None
    samples_per_day: int | None = None
    synth_kind: str = "sine_mixture"
    synth_channels: int = 2
    synth_length: int = 2048
    synth_noise: float = 0.0


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, max_epochs=8))
    importance: ImportanceConfig = field(default_factory=ImportanceConfig)
    importance_preset: str = "family"
    batch_limit: int | None = None
    analysis_batch_size: int = 64
    speed_runs: int = 30
    speed_warmup: int = 5

    def synth_spec(self) -> SynthSpec:
        d = self.data
        return SynthSpec(kind=d.synth_kind, channels=d.synth_channels, length=d.synth_length,
                         seed=self.seed, noise=d.synth_noise)  # fmt: skip

    def to_flat(self) -> dict[str, object]:
        out: dict[str, object] = {"seed": self.seed, "out": self.out}
        for f in fields(DataConfig):
            key = "data." + f.name.replace("synth_", "synth.")
            out[key] = getattr(self.data, f.name)
        for prefix, obj in (("model", self.model), ("train", self.train), ("importance", self.importance)):
            for f in fields(obj):
                out[f"{prefix}.{f.name}"] = getattr(obj, f.name)
        out["importance.preset"] = self.importance_preset
        out["analysis.batch_limit"] = self.batch_limit
        out["analysis.batch_size"] = self.analysis_batch_size
        out["speed.runs"] = self.speed_runs
        out["speed.warmup"] = self.speed_warmup
        return out

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_flat().items():
            lines.append(f"{k} = {'' if v is None else _fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if raw == "" or raw.lower() == "none":
        return None
    return kind(raw)


def _field_types(cls) -> dict[str, type]:
    types = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        t = t.replace(" | None", "")
        types[f.name] = {"int": int, "float": float, "bool": bool, "str": str}.get(t, str)
    return types


_KEY_TYPES: dict[str, type] = {"seed": int, "out": str}
for _f, _t in _field_types(DataConfig).items():
    _KEY_TYPES["data." + _f.replace("synth_", "synth.")] = _t
for _p, _cls in (("model", ModelConfig), ("train", TrainConfig), ("importance", ImportanceConfig)):
    for _f, _t in _field_types(_cls).items():
        _KEY_TYPES[f"{_p}.{_f}"] = _t
_KEY_TYPES.update({
    "importance.preset": str,
    "analysis.batch_limit": int,
    "analysis.batch_size": int,
    "speed.runs": int,
    "speed.warmup": int,
})  # fmt: skip

KNOWN_KEYS = frozenset(_KEY_TYPES)


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in KNOWN_KEYS:
            raise ConfigError(f"line {n}: unknown key {k!r}")
        out[k] = v
    return out


def build(values: dict[str, str]) -> RunConfig:
    """Resolve raw string values (file + overrides) into a RunConfig."""
    typed = {}
    for k, v in values.items():
        if k not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {k!r}")
        try:
            typed[k] = _coerce(v, _KEY_TYPES[k]) if isinstance(v, str) else v
        except ValueError as e:
            raise ConfigError(f"{k}: {e}") from None
    seed = typed.get("seed", 0) or 0

    def section(prefix):
        return {k[len(prefix) + 1 :]: v for k, v in typed.items() if k.startswith(prefix + ".") and v is not None}

    data_kw = {k.replace("synth.", "synth_"): v for k, v in section("data").items()}
    data = DataConfig(**data_kw)
    model_kw = section("model")
    if data.source == "csv":
        model_kw.setdefault("t_in", 336)
        model_kw.setdefault("t_out", 96)
    model_kw.setdefault("seed", seed)
    train_kw = section("train")
    train_kw.setdefault("seed", seed)
    train_kw.setdefault("lr", 1e-3)
    train_kw.setdefault("max_epochs", 8)
    imp_kw = section("importance")
    preset = imp_kw.pop("preset", "family")
    try:
        model = ModelConfig(**model_kw)
        train = TrainConfig(**train_kw)
        importance = ImportanceConfig.preset(preset, **imp_kw)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    rc = RunConfig(
        seed=seed,
        out=typed.get("out") or "runs/default",
        data=data,
        model=model,
        train=train,
        importance=importance,
        importance_preset=preset,
        batch_limit=typed.get("analysis.batch_limit"),
        analysis_batch_size=typed.get("analysis.batch_size") or 64,
        speed_runs=typed.get("speed.runs") or 30,
        speed_warmup=typed.get("speed.warmup") or 5,
    )
    if data.source not in ("synth", "csv"):
        raise ConfigError(f"data.source must be synth or csv, got {data.source!r}")
    return rc


def load(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_text(p.read_text(encoding="utf-8")))
    values.update(overrides or {})
    return build(values)


def replace_run(rc: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(rc, **changes)
