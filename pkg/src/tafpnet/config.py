"""INI run configuration with ``section.key=value`` overrides."""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .fusion import ModelConfig
from .scenes import SceneSpec
from .training import CostWeights, TrainConfig

SECTIONS = ("model", "data", "train", "paths")


class ConfigError(ValueError):
    """Unreadable, unknown or out-of-range configuration value."""


@dataclass
class DataConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    n_train: int = 8
    n_val: int = 2


@dataclass
class PathConfig:
    out_dir: str = "tafp_run"
    data_dir: str = ""  # empty: <out_dir>/data

    @property
    def data(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.out_dir) / "data"

    def sub(self, name: str) -> Path:
        return Path(self.out_dir) / name


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def to_ini(self) -> str:
        """Canonical INI text; parsing it back yields an equal config."""
        flat = flatten(self)
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            lines += [f"{k} = {_format(v)}" for k, v in sorted(flat[section].items())]
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def flatten(cfg: RunConfig) -> dict[str, dict]:
    train = {k: v for k, v in asdict(cfg.train).items() if k != "weights"}
    w = cfg.train.weights
    train.update(lambda_cls=w.cls, lambda_dice=w.dice, lambda_bce=w.bce, no_object_weight=w.no_object)
    data = dict(asdict(cfg.data.scene))
    data.update(n_train=cfg.data.n_train, n_val=cfg.data.n_val)
    return {"model": asdict(cfg.model), "data": data, "train": train, "paths": asdict(cfg.paths)}


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from exc


def build(values: dict[str, dict[str, str]]) -> RunConfig:
    """Build a validated config from raw string values, on top of the defaults."""
    defaults = flatten(RunConfig())
    parsed: dict[str, dict] = {s: dict(defaults[s]) for s in SECTIONS}
    for section, items in values.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
        for key, raw in items.items():
            if key not in defaults[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            parsed[section][key] = _coerce(raw, defaults[section][key], f"{section}.{key}")
    # clip length lives in both sections; setting either one sets both
    given_t = "T" in values.get("data", {})
    given_frames = "frames" in values.get("model", {})
    if given_t and not given_frames:
        parsed["model"]["frames"] = parsed["data"]["T"]
    elif given_frames and not given_t:
        parsed["data"]["T"] = parsed["model"]["frames"]
    try:
        t = parsed["train"]
        weights = CostWeights(t.pop("lambda_cls"), t.pop("lambda_dice"), t.pop("lambda_bce"), t.pop("no_object_weight"))
        d = parsed["data"]
        n_train, n_val = d.pop("n_train"), d.pop("n_val")
        if n_train < 1 or n_val < 1:
            raise ValueError("data.n_train and data.n_val must be >= 1")
        model = ModelConfig(**parsed["model"])
        scene = SceneSpec(**d)
        if scene.T != model.frames:
            raise ValueError(f"data.T={scene.T} differs from model.frames={model.frames}")
        return RunConfig(
            model=model,
            data=DataConfig(scene, n_train, n_val),
            train=TrainConfig(**t, weights=weights),
            paths=PathConfig(**parsed["paths"]),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    lhs, value = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    return section.strip(), key.strip(), value


def load(path=None, overrides=()) -> RunConfig:
    values: dict[str, dict[str, str]] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep T, H, W as written
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        values = {s: dict(parser.items(s)) for s in parser.sections()}
    for text in overrides:
        section, key, value = parse_override(text)
        values.setdefault(section, {})[key] = value
    return build(values)


def field_names(section: str) -> list[str]:
    return sorted(flatten(RunConfig())[section])

