"""Experiment configuration read from INI-style ``key = value`` files.

Every key has a default matching the published network setting, so an empty
file (or no file) is a valid configuration. Unknown sections or keys are
rejected to catch typos early.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .dataio import SynthSpec
from .model import TrainConfig
from .sdae import SdaeConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class DataConfig:
    features: str = ""
    manifest: str = ""


@dataclass
class RunConfig:
    pretrain: bool = True
    pretrain_workers: int = 0  # 0 = one per CPU
    parallel_folds: bool = False
    fold_workers: int = 0
    validation_speaker: str = ""
    save_checkpoints: bool = True


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec | None = None
    sdae: SdaeConfig = field(default_factory=SdaeConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)
    seed: int = 0
    out: str = "runs/latest"

    def to_dict(self) -> dict:
        d = {
            "data": dataclasses.asdict(self.data),
            "synth": None if self.synth is None else _synth_dict(self.synth),
            "sdae": dataclasses.asdict(self.sdae),
            "finetune": _finetune_dict(self.finetune),
            "run": dataclasses.asdict(self.run),
            "seed": self.seed,
            "out": self.out,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        ft = dict(d.get("finetune", {}))
        if "lambda" in ft:
            ft["lam"] = ft.pop("lambda")
        synth = d.get("synth")
        if synth is not None:
            synth = dict(synth)
            if isinstance(synth.get("dims"), list):
                synth["dims"] = tuple(synth["dims"])
            synth = SynthSpec(**synth)
        return cls(DataConfig(**d.get("data", {})), synth, SdaeConfig(**d.get("sdae", {})),
                   TrainConfig(**ft), RunConfig(**d.get("run", {})),
                   int(d.get("seed", 0)), str(d.get("out", "runs/latest")))

    def validate(self) -> None:
        s = self.sdae
        if not 0.0 <= s.corruption <= 1.0:
            raise ConfigFileError("sdae.corruption must be in [0, 1]")
        f = self.finetune
        if min(s.hidden, f.bottleneck, f.local_hidden, f.global_hidden,
               s.batch_size, f.batch_size) < 1:
            raise ConfigFileError("widths and batch sizes must be >= 1")
        if min(s.epochs, f.epochs) < 0:
            raise ConfigFileError("epoch counts must be >= 0")
        if s.lr <= 0 or f.lr <= 0:
            raise ConfigFileError("learning rates must be positive")
        if s.beta < 0 or f.weight_decay < 0:
            raise ConfigFileError("penalty weights must be non-negative")


def _synth_dict(spec: SynthSpec) -> dict:
    d = dataclasses.asdict(spec)
    if isinstance(d["dims"], tuple):
        d["dims"] = list(d["dims"])
    return d


def _finetune_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["lambda"] = d.pop("lam")
    return d


_SECTIONS = {
    "data": DataConfig,
    "synth": SynthSpec,
    "sdae": SdaeConfig,
    "finetune": TrainConfig,
    "run": RunConfig,
}
_TOP_LEVEL = {"seed": int, "out": str}


def _coerce(raw: str, default, key: str):
    try:
        if key == "synth.dims":
            vals = tuple(int(p) for p in raw.replace(",", " ").split())
            return vals[0] if len(vals) == 1 else vals
        if isinstance(default, bool):
            return _BOOLS[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (ValueError, KeyError):
        raise ConfigFileError(f"{key}: cannot parse {raw!r}") from None
    return raw.strip()


_BOOLS = {"1": True, "true": True, "yes": True, "on": True,
          "0": False, "false": False, "no": False, "off": False}


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigFileError(str(exc).splitlines()[0]) from None
    cfg = ExperimentConfig()
    for section in cp.sections():
        if section == "experiment":
            for key, raw in cp.items(section):
                if key not in _TOP_LEVEL:
                    raise ConfigFileError(f"unknown key experiment.{key}")
                setattr(cfg, key, _TOP_LEVEL[key](raw.strip()))
            continue
        if section not in _SECTIONS:
            raise ConfigFileError(f"unknown section [{section}]")
        cls = _SECTIONS[section]
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in cp.items(section):
            attr = "lam" if (section == "finetune" and key == "lambda") else key
            if attr not in defaults:
                raise ConfigFileError(f"unknown key {section}.{key}")
            values[attr] = _coerce(raw, defaults[attr], f"{section}.{key}")
        try:
            obj = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(f"[{section}]: {exc}") from None
        if section == "synth":
            cfg.synth = obj
        else:
            setattr(cfg, section, obj)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
