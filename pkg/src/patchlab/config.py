"""Experiment configuration: INI-style sections, flag overrides, resolved dumps.

A run directory always receives the fully resolved configuration
(resolved.cfg) so any artifact can be reproduced byte-exactly from that
file plus the tool version it records.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .adversary import EvasionConfig, GanConfig
from .backbones import BackboneSpec
from .classifier import TrainConfig
from .errors import ConfigError
from .synth import SynthConfig

OUT_ROOT_ENV = "PATCHLAB_OUT"


@dataclass
class RunConfig:
    seed: int = 0
    out: str = ""
    threads: int = 0  # 0: leave worker limits alone


@dataclass
class AnalysisConfig:
    k: int = 100
    lam: float = 1.0
    cluster_mode: str = "top"
    exaggerate_steps: int = 200
    exaggerate_lr: float = 0.01


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    dataset: SynthConfig = field(default_factory=SynthConfig)
    model: BackboneSpec = field(default_factory=BackboneSpec)
    training: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    adversary_gan: GanConfig = field(default_factory=GanConfig)
    adversary_evasion: EvasionConfig = field(default_factory=EvasionConfig)

    def out_dir(self) -> Path:
        if self.run.out:
            return Path(self.run.out)
        root = os.environ.get(OUT_ROOT_ENV, "runs")
        return Path(root) / f"run_seed{self.run.seed}"


_SECTIONS = {
    "run": ("run", RunConfig),
    "dataset": ("dataset", SynthConfig),
    "model": ("model", BackboneSpec),
    "training": ("training", TrainConfig),
    "analysis": ("analysis", AnalysisConfig),
    "adversary.gan": ("adversary_gan", GanConfig),
    "adversary.evasion": ("adversary_evasion", EvasionConfig),
}


def _parse_value(raw: str, target_type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is str:
        return raw
    raise ConfigError(f"unsupported config field type {target_type}")


def _apply_section(obj, items: dict[str, str], section: str):
    valid = {f.name: f.type for f in fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in valid:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        ftype = type(getattr(obj, key)) if getattr(obj, key) is not None else valid[key]
        if getattr(obj, key) is None:
            # optional int fields
            updates[key] = None if raw.strip().lower() in ("", "none") else int(raw)
        else:
            updates[key] = _parse_value(raw, ftype)
    try:
        return replace(obj, **updates) if updates else obj
    except TypeError:
        for k, v in updates.items():
            setattr(obj, k, v)
        return obj


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None,
                seed: int | None = None, out: str | None = None,
                threads: int | None = None) -> ExperimentConfig:
    """Build a config from defaults, then the INI file, then flag overrides
    (strictly highest precedence). Overrides look like ``section.key=value``."""
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path, encoding="utf-8")
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section == "meta":
                continue
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            attr, _ = _SECTIONS[section]
            setattr(cfg, attr, _apply_section(getattr(cfg, attr),
                                              dict(parser[section]), section))
    for ov in overrides or []:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override must be section.key=value, got {ov!r}")
        dotted, value = ov.split("=", 1)
        section, key = dotted.rsplit(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in override")
        attr, _ = _SECTIONS[section]
        setattr(cfg, attr, _apply_section(getattr(cfg, attr), {key: value}, section))
    if seed is not None:
        cfg.run.seed = seed
        cfg.dataset = replace(cfg.dataset, seed=seed)
        cfg.training.seed = seed
        cfg.adversary_gan = replace(cfg.adversary_gan, seed=seed)
        cfg.adversary_evasion = replace(cfg.adversary_evasion, seed=seed)
    if out is not None:
        cfg.run.out = out
    if threads is not None:
        cfg.run.threads = threads
    return cfg


def dump_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    parser = configparser.ConfigParser()
    parser["meta"] = {"tool": "patchlab", "version": __version__}
    for section, (attr, _) in _SECTIONS.items():
        obj = getattr(cfg, attr)
        parser[section] = {k: ("" if v is None else str(v))
                           for k, v in asdict(obj).items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
    return path
