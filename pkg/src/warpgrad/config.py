"""Run configuration: nested dataclasses validated before any compute."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError
from .losses import LossWeights
from .models import ModelSpec

COMMANDS = ("train-flow", "train-gen", "train-anim", "train-men")


@dataclass
class TaskConfig:
    kind: str = "translation"  # warp kind, "clip" or "skeleton"
    size: int = 64
    seed: int = 0
    joints: int = 8
    params: dict = field(default_factory=dict)
    frames: int = 4  # clip length K for train-anim
    sequence_length: int = 64  # skeleton K for train-men
    sigma_n: float = 2.0
    pool: int = 1  # training pairs (seeds seed .. seed+pool-1) for train-flow / train-gen
    heldout: int = 0  # held-out pairs scored at the end of train-flow / train-gen


@dataclass
class OptimConfig:
    lr: float = 1e-4
    lr_d_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8


@dataclass
class ScheduleConfig:
    steps: int = 2000
    sample_every: int = 500
    log_every: int = 10
    eval_sequences: int = 16  # held-out skeleton sequences for train-men


@dataclass
class ExtractorConfig:
    channels: list = field(default_factory=lambda: [16, 32])
    seed: int = 1234


@dataclass
class MenConfig:
    hidden: int = 64
    dilations: list = field(default_factory=lambda: [1, 2, 4])
    kernel: int = 3


@dataclass
class AnimConfig:
    mode: str = "sequential"  # or "independent": one GFLA pass per frame from the source


@dataclass
class RunConfig:
    command: str = "train-flow"
    seed: int = 0
    out: str = "runs/default"
    warm_start: Optional[str] = None
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    men: MenConfig = field(default_factory=MenConfig)
    anim: AnimConfig = field(default_factory=AnimConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


# fields whose defaults are the published training settings
PAPER_DEFAULTS = {
    "optim.lr": "generator learning rate 1e-4",
    "optim.lr_d_ratio": "discriminator at one tenth of the generator rate",
    "optim.batch_size": "batch size 8 (pose transfer)",
    "loss.c": "lambda_c", "loss.r": "lambda_r", "loss.l1": "lambda_l1",
    "loss.adv": "lambda_a", "loss.perc": "lambda_p", "loss.style": "lambda_s",
}

_SECTIONS = {"task": TaskConfig, "model": ModelSpec, "loss": LossWeights, "optim": OptimConfig,
             "schedule": ScheduleConfig, "extractor": ExtractorConfig, "men": MenConfig,
             "anim": AnimConfig}


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, (list, tuple)):
        return isinstance(value, list)
    if isinstance(default, dict):
        return isinstance(value, dict)
    if isinstance(default, str):
        return isinstance(value, str)
    return True


def _build_section(name, cls, raw, violations):
    if not isinstance(raw, dict):
        violations.append(f"{name}: expected an object, got {type(raw).__name__}")
        return cls.__new__(cls), False
    defaults = {f.name: getattr(_instance(cls), f.name) for f in fields(cls)}
    kwargs = {}
    for key, val in raw.items():
        if key not in defaults:
            violations.append(f"{name}.{key}: unknown key")
        elif not _type_ok(val, defaults[key]):
            violations.append(f"{name}.{key}: expected {type(defaults[key]).__name__}, "
                              f"got {type(val).__name__}")
        else:
            kwargs[key] = val
    return kwargs, True


def _instance(cls):
    return cls()


def _semantic_checks(cfg: RunConfig, violations: list) -> None:
    t, o, s = cfg.task, cfg.optim, cfg.schedule
    if cfg.command not in COMMANDS:
        violations.append(f"command: must be one of {COMMANDS}, got {cfg.command!r}")
    if t.size < 16:
        violations.append(f"task.size: must be >= 16, got {t.size}")
    if cfg.command in ("train-flow", "train-gen"):
        from .tasks import WARP_KINDS
        if t.kind not in WARP_KINDS:
            violations.append(f"task.kind: {cfg.command} needs one of {WARP_KINDS}, got {t.kind!r}")
        if t.size != cfg.model.image_size:
            violations.append(f"task.size {t.size} != model.image_size {cfg.model.image_size}")
    if cfg.command == "train-anim":
        if t.frames < 2:
            violations.append(f"task.frames: need at least 2 frames, got {t.frames}")
        if t.size != cfg.model.image_size:
            violations.append(f"task.size {t.size} != model.image_size {cfg.model.image_size}")
    if cfg.command == "train-men" and t.sequence_length < 16:
        violations.append(f"task.sequence_length: must be >= 16, got {t.sequence_length}")
    if t.joints != cfg.model.joints:
        violations.append(f"task.joints {t.joints} != model.joints {cfg.model.joints}")
    if t.pool < 1 or t.heldout < 0:
        violations.append("task.pool must be >= 1 and task.heldout >= 0")
    if t.sigma_n < 0:
        violations.append("task.sigma_n: must be >= 0")
    if not o.lr > 0:
        violations.append(f"optim.lr: must be > 0, got {o.lr}")
    if not 0 < o.lr_d_ratio:
        violations.append("optim.lr_d_ratio: must be > 0")
    for b in ("beta1", "beta2"):
        if not 0 <= getattr(o, b) < 1:
            violations.append(f"optim.{b}: must lie in [0, 1)")
    if o.batch_size < 1:
        violations.append("optim.batch_size: must be >= 1")
    if s.steps < 0:
        violations.append(f"schedule.steps: must be >= 0, got {s.steps}")
    if s.sample_every < 1 or s.log_every < 1:
        violations.append("schedule.sample_every and schedule.log_every must be >= 1")
    if not cfg.extractor.channels or any(c < 1 for c in cfg.extractor.channels):
        violations.append("extractor.channels: need positive channel counts")
    if cfg.anim.mode not in ("sequential", "independent"):
        violations.append(f"anim.mode: must be 'sequential' or 'independent', got {cfg.anim.mode!r}")
    if cfg.men.kernel < 1 or cfg.men.kernel % 2 == 0:
        violations.append("men.kernel: must be odd")


def config_from_dict(raw: dict, overrides: Optional[dict] = None) -> RunConfig:
    """Build and validate a RunConfig; every violation is reported at once."""
    if not isinstance(raw, dict):
        raise ConfigError([f"config root must be an object, got {type(raw).__name__}"])
    raw = dict(raw)
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    violations: list = []
    top = {f.name: f for f in fields(RunConfig)}
    kwargs: dict[str, Any] = {}
    for key, val in raw.items():
        if key not in top:
            violations.append(f"{key}: unknown key")
        elif key in _SECTIONS:
            sect, ok = _build_section(key, _SECTIONS[key], val, violations)
            if ok:
                kwargs[key] = sect
        else:
            default = getattr(RunConfig(), key)
            if default is None:
                if val is not None and not isinstance(val, str):
                    violations.append(f"{key}: expected a string or null")
                else:
                    kwargs[key] = val
            elif not _type_ok(val, default):
                violations.append(f"{key}: expected {type(default).__name__}, got {type(val).__name__}")
            else:
                kwargs[key] = val
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = kwargs.pop(name, {})
        if cls is ModelSpec:
            probe = ModelSpec.__new__(ModelSpec)
            for f in fields(ModelSpec):
                setattr(probe, f.name, sub.get(f.name, getattr(_instance(cls), f.name)))
            issues = probe.problems()
            violations.extend(f"model: {p}" for p in issues)
            sections[name] = probe if issues else ModelSpec(**sub)
        elif cls is LossWeights:
            bad = [k for k, v in sub.items() if not (v >= 0 and v == v and abs(v) != float("inf"))]
            violations.extend(f"loss.{k}: must be finite and >= 0" for k in bad)
            sections[name] = LossWeights(**{k: v for k, v in sub.items() if k not in bad})
        else:
            sections[name] = cls(**sub)
    cfg = RunConfig(**kwargs, **sections)
    _semantic_checks(cfg, violations)
    if violations:
        raise ConfigError(violations)
    return cfg


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError([f"config file {p} not found"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{p}: invalid JSON ({exc})"]) from None
    return config_from_dict(raw, overrides)


def describe(cfg: RunConfig) -> list[str]:
    """One line per field, tagging values that are published settings left at their default."""
    lines = []
    default = RunConfig()

    def walk(obj, ref, prefix):
        for f in fields(obj):
            val, dval = getattr(obj, f.name), getattr(ref, f.name) if ref is not None else None
            key = f"{prefix}{f.name}"
            if is_dataclass(val):
                walk(val, dval, key + ".")
                continue
            tag = ""
            if key in PAPER_DEFAULTS:
                tag = "  [paper]" if val == dval else "  [override; paper default " + repr(dval) + "]"
            lines.append(f"{key} = {json.dumps(val)}{tag}")

    walk(cfg, default, "")
    return lines
