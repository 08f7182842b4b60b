"""Run configuration: flat key-value config files with dotted keys,
command-line overrides (flags win), canonical serialization, and hashing."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .loss import LossWeights
from .model import DetectorConfig


@dataclass
class OptimConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 12
    batch_size: int = 32
    decay_epochs: tuple[int, ...] = (6, 10)
    decay_factor: float = 0.1


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    jitter: int = 2


@dataclass
class RunConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train_data: str = ""
    test_data: str = ""
    seed: int = 0
    out_dir: str = "runs/default"
    eval_iou: float = 0.5
    eval_score: float = 0.5
    nms_iou: float = 0.5
    ap_mode: str = "allpoint"
    info_samples: int = 256


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(v) for v in s.split(","))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# dotted key -> (section attribute, field name, parser); section None is RunConfig
_REGISTRY: dict[str, tuple[str | None, str, object]] = {
    "model.image_size": ("detector", "image_size", int),
    "model.classes": ("detector", "num_classes", int),
    "model.grid": ("detector", "grid", int),
    "model.anchors": ("detector", "anchors_per_block", int),
    "model.channels": ("detector", "channels", _parse_int_tuple),
    "model.strides": ("detector", "strides", _parse_int_tuple),
    "model.binarize": ("detector", "binarize", _parse_bool),
    "model.shortcut": ("detector", "shortcut", _parse_bool),
    "model.anchor_scale": ("detector", "anchor_scale", float),
    "loss.beta": ("loss", "beta", float),
    "loss.gamma": ("loss", "gamma", float),
    "loss.tau": ("loss", "tau", float),
    "loss.info_weight": ("loss", "info_weight", float),
    "optim.lr": ("optim", "lr", float),
    "optim.beta1": ("optim", "beta1", float),
    "optim.beta2": ("optim", "beta2", float),
    "optim.eps": ("optim", "eps", float),
    "optim.epochs": ("optim", "epochs", int),
    "optim.batch": ("optim", "batch_size", int),
    "optim.decay_epochs": ("optim", "decay_epochs", _parse_int_tuple),
    "optim.decay_factor": ("optim", "decay_factor", float),
    "augment.flip_prob": ("augment", "flip_prob", float),
    "augment.jitter": ("augment", "jitter", int),
    "data.train": (None, "train_data", str),
    "data.test": (None, "test_data", str),
    "run.seed": (None, "seed", int),
    "run.out": (None, "out_dir", str),
    "eval.iou": (None, "eval_iou", float),
    "eval.score": (None, "eval_score", float),
    "eval.nms": (None, "nms_iou", float),
    "eval.ap_mode": (None, "ap_mode", str),
    "eval.info_samples": (None, "info_samples", int),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse `key = value` lines; `#` starts a comment."""
    kv: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{ln}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()
    return kv


def load_config_file(path: Path | str) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file missing: {path}")
    return parse_config_text(path.read_text(), source=str(path))


def build_run_config(kv: dict[str, str]) -> RunConfig:
    """Typed RunConfig from dotted key-value pairs; unknown keys are errors."""
    section_kwargs: dict[str | None, dict[str, object]] = {}
    for key, raw in kv.items():
        if key not in _REGISTRY:
            raise ValueError(f"unknown config key {key!r}")
        section, attr, parser = _REGISTRY[key]
        try:
            value = parser(raw)
        except ValueError as exc:
            raise ValueError(f"config key {key!r}: {exc}") from None
        section_kwargs.setdefault(section, {})[attr] = value
    cfg = RunConfig(
        detector=DetectorConfig(**section_kwargs.get("detector", {})),
        loss=LossWeights(**section_kwargs.get("loss", {})),
        optim=OptimConfig(**section_kwargs.get("optim", {})),
        augment=AugmentConfig(**section_kwargs.get("augment", {})),
    )
    for attr, value in section_kwargs.get(None, {}).items():
        cfg = replace(cfg, **{attr: value})
    return cfg


def run_config_to_kv(cfg: RunConfig) -> dict[str, str]:
    kv: dict[str, str] = {}
    for key, (section, attr, _parser) in _REGISTRY.items():
        obj = cfg if section is None else getattr(cfg, section)
        kv[key] = _fmt(getattr(obj, attr))
    return kv


def serialize_run_config(cfg: RunConfig) -> str:
    """Canonical text form: sorted dotted keys, one `key = value` per line."""
    kv = run_config_to_kv(cfg)
    return "\n".join(f"{k} = {kv[k]}" for k in sorted(kv)) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_run_config(cfg).encode()).hexdigest()[:12]


def apply_overrides(kv: dict[str, str], overrides: list[str]) -> dict[str, str]:
    """Apply repeatable `key=value` command-line overrides (flags win)."""
    out = dict(kv)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def validate_fields_covered() -> None:
    """Sanity helper for tests: every dataclass field is reachable by a key."""
    sections = {"detector": DetectorConfig, "loss": LossWeights,
                "optim": OptimConfig, "augment": AugmentConfig}
    covered: dict[str | None, set[str]] = {}
    for section, attr, _ in _REGISTRY.values():
        covered.setdefault(section, set()).add(attr)
    for name, cls in sections.items():
        missing = {f.name for f in fields(cls)} - covered.get(name, set())
        if missing:
            raise AssertionError(f"config registry misses {name} fields: {missing}")
