"""Pipeline configuration: ``key = value`` text files with typed validation.

Lines starting with ``#`` and blank lines are ignored. Unknown keys are
rejected. ``emit`` writes every key so ``parse(emit(cfg)) == cfg``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .constraints import LossWeights
from .errors import ConfigError
from .io import fingerprint_bytes

STAGES = ("pretrain", "distill", "softlabel", "eval", "metrics", "verify-theory")


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s):
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


@dataclass(frozen=True)
class PipelineConfig:
    # data
    dataset_kind: str = "toy"  # toy | folder
    dataset_path: str = ""
    image_size: int = 64
    num_classes: int = 10
    toy_train_per_class: int = 200
    toy_val_per_class: int = 40
    toy_test_per_class: int = 50
    toy_base_patterns: int = 4
    toy_noise: float = 0.04
    toy_marks: bool = True
    # teacher
    channels: tuple = (32, 64, 128, 128)
    num_attention_maps: int = 8
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.05
    pretrain_momentum: float = 0.9
    pretrain_weight_decay: float = 5e-4
    pretrain_batch: int = 64
    counterfactual: str = "random"
    # loss weights
    alpha: float = 0.5
    beta: float = 0.5
    lam: float = 0.8
    eta: float = 1.0
    mu: float = 0.05
    eps: float = 1e-8
    tau: float = 4.0
    # distillation
    ipc: int = 3
    group_size: int = 4
    distill_steps: int = 500
    distill_lr: float = 0.1
    r_bn: float = 0.01
    init_grid: str = "2x2"
    use_constraints: bool = True
    # soft labels and student
    softlabel_mode: str = "online"
    aug_policy: str = "crop"
    student_arch: str = "convnet4"
    student_epochs: int = 400
    student_lr: float = 1e-3
    student_weight_decay: float = 0.01
    student_batch: int = 16
    # run
    seed: int = 0
    deterministic: bool = True
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    @property
    def weights(self):
        return LossWeights(alpha=self.alpha, beta=self.beta, lam=self.lam, eta=self.eta,
                           mu=self.mu, eps=self.eps, tau=self.tau)

    def validate(self):
        self.weights  # range checks on every loss weight
        if self.dataset_kind not in ("toy", "folder"):
            raise ConfigError(f"dataset_kind must be 'toy' or 'folder', got {self.dataset_kind!r}")
        if self.dataset_kind == "folder" and not self.dataset_path:
            raise ConfigError("dataset_kind = folder requires dataset_path")
        positive = ("image_size", "num_classes", "ipc", "group_size", "num_attention_maps",
                    "pretrain_batch", "student_batch", "toy_train_per_class", "toy_val_per_class",
                    "toy_test_per_class", "toy_base_patterns")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("pretrain_epochs", "distill_steps", "student_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("pretrain_lr", "distill_lr", "student_lr", "r_bn", "toy_noise",
                     "pretrain_weight_decay", "student_weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0 <= self.pretrain_momentum < 1:
            raise ConfigError(f"pretrain_momentum must lie in [0, 1), got {self.pretrain_momentum}")
        for name in ("dataset_path", "out_dir"):
            v = getattr(self, name)
            if "\n" in v or v != v.strip():
                raise ConfigError(f"{name} must be a single line without surrounding whitespace")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"channels must be a nonempty list of positive ints, got {self.channels}")
        if self.image_size % (2 ** len(self.channels)) != 0:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 2**{len(self.channels)}")
        choices = {
            "counterfactual": ("uniform", "random"),
            "init_grid": ("1x1", "2x2"),
            "softlabel_mode": ("online", "offline"),
            "aug_policy": ("none", "crop"),
            "student_arch": ("convnet4", "convnet3"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def fingerprint(self):
        """Hash of every setting except the output location, so relocated runs match."""
        return fingerprint_bytes(emit(self.replace(out_dir="")).encode("utf-8"))


# the config file spells the constraint balance ``lambda``
_ALIASES = {"lambda": "lam"}
_FIELDS = {f.name: f for f in fields(PipelineConfig)}
_DEFAULTS = PipelineConfig()


def _key_for(name):
    return "lambda" if name == "lam" else name


def _convert(name, raw):
    default = getattr(_DEFAULTS, name)
    try:
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return _parse_ints(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {_key_for(name)!r}: {raw!r} ({exc})") from None


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse(text, base=None):
    """Parse config text; keys not present keep their value from ``base``."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        name = _ALIASES.get(key, key)
        if name not in _FIELDS or key == "lam":
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[name] = _convert(name, raw)
    base = base or _DEFAULTS
    return dataclasses.replace(base, **values)


def emit(config):
    lines = [f"{_key_for(f.name)} = {_format(getattr(config, f.name))}" for f in fields(config)]
    return "\n".join(lines) + "\n"


def load(path, base=None):
    return parse(Path(path).read_text(), base)


def dump(config, path):
    Path(path).write_text(emit(config))


__all__ = ["PipelineConfig", "STAGES", "parse", "emit", "load", "dump"]
