"""Run configuration: key = value files, presets, validation.

Unknown keys are hard errors so typos never silently fall back to
defaults. The 'paper' preset mirrors the full-scale recipe (crop 128,
1000 epochs) and exists for documentation; 'desk' is the default scale
and 'overfit1' the single-phantom smoke configuration.
"""

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError
from .model import ArchConfig

_VALID_SMALL = {1, 2, 4, 8}


@dataclass
class RunConfig:
    seed: int = 0
    grid: int = 48
    crop: int = 32
    n_train: int = 60
    n_eval: int = 20
    noise_sigma: float = 0.08
    widths: tuple = (8, 16, 32, 64, 128)
    num_heads: int = 4
    ufe_depth: int = 1
    ffn_mult: int = 4
    epochs: int = 120
    max_epoch: int = 0  # 0: same as epochs
    initial_lr: float = 1e-4
    lr_power: float = 0.9
    weight_decay: float = 1e-5
    lambda_mfd: float = 1.0
    mask_dist: str = "uniform15"
    augment: bool = True
    checkpoint_interval: int = 0
    no_mfd: bool = False
    no_ufe: bool = False
    no_cmf: bool = False
    no_convblock: bool = False
    pairwise_cmf: bool = False
    f64: bool = False
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.max_epoch == 0:
            self.max_epoch = self.epochs

    def validate(self):
        problems = []
        if self.seed < 0:
            problems.append("seed must be >= 0")
        if self.crop > self.grid:
            problems.append(f"crop ({self.crop}) exceeds grid ({self.grid})")
        for name in ("crop", "grid"):
            v = getattr(self, name)
            if v % 16 != 0 and v not in _VALID_SMALL:
                problems.append(f"{name} ({v}) must be a multiple of 16 or a tiny power of two")
        if self.n_train < 1 or self.n_eval < 1:
            problems.append("n_train and n_eval must be >= 1")
        if self.noise_sigma < 0:
            problems.append("noise_sigma must be >= 0")
        if len(self.widths) != 5 or any(w < 1 for w in self.widths):
            problems.append(f"widths must be 5 positive ints, got {self.widths}")
        if self.num_heads < 1 or self.widths[4] % max(self.num_heads, 1):
            problems.append(f"bottleneck width {self.widths[4]} not divisible by num_heads")
        if self.ufe_depth < 1:
            problems.append("ufe_depth must be >= 1")
        if self.ffn_mult < 1:
            problems.append("ffn_mult must be >= 1")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.max_epoch < self.epochs:
            problems.append("max_epoch must be >= epochs")
        if self.initial_lr <= 0:
            problems.append("initial_lr must be > 0")
        if self.lr_power <= 0:
            problems.append("lr_power must be > 0")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.lambda_mfd < 0:
            problems.append("lambda_mfd must be >= 0")
        if self.checkpoint_interval < 0:
            problems.append("checkpoint_interval must be >= 0")
        ok_dist = self.mask_dist in ("uniform15", "full") or self.mask_dist.startswith("bernoulli:")
        if not ok_dist:
            problems.append(f"mask_dist {self.mask_dist!r} not one of uniform15|full|bernoulli:q")
        elif self.mask_dist.startswith("bernoulli:"):
            try:
                q = float(self.mask_dist.split(":", 1)[1])
                if not 0 < q <= 1:
                    problems.append("bernoulli rate must be in (0, 1]")
            except ValueError:
                problems.append(f"bad bernoulli rate in {self.mask_dist!r}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def arch(self):
        return ArchConfig(
            widths=self.widths, num_heads=self.num_heads, ufe_depth=self.ufe_depth,
            ffn_mult=self.ffn_mult, no_mfd=self.no_mfd, no_ufe=self.no_ufe,
            no_cmf=self.no_cmf, no_convblock=self.no_convblock,
            pairwise_cmf=self.pairwise_cmf)

    def dtype(self):
        return np.float64 if self.f64 else np.float32

    def phantom_spec(self, split):
        from .data import PhantomSpec

        salt = {"train": 0, "eval": 1}[split]
        return PhantomSpec(grid=self.grid, noise_sigma=self.noise_sigma,
                           seed=self.seed * 2 + salt)


PRESETS = {
    "desk": {},
    "paper": {"grid": 160, "crop": 128, "epochs": 1000, "n_train": 200, "n_eval": 85},
    "overfit1": {"n_train": 1, "n_eval": 1, "epochs": 500, "max_epoch": 500,
                 "augment": False, "mask_dist": "full"},
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_BOOL_FIELDS = {f.name for f in fields(RunConfig) if f.type == "bool"}


def _convert(key, raw):
    if key == "widths":
        try:
            vals = tuple(int(x) for x in raw.replace(" ", "").split(","))
        except ValueError:
            raise ConfigError(f"widths must be comma-separated ints, got {raw!r}")
        return vals
    if key in _BOOL_FIELDS:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {raw!r}")
    typ = _FIELD_TYPES[key]
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key} must be {typ}, got {raw!r}")
    return raw.strip()


def parse_config_text(text):
    """key = value lines; '#' starts a comment; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    return values


def load_config(path=None, preset=None, overrides=None):
    """defaults <- preset <- config file <- explicit overrides."""
    merged = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; have {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    if path is not None:
        with open(path) as f:
            merged.update(parse_config_text(f.read()))
    if overrides:
        for k in overrides:
            if k not in _FIELD_TYPES:
                raise ConfigError(f"unknown config field {k!r}")
        merged.update(overrides)
    return RunConfig(**merged).validate()
