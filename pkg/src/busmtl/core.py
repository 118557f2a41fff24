"""Shared domain types, run configuration and seeded randomness."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MASK_THRESHOLD = 0.5


class ConfigError(ValueError):
    """Raised when a run configuration violates an invariant."""


class SampleError(ValueError):
    """Raised when a sample fails shape or label checks at ingestion."""


class ClassLabel(str, Enum):
    BENIGN = "benign"
    MALIGNANT = "malignant"
    NORMAL = "normal"

    @property
    def index(self) -> int:
        return CLASS_ORDER.index(self)

    @classmethod
    def parse(cls, value: "ClassLabel | str | int") -> "ClassLabel":
        if isinstance(value, ClassLabel):
            return value
        if isinstance(value, (int, np.integer)):
            if not 0 <= int(value) < len(CLASS_ORDER):
                raise ValueError(f"class index out of range: {value}")
            return CLASS_ORDER[int(value)]
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown class label: {value!r}") from None


CLASS_ORDER: tuple[ClassLabel, ...] = (ClassLabel.BENIGN, ClassLabel.MALIGNANT, ClassLabel.NORMAL)
NUM_CLASSES = len(CLASS_ORDER)


def seeded_rng(seed: int | tuple[int, ...]) -> np.random.Generator:
    """Deterministic random stream; identical seeds give identical draws.

    Tuples are accepted so that a stream can be keyed by ``(seed, epoch, batch)``
    without sharing state between consumers.
    """
    if isinstance(seed, tuple):
        return np.random.default_rng([int(s) & 0xFFFFFFFF for s in seed])
    return np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)


def seed_from_env(default: int = 0) -> int:
    value = os.environ.get("BUSMTL_SEED")
    return int(value) if value not in (None, "") else default


# ---------------------------------------------------------------------------
# samples


def as_image(image: np.ndarray, channels: int | None = None) -> np.ndarray:
    """Validate an image array and return it as float32 H x W x C in [0, 1].

    Grayscale input (H x W or H x W x 1) is replicated to ``channels``.
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise SampleError(f"image must be HxW or HxWxC with C in (1, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SampleError("image contains non-finite values")
    if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise SampleError("image values must lie in [0, 1]")
    if channels is not None and arr.shape[2] != channels:
        if arr.shape[2] == 1:
            arr = np.repeat(arr, channels, axis=2)
        else:
            raise SampleError(f"cannot map {arr.shape[2]} channels to {channels}")
    return arr


def as_mask(mask: np.ndarray, binary: bool = True) -> np.ndarray:
    arr = np.asarray(mask, dtype=np.float32)
    if arr.ndim != 2:
        raise SampleError(f"mask must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SampleError("mask contains non-finite values")
    if binary and not np.all((arr == 0.0) | (arr == 1.0)):
        raise SampleError("ground-truth mask must contain only 0 and 1")
    if not binary and (arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0):
        raise SampleError("probability mask values must lie in [0, 1]")
    return arr


def binarize(prob: np.ndarray, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    return (np.asarray(prob) > threshold).astype(np.float32)


@dataclass
class Sample:
    id: str
    image: np.ndarray
    masks: list[np.ndarray]
    label: ClassLabel
    source: str = "unknown"

    def __post_init__(self) -> None:
        self.label = ClassLabel.parse(self.label)
        self.image = as_image(self.image)
        self.masks = [as_mask(m) for m in self.masks]
        shape = self.image.shape[:2]
        for m in self.masks:
            if m.shape != shape:
                raise SampleError(f"{self.id}: mask shape {m.shape} != image shape {shape}")
        if self.label is ClassLabel.NORMAL and any(m.any() for m in self.masks):
            raise SampleError(f"{self.id}: normal sample has a non-empty mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def merged_mask(self) -> np.ndarray:
        from .data import merge_masks

        return merge_masks(self.masks, shape=self.shape)


# ---------------------------------------------------------------------------
# configuration

VARIANTS = ("unet-h", "sd-h", "mgc-a")
ENCODERS = ("vit", "conv")
ACTIVATIONS = ("relu", "leaky_relu", "gelu")
NORMS = ("group", "none")

# fields that change the network's parameter layout
_ARCH_FIELDS = (
    "variant", "encoder", "working_resolution", "channels", "embed_dim", "patch_size",
    "depth", "heads", "decoder_width", "activation", "norm",
)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    variant: str = "mgc-a"
    working_resolution: int = 256
    embed_dim: int = 128
    epochs: int = 60
    phase_lengths: tuple[int, int, int] = (20, 20, 20)
    learning_rate: float = 1e-4
    lambda_seg: float = 0.6
    seed: int = 0
    mask_threshold: float = MASK_THRESHOLD
    nsd_tolerance: float = 3.0
    spacing: float = 1.0
    encoder: str = "vit"
    channels: int = 3
    patch_size: int = 16
    depth: int = 4
    heads: int = 4
    decoder_width: int = 16
    activation: str = "relu"
    norm: str = "group"
    batch_size: int = 8
    val_fraction: float = 0.1
    split_ratio: float = 0.8
    augment: bool = True
    train_encoder: bool = True
    mask_grad_phase3: bool = True
    mixed_gt_probability: float = 0.5

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        raw: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            raw[key] = value
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key: {key}")
            kwargs[key] = _coerce(known[key], value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def replace(self, **changes: Any) -> "RunConfig":
        changes = {k: _coerce(_FIELDS[k], v) for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes)

    def arch_hash(self) -> str:
        """Hash of the fields that determine parameter shapes."""
        text = "\n".join(f"{k}={getattr(self, k)}" for k in _ARCH_FIELDS)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def decoder(self) -> str:
        return "simple" if self.variant == "sd-h" else "unet"

    @property
    def mask_guided(self) -> bool:
        return self.variant == "mgc-a"

    @property
    def grid_size(self) -> int:
        return self.working_resolution // self.patch_size


def _coerce(f: dataclasses.Field, value: Any) -> Any:
    if f.name == "phase_lengths":
        if isinstance(value, str):
            value = [v for v in value.replace(" ", "").split(",") if v]
        try:
            return tuple(int(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"phase_lengths must be three integers, got {value!r}") from None
    default = f.default
    try:
        if isinstance(default, bool):
            return value if isinstance(value, bool) else _parse_bool(str(value))
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value).strip()
    except ValueError:
        raise ConfigError(f"invalid value for {f.name}: {value!r}") from None


_FIELDS = {f.name: f for f in fields(RunConfig)}


def validate_config(cfg: RunConfig) -> RunConfig:
    """Check every invariant of ``cfg`` and return a normalized copy."""
    cfg = dataclasses.replace(cfg, variant=cfg.variant.lower(), encoder=cfg.encoder.lower())
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    if cfg.encoder not in ENCODERS:
        raise ConfigError(f"encoder must be one of {ENCODERS}, got {cfg.encoder!r}")
    if cfg.activation not in ACTIVATIONS:
        raise ConfigError(f"activation must be one of {ACTIVATIONS}")
    if cfg.norm not in NORMS:
        raise ConfigError(f"norm must be one of {NORMS}")
    if len(cfg.phase_lengths) != 3:
        raise ConfigError("phase_lengths must have exactly three entries")
    if any(p <= 0 for p in cfg.phase_lengths):
        raise ConfigError("phase lengths must be positive")
    if sum(cfg.phase_lengths) != cfg.epochs:
        raise ConfigError(
            f"phase lengths {cfg.phase_lengths} sum to {sum(cfg.phase_lengths)}, not epochs={cfg.epochs}"
        )
    if not 0.0 <= cfg.lambda_seg <= 1.0:
        raise ConfigError(f"lambda_seg must lie in [0, 1], got {cfg.lambda_seg}")
    if cfg.working_resolution <= 0:
        raise ConfigError("working_resolution must be positive")
    if cfg.patch_size <= 0 or cfg.working_resolution % cfg.patch_size:
        raise ConfigError("working_resolution must be a positive multiple of patch_size")
    if cfg.patch_size & (cfg.patch_size - 1):
        raise ConfigError("patch_size must be a power of two")
    if cfg.embed_dim <= 0 or cfg.embed_dim % cfg.heads:
        raise ConfigError("embed_dim must be positive and divisible by heads")
    if cfg.learning_rate < 0:
        raise ConfigError("learning_rate must be non-negative")
    if cfg.channels not in (1, 3):
        raise ConfigError("channels must be 1 or 3")
    if not 0.0 < cfg.mask_threshold < 1.0:
        raise ConfigError("mask_threshold must lie in (0, 1)")
    if cfg.nsd_tolerance <= 0 or cfg.spacing <= 0:
        raise ConfigError("nsd_tolerance and spacing must be positive")
    if cfg.batch_size <= 0 or cfg.depth <= 0 or cfg.decoder_width <= 0:
        raise ConfigError("batch_size, depth and decoder_width must be positive")
    if not 0.0 <= cfg.val_fraction < 1.0 or not 0.0 < cfg.split_ratio < 1.0:
        raise ConfigError("val_fraction must lie in [0, 1) and split_ratio in (0, 1)")
    if not 0.0 <= cfg.mixed_gt_probability <= 1.0:
        raise ConfigError("mixed_gt_probability must lie in [0, 1]")
    return cfg
