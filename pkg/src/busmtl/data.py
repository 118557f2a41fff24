"""Dataset ingestion, mask union, stratified splitting, augmentation and phantoms."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage
from skimage import draw

from .core import CLASS_ORDER, ClassLabel, Sample, SampleError, seeded_rng

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
_MASK_RE = re.compile(r"^(?P<stem>.+?)_mask(?:_\d+)?$", re.IGNORECASE)


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# I/O


def read_image(path: str | Path, resolution: int | None = None, channels: int = 3) -> np.ndarray:
    """Read an image as float32 H x W x channels in [0, 1].

    Colour files are converted to luminance first, then replicated.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if resolution is not None and im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc
    return np.repeat(arr[..., None], channels, axis=2)


def read_mask(path: str | Path, resolution: int | None = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if resolution is not None and im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.NEAREST)
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot read mask {path}: {exc}") from exc
    return (arr > 127).astype(np.float32)


def write_png(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class SampleRef:
    """A sample on disk; images are loaded on demand."""

    id: str
    label: ClassLabel
    image_path: Path
    mask_paths: tuple[Path, ...]
    source: str = "unknown"

    def load(self, resolution: int | None = None, channels: int = 3) -> Sample:
        image = read_image(self.image_path, resolution, channels)
        masks = [read_mask(p, resolution) for p in self.mask_paths]
        if resolution is None:
            for p, m in zip(self.mask_paths, masks):
                if m.shape != image.shape[:2]:
                    raise SampleError(f"{p}: mask shape {m.shape} != image shape {image.shape[:2]}")
        return Sample(self.id, image, masks, self.label, self.source)


@dataclass
class DatasetManifest:
    samples: list[SampleRef] = field(default_factory=list)

    @property
    def per_class_counts(self) -> dict[ClassLabel, int]:
        counts = Counter(s.label for s in self.samples)
        return {c: counts.get(c, 0) for c in CLASS_ORDER}

    @property
    def total_masks(self) -> int:
        return sum(len(s.mask_paths) for s in self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self) -> dict[str, SampleRef]:
        return {s.id: s for s in self.samples}

    def to_json(self, split: "SplitSpec | None" = None) -> str:
        rows = []
        for s in self.samples:
            row = {"id": s.id, "label": s.label.value, "masks": len(s.mask_paths), "source": s.source}
            if split is not None:
                row["split"] = "train" if s.id in split.train_ids else "test"
            rows.append(row)
        doc = {
            "per_class_counts": {c.value: n for c, n in self.per_class_counts.items()},
            "total_masks": self.total_masks,
            "samples": rows,
        }
        if split is not None:
            doc["split"] = {"ratio": split.ratio, "seed": split.seed}
        return json.dumps(doc, indent=2)


def scan_dataset(root: str | Path) -> DatasetManifest:
    """Index ``<root>/<class>/<name>.png`` images with their ``<name>_mask*.png`` masks.

    Sample ids are ``<class>/<name>`` and the manifest is sorted by id.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root is not a directory: {root}")
    refs: list[SampleRef] = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            label = ClassLabel.parse(class_dir.name)
        except ValueError:
            raise DatasetError(f"unknown class directory: {class_dir.name}") from None
        images: dict[str, Path] = {}
        masks: dict[str, list[Path]] = {}
        for path in sorted(class_dir.iterdir()):
            if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            match = _MASK_RE.match(path.stem)
            if match:
                masks.setdefault(match["stem"], []).append(path)
            else:
                images[path.stem] = path
        orphans = sorted(set(masks) - set(images))
        if orphans:
            raise DatasetError(f"mask with no matching image in {class_dir}: {orphans[0]}")
        for stem, path in images.items():
            refs.append(SampleRef(
                id=f"{label.value}/{stem}",
                label=label,
                image_path=path,
                mask_paths=tuple(sorted(masks.get(stem, []), key=_mask_order)),
                source=root.name,
            ))
    refs.sort(key=lambda r: r.id)
    return DatasetManifest(refs)


def _mask_order(path: Path) -> tuple[int, str]:
    tail = path.stem.rsplit("_mask", 1)[1]
    return (int(tail[1:]) if tail.startswith("_") and tail[1:].isdigit() else -1, path.name)


# ---------------------------------------------------------------------------
# masks


def merge_masks(masks: Sequence[np.ndarray], shape: tuple[int, int] | None = None) -> np.ndarray:
    """Pixel-wise maximum of ``masks``; an empty list gives zeros of ``shape``."""
    if not masks:
        if shape is None:
            raise ValueError("shape is required to merge an empty mask list")
        return np.zeros(shape, dtype=np.float32)
    first = np.asarray(masks[0], dtype=np.float32)
    for m in masks[1:]:
        if np.shape(m) != first.shape:
            raise ValueError(f"mask shape mismatch: {np.shape(m)} vs {first.shape}")
    if shape is not None and first.shape != tuple(shape):
        raise ValueError(f"mask shape {first.shape} != expected {tuple(shape)}")
    return np.maximum.reduce([np.asarray(m, dtype=np.float32) for m in masks])


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitSpec:
    train_ids: frozenset[str]
    test_ids: frozenset[str]
    ratio: float
    seed: int


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(manifest: DatasetManifest, ratio: float = 0.8, seed: int = 0) -> SplitSpec:
    """Per-class train/test split with round-half-up train counts."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    train: set[str] = set()
    test: set[str] = set()
    for c_idx, label in enumerate(CLASS_ORDER):
        ids = sorted(s.id for s in manifest.samples if s.label is label)
        if not ids:
            continue
        if len(ids) < 2:
            raise DatasetError(f"class {label.value} has {len(ids)} sample(s); need at least 2 to split")
        n_train = min(max(_round_half_up(ratio * len(ids)), 1), len(ids) - 1)
        order = seeded_rng((seed, c_idx)).permutation(len(ids))
        train.update(ids[i] for i in order[:n_train])
        test.update(ids[i] for i in order[n_train:])
    return SplitSpec(frozenset(train), frozenset(test), ratio, seed)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class Transform:
    kind: str  # hflip | vflip | rotate | intensity_scale | gamma
    low: float = 0.0
    high: float = 0.0

    GEOMETRIC = ("hflip", "vflip", "rotate")

    @classmethod
    def rotate(cls, max_degrees: float) -> "Transform":
        return cls("rotate", -max_degrees, max_degrees)

    @classmethod
    def gamma(cls, low: float, high: float) -> "Transform":
        return cls("gamma", low, high)

    @classmethod
    def intensity_scale(cls, low: float, high: float) -> "Transform":
        return cls("intensity_scale", low, high)


HFLIP = Transform("hflip")
VFLIP = Transform("vflip")


@dataclass(frozen=True)
class AugmentPolicy:
    label: ClassLabel
    transforms: tuple[Transform, ...] = ()
    multiplier: int = 1

    def __post_init__(self) -> None:
        if self.multiplier < 1:
            raise ValueError("multiplier must be >= 1")
        for t in self.transforms:
            if t.kind not in ("hflip", "vflip", "rotate", "intensity_scale", "gamma"):
                raise ValueError(f"unknown transform: {t.kind}")


def default_policies() -> dict[ClassLabel, AugmentPolicy]:
    return {
        ClassLabel.NORMAL: AugmentPolicy(
            ClassLabel.NORMAL, (HFLIP, VFLIP, Transform.rotate(15.0), Transform.gamma(0.8, 1.2)), 4),
        ClassLabel.MALIGNANT: AugmentPolicy(ClassLabel.MALIGNANT, (HFLIP,), 2),
        ClassLabel.BENIGN: AugmentPolicy(ClassLabel.BENIGN, (), 1),
    }


def apply_transform(t: Transform, image: np.ndarray, masks: list[np.ndarray], rng: np.random.Generator,
                    force: bool = False) -> tuple[np.ndarray, list[np.ndarray]]:
    """Apply one transform. Flips fire with probability 0.5 unless ``force``."""
    if t.kind in ("hflip", "vflip"):
        if not force and rng.random() < 0.5:
            return image, masks
        axis = 1 if t.kind == "hflip" else 0
        return np.flip(image, axis=axis).copy(), [np.flip(m, axis=axis).copy() for m in masks]
    if t.kind == "rotate":
        angle = float(rng.uniform(t.low, t.high))
        image = ndimage.rotate(image, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
        masks = [(ndimage.rotate(m, angle, axes=(1, 0), reshape=False, order=1, mode="constant") > 0.5)
                 .astype(np.float32) for m in masks]
        return np.clip(image, 0.0, 1.0), masks
    if t.kind == "intensity_scale":
        return np.clip(image * float(rng.uniform(t.low, t.high)), 0.0, 1.0), masks
    if t.kind == "gamma":
        return np.clip(image, 0.0, 1.0) ** float(rng.uniform(t.low, t.high)), masks
    raise ValueError(f"unknown transform: {t.kind}")


def augment(sample: Sample, policy: AugmentPolicy, rng: np.random.Generator) -> list[Sample]:
    """Expand ``sample`` to ``policy.multiplier`` samples.

    The first returned sample is the original; the rest get ids ``<id>_aug<k>``.
    """
    if policy.label is not sample.label:
        raise ValueError(f"policy for {policy.label.value} applied to {sample.label.value} sample")
    out = [sample]
    for k in range(1, policy.multiplier):
        image, masks = sample.image, list(sample.masks)
        for t in policy.transforms:
            image, masks = apply_transform(t, image, masks, rng)
        out.append(Sample(f"{sample.id}_aug{k}", image.astype(np.float32), masks, sample.label, sample.source))
    return out


def augment_all(samples: Iterable[Sample], policies: dict[ClassLabel, AugmentPolicy], seed: int) -> list[Sample]:
    out: list[Sample] = []
    for i, s in enumerate(sorted(samples, key=lambda s: s.id)):
        policy = policies.get(s.label)
        if policy is None:
            out.append(s)
        else:
            out.extend(augment(s, policy, seeded_rng((seed, 7919, i))))
    return sorted(out, key=lambda s: s.id)


# ---------------------------------------------------------------------------
# phantoms


def _speckle(rng: np.random.Generator, resolution: int) -> np.ndarray:
    base = rng.rayleigh(scale=1.0, size=(resolution, resolution))
    base = ndimage.gaussian_filter(base, sigma=max(resolution / 128.0, 0.6))
    yy = np.linspace(0.0, 1.0, resolution)[:, None]
    img = 0.35 + 0.25 * (base / base.max()) + 0.1 * (1.0 - yy)
    return img


def generate_phantom(label: ClassLabel | str, seed: int, resolution: int = 64,
                     area_range: tuple[float, float] = (0.01, 0.15)) -> Sample:
    """Synthetic speckled ultrasound-like image with an exact lesion mask.

    Benign lesions are smooth ellipses, malignant ones jagged star polygons and
    normal images carry an all-zero mask. Lesion area lies in ``area_range`` as
    a fraction of the image.
    """
    label = ClassLabel.parse(label)
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    rng = seeded_rng((seed, label.index, resolution))
    image = _speckle(rng, resolution)
    mask = np.zeros((resolution, resolution), dtype=np.float32)
    if label is not ClassLabel.NORMAL:
        lo, hi = area_range
        target = rng.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo)) * resolution ** 2
        cy, cx = rng.uniform(0.35, 0.65, size=2) * resolution
        if label is ClassLabel.BENIGN:
            aspect = rng.uniform(0.55, 0.9)
            ry = math.sqrt(target * aspect / math.pi)
            rx = ry / aspect
            rr, cc = draw.ellipse(cy, cx, ry, rx, shape=mask.shape, rotation=rng.uniform(-0.5, 0.5))
        else:
            n_pts = int(rng.integers(9, 15)) * 2
            theta = np.sort(rng.uniform(0.0, 2 * np.pi, n_pts))
            radius = np.where(np.arange(n_pts) % 2 == 0, 1.0, rng.uniform(0.45, 0.7, n_pts))
            # star polygon area for unit mean radius, scaled to the target
            area_unit = 0.5 * abs(np.sum(radius * np.roll(radius, -1) * np.sin(np.roll(theta, -1) - theta)))
            scale = math.sqrt(target / max(area_unit, 1e-9))
            rr, cc = draw.polygon(cy + scale * radius * np.sin(theta), cx + scale * radius * np.cos(theta),
                                  shape=mask.shape)
        mask[rr, cc] = 1.0
        frac = mask.mean()
        if not lo <= frac <= hi:
            # degenerate draw; fall back to a centred disc of the target area
            mask[:] = 0.0
            rr, cc = draw.disk((resolution / 2, resolution / 2), math.sqrt(target / math.pi), shape=mask.shape)
            mask[rr, cc] = 1.0
        soft = ndimage.gaussian_filter(mask, sigma=0.8)
        darkness = 0.75 if label is ClassLabel.BENIGN else 0.85
        image = image * (1.0 - darkness * soft)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(f"{label.value}/phantom_{seed:05d}", image[..., None], [mask], label, "phantom")


def synthetic_corpus(n: int, seed: int = 0, resolution: int = 64) -> list[Sample]:
    """``n`` phantoms cycling through the three classes."""
    return [generate_phantom(CLASS_ORDER[i % 3], seed * 100003 + i, resolution) for i in range(n)]


def write_dataset(samples: Iterable[Sample], root: str | Path) -> Path:
    """Materialize samples in the ``<root>/<class>/<name>.png`` layout."""
    root = Path(root)
    for s in samples:
        class_dir = root / s.label.value
        class_dir.mkdir(parents=True, exist_ok=True)
        name = s.id.split("/")[-1]
        write_png(class_dir / f"{name}.png", s.image[..., 0])
        for k, m in enumerate(s.masks):
            suffix = "_mask" if k == 0 else f"_mask_{k}"
            write_png(class_dir / f"{name}{suffix}.png", m)
    return root
