"""scikit-learn compatible wrapper around the curriculum trainer."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from skimage.transform import resize
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .core import CLASS_ORDER, ClassLabel, RunConfig, Sample, validate_config
from .data import augment_all, default_policies, merge_masks
from .metrics import MetricsReport, compute_report
from .model import predict_arrays
from .trainer import run_curriculum


def check_images(X, resolution: int, channels: int) -> np.ndarray:
    """Validate images and return float32 N x C x R x R.

    Accepts N x H x W or N x H x W x C arrays (or a list of such images) with
    values in [0, 1]. Images not at ``resolution`` are bilinearly resized.
    """
    images = list(X)
    if not images:
        raise ValueError("no images given")
    out = np.empty((len(images), channels, resolution, resolution), dtype=np.float32)
    for i, img in enumerate(images):
        arr = np.asarray(img, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[..., None]
        if arr.ndim != 3:
            raise ValueError(f"image {i} must be 2-D or 3-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
            raise ValueError(f"image {i} must be finite with values in [0, 1]")
        if arr.shape[2] == 3 and channels == 1:
            arr = arr.mean(axis=2, keepdims=True)
        elif arr.shape[2] == 1 and channels == 3:
            arr = np.repeat(arr, 3, axis=2)
        elif arr.shape[2] != channels:
            raise ValueError(f"image {i} has {arr.shape[2]} channels, expected {channels}")
        if arr.shape[:2] != (resolution, resolution):
            arr = resize(arr, (resolution, resolution), order=1, mode="edge", anti_aliasing=True)
        out[i] = np.transpose(np.clip(arr, 0.0, 1.0), (2, 0, 1))
    return out


def check_masks(masks, n: int, resolution: int) -> list[list[np.ndarray]]:
    """Normalize masks to one list of binary R x R arrays per image."""
    if masks is None:
        raise ValueError("masks are required to fit the segmentation branch")
    if len(masks) != n:
        raise ValueError(f"got {len(masks)} mask entries for {n} images")
    out = []
    for i, entry in enumerate(masks):
        items = [entry] if isinstance(entry, np.ndarray) and entry.ndim == 2 else list(entry)
        fixed = []
        for m in items:
            m = np.asarray(m, dtype=np.float32)
            if m.ndim != 2:
                raise ValueError(f"mask for image {i} must be 2-D, got shape {m.shape}")
            if m.shape != (resolution, resolution):
                m = resize(m, (resolution, resolution), order=0, anti_aliasing=False, preserve_range=True)
            fixed.append((m > 0.5).astype(np.float32))
        out.append(fixed)
    return out


def check_labels(y, n: int | None = None) -> np.ndarray:
    labels = np.asarray([ClassLabel.parse(v).index for v in y], dtype=int)
    if n is not None and len(labels) != n:
        raise ValueError(f"got {len(labels)} labels for {n} images")
    return labels


class MultiTaskBUSClassifier(ClassifierMixin, BaseEstimator):
    """Joint lesion segmentation and benign/malignant/normal classification.

    ``fit(X, y, masks=...)`` runs the three-phase curriculum; ``predict`` and
    ``predict_proba`` give class outputs, ``predict_mask`` binary lesion masks
    and ``transform`` the pooled encoder features fed to the classifier.
    Hyperparameters mirror :class:`busmtl.core.RunConfig`.
    """

    def __init__(self, variant="mgc-a", working_resolution=256, embed_dim=128, epochs=60,
                 phase_lengths=(20, 20, 20), learning_rate=1e-4, lambda_seg=0.6, seed=0,
                 mask_threshold=0.5, nsd_tolerance=3.0, spacing=1.0, encoder="vit", channels=3,
                 patch_size=16, depth=4, heads=4, decoder_width=16, activation="relu", norm="group",
                 batch_size=8, val_fraction=0.1, split_ratio=0.8, augment=True, train_encoder=True,
                 mask_grad_phase3=True, mixed_gt_probability=0.5, out_dir=None):
        self.variant = variant
        self.working_resolution = working_resolution
        self.embed_dim = embed_dim
        self.epochs = epochs
        self.phase_lengths = phase_lengths
        self.learning_rate = learning_rate
        self.lambda_seg = lambda_seg
        self.seed = seed
        self.mask_threshold = mask_threshold
        self.nsd_tolerance = nsd_tolerance
        self.spacing = spacing
        self.encoder = encoder
        self.channels = channels
        self.patch_size = patch_size
        self.depth = depth
        self.heads = heads
        self.decoder_width = decoder_width
        self.activation = activation
        self.norm = norm
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.split_ratio = split_ratio
        self.augment = augment
        self.train_encoder = train_encoder
        self.mask_grad_phase3 = mask_grad_phase3
        self.mixed_gt_probability = mixed_gt_probability
        self.out_dir = out_dir

    def to_config(self) -> RunConfig:
        params = {f.name: getattr(self, f.name) for f in fields(RunConfig)}
        return validate_config(RunConfig.from_mapping(params))

    def _samples(self, X, y, masks) -> list[Sample]:
        cfg = self.config_
        images = check_images(X, cfg.working_resolution, cfg.channels)
        labels = check_labels(y, len(images))
        mask_lists = check_masks(masks, len(images), cfg.working_resolution)
        width = len(str(len(images)))
        return [
            Sample(f"{CLASS_ORDER[lab].value}/x{i:0{width}d}", np.transpose(img, (1, 2, 0)), ms, CLASS_ORDER[lab])
            for i, (img, lab, ms) in enumerate(zip(images, labels, mask_lists))
        ]

    def fit(self, X, y, masks=None):
        self.config_ = self.to_config()
        samples = self._samples(X, y, masks)
        if self.config_.augment:
            samples = augment_all(samples, default_policies(), self.config_.seed)
        result = run_curriculum(self.config_, samples, out_dir=self.out_dir)
        self.model_ = result.model
        self.history_ = result.log
        self.classes_ = np.array([c.value for c in CLASS_ORDER])
        return self

    def _predict(self, X):
        check_is_fitted(self, "model_")
        images = check_images(X, self.config_.working_resolution, self.config_.channels)
        return predict_arrays(self.model_, images, self.config_.batch_size)

    def predict_proba(self, X) -> np.ndarray:
        return self._predict(X)[1]

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def score(self, X, y, sample_weight=None) -> float:
        """Classification accuracy; ``y`` may hold class names or indices."""
        pred = self.predict_proba(X).argmax(axis=1)
        return float(np.average(pred == check_labels(y, len(pred)), weights=sample_weight))

    def predict_mask_proba(self, X) -> np.ndarray:
        return self._predict(X)[0]

    def predict_mask(self, X) -> np.ndarray:
        return (self.predict_mask_proba(X) > self.config_.mask_threshold).astype(np.uint8)

    def transform(self, X) -> np.ndarray:
        return self._predict(X)[2]

    def evaluate(self, X, y, masks) -> MetricsReport:
        mask_probs, class_probs, _ = self._predict(X)
        labels = check_labels(y, len(mask_probs))
        res = self.config_.working_resolution
        gt = np.stack([merge_masks(ms, shape=(res, res)) for ms in check_masks(masks, len(labels), res)])
        ids = [f"x{i}" for i in range(len(labels))]
        return compute_report(ids, mask_probs, gt, class_probs, labels, spacing=self.config_.spacing,
                              nsd_tolerance=self.config_.nsd_tolerance, threshold=self.config_.mask_threshold)
