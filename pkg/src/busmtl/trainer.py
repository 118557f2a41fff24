"""Three-phase curriculum training, checkpoints and evaluation.

Phase 1 feeds ground-truth masks to the attention path, phase 2 draws the
mask source per batch (ground truth with probability 0.5), phase 3 uses
predicted masks only. Batch order and mask-source draws are pure functions
of ``(seed, epoch, batch index)``, so a resumed run replays the exact same
sequence as an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .core import CLASS_ORDER, RunConfig, Sample, seeded_rng, validate_config
from .losses import LossBreakdown, loss_breakdown
from .metrics import MetricsReport, compute_report
from .model import MultiTaskNet, build_model, predict_arrays, to_batch

log = logging.getLogger(__name__)

GT, PRED = "GT", "PRED"
LOG_FIELDS = ("step", "epoch", "phase", "bce", "dice", "ce", "total", "mask_source")
CHECKPOINT_MAGIC = b"BUSC"
CHECKPOINT_VERSION = 1

# stream tags keep independent consumers of the run seed apart
_SHUFFLE_TAG = 15485863
_SOURCE_TAG = 104729
_VAL_TAG = 32452843


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class CurriculumSchedule:
    lengths: tuple[int, int, int] = (20, 20, 20)
    mixed_gt_probability: float = 0.5

    SOURCES = ("ground-truth", "mixed", "predicted")

    def __post_init__(self) -> None:
        if len(self.lengths) != 3 or any(n <= 0 for n in self.lengths):
            raise ValueError(f"curriculum needs three positive phase lengths, got {self.lengths}")

    @property
    def total_epochs(self) -> int:
        return sum(self.lengths)

    @property
    def boundaries(self) -> tuple[int, int, int]:
        """Epoch counts after which each phase ends."""
        a, b, c = self.lengths
        return (a, a + b, a + b + c)

    def phase(self, epoch: int) -> int:
        """Zero-based phase index of zero-based ``epoch``."""
        if not 0 <= epoch < self.total_epochs:
            raise ValueError(f"epoch {epoch} outside schedule of {self.total_epochs} epochs")
        for idx, end in enumerate(self.boundaries):
            if epoch < end:
                return idx
        raise AssertionError("unreachable")


def select_mask_source(epoch: int, schedule: CurriculumSchedule, rng: np.random.Generator) -> str:
    phase = schedule.phase(epoch)
    if phase == 0:
        return GT
    if phase == 2:
        return PRED
    return GT if rng.random() < schedule.mixed_gt_probability else PRED


def batch_mask_source(seed: int, epoch: int, batch_index: int, schedule: CurriculumSchedule) -> str:
    """Mask source for one batch; a pure function of its arguments."""
    return select_mask_source(epoch, schedule, seeded_rng((seed, _SOURCE_TAG, epoch, batch_index)))


def schedule_for(cfg: RunConfig) -> CurriculumSchedule:
    return CurriculumSchedule(tuple(cfg.phase_lengths), cfg.mixed_gt_probability)


def make_optimizer(model: MultiTaskNet, lr: float) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)


def train_step(model: MultiTaskNet, optimizer: torch.optim.Optimizer, batch: tuple[torch.Tensor, ...],
               mask_source: str, lambda_seg: float, mask_grad: bool = False) -> LossBreakdown:
    """One forward pass, one backward pass of the total loss, one update."""
    images, masks, labels = batch
    if len(images) == 0:
        raise TrainingError("empty batch")
    model.train()
    optimizer.zero_grad(set_to_none=True)
    attention = masks if mask_source == GT else None
    out = model(images, attention_masks=attention, mask_grad=mask_grad and mask_source == PRED)
    total, parts = loss_breakdown(out.mask_probs, masks, out.class_probs, labels, lambda_seg)
    if not torch.isfinite(total):
        raise TrainingError(
            f"non-finite loss (bce={parts.bce}, dice={parts.dice}, ce={parts.ce}); step aborted"
        )
    total.backward()
    optimizer.step()
    return parts


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: MultiTaskNet, optimizer: torch.optim.Optimizer,
                    meta: dict) -> Path:
    """Write parameters, Adam moments and run position to a self-describing file.

    Layout: ``BUSC``, u32 version, u32 header length, UTF-8 JSON header, u32
    tensor count, then per tensor: u16 name length, name, u8 rank, u32 dims,
    little-endian float32 payload.
    """
    tensors: list[tuple[str, torch.Tensor]] = []
    names = {id(p): n for n, p in model.named_parameters()}
    for name, p in model.named_parameters():
        tensors.append((f"param/{name}", p.detach()))
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            base = f"adam/{names[id(p)]}"
            tensors.append((f"{base}/exp_avg", state["exp_avg"]))
            tensors.append((f"{base}/exp_avg_sq", state["exp_avg_sq"]))
            tensors.append((f"{base}/step", torch.as_tensor(state["step"], dtype=torch.float32).reshape(())))
    header = dict(meta)
    header["arch_hash"] = model.cfg.arch_hash()
    header["config"] = model.cfg.to_text()
    header["lr"] = optimizer.param_groups[0]["lr"]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", len(tensors)))
            for name, t in tensors:
                raw = name.encode("utf-8")
                arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        header = json.loads(data[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
            off += 4 * n
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    return header, tensors


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None
                    ) -> tuple[MultiTaskNet, torch.optim.Adam, dict]:
    """Rebuild model and optimizer from ``path``.

    When ``cfg`` is given its architecture hash must match the checkpoint's.
    """
    header, tensors = read_checkpoint(path)
    stored = RunConfig.from_text(header["config"])
    if cfg is not None and cfg.arch_hash() != header["arch_hash"]:
        raise CheckpointError(
            f"checkpoint {path} was trained with a different architecture "
            f"(hash {header['arch_hash']} != {cfg.arch_hash()}); refusing to load"
        )
    use = stored if cfg is None else cfg
    model = build_model(use)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key}")
            if tuple(tensors[key].shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: tensor {key} has shape {tensors[key].shape}, expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(tensors[key]))
    optimizer = make_optimizer(model, header.get("lr", use.learning_rate))
    for name, p in model.named_parameters():
        base = f"adam/{name}"
        if f"{base}/exp_avg" in tensors and p.requires_grad:
            optimizer.state[p] = {
                "step": torch.tensor(tensors[f"{base}/step"].reshape(-1)[0].item()),
                "exp_avg": torch.from_numpy(tensors[f"{base}/exp_avg"]).clone(),
                "exp_avg_sq": torch.from_numpy(tensors[f"{base}/exp_avg_sq"]).clone(),
            }
    return model, optimizer, header


# ---------------------------------------------------------------------------
# curriculum


@dataclass
class TrainResult:
    model: MultiTaskNet
    log: list[dict] = field(default_factory=list)
    best_checkpoint: Path | None = None
    best_epoch: int | None = None
    checkpoints: list[Path] = field(default_factory=list)
    validation_ids: list[str] = field(default_factory=list)


def holdout_split(samples: Sequence[Sample], fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Hold out ``fraction`` of each class (by original sample) for model selection.

    Augmented copies follow their source sample so no variant leaks across.
    """
    if fraction <= 0:
        return list(samples), []
    root = lambda s: s.id.split("_aug")[0]
    val_roots: set[str] = set()
    for k, label in enumerate(CLASS_ORDER):
        roots = sorted({root(s) for s in samples if s.label is label})
        n_val = int(math.floor(fraction * len(roots) + 0.5))
        if len(roots) < 2 or n_val == 0:
            continue
        order = seeded_rng((seed, _VAL_TAG, k)).permutation(len(roots))
        val_roots.update(roots[i] for i in order[:n_val])
    train = [s for s in samples if root(s) not in val_roots]
    val = [s for s in samples if root(s) in val_roots and "_aug" not in s.id]
    return train, val


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = seeded_rng((seed, _SHUFFLE_TAG, epoch)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@torch.no_grad()
def validation_loss(model: MultiTaskNet, samples: Sequence[Sample], cfg: RunConfig) -> float:
    model.eval()
    totals = []
    for start in range(0, len(samples), cfg.batch_size):
        images, masks, labels = to_batch(samples[start:start + cfg.batch_size], cfg)
        out = model(images)
        _, parts = loss_breakdown(out.mask_probs, masks, out.class_probs, labels, cfg.lambda_seg)
        totals.append(parts.total * len(images))
    return float(sum(totals) / len(samples))


def run_curriculum(
    cfg: RunConfig,
    train_samples: Sequence[Sample],
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    checkpoint_every_epoch: bool = False,
    stop_after_epoch: int | None = None,
    log_callback: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train over all curriculum epochs.

    Writes ``train_log.csv`` and checkpoints (``phase{k}.ckpt`` at each phase
    boundary, ``best.ckpt`` by validation loss, optionally ``epoch{e}.ckpt``)
    into ``out_dir`` when given. ``resume`` continues from a checkpoint.
    Epoch and phase numbers in the log are one-based.
    """
    cfg = validate_config(cfg)
    if not train_samples:
        raise TrainingError("training set is empty")
    schedule = schedule_for(cfg)
    samples = sorted(train_samples, key=lambda s: s.id)
    fit_set, val_set = holdout_split(samples, cfg.val_fraction, cfg.seed)
    if not fit_set:
        raise TrainingError("no training samples left after the validation holdout")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    start_epoch, step, best = 0, 0, math.inf
    best_epoch: int | None = None
    if resume is not None:
        model, optimizer, header = load_checkpoint(resume, cfg)
        for group in optimizer.param_groups:
            group["lr"] = cfg.learning_rate
        start_epoch, step = int(header["next_epoch"]), int(header["step"])
        best = float(header.get("best", math.inf))
        best_epoch = header.get("best_epoch")
    else:
        model = build_model(cfg)
        optimizer = make_optimizer(model, cfg.learning_rate)

    result = TrainResult(model=model, validation_ids=[s.id for s in val_set])
    log_file = None
    writer = None
    if out is not None:
        log_path = out / "train_log.csv"
        append = resume is not None and log_path.exists()
        log_file = open(log_path, "a" if append else "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS)
        if not append:
            writer.writeheader()

    last_epoch = schedule.total_epochs if stop_after_epoch is None else min(stop_after_epoch, schedule.total_epochs)
    try:
        for epoch in range(start_epoch, last_epoch):
            phase = schedule.phase(epoch)
            epoch_totals = []
            for b_idx, idx in enumerate(epoch_batches(len(fit_set), cfg.batch_size, cfg.seed, epoch)):
                batch = to_batch([fit_set[i] for i in idx], cfg)
                source = batch_mask_source(cfg.seed, epoch, b_idx, schedule)
                mask_grad = cfg.mask_grad_phase3 and phase == 2
                parts = train_step(model, optimizer, batch, source, cfg.lambda_seg, mask_grad)
                step += 1
                row = {"step": step, "epoch": epoch + 1, "phase": phase + 1, "bce": parts.bce,
                       "dice": parts.dice, "ce": parts.ce, "total": parts.total, "mask_source": source}
                result.log.append(row)
                epoch_totals.append(parts.total)
                if writer is not None:
                    writer.writerow(row)
                if log_callback is not None:
                    log_callback(row)
            score = validation_loss(model, val_set, cfg) if val_set else float(np.mean(epoch_totals))
            log.info("epoch %d phase %d: mean total %.4f, selection loss %.4f",
                     epoch + 1, phase + 1, np.mean(epoch_totals), score)
            meta = {"next_epoch": epoch + 1, "step": step, "phase": phase + 1, "seed": cfg.seed}
            improved = score < best
            if improved:
                best, best_epoch = score, epoch + 1
            meta.update(best=best, best_epoch=best_epoch)
            if out is not None:
                if improved:
                    result.best_checkpoint = save_checkpoint(out / "best.ckpt", model, optimizer, meta)
                if epoch + 1 in schedule.boundaries:
                    result.checkpoints.append(
                        save_checkpoint(out / f"phase{phase + 1}.ckpt", model, optimizer, meta))
                if checkpoint_every_epoch:
                    result.checkpoints.append(
                        save_checkpoint(out / f"epoch{epoch + 1}.ckpt", model, optimizer, meta))
        if out is not None:
            save_checkpoint(out / "last.ckpt", model, optimizer,
                            {"next_epoch": last_epoch, "step": step, "phase": schedule.phase(last_epoch - 1) + 1,
                             "seed": cfg.seed, "best": best, "best_epoch": best_epoch})
    finally:
        if log_file is not None:
            log_file.close()
    result.best_epoch = best_epoch
    if out is not None and result.best_checkpoint is None and (out / "best.ckpt").exists():
        result.best_checkpoint = out / "best.ckpt"
    return result


def evaluate(model: MultiTaskNet, samples: Sequence[Sample], cfg: RunConfig) -> MetricsReport:
    """Full metric suite with predicted masks driving the attention path."""
    samples = sorted(samples, key=lambda s: s.id)
    if not samples:
        raise ValueError("cannot evaluate on an empty sample set")
    images, masks, labels = to_batch(samples, cfg)
    mask_probs, class_probs, _ = predict_arrays(model, images.numpy(), cfg.batch_size)
    return compute_report(
        [s.id for s in samples], mask_probs, masks.numpy(), class_probs, labels.numpy(),
        spacing=cfg.spacing, nsd_tolerance=cfg.nsd_tolerance, threshold=cfg.mask_threshold,
    )


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("step", "epoch", "phase"):
            row[key] = int(row[key])
        for key in ("bce", "dice", "ce", "total"):
            row[key] = float(row[key])
    return rows
