"""Command-line entry point: ``busmtl {train,eval,predict,report,synth}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .core import CLASS_ORDER, ConfigError, RunConfig, SampleError, seed_from_env, validate_config
from .data import (
    DatasetError, augment_all, default_policies, read_image, scan_dataset, stratified_split,
    synthetic_corpus, write_dataset, write_png,
)
from .metrics import MetricsReport, boundary
from .trainer import CheckpointError, TrainingError, evaluate, load_checkpoint, read_checkpoint, run_curriculum

log = logging.getLogger("busmtl")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _phases(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated integers, e.g. 20,20,20")
    try:
        return tuple(int(p) for p in parts)  # type: ignore[return-value]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not integers: {text}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags override --config)")
    g.add_argument("--config", type=Path, help="key = value config file")
    g.add_argument("--variant", choices=("unet-h", "sd-h", "mgc-a"))
    g.add_argument("--encoder", choices=("vit", "conv"))
    g.add_argument("--epochs", type=int)
    g.add_argument("--phases", type=_phases, help="phase lengths a,b,c")
    g.add_argument("--lambda", dest="lambda_seg", type=float, help="segmentation weight")
    g.add_argument("--lr", dest="learning_rate", type=float)
    g.add_argument("--seed", type=int, help="run seed (falls back to $BUSMTL_SEED)")
    g.add_argument("--resolution", dest="working_resolution", type=int)
    g.add_argument("--embed-dim", dest="embed_dim", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--nsd-tol", dest="nsd_tolerance", type=float)
    g.add_argument("--spacing", type=float)
    g.add_argument("--no-augment", dest="augment", action="store_const", const=False)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    seed_in_file = args.config is not None and "seed" in _file_keys(args.config)
    overrides = {k: getattr(args, k, None) for k in (
        "variant", "encoder", "epochs", "lambda_seg", "learning_rate", "seed", "working_resolution",
        "embed_dim", "batch_size", "nsd_tolerance", "spacing", "augment")}
    if getattr(args, "phases", None) is not None:
        overrides["phase_lengths"] = args.phases
        if args.epochs is None:
            overrides["epochs"] = sum(args.phases)
    if overrides["seed"] is None and not seed_in_file:
        overrides["seed"] = seed_from_env(cfg.seed)
    return validate_config(cfg.replace(**overrides))


def _file_keys(path: Path) -> set[str]:
    keys = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0]
        if "=" in line:
            keys.add(line.split("=", 1)[0].strip())
    return keys


def _content_hash(paths: list[Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(str(p.name).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _write_run_json(out: Path, cfg: RunConfig, command: str, inputs: list[Path], extra: dict | None = None) -> None:
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": cfg.seed,
        "arch_hash": cfg.arch_hash(),
        "config": cfg.to_text(),
        "input_hash": _content_hash(inputs) if inputs else None,
        **(extra or {}),
    }
    (out / "run.json").write_text(json.dumps(doc, indent=2))


def _write_report(out: Path, report: MetricsReport, stem: str = "report") -> None:
    (out / f"{stem}.json").write_text(report.to_json())
    (out / f"{stem}.csv").write_text(report.to_csv())


def _dataset_root(args: argparse.Namespace, cfg: RunConfig, out: Path) -> Path:
    if args.data is not None:
        return args.data
    if args.synthetic is not None:
        if args.synthetic < 6:
            raise UsageError("--synthetic needs at least 6 samples (2 per class)")
        root = out / "synthetic"
        if not root.exists():
            write_dataset(synthetic_corpus(args.synthetic, cfg.seed, max(cfg.working_resolution, 32)), root)
        return root
    raise UsageError("either --data ROOT or --synthetic N is required")


def _load_split(root: Path, cfg: RunConfig, which: str):
    manifest = scan_dataset(root)
    split = stratified_split(manifest, cfg.split_ratio, cfg.seed)
    ids = {"train": split.train_ids, "test": split.test_ids, "all": split.train_ids | split.test_ids}[which]
    samples = [ref.load(cfg.working_resolution, cfg.channels) for ref in manifest.samples if ref.id in ids]
    return manifest, split, samples


# ---------------------------------------------------------------------------
# commands


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    root = _dataset_root(args, cfg, out)
    manifest, split, train = _load_split(root, cfg, "train")
    (out / "manifest.json").write_text(manifest.to_json(split))
    if cfg.augment:
        train = augment_all(train, default_policies(), cfg.seed)
    (out / "config.txt").write_text(cfg.to_text())
    log.info("training %s on %d samples (%d test)", cfg.variant, len(train), len(split.test_ids))
    result = run_curriculum(cfg, train, out_dir=out / "checkpoints")
    _, _, test = _load_split(root, cfg, "test")
    report = evaluate(result.model, test, cfg)
    _write_report(out, report)
    _write_run_json(out, cfg, "train", [out / "manifest.json"], {
        "data_root": str(root), "best_epoch": result.best_epoch,
        "validation_ids": result.validation_ids,
    })
    log.info("test accuracy %.4f, DSC %.4f", report.accuracy, report.dsc_mean)
    return 0


def _checkpoint_config(args: argparse.Namespace) -> RunConfig:
    """Checkpoint config (or ``--config``) with flag overrides; architecture must match."""
    header, _ = read_checkpoint(args.checkpoint)
    base = RunConfig.from_file(args.config) if args.config else RunConfig.from_text(header["config"])
    overrides = {k: getattr(args, k, None) for k in (
        "variant", "encoder", "working_resolution", "embed_dim", "nsd_tolerance", "spacing", "batch_size")}
    cfg = validate_config(base.replace(**overrides))
    if cfg.arch_hash() != header["arch_hash"]:
        raise CheckpointError(
            f"configuration does not match checkpoint architecture "
            f"(hash {cfg.arch_hash()} vs {header['arch_hash']}); refusing to load {args.checkpoint}"
        )
    return cfg


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _checkpoint_config(args)
    model, _, _ = load_checkpoint(args.checkpoint, cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.data is None and args.synthetic is None:
        raise UsageError("either --data ROOT or --synthetic N is required")
    root = _dataset_root(args, cfg, out)
    _, _, samples = _load_split(root, cfg, args.split)
    report = evaluate(model, samples, cfg)
    _write_report(out, report, stem=f"eval_{args.split}")
    _write_run_json(out, cfg, "eval", [args.checkpoint], {"split": args.split, "data_root": str(root)})
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _checkpoint_config(args)
    try:
        image = read_image(args.image, cfg.working_resolution, cfg.channels)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc
    model, _, _ = load_checkpoint(args.checkpoint, cfg)
    model.eval()
    with torch.no_grad():
        out_t = model(torch.as_tensor(np.transpose(image, (2, 0, 1))[None]))
    prob = out_t.mask_probs[0].double().numpy()
    class_probs = out_t.class_probs[0].double().numpy()
    mask = prob > cfg.mask_threshold
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "mask.png", mask.astype(np.uint8) * 255)
    write_png(out / "prob.png", prob)
    gray = (image[..., 0] * 255).round().astype(np.uint8)
    overlay = np.stack([gray, gray, gray], axis=-1)
    overlay[boundary(mask)] = (255, 0, 0)
    write_png(out / "overlay.png", overlay)
    doc = {
        "image": str(args.image),
        "probabilities": {c.value: float(p) for c, p in zip(CLASS_ORDER, class_probs)},
        "prediction": CLASS_ORDER[int(class_probs.argmax())].value,
        "foreground_fraction": float(mask.mean()),
    }
    (out / "probs.json").write_text(json.dumps(doc, indent=2))
    _write_run_json(out, cfg, "predict", [args.checkpoint, args.image])
    return 0


REPORT_ROWS = (
    ("Accuracy", "accuracy"), ("F1 (macro)", "f1_macro"), ("AUC", "auc_ovr_macro"), ("CE loss", "ce"),
    ("BCE", "bce"), ("DSC", "dsc_mean"), ("HD95", "hd95_mean"), ("NSD", "nsd_mean"),
)


def cmd_report(args: argparse.Namespace) -> int:
    """Side-by-side table of several metric reports (one column per run)."""
    columns = []
    for path in args.reports:
        try:
            doc = json.loads(Path(path).read_text())
            report = MetricsReport.from_dict(doc)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"cannot read metrics report {path}: {exc}") from exc
        name = Path(path).parent.name or Path(path).stem
        run_json = Path(path).parent / "run.json"
        if run_json.exists():
            cfg = RunConfig.from_text(json.loads(run_json.read_text())["config"])
            name = cfg.variant
        columns.append((name, report))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    header = "| Metric | " + " | ".join(n for n, _ in columns) + " |"
    lines = [header, "|" + "---|" * (len(columns) + 1)]
    csv_lines = ["metric," + ",".join(n for n, _ in columns)]
    for title, key in REPORT_ROWS:
        values = [getattr(r, key) for _, r in columns]
        lines.append(f"| {title} | " + " | ".join(f"{v:.4f}" for v in values) + " |")
        csv_lines.append(key + "," + ",".join(repr(float(v)) for v in values))
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    (out / "summary.csv").write_text("\n".join(csv_lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else seed_from_env(0)
    if args.n < 1:
        raise UsageError("-n must be positive")
    write_dataset(synthetic_corpus(args.n, seed, args.resolution), args.out)
    manifest = scan_dataset(args.out)
    counts = {c.value: n for c, n in manifest.per_class_counts.items()}
    print(json.dumps({"root": str(args.out), "per_class_counts": counts, "total_masks": manifest.total_masks}))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="busmtl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the three-phase curriculum and report test metrics")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, help="dataset root in <class>/<name>.png layout")
    p.add_argument("--synthetic", type=int, metavar="N", help="train on N generated phantoms")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute the metric suite for a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--synthetic", type=int, metavar="N")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write mask, probability map, class probabilities and overlay")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="tabulate metric reports side by side")
    p.add_argument("reports", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write a phantom dataset in the standard layout")
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"busmtl: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DatasetError, SampleError, CheckpointError, TrainingError, OSError, ValueError) as exc:
        print(f"busmtl: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
