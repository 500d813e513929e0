"""Command-line entry points: ingest, train, loocv, hosvd-matrix, report,
synth. Every command writes its resolved configuration beside its outputs
so runs are reproducible from the artifacts alone."""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import hosvd, synth, training
from .data import (AugmentationConfig, LabelCoding, MfishSample,
                   compute_crop_window, curate, load_manifest, preprocess)
from .metrics import ErrorMatrix
from .network import NetworkConfig, load_checkpoint, save_checkpoint
from .report import save_confusion_png, save_error_matrix_png, save_overlay_png
from .training import TrainConfig, run_loocv, train_model


def _write_resolved_config(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps({"command": command, **payload}, indent=2, default=str))


def _load_samples(args) -> List[MfishSample]:
    manifest = load_manifest(args.manifest)
    samples = curate(manifest)
    if getattr(args, "crop_height", None):
        coding = LabelCoding()
        processed = []
        for s in samples:
            crop = compute_crop_window(s, coding, args.crop_height,
                                       args.crop_width)
            processed.append(preprocess(s, crop, args.scale))
        samples = processed
    return samples


def _train_config(args) -> TrainConfig:
    aug = (AugmentationConfig(seed=args.seed) if args.augment
           else AugmentationConfig.identity(seed=args.seed))
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       eval_last_k=args.eval_last_k, seed=args.seed,
                       augmentation=aug)


def _network_config(args) -> Optional[NetworkConfig]:
    if args.config:
        return NetworkConfig.from_json(Path(args.config).read_text())
    return None


def cmd_ingest(args) -> int:
    out = Path(args.out)
    samples = _load_samples(args)
    _write_resolved_config(out, "ingest", {
        "manifest": args.manifest, "crop_height": args.crop_height,
        "crop_width": args.crop_width, "scale": args.scale})
    coding = LabelCoding()
    histograms = {}
    for s in samples:
        np.savez(out / f"{s.id}.npz", channels=s.channels, labels=s.labels)
        codes, counts = np.unique(s.labels, return_counts=True)
        histograms[s.id] = {coding.code_names.get(int(c), str(int(c))): int(n)
                            for c, n in zip(codes, counts)}
    summary = {"n_samples": len(samples),
               "ids": [s.id for s in samples],
               "per_class_pixels": histograms}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    samples = _load_samples(args)
    config = _train_config(args)
    _write_resolved_config(out, "train", {"manifest": args.manifest,
                                          "train_config": asdict(config)})
    net, log = train_model(samples, config, _network_config(args))
    save_checkpoint(out / "checkpoint.npz", net, getattr(net, "adam", None))
    training._write_log_csv(out / "log.csv", "all", log)
    return 0


def cmd_loocv(args) -> int:
    out = Path(args.out)
    samples = _load_samples(args)
    config = _train_config(args)
    _write_resolved_config(out, "loocv", {"manifest": args.manifest,
                                          "train_config": asdict(config),
                                          "workers": args.workers})
    run_loocv(samples, config, _network_config(args), out_dir=out,
              resume=args.resume, workers=args.workers)
    return 0


def cmd_hosvd_matrix(args) -> int:
    out = Path(args.out)
    samples = _load_samples(args)
    _write_resolved_config(out, "hosvd-matrix", {
        "manifest": args.manifest, "n_patches": args.n_patches,
        "patch_size": args.patch_size, "seed": args.seed})
    rng = np.random.default_rng(args.seed)
    matrix = hosvd.cross_image_matrix(samples, n_patches=args.n_patches,
                                      patch_size=args.patch_size, rng=rng)
    matrix.to_csv(out / "error_matrix.csv")
    save_error_matrix_png(out / "error_matrix.png", matrix)
    stats = {"diagonal_mean": matrix.diagonal_mean(),
             "off_diagonal_mean": matrix.off_diagonal_mean(),
             "diagonal_maximal_rate": matrix.diagonal_maximal_rate()}
    (out / "stats.json").write_text(json.dumps(stats, indent=2))
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        raise FileNotFoundError(f"no summary.json in {run_dir}")
    summary = json.loads(summary_path.read_text())
    samples = {s.id: s for s in _load_samples(args)}
    coding = LabelCoding()
    out = Path(args.out) if args.out else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out, "report", {"run_dir": str(run_dir),
                                           "manifest": args.manifest})
    from .network import predict_labels
    from .metrics import confusion as confusion_fn
    rows = []
    pooled_conf = None
    for test_id, ccr in summary["per_fold"].items():
        fold_dir = run_dir / f"fold_{test_id}"
        if not (fold_dir / "checkpoint.npz").exists():
            raise FileNotFoundError(f"missing checkpoint for fold {test_id}")
        net, _ = load_checkpoint(fold_dir / "checkpoint.npz")
        sample = samples[test_id]
        pred = predict_labels(net, sample, coding)
        save_overlay_png(out / f"overlay_{test_id}.png", pred,
                         sample.labels, coding)
        conf = confusion_fn(pred, sample.labels, coding)
        pooled_conf = conf if pooled_conf is None else pooled_conf + conf
        rows.append((test_id, ccr))
    save_confusion_png(out / "confusion.png", pooled_conf, coding)
    lines = ["# Cross-validation report", "",
             f"Mean held-out CCR: {summary['mean_ccr']:.4f}", "",
             "| test image | CCR |", "| --- | --- |"]
    lines += [f"| {tid} | {ccr:.4f} |" for tid, ccr in rows]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    config = synth.SynthConfig(n_images=args.n_images, height=args.height,
                               width=args.width, seed=args.seed,
                               noise_sigma=args.noise,
                               exposure_offset=args.exposure)
    _write_resolved_config(out, "synth", asdict(config))
    samples = synth.generate_dataset(config)
    synth.write_dataset(samples, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfishseg",
        description="Semantic segmentation of 6-channel karyotype images")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, manifest=True):
        if manifest:
            p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)

    def add_preprocess(p):
        p.add_argument("--crop-height", type=int, default=0,
                       help="crop window height (0 = no preprocessing)")
        p.add_argument("--crop-width", type=int, default=0)
        p.add_argument("--scale", type=float, default=1.0)

    def add_training(p):
        p.add_argument("--epochs", type=int, default=150)
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--eval-last-k", type=int, default=5)
        p.add_argument("--config", help="network config JSON file")
        p.add_argument("--no-augment", dest="augment", action="store_false")

    p = sub.add_parser("ingest", help="curate and preprocess a dataset")
    add_common(p)
    add_preprocess(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train on the full curated dataset")
    add_common(p)
    add_preprocess(p)
    add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("loocv", help="leave-one-out cross validation")
    add_common(p)
    add_preprocess(p)
    add_training(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_loocv)

    p = sub.add_parser("hosvd-matrix",
                       help="cross-image CCR matrix of the patch baseline")
    add_common(p)
    add_preprocess(p)
    p.add_argument("--n-patches", type=int, default=30)
    p.add_argument("--patch-size", type=int, default=11)
    p.set_defaults(func=cmd_hosvd_matrix)

    p = sub.add_parser("report", help="render overlays and tables for a run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    add_preprocess(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    add_common(p, manifest=False)
    p.add_argument("--n-images", type=int, default=8)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--exposure", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
