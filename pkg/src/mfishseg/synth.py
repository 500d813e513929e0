"""Synthetic 6-channel karyotype images for tests and the acceptance suite.

Each of the 24 chromosome classes gets a fixed spectral signature (a
combinatorial on/off pattern over the first five channels plus an
always-on counterstain channel). Classes are painted as jittered ellipses
on a dark background; a small overlap region and optional per-image
exposure offsets mimic acquisition variability.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import cv2
import numpy as np

from .data import CHANNEL_NAMES, LabelCoding, MfishSample


@dataclass
class SynthConfig:
    n_images: int = 8
    height: int = 96
    width: int = 96
    n_classes: int = 24
    noise_sigma: float = 0.02
    exposure_offset: float = 0.05  # per-channel multiplicative range
    overlap_blobs: int = 2
    seed: int = 0


def class_signatures(n_classes: int = 24, n_channels: int = 6) -> np.ndarray:
    """(n_classes, 6) intensity signatures: distinct non-zero on/off codes
    over channels 0-4, channel 5 always on."""
    sig = np.zeros((n_classes, n_channels))
    code = 0
    for i in range(n_classes):
        code += 1
        while bin(code).count("1") < 1:
            code += 1
        for b in range(5):
            if code >> b & 1:
                # vary the on-level slightly so codes with equal support differ
                sig[i, b] = 0.55 + 0.05 * ((i + b) % 5)
        sig[i, 5] = 0.85
    return sig


def _paint_ellipse(mask: np.ndarray, center: Tuple[int, int],
                   axes: Tuple[int, int], angle: float) -> np.ndarray:
    canvas = np.zeros(mask.shape, dtype=np.uint8)
    cv2.ellipse(canvas, center, axes, angle, 0, 360, 1, thickness=-1)
    return canvas.astype(bool)


def generate_sample(index: int, config: SynthConfig,
                    coding: LabelCoding,
                    rng: np.random.Generator) -> MfishSample:
    h, w = config.height, config.width
    sig = class_signatures(config.n_classes)
    # place each class in its own grid cell, jittered per image
    cols = int(np.ceil(np.sqrt(config.n_classes * w / h)))
    rows = int(np.ceil(config.n_classes / cols))
    cell_h, cell_w = h // rows, w // cols
    order = rng.permutation(config.n_classes)
    labels = np.full((h, w), coding.background_code, dtype=np.int32)
    intensity = np.zeros((6, h, w))
    blob_masks = []
    for slot, cls in enumerate(order):
        r, c = divmod(slot, cols)
        cy = r * cell_h + cell_h // 2 + int(rng.integers(-2, 3))
        cx = c * cell_w + cell_w // 2 + int(rng.integers(-2, 3))
        ay = int(rng.integers(cell_h // 3, max(cell_h // 2 - 1, cell_h // 3 + 1)))
        ax = int(rng.integers(cell_w // 3, max(cell_w // 2 - 1, cell_w // 3 + 1)))
        blob = _paint_ellipse(labels, (cx, cy), (ax, ay),
                              float(rng.uniform(0, 180)))
        labels[blob] = coding.chromosome_codes[cls]
        intensity[:, blob] += sig[cls][:, None]
        blob_masks.append((cls, blob))
    # overlap regions: a second chromosome painted across an existing one
    for _ in range(config.overlap_blobs):
        a, b = rng.choice(len(blob_masks), size=2, replace=False)
        _, blob_a = blob_masks[a]
        cls_b, _ = blob_masks[b]
        ys, xs = np.nonzero(blob_a)
        k = int(rng.integers(len(ys)))
        blob = _paint_ellipse(labels, (int(xs[k]), int(ys[k])), (3, 2),
                              float(rng.uniform(0, 180)))
        inter = blob & blob_a
        labels[inter] = coding.overlap_code
        intensity[:, inter] += sig[cls_b][:, None]
    exposure = rng.uniform(1.0 - config.exposure_offset,
                           1.0 + config.exposure_offset, size=6)
    intensity *= exposure[:, None, None]
    intensity += rng.normal(0.0, config.noise_sigma, size=intensity.shape)
    channels = np.clip(intensity, 0.0, 1.0).astype(np.float32)
    return MfishSample(id=f"S{index:03d}", channels=channels, labels=labels)


def generate_dataset(config: SynthConfig,
                     coding: Optional[LabelCoding] = None) -> List[MfishSample]:
    coding = coding or LabelCoding()
    rng = np.random.default_rng(config.seed)
    return [generate_sample(i, config, coding, rng)
            for i in range(config.n_images)]


def write_dataset(samples: List[MfishSample], out_dir,
                  exclude: Optional[List[str]] = None) -> Path:
    """Write 16-bit channel PNGs, 8-bit label PNGs and a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        chan_paths = {}
        for i, name in enumerate(CHANNEL_NAMES):
            rel = f"{s.id}_{name}.png"
            raw = np.round(s.channels[i] * 65535.0).astype(np.uint16)
            cv2.imwrite(str(out_dir / rel), raw)
            chan_paths[name] = rel
        label_rel = f"{s.id}_labels.png"
        cv2.imwrite(str(out_dir / label_rel), s.labels.astype(np.uint8))
        entries.append({"id": s.id, "channels": chan_paths, "labels": label_rel})
    manifest = {"samples": entries, "exclude": exclude or []}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
