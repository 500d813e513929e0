"""Rendering of segmentation overlays, confusion heatmaps and run reports."""

import json
from pathlib import Path
from typing import Dict, Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import LabelCoding, MfishSample
from .metrics import ErrorMatrix

# Fixed palette: one RGB color per chromosome class, stable across runs.
CLASS_PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
    (255, 255, 255), (87, 51, 255), (255, 87, 51), (51, 255, 87),
], dtype=np.uint8)


def label_overlay(labels: np.ndarray, coding: Optional[LabelCoding] = None
                  ) -> np.ndarray:
    """RGBA image: chromosome classes in the fixed palette, background
    transparent, overlap hatched with diagonal stripes."""
    coding = coding or LabelCoding()
    h, w = labels.shape
    out = np.zeros((h, w, 4), dtype=np.uint8)
    for i, code in enumerate(coding.chromosome_codes):
        sel = labels == code
        out[sel, :3] = CLASS_PALETTE[i]
        out[sel, 3] = 255
    overlap = labels == coding.overlap_code
    if overlap.any():
        yy, xx = np.mgrid[0:h, 0:w]
        stripes = ((yy + xx) // 3) % 2 == 0
        out[overlap & stripes] = (255, 255, 255, 255)
        out[overlap & ~stripes] = (40, 40, 40, 255)
    return out


def save_overlay_png(path, pred: np.ndarray, truth: np.ndarray,
                     coding: Optional[LabelCoding] = None) -> None:
    coding = coding or LabelCoding()
    fig, axes = plt.subplots(1, 2, figsize=(10, 5))
    for ax, (title, labels) in zip(axes, [("ground truth", truth),
                                          ("prediction", pred)]):
        ax.imshow(label_overlay(labels, coding))
        ax.set_title(title)
        ax.axis("off")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def save_confusion_png(path, matrix: np.ndarray,
                       coding: Optional[LabelCoding] = None) -> None:
    coding = coding or LabelCoding()
    names = [coding.code_names[c] for c in coding.chromosome_codes]
    row_sums = matrix.sum(axis=1, keepdims=True)
    norm = matrix / np.maximum(row_sums, 1)
    fig, ax = plt.subplots(figsize=(9, 8))
    im = ax.imshow(norm, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(names)), names, rotation=90, fontsize=7)
    ax.set_yticks(range(len(names)), names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    fig.colorbar(im)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def save_error_matrix_png(path, matrix: ErrorMatrix) -> None:
    fig, ax = plt.subplots(figsize=(8, 7))
    im = ax.imshow(matrix.values, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(matrix.ids)), matrix.ids, rotation=90, fontsize=6)
    ax.set_yticks(range(len(matrix.ids)), matrix.ids, fontsize=6)
    ax.set_xlabel("test image")
    ax.set_ylabel("training image")
    fig.colorbar(im, label="CCR")
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
