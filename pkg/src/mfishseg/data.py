"""Loading, curation, preprocessing, augmentation and batching of
6-channel karyotype samples.

A dataset is described by a JSON manifest; each entry points at six
single-channel rasters (8- or 16-bit PNG/TIFF) plus a label raster whose
integer codes follow a :class:`LabelCoding`.
"""

import json
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch

CHANNEL_NAMES = ("aqua", "far_red", "green", "red", "gold", "dapi")

# Low-quality images dropped from the Vysis subset by default.
DEFAULT_EXCLUSIONS = (
    "V250253", "V260754", "V260856", "V290162", "V290362", "V270259",
    "V280162", "V290962", "V291562", "V1701XY", "V1702XY", "V1703XY",
    "V1402XX", "V190442",
)


@dataclass(frozen=True)
class LabelCoding:
    """Integer codes used in label maps: 24 chromosome classes plus
    background and overlap."""

    background_code: int = 0
    overlap_code: int = 255
    chromosome_codes: Tuple[int, ...] = tuple(range(1, 25))
    code_names: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        codes = self.chromosome_codes
        if len(codes) != 24 or len(set(codes)) != 24:
            raise ValueError("chromosome_codes must hold 24 distinct codes")
        if self.background_code in codes or self.overlap_code in codes:
            raise ValueError("background/overlap codes must be disjoint from "
                             "chromosome codes")
        if not self.code_names:
            names = {self.background_code: "background",
                     self.overlap_code: "overlap"}
            labels = [str(i) for i in range(1, 23)] + ["X", "Y"]
            names.update({c: labels[i] for i, c in enumerate(codes)})
            object.__setattr__(self, "code_names", names)

    @property
    def declared_codes(self) -> set:
        return set(self.chromosome_codes) | {self.background_code, self.overlap_code}

    def class_index(self, code: int) -> int:
        return self.chromosome_codes.index(code)


@dataclass
class MfishSample:
    """One cell: six registered channel images plus a per-pixel label map."""

    id: str
    channels: np.ndarray  # (6, H, W) float in [0, 1]
    labels: np.ndarray  # (H, W) integer codes
    probe_set: str = "Vysis"

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[0] != len(CHANNEL_NAMES):
            raise ValueError(f"channels must be (6, H, W), got {self.channels.shape}")
        if self.labels.shape != self.channels.shape[1:]:
            raise ValueError(f"label map shape {self.labels.shape} does not match "
                             f"channels {self.channels.shape[1:]}")
        if self.channels.min() < 0.0 or self.channels.max() > 1.0:
            raise ValueError("channel intensities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    def validate_labels(self, coding: LabelCoding) -> None:
        present = set(np.unique(self.labels).tolist())
        undeclared = present - coding.declared_codes
        if undeclared:
            raise ValueError(f"sample {self.id}: undeclared label codes {sorted(undeclared)}")


@dataclass
class ManifestEntry:
    id: str
    channel_paths: Dict[str, Path]  # keyed by CHANNEL_NAMES
    label_path: Path


@dataclass
class DatasetManifest:
    samples: List[ManifestEntry]
    exclusion_list: List[str] = field(default_factory=lambda: list(DEFAULT_EXCLUSIONS))


@dataclass
class AugmentationConfig:
    """Ranges for the random affine applied during training."""

    rotation_range_deg: Tuple[float, float] = (-180.0, 180.0)
    scale_range: Tuple[float, float] = (0.9, 1.1)
    translation_range_frac: Tuple[float, float] = (-0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.rotation_range_deg, self.scale_range,
                       self.translation_range_frac):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError("augmentation ranges must be finite intervals")
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range must be strictly positive")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationConfig":
        return cls(rotation_range_deg=(0.0, 0.0), scale_range=(1.0, 1.0),
                   translation_range_frac=(0.0, 0.0), seed=seed)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = []
    for item in doc["samples"]:
        channels = {}
        for name in CHANNEL_NAMES:
            if name not in item["channels"]:
                raise ValueError(f"sample {item['id']}: missing channel {name!r}")
            channels[name] = (path.parent / item["channels"][name]).resolve()
        entries.append(ManifestEntry(
            id=item["id"], channel_paths=channels,
            label_path=(path.parent / item["labels"]).resolve()))
    exclude = doc.get("exclude")
    if exclude is None:
        exclude = list(DEFAULT_EXCLUSIONS)
    return DatasetManifest(samples=entries, exclusion_list=list(exclude))


def _read_raster(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"missing raster {path}")
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ValueError(f"could not decode raster {path}")
    if img.ndim != 2:
        raise ValueError(f"{path}: expected single-channel raster, got shape {img.shape}")
    return img


def load_sample(entry: ManifestEntry, coding: LabelCoding,
                probe_set: str = "Vysis") -> MfishSample:
    """Read the six channel rasters and the label raster; intensities are
    normalized by the raster format's maximum value."""
    channels = []
    shape = None
    for name in CHANNEL_NAMES:
        raw = _read_raster(entry.channel_paths[name])
        if shape is None:
            shape = raw.shape
        elif raw.shape != shape:
            raise ValueError(f"sample {entry.id}: channel {name} has shape "
                             f"{raw.shape}, expected {shape}")
        max_val = float(np.iinfo(raw.dtype).max) if raw.dtype.kind == "u" else 1.0
        channels.append(raw.astype(np.float32) / max_val)
    labels = _read_raster(entry.label_path).astype(np.int32)
    if labels.shape != shape:
        raise ValueError(f"sample {entry.id}: label map shape {labels.shape} "
                         f"does not match channels {shape}")
    sample = MfishSample(id=entry.id, channels=np.stack(channels),
                         labels=labels, probe_set=probe_set)
    sample.validate_labels(coding)
    return sample


def curate(manifest: DatasetManifest, coding: Optional[LabelCoding] = None) -> List[MfishSample]:
    """Load all manifest entries except the excluded ids, sorted by id."""
    coding = coding or LabelCoding()
    excluded = set(manifest.exclusion_list)
    entries = sorted((e for e in manifest.samples if e.id not in excluded),
                     key=lambda e: e.id)
    return [load_sample(e, coding) for e in entries]


def compute_crop_window(sample: MfishSample, coding: LabelCoding,
                        crop_h: int = 536, crop_w: int = 490) -> Tuple[int, int, int, int]:
    """Window (top, left, h, w) centred on the label-map bounding box,
    padded to the requested size and clamped to the image bounds."""
    fg = sample.labels != coding.background_code
    if not fg.any():
        top, left = 0, 0
    else:
        ys, xs = np.nonzero(fg)
        cy = int((ys.min() + ys.max()) // 2)
        cx = int((xs.min() + xs.max()) // 2)
        top = cy - crop_h // 2
        left = cx - crop_w // 2
    crop_h = min(crop_h, sample.height)
    crop_w = min(crop_w, sample.width)
    top = int(np.clip(top, 0, sample.height - crop_h))
    left = int(np.clip(left, 0, sample.width - crop_w))
    return top, left, crop_h, crop_w


def preprocess(sample: MfishSample, crop: Tuple[int, int, int, int],
               scale: float) -> MfishSample:
    """Crop to ``(top, left, h, w)`` and resize by ``scale``; channels use
    bilinear resampling, labels nearest-neighbour. Output size is
    floor(crop dims * scale)."""
    top, left, ch, cw = crop
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    if top < 0 or left < 0 or top + ch > sample.height or left + cw > sample.width:
        raise ValueError(f"crop {crop} exceeds sample bounds "
                         f"{sample.height}x{sample.width}")
    out_h = int(np.floor(ch * scale))
    out_w = int(np.floor(cw * scale))
    chans = sample.channels[:, top:top + ch, left:left + cw]
    labels = sample.labels[top:top + ch, left:left + cw]
    if (out_h, out_w) != (ch, cw):
        chans = np.stack([
            cv2.resize(c, (out_w, out_h), interpolation=cv2.INTER_LINEAR)
            for c in chans])
        labels = cv2.resize(labels, (out_w, out_h),
                            interpolation=cv2.INTER_NEAREST)
    return MfishSample(id=sample.id, channels=np.clip(chans, 0.0, 1.0),
                       labels=labels, probe_set=sample.probe_set)


def _affine_matrix(h: int, w: int, angle_deg: float, scale: float,
                   tx: float, ty: float) -> np.ndarray:
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle_deg, scale)
    m[0, 2] += tx
    m[1, 2] += ty
    return m


def augment(sample: MfishSample, config: AugmentationConfig,
            rng: np.random.Generator,
            coding: Optional[LabelCoding] = None) -> MfishSample:
    """Apply one random rotation/scale/translation to channels (bilinear)
    and labels (nearest). Out-of-frame pixels become zero intensity and
    background label."""
    coding = coding or LabelCoding()
    angle = rng.uniform(*config.rotation_range_deg)
    scale = rng.uniform(*config.scale_range)
    tx = rng.uniform(*config.translation_range_frac) * sample.width
    ty = rng.uniform(*config.translation_range_frac) * sample.height
    if angle == 0.0 and scale == 1.0 and tx == 0.0 and ty == 0.0:
        return sample
    h, w = sample.height, sample.width
    m = _affine_matrix(h, w, angle, scale, tx, ty)
    chans = np.stack([
        cv2.warpAffine(c, m, (w, h), flags=cv2.INTER_LINEAR,
                       borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
        for c in sample.channels])
    labels = cv2.warpAffine(sample.labels, m, (w, h), flags=cv2.INTER_NEAREST,
                            borderMode=cv2.BORDER_CONSTANT,
                            borderValue=int(coding.background_code))
    return MfishSample(id=sample.id, channels=np.clip(chans, 0.0, 1.0),
                       labels=labels, probe_set=sample.probe_set)


def sample_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    """Deterministic per-(seed, sample, epoch) generator for augmentation."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, epoch, zlib.crc32(sample_id.encode())]))


def encode_targets(sample: MfishSample, coding: LabelCoding
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """One-hot targets (24, H, W) ordered by chromosome_codes, plus the
    (1, H, W) mask that is 1 on chromosome pixels and 0 on background and
    overlap pixels."""
    h, w = sample.labels.shape
    onehot = np.zeros((len(coding.chromosome_codes), h, w), dtype=np.float32)
    for i, code in enumerate(coding.chromosome_codes):
        onehot[i] = sample.labels == code
    mask = onehot.sum(axis=0, keepdims=True)
    return onehot, mask


def batch_iterator(samples: Sequence[MfishSample], batch_size: int,
                   rng: np.random.Generator,
                   coding: Optional[LabelCoding] = None
                   ) -> Iterator[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Yield one epoch of (inputs N×6×H×W, one-hot targets N×24×H×W,
    mask N×1×H×W) batches in a seeded random order; the final short batch
    is emitted."""
    coding = coding or LabelCoding()
    if not samples:
        return
    h, w = samples[0].labels.shape
    for s in samples:
        if s.labels.shape != (h, w):
            raise ValueError(f"sample {s.id} has size {s.labels.shape}, "
                             f"expected {(h, w)}")
    order = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        inputs = torch.from_numpy(np.stack([s.channels for s in chunk]))
        encoded = [encode_targets(s, coding) for s in chunk]
        targets = torch.from_numpy(np.stack([t for t, _ in encoded]))
        masks = torch.from_numpy(np.stack([m for _, m in encoded]))
        yield inputs, targets, masks
