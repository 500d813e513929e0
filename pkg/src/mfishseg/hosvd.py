"""Patch-based higher-order SVD baseline classifier.

Per chromosome class, random patches are stacked into a 4-mode tensor
(patch index x height x width x channel) and decomposed into a core tensor
plus orthonormal mode factors. A pixel is classified by the class whose
non-sample-mode subspaces reconstruct its patch with minimal error.
"""

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import LabelCoding, MfishSample
from .metrics import ErrorMatrix, compute_ccr


@dataclass
class PatchSet:
    class_code: int
    patches: np.ndarray  # (n, p, p, 6)


@dataclass
class ClassModel:
    core: np.ndarray
    factors: List[np.ndarray]  # one orthonormal matrix per mode


@dataclass
class HosvdModel:
    classes: Dict[int, ClassModel] = field(default_factory=dict)
    ranks: Tuple[int, ...] = ()
    patch_size: int = 11


def unfold(tensor: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` unfolding: mode fibers become the rows."""
    return np.moveaxis(tensor, mode, 0).reshape(tensor.shape[mode], -1)


def mode_multiply(tensor: np.ndarray, matrix: np.ndarray, mode: int) -> np.ndarray:
    """Multiply ``tensor`` along ``mode`` by ``matrix`` (rows index the new
    mode dimension)."""
    moved = np.moveaxis(tensor, mode, 0)
    out = np.tensordot(matrix, moved, axes=(1, 0))
    return np.moveaxis(out, 0, mode)


def hosvd_decompose(tensor: np.ndarray, ranks: Sequence[int]
                    ) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Truncated higher-order SVD: per mode, keep the leading left singular
    vectors of the unfolding; the core is the tensor contracted with the
    factor transposes."""
    if len(ranks) != tensor.ndim:
        raise ValueError(f"need {tensor.ndim} ranks, got {len(ranks)}")
    for mode, r in enumerate(ranks):
        if r > tensor.shape[mode]:
            raise ValueError(f"rank {r} exceeds mode-{mode} dimension "
                             f"{tensor.shape[mode]}")
        if r < 1:
            raise ValueError("ranks must be positive")
    factors = []
    for mode, r in enumerate(ranks):
        u, _, _ = np.linalg.svd(unfold(tensor, mode), full_matrices=False)
        factors.append(u[:, :r])
    core = tensor
    for mode, u in enumerate(factors):
        core = mode_multiply(core, u.T, mode)
    return core, factors


def reconstruct(core: np.ndarray, factors: Sequence[np.ndarray]) -> np.ndarray:
    out = core
    for mode, u in enumerate(factors):
        out = mode_multiply(out, u, mode)
    return out


def extract_patch(sample: MfishSample, y: int, x: int, patch_size: int) -> np.ndarray:
    """(p, p, 6) patch centred on (y, x), zero-padded at borders."""
    half = patch_size // 2
    h, w = sample.labels.shape
    patch = np.zeros((patch_size, patch_size, sample.channels.shape[0]),
                     dtype=np.float64)
    y0, y1 = max(0, y - half), min(h, y + half + 1)
    x0, x1 = max(0, x - half), min(w, x + half + 1)
    patch[y0 - (y - half):y1 - (y - half), x0 - (x - half):x1 - (x - half)] = \
        np.moveaxis(sample.channels[:, y0:y1, x0:x1], 0, -1)
    return patch


def sample_patches(sample: MfishSample, coding: Optional[LabelCoding] = None,
                   n_patches: int = 30, patch_size: int = 11,
                   rng: Optional[np.random.Generator] = None) -> List[PatchSet]:
    """Draw up to ``n_patches`` patch centers uniformly without replacement
    from each chromosome class present in the sample."""
    coding = coding or LabelCoding()
    rng = rng if rng is not None else np.random.default_rng()
    sets = []
    any_pixels = False
    for code in coding.chromosome_codes:
        ys, xs = np.nonzero(sample.labels == code)
        if len(ys) == 0:
            continue
        any_pixels = True
        n = min(n_patches, len(ys))
        if n < n_patches:
            warnings.warn(f"sample {sample.id} class {code}: only {len(ys)} "
                          f"pixels, using all of them")
        pick = rng.choice(len(ys), size=n, replace=False)
        patches = np.stack([extract_patch(sample, int(ys[i]), int(xs[i]),
                                          patch_size) for i in pick])
        sets.append(PatchSet(class_code=code, patches=patches))
    if not any_pixels:
        raise ValueError(f"sample {sample.id} has no chromosome pixels")
    return sets


def default_ranks(n_patches: int, patch_size: int,
                  channels: int = 6) -> Tuple[int, int, int, int]:
    return (min(30, n_patches), min(5, patch_size), min(5, patch_size),
            min(4, channels))


def _effective_ranks(tensor: np.ndarray, ranks: Sequence[int],
                     rel_tol: float = 1e-10) -> Tuple[int, ...]:
    """Cap each mode rank at the numerical rank of its unfolding, so that
    arbitrary zero-singular-value directions never enter a class subspace."""
    eff = []
    for mode, r in enumerate(ranks):
        s = np.linalg.svd(unfold(tensor, mode), compute_uv=False)
        keep = int(np.sum(s >= rel_tol * max(s[0], np.finfo(float).tiny)))
        eff.append(max(1, min(r, keep)))
    return tuple(eff)


def fit_class_models(patch_sets: Sequence[PatchSet],
                     ranks: Optional[Sequence[int]] = None) -> HosvdModel:
    """Decompose each class's stacked patch tensor and keep the per-class
    core and factors."""
    if not patch_sets:
        raise ValueError("no patch sets to fit")
    patch_size = patch_sets[0].patches.shape[1]
    model = HosvdModel(patch_size=patch_size)
    for ps in patch_sets:
        n, p, _, c = ps.patches.shape
        r = tuple(min(a, b) for a, b in zip(
            ranks if ranks is not None else default_ranks(n, p, c),
            ps.patches.shape))
        r = _effective_ranks(ps.patches.astype(np.float64), r)
        core, factors = hosvd_decompose(ps.patches.astype(np.float64), r)
        model.classes[ps.class_code] = ClassModel(core=core, factors=factors)
        model.ranks = r
    return model


def _projection_basis(cm: ClassModel) -> np.ndarray:
    """Orthonormal basis of the spatial/channel subspace (modes 1..3 of the
    stacked tensor), expressed on flattened (p*p*c) patches."""
    u_h, u_w, u_c = cm.factors[1], cm.factors[2], cm.factors[3]
    return np.kron(u_h, np.kron(u_w, u_c))


def classify_pixels(model: HosvdModel, sample: MfishSample,
                    patch_size: Optional[int] = None,
                    coding: Optional[LabelCoding] = None) -> np.ndarray:
    """Label map assigning each ground-truth chromosome pixel the class
    whose subspaces reconstruct its patch with minimal error; ties go to
    the lowest code. Non-chromosome pixels keep the background code."""
    coding = coding or LabelCoding()
    p = patch_size or model.patch_size
    half = p // 2
    mask = np.isin(sample.labels, coding.chromosome_codes)
    out = np.full(sample.labels.shape, coding.background_code, dtype=np.int32)
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return out
    img = np.moveaxis(sample.channels, 0, -1).astype(np.float64)
    padded = np.pad(img, ((half, half), (half, half), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, (p, p), axis=(0, 1))  # (H, W, C, p, p)
    patches = windows[ys, xs]  # (npix, C, p, p)
    flat = np.moveaxis(patches, 1, -1).reshape(len(ys), -1)  # (npix, p*p*C)
    norms = np.einsum("ij,ij->i", flat, flat)
    codes = sorted(model.classes)
    errors = np.empty((len(codes), len(ys)))
    for k, code in enumerate(codes):
        basis = _projection_basis(model.classes[code])
        coeff = flat @ basis
        errors[k] = norms - np.einsum("ij,ij->i", coeff, coeff)
    best = errors.argmin(axis=0)  # argmin returns first minimum: low code wins
    out[ys, xs] = np.asarray(codes)[best]
    return out


def cross_image_matrix(samples: Sequence[MfishSample], n_patches: int = 30,
                       patch_size: int = 11,
                       ranks: Optional[Sequence[int]] = None,
                       rng: Optional[np.random.Generator] = None,
                       coding: Optional[LabelCoding] = None) -> ErrorMatrix:
    """Entry (i, j): CCR on sample j of a model fitted on sample i's
    patches; the diagonal is the self train-test case."""
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    coding = coding or LabelCoding()
    base_seed = int(rng.integers(2 ** 31)) if rng is not None else 0
    ids = [s.id for s in samples]
    values = np.zeros((len(samples), len(samples)))
    for i, train in enumerate(samples):
        row_rng = np.random.default_rng(np.random.SeedSequence([base_seed, i]))
        sets = sample_patches(train, coding, n_patches, patch_size, row_rng)
        model = fit_class_models(sets, ranks)
        for j, test in enumerate(samples):
            try:
                pred = classify_pixels(model, test, patch_size, coding)
                values[i, j] = compute_ccr(pred, test.labels, coding).ccr
            except Exception as exc:
                raise RuntimeError(f"pair (train={train.id}, test={test.id}) "
                                   f"failed: {exc}") from exc
    return ErrorMatrix(ids=ids, values=values)
