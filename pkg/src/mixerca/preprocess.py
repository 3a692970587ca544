"""From raw hyperspectral cube to training-ready patch sets.

Pipeline order: fit PCA on every pixel spectrum, project the cube onto
the leading components, min-max normalize each retained channel to
[0, 1], cut one square patch around every labeled pixel (reflecting at
the borders), then split the patches per class into train and test.

Labels use 0 for unlabeled background and 1..L for classes; background
pixels never produce patches and never enter any metric.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, InputError, ShapeError, SplitError
from .tensor_core import Tensor, as_tensor


@dataclass
class HsiCube:
    """A hyperspectral image: reflectance values ``(H, W, B)``."""

    values: Tensor

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.values.ndim != 3:
            raise ShapeError(f"cube must be (H, W, B), got shape {self.values.shape}")
        if min(self.values.shape) < 1:
            raise ShapeError(f"cube extents must be positive, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("cube contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass
class LabelMap:
    """Ground truth grid ``(H, W)``: 0 background, 1..num_classes labels."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels)
        if self.labels.ndim != 2:
            raise ShapeError(f"labels must be (H, W), got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise InputError(f"labels must be integers, got dtype {self.labels.dtype}")
        self.labels = self.labels.astype(np.int64)
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        low = int(self.labels.min())
        high = int(self.labels.max())
        if low < 0 or high > self.num_classes:
            raise InputError(
                f"labels must lie in 0..{self.num_classes}, found range {low}..{high}"
            )
        present = np.unique(self.labels)
        missing = [k for k in range(1, self.num_classes + 1) if k not in present]
        if missing:
            raise InputError(f"classes {missing} have no labeled pixels")

    def labeled_count(self) -> int:
        return int(np.count_nonzero(self.labels))


@dataclass
class PcaModel:
    """Mean spectrum and orthonormal projection fitted by :func:`pca_fit`."""

    mean: Tensor
    components: Tensor  # (B, C), columns are principal directions
    explained_variance: Tensor  # (C,), non-increasing

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.components = as_tensor(self.components)
        self.explained_variance = as_tensor(self.explained_variance)
        if self.mean.ndim != 1 or self.components.ndim != 2:
            raise ShapeError("PCA model needs a mean vector and a 2-D component matrix")
        if self.components.shape[0] != self.mean.shape[0]:
            raise ShapeError(
                f"components rows ({self.components.shape[0]}) must match "
                f"mean length ({self.mean.shape[0]})"
            )
        if self.explained_variance.shape != (self.components.shape[1],):
            raise ShapeError("explained_variance length must match component count")

    @property
    def bands(self) -> int:
        return self.components.shape[0]

    @property
    def count(self) -> int:
        return self.components.shape[1]


@dataclass
class PatchSet:
    """Patches ``(N, S, S, C)`` with labels 1..L and source coordinates ``(N, 2)``."""

    patches: Tensor
    labels: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        self.patches = as_tensor(self.patches)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int64)
        if self.patches.ndim != 4:
            raise ShapeError(f"patches must be (N, S, S, C), got shape {self.patches.shape}")
        if self.patches.shape[1] != self.patches.shape[2]:
            raise ShapeError(f"patches must be square, got shape {self.patches.shape}")
        n = self.patches.shape[0]
        if self.labels.shape != (n,) or self.coords.shape != (n, 2):
            raise ShapeError("labels and coords must match the patch count")
        if n and self.labels.min() < 1:
            raise InputError("patch labels must be 1-based class ids")

    def __len__(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]

    def subset(self, indices) -> "PatchSet":
        indices = np.asarray(indices, dtype=np.int64)
        return PatchSet(self.patches[indices], self.labels[indices], self.coords[indices])

    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def pca_fit(cube: HsiCube, count: int) -> PcaModel:
    """Fit a PCA on all pixel spectra of ``cube``, keeping ``count`` components.

    The covariance uses the unbiased ``n - 1`` divisor and is
    diagonalized with a symmetric eigendecomposition; eigenvalues come
    out ascending and are reordered to non-increasing. Each component's
    sign is fixed so that its largest-magnitude entry is positive
    (ties broken by the lowest band index), which makes the fit
    deterministic for a given cube.
    """
    if count < 1:
        raise ConfigError(f"component count must be positive, got {count}")
    if count > cube.bands:
        raise ConfigError(f"cannot keep {count} components from {cube.bands} bands")
    pixels = cube.values.reshape(-1, cube.bands)
    n = pixels.shape[0]
    if n < 2:
        raise ConfigError(f"PCA needs at least 2 pixels, got {n}")
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = (centered.T @ centered) / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:count]
    components = eigenvectors[:, order]
    variance = eigenvalues[order]
    for idx in range(count):
        col = components[:, idx]
        if col[np.argmax(np.abs(col))] < 0:
            components[:, idx] = -col
    return PcaModel(mean, components, variance)


def pca_transform(cube: HsiCube, pca: PcaModel) -> Tensor:
    """Project every pixel of ``cube`` onto the fitted components: ``(H, W, C)``."""
    if cube.bands != pca.bands:
        raise ShapeError(f"cube has {cube.bands} bands, PCA model expects {pca.bands}")
    pixels = cube.values.reshape(-1, cube.bands)
    scores = (pixels - pca.mean) @ pca.components
    return scores.reshape(cube.height, cube.width, pca.count)


def normalize(scores: Tensor) -> Tensor:
    """Min-max scale each channel of ``(H, W, C)`` to [0, 1].

    A constant channel maps to all zeros. Applying the function twice
    gives the same result as applying it once.
    """
    scores = as_tensor(scores)
    if scores.ndim != 3:
        raise ShapeError(f"normalize expects (H, W, C), got shape {scores.shape}")
    lo = scores.min(axis=(0, 1))
    hi = scores.max(axis=(0, 1))
    span = hi - lo
    safe = np.where(span > 0.0, span, 1.0)
    out = (scores - lo) / safe
    return np.where(span > 0.0, out, 0.0)


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------

def extract_patches(scores: Tensor, label_map: LabelMap, patch_size: int) -> PatchSet:
    """One ``(S, S, C)`` patch per labeled pixel, centered on the pixel.

    Border patches are completed by reflecting the map across the edge
    (the edge row or column itself is not duplicated). Pixels are
    visited in row-major order, so patch ``i`` corresponds to the i-th
    labeled position.
    """
    scores = as_tensor(scores)
    if scores.ndim != 3:
        raise ShapeError(f"scores must be (H, W, C), got shape {scores.shape}")
    h, w, _ = scores.shape
    if label_map.labels.shape != (h, w):
        raise ShapeError(
            f"label grid {label_map.labels.shape} does not match scores ({h}, {w})"
        )
    if patch_size < 1 or patch_size % 2 == 0:
        raise ConfigError(f"patch_size must be odd and positive, got {patch_size}")
    pad = (patch_size - 1) // 2
    if pad >= min(h, w):
        raise ConfigError(
            f"patch_size {patch_size} too large for a {h}x{w} map (reflection needs "
            f"half-width < min extent)"
        )
    padded = np.pad(scores, ((pad, pad), (pad, pad), (0, 0)), mode="reflect") if pad else scores
    coords = np.argwhere(label_map.labels > 0)
    if coords.shape[0] == 0:
        raise InputError("label map has no labeled pixels")
    n = coords.shape[0]
    patches = np.empty((n, patch_size, patch_size, scores.shape[2]), dtype=np.float64)
    for i, (r, c) in enumerate(coords):
        patches[i] = padded[r:r + patch_size, c:c + patch_size, :]
    labels = label_map.labels[coords[:, 0], coords[:, 1]]
    return PatchSet(patches, labels, coords)


# ---------------------------------------------------------------------------
# Stratified splitting
# ---------------------------------------------------------------------------

def round_half_up(value: float) -> int:
    """Round to the nearest integer, halves away from zero toward +inf."""
    return int(np.floor(value + 0.5))


def stratified_split(
    patch_set: PatchSet,
    fraction: Optional[float],
    seed: int,
    per_class_counts: Optional[dict[int, int]] = None,
) -> tuple[PatchSet, PatchSet]:
    """Split per class into train and test, seeded and reproducible.

    Each class contributes ``max(2, round_half_up(fraction * n_k))``
    training samples, unless ``per_class_counts`` pins an explicit count
    for that class. Training indices are drawn uniformly without
    replacement; everything else goes to test. Classes are processed in
    ascending id order and selected indices are sorted, so a seed fully
    determines the split.
    """
    per_class_counts = dict(per_class_counts or {})
    classes = sorted(int(k) for k in np.unique(patch_set.labels))
    if fraction is None:
        uncovered = [k for k in classes if k not in per_class_counts]
        if uncovered:
            raise ConfigError(
                f"no fraction given and classes {uncovered} have no explicit count"
            )
    elif not 0.0 < fraction < 1.0:
        raise ConfigError(f"train fraction must be in (0, 1), got {fraction}")
    unknown = sorted(set(per_class_counts) - set(classes))
    if unknown:
        raise ConfigError(f"per-class counts given for absent classes {unknown}")

    rng = np.random.default_rng(seed)
    train_indices = []
    for cls in classes:
        members = np.flatnonzero(patch_set.labels == cls)
        n_k = members.shape[0]
        if n_k < 3:
            raise SplitError(
                f"class {cls} has only {n_k} samples; need at least 3 to split"
            )
        if cls in per_class_counts:
            want = int(per_class_counts[cls])
        else:
            want = max(2, round_half_up(fraction * n_k))
        if want < 1:
            raise SplitError(f"class {cls}: requested {want} training samples")
        if want >= n_k:
            raise SplitError(
                f"class {cls}: requested {want} training samples of {n_k}; "
                f"at least one must remain for test"
            )
        picked = rng.choice(members, size=want, replace=False)
        train_indices.append(np.sort(picked))

    train_idx = np.concatenate(train_indices)
    mask = np.zeros(len(patch_set), dtype=bool)
    mask[train_idx] = True
    test_idx = np.flatnonzero(~mask)
    return patch_set.subset(train_idx), patch_set.subset(test_idx)
