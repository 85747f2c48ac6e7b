"""Intensity-based lung field segmentation.

The pipeline exploits the bimodal intensity structure of chest CT: air
(about -1000 HU) against soft tissue and bone (0 HU and above).  A
global threshold is chosen either by exhaustive within-class variance
minimization over histogram bin edges or by two-cluster Lloyd
iteration; pixels below the threshold are foreground.  Air connected to
the image border is discarded, a binary opening removes vessel specks
and thin bridges, and up to two large, centrally located components are
kept as the lung fields.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage as ndi

from .data import HU_MAX, HU_MIN, CTSlice

CROSS3 = ndi.generate_binary_structure(2, 1)
SQUARE3 = np.ones((3, 3), dtype=bool)
KERNELS = {"cross3": CROSS3, "square3": SQUARE3}
EIGHT_CONN = np.ones((3, 3), dtype=int)


class SegmentationError(ValueError):
    """Bad inputs to a segmentation step."""


class DegenerateHistogramError(SegmentationError):
    """Histogram has fewer than two occupied bins; no threshold exists."""


@dataclass
class IntensityHistogram:
    """Fixed-bin histogram over the intensities observed in one slice.

    ``bin_edges`` has ``len(counts) + 1`` monotone entries spanning the
    observed min..max; every pixel lands in exactly one bin (the last
    edge is inclusive).
    """

    bin_edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self) -> None:
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if edges.ndim != 1 or counts.ndim != 1 or len(edges) != len(counts) + 1:
            raise SegmentationError("bin_edges must have len(counts) + 1 entries")
        if np.any(np.diff(edges) <= 0):
            raise SegmentationError("bin_edges must be strictly increasing")
        if np.any(counts < 0):
            raise SegmentationError("counts must be non-negative")
        self.bin_edges = edges
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def occupied_bins(self) -> int:
        return int(np.count_nonzero(self.counts))

    @property
    def degenerate(self) -> bool:
        return self.occupied_bins < 2

    @property
    def centers(self) -> np.ndarray:
        return (self.bin_edges[:-1] + self.bin_edges[1:]) / 2.0


@dataclass
class ClusterState:
    """Result of 1-D two-cluster Lloyd iteration.

    ``objective`` is the summed squared distance of every pixel to its
    assigned centroid; ``objective_trace`` records it after each
    assign/update round and never increases.
    """

    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    iterations: int
    objective_trace: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)


@dataclass
class LungMask:
    """Boolean lung-field mask plus bookkeeping about what was kept."""

    bits: np.ndarray
    no_lung: bool = False
    component_count: int = 0
    area_fraction: float = 0.0

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise SegmentationError(f"mask must be 2-D, got shape {bits.shape}")
        if bits.dtype != bool:
            bits = bits.astype(bool)
        self.bits = bits
        _, n = ndi.label(bits, structure=EIGHT_CONN)
        self.component_count = int(n)
        self.area_fraction = float(bits.mean()) if bits.size else 0.0
        if self.no_lung and bits.any():
            raise SegmentationError("no_lung mask must be empty")
        if not bits.any():
            self.no_lung = True


@dataclass(frozen=True)
class SegmentConfig:
    """Knobs for the end-to-end lung segmentation pipeline."""

    bins: int = 256
    erosions: int = 2
    dilations: int = 2
    kernel: str = "cross3"
    center_box_fraction: float = 0.75
    min_area_fraction: float = 0.005
    background: int = HU_MIN

    def __post_init__(self) -> None:
        if self.bins < 2:
            raise SegmentationError(f"bins must be >= 2, got {self.bins}")
        if self.erosions < 0 or self.dilations < 0:
            raise SegmentationError("erosion/dilation counts must be >= 0")
        if self.kernel not in KERNELS:
            raise SegmentationError(f"kernel must be one of {tuple(KERNELS)}")
        if not 0.0 < self.center_box_fraction <= 1.0:
            raise SegmentationError("center_box_fraction must be in (0, 1]")
        if not 0.0 <= self.min_area_fraction < 1.0:
            raise SegmentationError("min_area_fraction must be in [0, 1)")


def build_histogram(sl: CTSlice, bins: int = 256) -> IntensityHistogram:
    """Histogram the slice over [min, max] with equal-width bins.

    The bin count is fixed regardless of the intensity spread; a slice
    whose pixels are all identical yields a single occupied bin and is
    reported as degenerate by the result.
    """
    if bins < 2:
        raise SegmentationError(f"bins must be >= 2, got {bins}")
    lo = float(sl.hu.min())
    hi = float(sl.hu.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(sl.hu.ravel(), bins=edges)
    return IntensityHistogram(bin_edges=edges, counts=counts)


def _class_stats(counts: np.ndarray, centers: np.ndarray) -> tuple[float, float]:
    """Weighted mean and variance of one class (counts over bin centers)."""
    n = counts.sum()
    mean = float((counts * centers).sum() / n)
    var = float((counts * (centers - mean) ** 2).sum() / n)
    return mean, var


def within_class_variance(h: IntensityHistogram, edge_index: int) -> float:
    """Within-class variance for the split at ``bin_edges[edge_index]``.

    Bins strictly below the edge form the low class, the rest the high
    class; each class must hold at least one pixel.
    """
    counts = h.counts.astype(np.float64)
    centers = h.centers
    n_lo = counts[:edge_index].sum()
    n_hi = counts[edge_index:].sum()
    total = n_lo + n_hi
    if n_lo == 0 or n_hi == 0:
        raise SegmentationError(f"split at edge {edge_index} leaves an empty class")
    _, var_lo = _class_stats(counts[:edge_index], centers[:edge_index])
    _, var_hi = _class_stats(counts[edge_index:], centers[edge_index:])
    return (n_lo / total) * var_lo + (n_hi / total) * var_hi


def otsu_threshold(h: IntensityHistogram) -> float:
    """Exhaustive within-class variance minimization over interior bin edges.

    Returns the edge value; among ties the smallest threshold wins.
    Degenerate histograms (fewer than two occupied bins) are rejected.
    """
    if h.degenerate:
        raise DegenerateHistogramError(
            "histogram has fewer than two occupied bins; cannot threshold"
        )
    best_t = None
    best_var = np.inf
    for k in range(1, len(h.counts)):
        if h.counts[:k].sum() == 0 or h.counts[k:].sum() == 0:
            continue
        var = within_class_variance(h, k)
        if var < best_var:
            best_var = var
            best_t = float(h.bin_edges[k])
    assert best_t is not None
    return best_t


def kmeans2_threshold(
    pixels: np.ndarray, max_iterations: int = 500
) -> tuple[float, ClusterState]:
    """Two-cluster Lloyd iteration on raw intensities.

    Centroids start at the observed minimum and maximum, assignment is
    by nearest centroid (ties to the lower one), and iteration stops
    when assignments no longer change.  The returned threshold is the
    centroid midpoint.
    """
    x = np.asarray(pixels, dtype=np.float64).ravel()
    if x.size == 0:
        raise SegmentationError("cannot cluster an empty pixel set")
    if float(x.min()) == float(x.max()):
        raise SegmentationError("all intensities identical; two clusters undefined")
    centroids = np.array([x.min(), x.max()], dtype=np.float64)
    assignments = np.full(x.size, -1, dtype=np.int64)
    trace: list[float] = []
    iterations = 0
    for _ in range(max_iterations):
        d0 = np.abs(x - centroids[0])
        d1 = np.abs(x - centroids[1])
        new_assign = np.where(d0 <= d1, 0, 1)
        iterations += 1
        for c in (0, 1):
            members = x[new_assign == c]
            if members.size:
                centroids[c] = members.mean()
        diffs = x - centroids[new_assign]
        trace.append(float((diffs * diffs).sum()))
        if np.array_equal(new_assign, assignments):
            assignments = new_assign
            break
        assignments = new_assign
    threshold = float(centroids.mean())
    state = ClusterState(
        centroids=centroids.copy(),
        assignments=assignments,
        objective=trace[-1],
        iterations=iterations,
        objective_trace=trace,
    )
    return threshold, state


def binarize(sl: CTSlice, threshold: float) -> np.ndarray:
    """Foreground = pixels strictly below the threshold (air is dark)."""
    return sl.hu < threshold


def remove_external_air(mask: np.ndarray) -> np.ndarray:
    """Drop foreground connected (4-neighborhood) to the image border."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise SegmentationError(f"mask must be 2-D, got shape {m.shape}")
    labels, n = ndi.label(m, structure=CROSS3)
    if n == 0:
        return m.copy()
    border = np.zeros_like(m)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True
    border_labels = np.unique(labels[border & m])
    keep = ~np.isin(labels, border_labels) & m
    return keep


def morph_open(
    mask: np.ndarray,
    erosions: int = 2,
    dilations: int = 2,
    kernel: str = "cross3",
) -> np.ndarray:
    """Binary opening: the given number of erosions, then dilations."""
    if kernel not in KERNELS:
        raise SegmentationError(f"kernel must be one of {tuple(KERNELS)}")
    if erosions < 0 or dilations < 0:
        raise SegmentationError("erosion/dilation counts must be >= 0")
    m = np.asarray(mask, dtype=bool)
    struct = KERNELS[kernel]
    if erosions:
        m = ndi.binary_erosion(m, structure=struct, iterations=erosions, border_value=0)
    if dilations:
        m = ndi.binary_dilation(m, structure=struct, iterations=dilations, border_value=0)
    return m


def select_lung_components(
    mask: np.ndarray,
    center_box_fraction: float = 0.75,
    min_area_fraction: float = 0.005,
) -> LungMask:
    """Keep up to the two largest centrally located components.

    A component qualifies when its centroid falls inside the centered
    box covering ``center_box_fraction`` of each image dimension and its
    area is at least ``min_area_fraction`` of the image.  When nothing
    qualifies the result is an explicit empty no-lung mask.
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise SegmentationError(f"mask must be 2-D, got shape {m.shape}")
    h, w = m.shape
    labels, n = ndi.label(m, structure=EIGHT_CONN)
    if n == 0:
        return LungMask(bits=np.zeros_like(m), no_lung=True)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    centroids = ndi.center_of_mass(m, labels, index=range(1, n + 1))
    half = center_box_fraction / 2.0
    r_lo, r_hi = (0.5 - half) * (h - 1), (0.5 + half) * (h - 1)
    c_lo, c_hi = (0.5 - half) * (w - 1), (0.5 + half) * (w - 1)
    min_area = min_area_fraction * h * w
    qualified = []
    for lab in range(1, n + 1):
        cy, cx = centroids[lab - 1]
        if areas[lab] < min_area:
            continue
        if r_lo <= cy <= r_hi and c_lo <= cx <= c_hi:
            qualified.append((int(areas[lab]), lab))
    qualified.sort(key=lambda t: (-t[0], t[1]))
    chosen = [lab for _, lab in qualified[:2]]
    if not chosen:
        return LungMask(bits=np.zeros_like(m), no_lung=True)
    bits = np.isin(labels, chosen)
    return LungMask(bits=bits)


def apply_mask(sl: CTSlice, mask, background: int = HU_MIN) -> CTSlice:
    """Replace everything outside the mask with a constant background HU.

    The default background is -1024 (air).  Passing 0 reproduces the
    water-level convention some pipelines use; any in-range HU works.
    """
    bits = mask.bits if isinstance(mask, LungMask) else np.asarray(mask, dtype=bool)
    if bits.shape != sl.hu.shape:
        raise SegmentationError(
            f"mask shape {bits.shape} does not match slice shape {sl.hu.shape}"
        )
    bg = int(background)
    if not HU_MIN <= bg <= HU_MAX:
        raise SegmentationError(f"background HU {bg} outside valid range")
    hu = np.where(bits, sl.hu, np.int16(bg)).astype(np.int16)
    return sl.with_hu(hu)


def segment_lungs(sl: CTSlice, cfg: SegmentConfig = SegmentConfig()) -> LungMask:
    """Full pipeline: histogram, threshold, clean-up, component selection."""
    hist = build_histogram(sl, bins=cfg.bins)
    if hist.degenerate:
        return LungMask(bits=np.zeros(sl.hu.shape, dtype=bool), no_lung=True)
    t = otsu_threshold(hist)
    fg = binarize(sl, t)
    fg = remove_external_air(fg)
    fg = morph_open(fg, erosions=cfg.erosions, dilations=cfg.dilations, kernel=cfg.kernel)
    return select_lung_components(
        fg,
        center_box_fraction=cfg.center_box_fraction,
        min_area_fraction=cfg.min_area_fraction,
    )


def lung_area_fraction(mask: LungMask) -> float:
    return mask.area_fraction


def dice_coefficient(a, b) -> float:
    """Dice overlap between two boolean masks (1.0 when both are empty)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise SegmentationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def save_mask(mask: LungMask, path: str) -> str:
    """Write a mask as an 8-bit PNG (255 inside, 0 outside)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(mask.bits.astype(np.uint8) * 255).save(path)
    return path


def load_mask(path: str) -> LungMask:
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise SegmentationError(f"{path!r} is not a single-channel mask image")
    return LungMask(bits=arr > 127)
