"""Synthetic chest-CT slice phantoms with known ground truth.

Each phantom is a deterministic function of its spec: a soft-tissue
body ellipse (+40 HU) ringed by bone (+700 HU) with a spine knob, two
air-filled lung ellipses (-800 HU) holding small bright vessel dots
(+50 HU), and, for the positive class, ground-glass blobs at
configurable subsolid intensities.  Gaussian HU noise is added last.
The construction keeps per-structure masks so tests can check the
rendered slice against exact bookkeeping.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .data import HU_MAX, HU_MIN, CTSlice, save_slice
from .manifest import (
    LABELS,
    DatasetManifest,
    ManifestEntry,
    save_manifest,
)
from .segment import LungMask, save_mask

BODY_HU = 40
BONE_HU = 700
LUNG_HU = -800
VESSEL_HU = 50


class PhantomError(ValueError):
    """Inconsistent phantom spec or impossible blob placement."""


@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic recipe for one phantom slice."""

    seed: int
    size: int = 256
    label: str = "normal"
    lung_eccentricity: float = 1.4
    vessel_count: int = 6
    ggo_count: int = 0
    ggo_intensity_range: tuple[float, float] = (-400.0, -150.0)
    noise_hu: float = 20.0

    def __post_init__(self) -> None:
        if self.size < 16:
            raise PhantomError(f"size must be >= 16, got {self.size}")
        if self.label not in LABELS:
            raise PhantomError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.label == "covid" and self.ggo_count < 1:
            raise PhantomError("covid phantoms need ggo_count >= 1")
        if self.label == "normal" and self.ggo_count != 0:
            raise PhantomError("normal phantoms must have ggo_count == 0")
        if self.lung_eccentricity <= 0:
            raise PhantomError("lung_eccentricity must be positive")
        if self.vessel_count < 0:
            raise PhantomError("vessel_count must be >= 0")
        lo, hi = self.ggo_intensity_range
        if not (LUNG_HU < lo < hi <= 0.0):
            raise PhantomError(
                f"ggo_intensity_range must satisfy {LUNG_HU} < lo < hi <= 0, got ({lo}, {hi})"
            )
        if self.noise_hu < 0:
            raise PhantomError("noise_hu must be >= 0")


@dataclass
class PhantomParts:
    """Per-structure masks recorded during construction."""

    body: np.ndarray
    bone: np.ndarray
    lungs: np.ndarray
    vessels: np.ndarray
    ggo_masks: list[np.ndarray] = field(default_factory=list)
    ggo_intensities: list[float] = field(default_factory=list)


def _ellipse(xx, yy, cx, cy, a, b, theta=0.0):
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _disk(size, row, col, radius):
    yy, xx = np.ogrid[:size, :size]
    return (yy - row) ** 2 + (xx - col) ** 2 <= radius**2


def _place_disk(rng, region, radius, forbidden, size, attempts=300):
    """Sample a disk center until the disk sits inside ``region`` and clear
    of ``forbidden``; returns the disk mask or None."""
    rows, cols = np.nonzero(region)
    if rows.size == 0:
        return None
    for _ in range(attempts):
        i = int(rng.integers(0, rows.size))
        disk = _disk(size, int(rows[i]), int(cols[i]), radius)
        if not (disk & ~region).any() and not (disk & forbidden).any():
            return disk
    return None


def _place_clipped_blob(rng, home, lungs, radius, forbidden, size, attempts=300):
    """Sample a disk centered in ``home`` and clip it to the lung fields.

    Lesions may abut the lung boundary, so only the center must be free;
    the blob keeps the connected part of the disk around its center that
    lands on clear lung.  The clipped blob must retain a meaningful area
    or the draw is retried.
    """
    rows, cols = np.nonzero(home & ~forbidden)
    if rows.size == 0:
        return None
    full_area = np.pi * radius * radius
    for _ in range(attempts):
        i = int(rng.integers(0, rows.size))
        row, col = int(rows[i]), int(cols[i])
        blob = _disk(size, row, col, radius) & lungs & ~forbidden
        labels, n = ndi.label(blob, structure=np.ones((3, 3), dtype=bool))
        if n > 1:
            blob = labels == labels[row, col]
        if blob.sum() >= max(5, int(full_area / 3)):
            return blob
    return None


def generate_phantom_with_parts(
    spec: PhantomSpec, case_id: str | None = None
) -> tuple[CTSlice, PhantomParts]:
    """Render one phantom and return it with its construction masks."""
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    ax = np.linspace(-1.0, 1.0, s)
    xx = ax[None, :]
    yy = ax[:, None]

    bx, by = rng.uniform(-0.03, 0.03, size=2)
    rx = 0.80 * rng.uniform(0.95, 1.05)
    ry = 0.62 * rng.uniform(0.95, 1.05)
    body = _ellipse(xx, yy, bx, by, rx, ry)
    inner = _ellipse(xx, yy, bx, by, 0.90 * rx, 0.90 * ry)
    bone = body & ~inner
    spine = _ellipse(xx, yy, bx, by + 0.72 * ry, 0.11 * rx, 0.11 * rx)
    bone |= spine & body

    cavity = _ellipse(xx, yy, bx, by, 0.88 * rx, 0.88 * ry)
    lungs = np.zeros((s, s), dtype=bool)
    lung_sides: list[np.ndarray] = []
    for side in (-1.0, 1.0):
        lx = bx + side * 0.42 * rx
        ly = by - 0.05 * ry
        a = 0.30 * rx * rng.uniform(0.90, 1.10)
        b = min(a * spec.lung_eccentricity * rng.uniform(0.92, 1.08), 0.78 * ry)
        theta = side * rng.uniform(-0.12, 0.12)
        one = _ellipse(xx, yy, lx, ly, a, b, theta) & cavity & ~bone
        lung_sides.append(one)
        lungs |= one

    ggo_masks: list[np.ndarray] = []
    ggo_intensities: list[float] = []
    ggo_union = np.zeros((s, s), dtype=bool)
    for j in range(spec.ggo_count):
        radius = max(2, int(round(rng.uniform(0.04, 0.08) * s)))
        home = lung_sides[int(rng.integers(0, 2))]
        grown = _grow(ggo_union) if ggo_union.any() else ggo_union
        disk = _place_clipped_blob(rng, home, lungs, radius, grown, s)
        if disk is None:
            disk = _place_clipped_blob(rng, lungs, lungs, 2, grown, s)
        if disk is None:
            # tiny canvases leave little clear lung; a minimal blob that
            # avoids earlier blobs keeps the masks disjoint
            disk = _place_disk(rng, lungs, 1, ggo_union, s)
        if disk is None:
            raise PhantomError(
                f"could not place ggo blob {j} (seed {spec.seed}, size {s})"
            )
        ggo_masks.append(disk)
        ggo_intensities.append(float(rng.uniform(*spec.ggo_intensity_range)))
        ggo_union |= disk

    vessels = np.zeros((s, s), dtype=bool)
    max_r = max(2, s // 85)
    for i in range(spec.vessel_count):
        home = lung_sides[i % 2]
        if not home.any():
            home = lungs
        radius = int(rng.integers(1, max_r + 1))
        disk = _place_disk(rng, home, radius, ggo_union, s)
        if disk is not None:
            vessels |= disk

    hu = np.full((s, s), float(HU_MIN))
    hu[body] = BODY_HU
    hu[lungs] = LUNG_HU
    for disk, value in zip(ggo_masks, ggo_intensities):
        hu[disk] = value
    hu[vessels & lungs & ~ggo_union] = VESSEL_HU
    hu[bone] = BONE_HU
    if spec.noise_hu > 0:
        hu += rng.normal(0.0, spec.noise_hu, size=(s, s))
    hu = np.rint(np.clip(hu, HU_MIN, HU_MAX)).astype(np.int16)

    if case_id is None:
        case_id = f"ph-{spec.label}-{spec.seed}"
    sl = CTSlice(hu=hu, case_id=case_id, source="phantom")
    parts = PhantomParts(
        body=body,
        bone=bone,
        lungs=lungs,
        vessels=vessels & lungs & ~ggo_union,
        ggo_masks=ggo_masks,
        ggo_intensities=ggo_intensities,
    )
    return sl, parts


def _grow(mask: np.ndarray) -> np.ndarray:
    """One-pixel 8-neighborhood dilation used to keep blobs separated."""
    grown = mask.copy()
    grown[1:, :] |= mask[:-1, :]
    grown[:-1, :] |= mask[1:, :]
    grown[:, 1:] |= mask[:, :-1]
    grown[:, :-1] |= mask[:, 1:]
    grown[1:, 1:] |= mask[:-1, :-1]
    grown[:-1, :-1] |= mask[1:, 1:]
    grown[1:, :-1] |= mask[:-1, 1:]
    grown[:-1, 1:] |= mask[1:, :-1]
    return grown


def generate_phantom(spec: PhantomSpec, case_id: str | None = None) -> tuple[CTSlice, LungMask]:
    """Render one phantom and its ground-truth lung mask."""
    sl, parts = generate_phantom_with_parts(spec, case_id=case_id)
    return sl, LungMask(bits=parts.lungs)


def sample_spec(
    rng: np.random.Generator,
    label: str,
    size: int,
    noise_hu: float = 20.0,
) -> PhantomSpec:
    """Draw a varied phantom spec (geometry, vessels, lesions) from ``rng``."""
    return PhantomSpec(
        seed=int(rng.integers(0, 2**62)),
        size=size,
        label=label,
        lung_eccentricity=float(rng.uniform(1.15, 1.60)),
        vessel_count=int(rng.integers(3, 9)),
        ggo_count=int(rng.integers(1, 4)) if label == "covid" else 0,
        noise_hu=noise_hu,
    )


def build_phantom_dataset(
    out_dir: str,
    n_normal: int,
    n_covid: int,
    size: int = 256,
    seed: int = 0,
    split: str = "train",
    noise_hu: float = 20.0,
    save_masks: bool = True,
    case_prefix: str | None = None,
) -> DatasetManifest:
    """Render a labelled phantom dataset and write slices, ground-truth
    masks, and a manifest under ``out_dir``."""
    rng = np.random.default_rng([seed, 97])
    prefix = case_prefix if case_prefix is not None else split
    entries = []
    jobs = [("normal", i) for i in range(n_normal)] + [("covid", i) for i in range(n_covid)]
    for label, i in jobs:
        spec = sample_spec(rng, label, size, noise_hu=noise_hu)
        case_id = f"{prefix}-{label}-{i:04d}"
        sl, mask = generate_phantom(spec, case_id=case_id)
        slice_path = os.path.join(out_dir, "slices", f"{case_id}.png")
        save_slice(sl, slice_path, fmt="png16")
        if save_masks:
            save_mask(mask, os.path.join(out_dir, "masks", f"{case_id}.png"))
        entries.append(
            ManifestEntry(path=slice_path, label=label, split=split, case_id=case_id)
        )
    m = DatasetManifest(entries=entries)
    save_manifest(m, os.path.join(out_dir, "manifest.tsv"))
    return m
