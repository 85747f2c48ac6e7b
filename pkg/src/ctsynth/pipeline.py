"""Shared preprocessing: slice files to normalized network-ready stacks.

Every consumer (adversarial training, synthesis, classification) runs
the same path: resample to the working side, optionally segment and
mask the lung fields, then window to [-1, 1].  Synthetic slices (case
ids carrying a provenance suffix) are already masked at synthesis time
and pass through without re-segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DEFAULT_WINDOW, CTSlice, load_slice, normalize, resize_slice
from .manifest import PROVENANCE_SEP, DatasetManifest, ManifestEntry
from .segment import LungMask, SegmentConfig, apply_mask, segment_lungs

LABEL_CODES = {"normal": 0, "covid": 1}


@dataclass(frozen=True)
class DataPipelineConfig:
    side: int = 64
    window: tuple[float, float] = DEFAULT_WINDOW
    seg: SegmentConfig = SegmentConfig()
    segment_inputs: bool = True

    def __post_init__(self) -> None:
        if self.side < 16:
            raise ValueError(f"side must be >= 16, got {self.side}")
        lo, hi = self.window
        if not lo < hi:
            raise ValueError(f"window must satisfy lo < hi, got ({lo}, {hi})")


def entry_is_synthetic(entry: ManifestEntry) -> bool:
    return PROVENANCE_SEP in entry.case_id


def prepare_slice(
    sl: CTSlice,
    pipe: DataPipelineConfig,
    passthrough: bool = False,
) -> tuple[np.ndarray, LungMask | None]:
    """Resample, optionally mask, and window one slice.

    Returns the normalized (side, side) float32 array and the lung mask
    used (None when masking was skipped).
    """
    sl = resize_slice(sl, pipe.side)
    mask = None
    if pipe.segment_inputs and not passthrough:
        mask = segment_lungs(sl, pipe.seg)
        sl = apply_mask(sl, mask, background=pipe.seg.background)
    return normalize(sl, pipe.window).values, mask


def load_entry(entry: ManifestEntry, pipe: DataPipelineConfig) -> np.ndarray:
    sl = load_slice(entry.path, case_id=entry.case_id)
    values, _ = prepare_slice(sl, pipe, passthrough=entry_is_synthetic(entry))
    return values


def load_stack(
    manifest: DatasetManifest, pipe: DataPipelineConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Load a manifest into an (N, 1, side, side) float32 stack plus labels."""
    if len(manifest) == 0:
        raise ValueError("cannot load an empty manifest")
    images = np.stack([load_entry(e, pipe) for e in manifest])[:, None, :, :]
    labels = np.array([LABEL_CODES[e.label] for e in manifest], dtype=np.int64)
    return images.astype(np.float32), labels
