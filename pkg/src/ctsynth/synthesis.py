"""Synthetic positive-slice generation from a trained translator.

Each output is grown from one normal source slice: resample, segment
and mask (unless disabled), window, push through the normal-to-positive
generator, verify the output range, optionally snap near-floor values
to the exact background level and re-apply the source lung mask so
nothing is invented outside the lungs, then write as a 16-bit PNG.

Three harmonization switches exist because a tanh generator approaches
but never reaches the discrete intensity statistics of masked slices:
``floor_snap_hu`` collapses the near-background ramp onto the exact
background level; ``match_source_intensities`` resamples the surviving
foreground values onto the source slice's own foreground distribution;
``carve_from_source`` goes further and composites the output from the
source slice itself, keeping the source pixel wherever the translator
keeps brightness and writing exact background wherever the translator
dims below the snap level.  Under carving the translator contributes
the lesion placement while every surviving pixel keeps the source's
acquisition statistics, including its spatial noise texture.

Outputs get case ids of the form ``<source_case>#s<k>`` plus a
JSON sidecar recording the checkpoint digest and per-slice sources, so
every synthetic slice is traceable and split audits keep working.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import HU_MIN, NormalizedImage, denormalize, load_slice, save_slice
from .manifest import (
    PROVENANCE_SEP,
    DatasetManifest,
    ManifestEntry,
    ManifestError,
    base_case,
    merge_manifests,
    save_manifest,
)
from .pipeline import DataPipelineConfig, prepare_slice
from .segment import apply_mask
from .training import checkpoint_file_hash, load_checkpoint

RANGE_TOLERANCE = 1e-3
PROVENANCE_FILE = "provenance.json"


class SynthesisError(RuntimeError):
    """Bad job parameters or too many out-of-range generator outputs."""


@dataclass(frozen=True)
class SynthesisJob:
    checkpoint: str
    source: DatasetManifest
    count: int
    out_dir: str
    seed: int = 0
    remask: bool = True
    pipe: DataPipelineConfig = DataPipelineConfig()
    max_reject_fraction: float = 0.10
    floor_snap_hu: float | None = None
    match_source_intensities: bool = False
    carve_from_source: bool = False

    def __post_init__(self) -> None:
        if self.count < 0:
            raise SynthesisError(f"count must be >= 0, got {self.count}")
        if not 0.0 <= self.max_reject_fraction <= 1.0:
            raise SynthesisError("max_reject_fraction must be in [0, 1]")
        if self.floor_snap_hu is not None and not HU_MIN < self.floor_snap_hu <= 0:
            raise SynthesisError(
                f"floor_snap_hu must be in ({HU_MIN}, 0], got {self.floor_snap_hu}"
            )
        if self.match_source_intensities and self.floor_snap_hu is None:
            raise SynthesisError(
                "match_source_intensities needs floor_snap_hu to separate "
                "foreground from background first"
            )
        if self.carve_from_source and self.floor_snap_hu is None:
            raise SynthesisError(
                "carve_from_source needs floor_snap_hu to decide which "
                "pixels the translator removes"
            )
        if self.carve_from_source and self.match_source_intensities:
            raise SynthesisError(
                "carve_from_source already keeps source intensities; "
                "drop match_source_intensities"
            )


def generate_synthetic_positives(job: SynthesisJob) -> DatasetManifest:
    """Run a synthesis job; returns the manifest of written slices."""
    for e in job.source:
        if e.label != "normal":
            raise SynthesisError(
                f"source manifest must hold normal slices, found {e.label!r} ({e.case_id})"
            )
    if job.count > len(job.source):
        raise SynthesisError(
            f"requested {job.count} outputs but source pool has {len(job.source)}"
        )
    os.makedirs(job.out_dir, exist_ok=True)
    manifest_path = os.path.join(job.out_dir, "manifest.tsv")
    records: dict[str, dict] = {}
    entries: list[ManifestEntry] = []
    rejected: list[dict] = []

    if job.count > 0:
        model, _ = load_checkpoint(job.checkpoint)
        if model.gen_spec.input_side != job.pipe.side:
            raise SynthesisError(
                f"checkpoint expects {model.gen_spec.input_side}px inputs but the "
                f"pipeline produces {job.pipe.side}px"
            )
        model.eval_mode()
        gen = model.g
        order = np.random.default_rng(job.seed).permutation(len(job.source)).tolist()
        allowed_rejects = int(np.floor(job.max_reject_fraction * job.count))
        produced = 0
        cursor = 0
        while produced < job.count:
            if cursor >= len(order):
                raise SynthesisError(
                    f"source pool exhausted after {len(rejected)} range rejections"
                )
            src = job.source.entries[order[cursor]]
            cursor += 1
            out, reason = _synthesize_one(gen, src, job, produced)
            if out is None:
                rejected.append({"source_case_id": src.case_id, "reason": reason})
                if len(rejected) > allowed_rejects:
                    raise SynthesisError(
                        f"{len(rejected)} of {job.count} outputs rejected "
                        f"({reason}); exceeds {job.max_reject_fraction:.0%} budget"
                    )
                continue
            entry, record = out
            entries.append(entry)
            records[os.path.basename(entry.path)] = record
            produced += 1

    result = DatasetManifest(entries=entries)
    save_manifest(result, manifest_path)
    provenance = {
        "checkpoint": os.path.abspath(job.checkpoint) if job.count else None,
        "checkpoint_sha256": checkpoint_file_hash(job.checkpoint) if job.count else None,
        "seed": job.seed,
        "count": job.count,
        "remask": job.remask,
        "floor_snap_hu": job.floor_snap_hu,
        "match_source_intensities": job.match_source_intensities,
        "carve_from_source": job.carve_from_source,
        "segment_inputs": job.pipe.segment_inputs,
        "rejected": rejected,
        "slices": records,
    }
    with open(os.path.join(job.out_dir, PROVENANCE_FILE), "w", encoding="utf-8") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
    return result


def match_to_palette(values: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Quantile-map a 1-D sample onto a reference palette.

    Each value is replaced by the palette value at its own empirical
    quantile, so the output's distribution follows the palette while the
    input's ordering is preserved.  When both samples have equal size the
    output is exactly a permutation of the palette.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    palette = np.asarray(palette, dtype=np.float64).ravel()
    if values.size == 0 or palette.size == 0:
        raise SynthesisError("palette matching needs non-empty samples")
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.int64)
    ranks[order] = np.arange(values.size)
    quantiles = (ranks + 0.5) / values.size
    grid = (np.arange(palette.size) + 0.5) / palette.size
    return np.interp(quantiles, grid, np.sort(palette))


def _synthesize_one(gen, src: ManifestEntry, job: SynthesisJob, index: int):
    sl = load_slice(src.path, case_id=src.case_id)
    values, mask = prepare_slice(sl, job.pipe)
    with torch.no_grad():
        raw = gen(torch.from_numpy(values[None, None]).float()).numpy()[0, 0]
    overshoot = float(np.abs(raw).max()) - 1.0
    if overshoot > RANGE_TOLERANCE:
        return None, f"output exceeds [-1, 1] by {overshoot:.3g}"
    clipped = np.clip(raw, -1.0, 1.0)
    level = None
    if job.floor_snap_hu is not None:
        lo, hi = job.pipe.window
        level = (float(job.floor_snap_hu) - lo) / (hi - lo) * 2.0 - 1.0
    if job.carve_from_source:
        # the translator only decides which pixels to remove; every
        # surviving pixel keeps the source's own value, so intensity
        # statistics and noise texture stay native to the source domain
        clipped = np.where(clipped <= level, -1.0, values)
    elif level is not None:
        # masking discretizes real lesions to exactly the background
        # level, but a tanh output only approaches it; without the snap
        # the near-floor ramp is a synthetic give-away
        clipped = np.where(clipped <= level, -1.0, clipped)
    if job.match_source_intensities:
        active = clipped > -1.0
        palette = values[values > -1.0]
        if active.any() and palette.size:
            clipped = clipped.copy()
            clipped[active] = match_to_palette(clipped[active], palette)
    case_id = f"{base_case(src.case_id)}{PROVENANCE_SEP}s{index:03d}"
    img = NormalizedImage(
        values=clipped, window=job.pipe.window, case_id=case_id, source="synthetic"
    )
    out = denormalize(img)
    if job.remask and mask is not None:
        out = apply_mask(out, mask, background=job.pipe.seg.background)
    out_path = os.path.join(job.out_dir, "slices", f"syn-{index:04d}.png")
    save_slice(out, out_path, fmt="png16")
    entry = ManifestEntry(path=out_path, label="covid", split="train", case_id=case_id)
    record = {
        "source_case_id": src.case_id,
        "source_path": os.path.abspath(src.path),
        "remasked": bool(job.remask and mask is not None),
    }
    return (entry, record), None


def load_provenance(out_dir: str) -> dict:
    path = os.path.join(out_dir, PROVENANCE_FILE)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise SynthesisError(f"no provenance record at {path!r}: {exc}") from exc


def compose_augmented_manifest(
    real_positives: DatasetManifest,
    synthetic_positives: DatasetManifest,
    normals: DatasetManifest,
    target_per_class: int,
    test_manifest: DatasetManifest | None = None,
) -> DatasetManifest:
    """Balanced training manifest: all real positives, synthetic top-up,
    and an equal count of normals.

    Raises when the target cannot be met, and audits the result (plus
    the optional test manifest) for case leakage across splits.
    """
    k = len(real_positives)
    if target_per_class < k:
        raise ManifestError(
            f"target_per_class={target_per_class} is below the {k} real positives"
        )
    need_synth = target_per_class - k
    if need_synth > len(synthetic_positives):
        raise ManifestError(
            f"need {need_synth} synthetic positives but only "
            f"{len(synthetic_positives)} are available"
        )
    if target_per_class > len(normals):
        raise ManifestError(
            f"need {target_per_class} normals but only {len(normals)} are available"
        )
    synth_part = DatasetManifest(entries=list(synthetic_positives.entries[:need_synth]))
    normal_part = DatasetManifest(entries=list(normals.entries[:target_per_class]))
    for part, want in ((real_positives, "covid"), (synth_part, "covid"), (normal_part, "normal")):
        for e in part:
            if e.label != want or e.split != "train":
                raise ManifestError(
                    f"entry {e.case_id} must be a train/{want} slice, got {e.split}/{e.label}"
                )
    combined = merge_manifests(real_positives, synth_part, normal_part)
    if test_manifest is not None:
        merge_manifests(combined, test_manifest)
    return combined


def tissue_fraction(hu: np.ndarray, threshold: int = -200) -> float:
    """Fraction of pixels at soft-tissue intensity or brighter."""
    return float((hu > threshold).mean())


def audit_synthetic_tissue(manifest: DatasetManifest) -> dict[str, float]:
    """Per-slice tissue fraction for a synthetic manifest.

    Lung-masked synthesis leaves almost nothing above soft-tissue
    intensity (only vessel remnants), while unmasked synthesis keeps the
    body and bone; the fraction separates the two regimes cleanly.
    """
    out = {}
    for e in manifest:
        sl = load_slice(e.path, case_id=e.case_id)
        out[e.case_id] = tissue_fraction(sl.hu)
    return out
