"""Dataset manifests: tab-separated slice listings with split hygiene.

A manifest row is ``path<TAB>label<TAB>split<TAB>case_id``.  Labels are
``normal``/``covid`` and splits are ``train``/``test``.  Case ids group
slices that must never straddle the train/test boundary; synthetic
slices append ``#<suffix>`` to the case id of the slice they were grown
from, and all disjointness checks compare the part before ``#``.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

HEADER = ("path", "label", "split", "case_id")
LABELS = ("normal", "covid")
SPLITS = ("train", "test")
PROVENANCE_SEP = "#"


class ManifestError(ValueError):
    """Malformed manifest, missing file, or split-hygiene violation."""


def base_case(case_id: str) -> str:
    """Case id with any synthetic provenance suffix stripped."""
    return case_id.split(PROVENANCE_SEP, 1)[0]


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str
    case_id: str

    def __post_init__(self) -> None:
        if not self.path:
            raise ManifestError("entry path must be non-empty")
        if self.label not in LABELS:
            raise ManifestError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not base_case(self.case_id):
            raise ManifestError(f"case_id {self.case_id!r} has no base part")


@dataclass
class DatasetManifest:
    """An ordered collection of manifest entries with validated splits."""

    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        check_split_disjoint(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def filter(self, label: str | None = None, split: str | None = None) -> "DatasetManifest":
        kept = [
            e
            for e in self.entries
            if (label is None or e.label == label) and (split is None or e.split == split)
        ]
        return DatasetManifest(entries=kept)

    def count(self, label: str | None = None, split: str | None = None) -> int:
        return len(self.filter(label=label, split=split))

    def base_cases(self) -> set[str]:
        return {base_case(e.case_id) for e in self.entries}


def check_split_disjoint(entries) -> None:
    """Raise when any base case id appears in both train and test."""
    seen: dict[str, set[str]] = {}
    for e in entries:
        seen.setdefault(base_case(e.case_id), set()).add(e.split)
    offenders = sorted(c for c, splits in seen.items() if len(splits) > 1)
    if offenders:
        raise ManifestError(
            f"case(s) present in both train and test splits: {', '.join(offenders[:5])}"
        )


def load_manifest(path: str, check_paths: bool = True) -> DatasetManifest:
    """Parse a TSV manifest; relative slice paths resolve next to the file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path!r}: {exc}") from exc
    if not lines or tuple(lines[0].split("\t")) != HEADER:
        wanted = "\\t".join(HEADER)
        raise ManifestError(f"manifest {path!r} must start with header {wanted!r}")
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ManifestError(
                f"{path!r} line {lineno}: expected 4 tab-separated fields, got {len(fields)}"
            )
        slice_path, label, split, case_id = fields
        if not os.path.isabs(slice_path):
            slice_path = os.path.normpath(os.path.join(root, slice_path))
        if check_paths and not os.path.isfile(slice_path):
            raise ManifestError(f"{path!r} line {lineno}: no slice file at {slice_path!r}")
        entries.append(ManifestEntry(path=slice_path, label=label, split=split, case_id=case_id))
    return DatasetManifest(entries=entries)


def save_manifest(m: DatasetManifest, path: str) -> str:
    """Write a manifest; paths under the manifest directory become relative."""
    root = os.path.dirname(os.path.abspath(path))
    os.makedirs(root, exist_ok=True)
    lines = ["\t".join(HEADER)]
    for e in m.entries:
        p = os.path.abspath(e.path)
        rel = os.path.relpath(p, root)
        out = rel if not rel.startswith("..") else p
        lines.append("\t".join((out, e.label, e.split, e.case_id)))
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path


def merge_manifests(*manifests: DatasetManifest) -> DatasetManifest:
    entries: list[ManifestEntry] = []
    for m in manifests:
        entries.extend(m.entries)
    return DatasetManifest(entries=entries)


def sample_subset(
    m: DatasetManifest,
    label: str | None,
    split: str | None,
    n: int,
    seed: int,
) -> DatasetManifest:
    """Deterministically draw n entries (without replacement) from a filtered pool.

    The same (manifest, filters, n, seed) always yields the same subset,
    in the pool's original order; n equal to the pool size returns the
    whole pool.
    """
    if n < 0:
        raise ManifestError(f"subset size must be >= 0, got {n}")
    pool = m.filter(label=label, split=split).entries
    if n > len(pool):
        raise ManifestError(f"requested {n} entries but pool has only {len(pool)}")
    rng = np.random.default_rng(seed)
    idx = sorted(rng.choice(len(pool), size=n, replace=False).tolist()) if n else []
    return DatasetManifest(entries=[pool[i] for i in idx])


def manifest_fingerprint(m: DatasetManifest, content: bool = False) -> str:
    """Order-independent sha256 over entries (optionally over file bytes too)."""
    rows = []
    for e in m.entries:
        parts = [e.case_id, e.label, e.split, os.path.basename(e.path)]
        if content:
            digest = hashlib.sha256()
            with open(e.path, "rb") as fh:
                digest.update(fh.read())
            parts.append(digest.hexdigest())
        rows.append("\t".join(parts))
    payload = "\n".join(sorted(rows)).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()
