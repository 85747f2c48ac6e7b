"""Slice container and on-disk formats for 2-D CT data.

Intensities are Hounsfield units (HU) stored as signed 16-bit integers.
Two file formats are supported:

* ``png16``: 16-bit grayscale PNG where the stored value is HU + 1024,
  so the valid HU range [-1024, 3071] maps to [0, 4095].
* ``raw-tensor``: little-endian binary blob with a 12-byte header
  (magic ``CTS1``, u32 width, u32 height) followed by row-major i16 HU.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

HU_MIN = -1024
HU_MAX = 3071
PNG16_OFFSET = 1024
RAW_MAGIC = b"CTS1"
MIN_SIDE = 16
DEFAULT_WINDOW = (-1000.0, 1000.0)
SOURCES = ("real", "phantom", "synthetic")
FORMATS = ("png16", "raw-tensor")


class SliceError(ValueError):
    """Malformed slice file, out-of-range intensity, or bad geometry."""


@dataclass
class CTSlice:
    """A single 2-D CT slice.

    ``hu`` is a (height, width) int16 array of Hounsfield units within
    [-1024, 3071]; both sides must be at least 16 pixels.  ``case_id``
    ties the slice to a patient/phantom case for split hygiene and
    ``source`` records where it came from.
    """

    hu: np.ndarray
    case_id: str
    source: str = "real"

    def __post_init__(self) -> None:
        arr = np.asarray(self.hu)
        if arr.ndim != 2:
            raise SliceError(f"slice must be 2-D, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise SliceError(f"HU values must be integers, got dtype {arr.dtype}")
        h, w = arr.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise SliceError(f"slice sides must be >= {MIN_SIDE}, got {h}x{w}")
        lo = int(arr.min())
        hi = int(arr.max())
        if lo < HU_MIN or hi > HU_MAX:
            raise SliceError(
                f"HU values must lie in [{HU_MIN}, {HU_MAX}], got range [{lo}, {hi}]"
            )
        if not self.case_id:
            raise SliceError("case_id must be non-empty")
        if self.source not in SOURCES:
            raise SliceError(f"source must be one of {SOURCES}, got {self.source!r}")
        self.hu = arr.astype(np.int16)

    @property
    def shape(self) -> tuple[int, int]:
        return self.hu.shape

    def with_hu(self, hu: np.ndarray) -> "CTSlice":
        return CTSlice(hu=hu, case_id=self.case_id, source=self.source)


@dataclass
class NormalizedImage:
    """Windowed slice mapped to [-1, 1] float32, ready for a network."""

    values: np.ndarray
    window: tuple[float, float]
    case_id: str = "anon"
    source: str = "real"

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 2:
            raise SliceError(f"normalized image must be 2-D, got shape {vals.shape}")
        lo, hi = float(self.window[0]), float(self.window[1])
        if not lo < hi:
            raise SliceError(f"window must satisfy lo < hi, got ({lo}, {hi})")
        if vals.size and (vals.min() < -1.0 - 1e-6 or vals.max() > 1.0 + 1e-6):
            raise SliceError("normalized values must lie in [-1, 1]")
        self.values = np.clip(vals, -1.0, 1.0)
        self.window = (lo, hi)


def infer_format(path: str) -> str:
    """Guess the slice format from the file extension."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        return "png16"
    if ext in (".cts", ".raw"):
        return "raw-tensor"
    raise SliceError(f"cannot infer slice format from extension of {path!r}")


def _first_offender(bad: np.ndarray) -> tuple[int, int]:
    rows, cols = np.nonzero(bad)
    return int(rows[0]), int(cols[0])


def load_slice(
    path: str,
    fmt: str | None = None,
    case_id: str | None = None,
    source: str = "real",
) -> CTSlice:
    """Read a slice from disk, rejecting malformed files and bad HU values."""
    fmt = fmt or infer_format(path)
    if fmt not in FORMATS:
        raise SliceError(f"unknown slice format {fmt!r}")
    if case_id is None:
        case_id = os.path.splitext(os.path.basename(path))[0]
    if fmt == "png16":
        hu = _load_png16(path)
    else:
        hu = _load_raw(path)
    return CTSlice(hu=hu, case_id=case_id, source=source)


def _load_png16(path: str) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise SliceError(f"cannot read PNG slice {path!r}: {exc}") from exc
    if img.mode not in ("I;16", "I"):
        raise SliceError(
            f"{path!r} is not a 16-bit grayscale PNG (mode {img.mode!r})"
        )
    stored = np.asarray(img, dtype=np.int64)
    bad = (stored < 0) | (stored > HU_MAX + PNG16_OFFSET)
    if bad.any():
        r, c = _first_offender(bad)
        raise SliceError(
            f"{path!r} pixel ({r}, {c}) stores {int(stored[r, c])}, outside "
            f"[0, {HU_MAX + PNG16_OFFSET}]"
        )
    return (stored - PNG16_OFFSET).astype(np.int16)


def _load_raw(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != RAW_MAGIC:
        raise SliceError(f"{path!r} lacks the {RAW_MAGIC!r} raw-tensor header")
    width, height = struct.unpack("<II", blob[4:12])
    expected = 12 + 2 * width * height
    if width == 0 or height == 0 or len(blob) != expected:
        raise SliceError(
            f"{path!r} header says {width}x{height} but payload is "
            f"{len(blob) - 12} bytes (expected {expected - 12})"
        )
    hu = np.frombuffer(blob, dtype="<i2", offset=12).reshape(height, width)
    bad = (hu < HU_MIN) | (hu > HU_MAX)
    if bad.any():
        r, c = _first_offender(bad)
        raise SliceError(
            f"{path!r} pixel ({r}, {c}) has HU {int(hu[r, c])}, outside "
            f"[{HU_MIN}, {HU_MAX}]"
        )
    return hu.astype(np.int16)


def save_slice(sl: CTSlice, path: str, fmt: str | None = None) -> str:
    """Write a slice to disk in the requested format; returns the path."""
    fmt = fmt or infer_format(path)
    if fmt not in FORMATS:
        raise SliceError(f"unknown slice format {fmt!r}")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    if fmt == "png16":
        stored = (sl.hu.astype(np.int32) + PNG16_OFFSET).astype(np.uint16)
        Image.fromarray(stored).save(path)
    else:
        h, w = sl.hu.shape
        with open(path, "wb") as fh:
            fh.write(RAW_MAGIC)
            fh.write(struct.pack("<II", w, h))
            fh.write(sl.hu.astype("<i2").tobytes())
    return path


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resampling of a 2-D float array."""
    in_h, in_w = img.shape
    rows = np.linspace(0.0, in_h - 1.0, out_h)
    cols = np.linspace(0.0, in_w - 1.0, out_w)
    r0 = np.clip(np.floor(rows).astype(np.int64), 0, in_h - 2)
    c0 = np.clip(np.floor(cols).astype(np.int64), 0, in_w - 2)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    tl = img[np.ix_(r0, c0)]
    tr = img[np.ix_(r0, c0 + 1)]
    bl = img[np.ix_(r0 + 1, c0)]
    br = img[np.ix_(r0 + 1, c0 + 1)]
    top = tl * (1.0 - fc) + tr * fc
    bot = bl * (1.0 - fc) + br * fc
    return top * (1.0 - fr) + bot * fr


def resize_slice(sl: CTSlice, side: int) -> CTSlice:
    """Resample to a square side x side grid (bilinear, align corners)."""
    if side < MIN_SIDE:
        raise SliceError(f"target side must be >= {MIN_SIDE}, got {side}")
    h, w = sl.hu.shape
    if (h, w) == (side, side):
        return sl.with_hu(sl.hu.copy())
    resampled = _bilinear_resize(sl.hu.astype(np.float64), side, side)
    hu = np.rint(np.clip(resampled, HU_MIN, HU_MAX)).astype(np.int16)
    return sl.with_hu(hu)


def normalize(sl: CTSlice, window: tuple[float, float] = DEFAULT_WINDOW) -> NormalizedImage:
    """Map HU through a grayscale window onto [-1, 1] (clipped, float32)."""
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise SliceError(f"window must satisfy lo < hi, got ({lo}, {hi})")
    vals = (sl.hu.astype(np.float32) - lo) / (hi - lo) * 2.0 - 1.0
    np.clip(vals, -1.0, 1.0, out=vals)
    return NormalizedImage(values=vals, window=(lo, hi), case_id=sl.case_id, source=sl.source)


def denormalize(
    img: NormalizedImage,
    case_id: str | None = None,
    source: str | None = None,
) -> CTSlice:
    """Invert :func:`normalize`, rounding to integer HU and clipping to range."""
    lo, hi = img.window
    vals = img.values.astype(np.float64)
    hu = (vals + 1.0) / 2.0 * (hi - lo) + lo
    hu = np.rint(np.clip(hu, HU_MIN, HU_MAX)).astype(np.int16)
    return CTSlice(
        hu=hu,
        case_id=case_id if case_id is not None else img.case_id,
        source=source if source is not None else img.source,
    )
