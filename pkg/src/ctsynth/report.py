"""Report rendering: contact sheets, loss curves, and benchmark tables.

Every figure is paired with a plain-text data file (tab-separated) that
carries the same numbers; the data files are the contract and the
rendered images are convenience.  Slices are drawn at the standard
grayscale window so sheets are comparable across runs.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import DEFAULT_WINDOW, load_slice
from .manifest import DatasetManifest


class ReportError(ValueError):
    """Empty input, missing file, or malformed run data."""


def _windowed_unit(hu: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    lo, hi = window
    return np.clip((hu.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)


def save_contact_sheet(
    manifest: DatasetManifest,
    path: str,
    columns: int = 8,
    window: tuple[float, float] = DEFAULT_WINDOW,
    limit: int | None = None,
    pad: int = 2,
) -> dict:
    """Tile slices into one grayscale image; returns per-tile statistics.

    The returned dict maps case_id to the tile's (mean, min, max) in
    window-normalized [0, 1] units, which by construction equal the
    statistics of the windowed source slice.
    """
    entries = list(manifest.entries[: limit if limit is not None else len(manifest)])
    if not entries:
        raise ReportError("contact sheet needs at least one slice")
    if columns < 1:
        raise ReportError(f"columns must be >= 1, got {columns}")
    tiles = []
    stats = {}
    side = None
    for e in entries:
        sl = load_slice(e.path, case_id=e.case_id)
        unit = _windowed_unit(sl.hu, window)
        if side is None:
            side = unit.shape
        elif unit.shape != side:
            raise ReportError(
                f"slice {e.case_id} is {unit.shape}, expected {side}; "
                "contact sheets need uniform slice sizes"
            )
        tiles.append(unit)
        stats[e.case_id] = {
            "mean": float(unit.mean()),
            "min": float(unit.min()),
            "max": float(unit.max()),
        }
    rows = (len(tiles) + columns - 1) // columns
    h, w = side
    sheet = np.zeros((rows * (h + pad) + pad, columns * (w + pad) + pad), dtype=np.float64)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, columns)
        top = pad + r * (h + pad)
        left = pad + c * (w + pad)
        sheet[top : top + h, left : left + w] = tile
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    plt.imsave(path, sheet, cmap="gray", vmin=0.0, vmax=1.0)
    return stats


def save_loss_curves(log_path: str, fig_path: str, data_path: str | None = None) -> str:
    """Render the per-step loss terms from a training log (JSON lines)."""
    try:
        with open(log_path, "r", encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise ReportError(f"cannot read training log {log_path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ReportError(f"malformed training log {log_path!r}: {exc}") from exc
    if not records:
        raise ReportError(f"training log {log_path!r} is empty")
    steps = [r["step"] for r in records]
    fields = ("adv_g", "adv_f", "cyc", "d_x", "d_y", "total")
    os.makedirs(os.path.dirname(os.path.abspath(fig_path)), exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in fields:
        if name in records[0]:
            ax.plot(steps, [r[name] for r in records], label=name, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    if data_path:
        present = [f for f in fields if f in records[0]]
        with open(data_path, "w", encoding="utf-8") as fh:
            fh.write("step\t" + "\t".join(present) + "\n")
            for r in records:
                fh.write(
                    "\t".join([str(r["step"])] + [f"{r[f]:.6f}" for f in present]) + "\n"
                )
    return fig_path


def save_benchmark_table(rows: list[dict], path: str) -> str:
    """Write benchmark rows as a tab-separated table.

    Expected row keys: arm, preset, k, n_real_pos, n_synth, n_normal,
    mean_accuracy, mean_auc, seeds.  Extra keys are appended as columns.
    """
    if not rows:
        raise ReportError("benchmark table needs at least one row")
    base = ["arm", "preset", "k", "n_real_pos", "n_synth", "n_normal",
            "mean_accuracy", "mean_auc", "seeds"]
    extra = sorted({key for row in rows for key in row} - set(base))
    header = base + extra
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            cells = []
            for key in header:
                value = row.get(key, "")
                if isinstance(value, float):
                    cells.append(f"{value:.4f}")
                elif isinstance(value, (list, tuple)):
                    cells.append(",".join(str(v) for v in value))
                else:
                    cells.append(str(value))
            fh.write("\t".join(cells) + "\n")
    return path


def save_accuracy_vs_k(
    curves: dict[tuple[str, str], list[tuple[int, float]]],
    fig_path: str,
    data_path: str,
) -> str:
    """Line plot of mean accuracy against positive count k.

    ``curves`` maps (preset, arm) to a list of (k, mean accuracy); each
    key renders as one line, so a stress run over one preset yields
    exactly its baseline and augmented curves.
    """
    if not curves:
        raise ReportError("accuracy plot needs at least one curve")
    os.makedirs(os.path.dirname(os.path.abspath(fig_path)), exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    for (preset, arm), points in sorted(curves.items()):
        pts = sorted(points)
        ax.plot(
            [k for k, _ in pts],
            [acc for _, acc in pts],
            marker="o",
            label=f"{preset} {arm}",
        )
    ax.set_xlabel("real positives per class (k)")
    ax.set_ylabel("mean accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    with open(data_path, "w", encoding="utf-8") as fh:
        fh.write("preset\tarm\tk\tmean_accuracy\n")
        for (preset, arm), points in sorted(curves.items()):
            for k, acc in sorted(points):
                fh.write(f"{preset}\t{arm}\t{k}\t{acc:.4f}\n")
    return fig_path
