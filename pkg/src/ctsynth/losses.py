"""Adversarial and cycle-reconstruction losses.

Discriminator scores are raw logits; probabilities go through a sigmoid
whose log arguments are clamped at 1e-7 so saturated critics cannot
produce infinities.  The generator objective uses the non-saturating
form -E[log D(fake)]; the discriminator objective is
-(E[log D(real)] + E[log(1 - D(fake))]).  The cycle term is the mean
absolute reconstruction error in both directions, and the total
generator-side objective is adv_g + adv_f + cycle_weight * cycle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

LOG_EPS = 1e-7
ROLES = ("generator", "discriminator")


class LossError(ValueError):
    """Invalid loss inputs or a non-finite loss value."""


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(p, min=LOG_EPS))


def adversarial_loss(
    real_scores: torch.Tensor | None,
    fake_scores: torch.Tensor,
    role: str,
) -> torch.Tensor:
    """Sigmoid cross-entropy over a patch score grid for either role."""
    if role not in ROLES:
        raise LossError(f"role must be one of {ROLES}, got {role!r}")
    if fake_scores is None:
        raise LossError("fake_scores is required")
    fake_p = torch.sigmoid(fake_scores)
    if role == "generator":
        return -_safe_log(fake_p).mean()
    if real_scores is None:
        raise LossError("discriminator role requires real_scores")
    real_p = torch.sigmoid(real_scores)
    return -(_safe_log(real_p).mean() + _safe_log(1.0 - fake_p).mean())


def cycle_loss(
    x: torch.Tensor,
    x_rebuilt: torch.Tensor,
    y: torch.Tensor,
    y_rebuilt: torch.Tensor,
) -> torch.Tensor:
    """Mean absolute reconstruction error, summed over both directions."""
    if x.shape != x_rebuilt.shape:
        raise LossError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rebuilt.shape)}")
    if y.shape != y_rebuilt.shape:
        raise LossError(f"shape mismatch: {tuple(y.shape)} vs {tuple(y_rebuilt.shape)}")
    return (x_rebuilt - x).abs().mean() + (y_rebuilt - y).abs().mean()


@dataclass(frozen=True)
class LossBundle:
    """One training step's scalar losses.

    ``adv_g``/``adv_f`` are the generator-role adversarial values (so
    ``total = adv_g + adv_f + cycle_weight * cyc`` holds exactly);
    ``d_x``/``d_y`` carry the discriminator-side values for the log.
    """

    adv_g: float
    adv_f: float
    cyc: float
    cycle_weight: float
    total: float
    d_x: float | None = None
    d_y: float | None = None

    def to_dict(self) -> dict:
        return {
            "adv_g": self.adv_g,
            "adv_f": self.adv_f,
            "cyc": self.cyc,
            "cycle_weight": self.cycle_weight,
            "total": self.total,
            "d_x": self.d_x,
            "d_y": self.d_y,
        }


def bundle_from_parts(
    adv_g: float,
    adv_f: float,
    cyc: float,
    cycle_weight: float,
    d_x: float | None = None,
    d_y: float | None = None,
) -> LossBundle:
    bundle = LossBundle(
        adv_g=float(adv_g),
        adv_f=float(adv_f),
        cyc=float(cyc),
        cycle_weight=float(cycle_weight),
        total=float(adv_g) + float(adv_f) + float(cycle_weight) * float(cyc),
        d_x=None if d_x is None else float(d_x),
        d_y=None if d_y is None else float(d_y),
    )
    total_loss(bundle)
    return bundle


def total_loss(bundle: LossBundle) -> float:
    """Recompute and validate the combined generator-side objective."""
    if bundle.cycle_weight < 0:
        raise LossError(f"cycle_weight must be >= 0, got {bundle.cycle_weight}")
    total = bundle.adv_g + bundle.adv_f + bundle.cycle_weight * bundle.cyc
    values = [bundle.adv_g, bundle.adv_f, bundle.cyc, total]
    values += [v for v in (bundle.d_x, bundle.d_y) if v is not None]
    if not all(math.isfinite(v) for v in values):
        raise LossError(f"non-finite loss value in {bundle.to_dict()}")
    if abs(total - bundle.total) > 1e-9 * max(1.0, abs(total)):
        raise LossError(
            f"bundle total {bundle.total} disagrees with parts (expected {total})"
        )
    return total
