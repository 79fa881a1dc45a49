"""Image and latent metrics, plus a registry for external perceptual scorers."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ShapeError

log = logging.getLogger(__name__)

PSNR_CAP = 99.0

# slot name -> scorer; "fidelity" takes (edited, original) images,
# "alignment" takes (edited image, prompt)
_SCORERS: dict = {}


def register_scorer(slot: str, fn: Callable) -> None:
    if slot not in ("fidelity", "alignment"):
        raise ValueError("scorer slot is 'fidelity' or 'alignment'")
    _SCORERS[slot] = fn


def unregister_scorer(slot: str) -> None:
    _SCORERS.pop(slot, None)


def psnr(a, b) -> float:
    """PSNR in dB between two 8-bit images; identical images hit the 99 dB cap."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / mse))


def latent_mse(a, b) -> float:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"latent shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(diff**2))


def latent_psnr(a, b, peak: float = 1.0) -> float:
    mse = latent_mse(a, b)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak**2 / mse))


@dataclass
class MetricsReport:
    psnr: float
    latent_mse: float
    fidelity: Optional[float] = None
    alignment: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def build_report(image, reference, latent, reference_latent, prompt: str = "", **extra) -> MetricsReport:
    """Metrics of ``image`` against ``reference``; perceptual slots are filled
    only when a scorer is registered, and a failing scorer is logged, not raised."""
    report = MetricsReport(psnr(image, reference), latent_mse(latent, reference_latent), extra=extra)
    for slot, arg in (("fidelity", reference), ("alignment", prompt)):
        fn = _SCORERS.get(slot)
        if fn is None:
            continue
        try:
            setattr(report, slot, float(fn(image, arg)))
        except Exception as exc:  # scorers are third-party plug-ins
            log.warning("%s scorer failed: %s", slot, exc)
    return report
