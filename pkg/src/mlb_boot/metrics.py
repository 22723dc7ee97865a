"""Overlap and boundary-distance metrics for binary masks (pixel units)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass
class MetricsReport:
    dice: float
    jaccard: float
    hd: float
    hd95: float
    asd: float
    degenerate: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def _binary_pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred.astype(bool), gt.astype(bool)


def dice(pred, gt) -> float:
    a, b = _binary_pair(pred, gt)
    total = a.sum() + b.sum()
    return 1.0 if total == 0 else 2.0 * np.logical_and(a, b).sum() / total


def jaccard(pred, gt) -> float:
    a, b = _binary_pair(pred, gt)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else np.logical_and(a, b).sum() / union


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background or on the image edge."""
    m = np.asarray(mask).astype(bool)
    interior = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return m & ~interior


def directed_distances(a, b) -> np.ndarray:
    """Distance from each boundary pixel of ``a`` to the nearest boundary pixel of ``b``."""
    pa = np.argwhere(boundary(a))
    pb = np.argwhere(boundary(b))
    if len(pa) == 0 or len(pb) == 0:
        return np.full(len(pa), np.inf)
    return cdist(pa, pb).min(axis=1)


def surface_distances(pred, gt) -> tuple[float, float, float, bool]:
    """``(hd, hd95, asd, degenerate)``.

    Both masks empty counts as perfect agreement (zeros); exactly one empty
    boundary gives ``inf`` distances with ``degenerate`` set.
    """
    a, b = _binary_pair(pred, gt)
    if not a.any() and not b.any():
        return 0.0, 0.0, 0.0, False
    if not a.any() or not b.any():
        return np.inf, np.inf, np.inf, True
    d_ab = directed_distances(a, b)
    d_ba = directed_distances(b, a)
    hd = max(d_ab.max(), d_ba.max())
    hd95 = max(np.percentile(d_ab, 95), np.percentile(d_ba, 95))
    asd = np.concatenate([d_ab, d_ba]).mean()
    return float(hd), float(hd95), float(asd), False


def evaluate(pred, gt) -> MetricsReport:
    hd, hd95, asd, degenerate = surface_distances(pred, gt)
    return MetricsReport(float(dice(pred, gt)), float(jaccard(pred, gt)), hd, hd95, asd, degenerate)


def summarize(reports) -> dict:
    """Mean of every metric over samples; distances average non-degenerate cases only."""
    reports = list(reports)
    out = {"dice": float(np.mean([r.dice for r in reports])),
           "jaccard": float(np.mean([r.jaccard for r in reports]))}
    ok = [r for r in reports if not r.degenerate]
    for key in ("hd", "hd95", "asd"):
        out[key] = float(np.mean([getattr(r, key) for r in ok])) if ok else float("inf")
    out["n_degenerate"] = len(reports) - len(ok)
    return out
