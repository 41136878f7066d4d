"""Overlap and reconstruction metrics, plus connected-component labeling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_masks(cls, pred, truth, domain=None) -> "ConfusionCounts":
        pred, truth = _pair(pred, truth)
        if domain is not None:
            domain = np.asarray(domain, dtype=bool)
            if domain.shape != pred.shape:
                raise ValueError(f"domain shape {domain.shape} differs from masks {pred.shape}")
            pred, truth = pred[domain], truth[domain]
        tp = int(np.count_nonzero(pred & truth))
        fp = int(np.count_nonzero(pred & ~truth))
        fn = int(np.count_nonzero(~pred & truth))
        tn = int(pred.size) - tp - fp - fn
        return cls(tp=tp, fp=fp, tn=tn, fn=fn)

    def dice(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom

    def sensitivity(self) -> Optional[float]:
        denom = self.tp + self.fn
        return None if denom == 0 else self.tp / denom

    def specificity(self) -> Optional[float]:
        denom = self.tn + self.fp
        return None if denom == 0 else self.tn / denom


def _pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    return pred, truth


def dice(pred, truth, domain=None) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks score 1."""
    return ConfusionCounts.from_masks(pred, truth, domain).dice()


def sensitivity(pred, truth, domain=None) -> Optional[float]:
    """tp / (tp + fn), or None when the truth mask is empty."""
    return ConfusionCounts.from_masks(pred, truth, domain).sensitivity()


def specificity(pred, truth, domain=None) -> Optional[float]:
    """tn / (tn + fp), or None when the truth mask covers the whole domain."""
    return ConfusionCounts.from_masks(pred, truth, domain).specificity()


def mae(x, x_hat, domain=None) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shapes differ: {x.shape} vs {x_hat.shape}")
    diff = np.abs(x - x_hat)
    if domain is not None:
        diff = diff[np.asarray(domain, dtype=bool)]
    return float(diff.mean()) if diff.size else 0.0


def connectivity_structure(ndim: int, connectivity: str) -> np.ndarray:
    """'face' shares a face (4/6-neighbourhood); 'full' any corner (8/26)."""
    if connectivity == "face":
        return ndimage.generate_binary_structure(ndim, 1)
    if connectivity == "full":
        return ndimage.generate_binary_structure(ndim, ndim)
    raise ValueError(f"connectivity must be 'face' or 'full', got {connectivity!r}")


def connected_components(mask, connectivity: str = "full") -> Tuple[np.ndarray, np.ndarray]:
    """Label a binary mask.

    Returns ``(labels, sizes)`` where labels are 1..n (0 is background) and
    ``sizes[i]`` is the voxel count of label ``i + 1``.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=connectivity_structure(mask.ndim, connectivity))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def remove_small_components(mask, min_size: int, connectivity: str = "full") -> np.ndarray:
    labels, sizes = connected_components(mask, connectivity)
    keep = np.concatenate([[False], sizes >= min_size])
    return keep[labels]
