"""Reconstruction-based anomaly segmentation and its evaluation protocol."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import metrics
from .data import Volume, central_indices, write_pgm
from .models import VaeModel, decode, encode, reparameterize
from .tensor import DimensionError, Tensor, no_grad

log = logging.getLogger(__name__)

N_THRESHOLDS = 15
THRESHOLD_MAX = 0.15
MIN_COMPONENT = 10
EROSION_RADIUS = 1

CSV_COLUMNS = ("id", "threshold", "dice", "spe", "sen", "mae")


def threshold_grid(n: int = N_THRESHOLDS, hi: float = THRESHOLD_MAX) -> np.ndarray:
    return np.linspace(0.0, hi, n)


@dataclass
class AnomalyMap:
    values: np.ndarray
    volume_id: str
    reconstruction: np.ndarray


@dataclass
class Segmentation:
    mask: np.ndarray
    threshold: float
    eroded: bool = True
    min_component: int = MIN_COMPONENT


@dataclass
class ThresholdCalibration:
    candidates: np.ndarray
    mean_dice: np.ndarray
    chosen: float
    case_ids: List[str] = field(default_factory=list)

    def to_mapping(self) -> Dict[str, str]:
        return {
            "threshold": repr(float(self.chosen)),
            "candidates": ",".join(repr(float(c)) for c in self.candidates),
            "mean_dice": ",".join(repr(float(d)) for d in self.mean_dice),
            "cases": ",".join(self.case_ids),
        }

    @classmethod
    def from_mapping(cls, m: Dict[str, str]) -> "ThresholdCalibration":
        floats = lambda s: np.array([float(v) for v in s.split(",")]) if s else np.array([])  # noqa: E731
        return cls(candidates=floats(m["candidates"]), mean_dice=floats(m["mean_dice"]),
                   chosen=float(m["threshold"]), case_ids=[c for c in m.get("cases", "").split(",") if c])


@dataclass
class EvalCase:
    """One test volume with everything the protocol needs."""
    id: str
    image: np.ndarray
    reconstruction: np.ndarray
    anomaly: np.ndarray
    brain_mask: np.ndarray
    truth: Optional[np.ndarray]
    slab: Optional[int] = None

    @property
    def domain(self) -> np.ndarray:
        return self.brain_mask & slab_mask(self.brain_mask.shape, self.slab)


def slab_mask(shape: Tuple[int, ...], count: Optional[int]) -> np.ndarray:
    """Boolean mask of the ``count`` central axial slices (all slices when None)."""
    m = np.zeros(shape, dtype=bool)
    idx = range(shape[0]) if count is None else central_indices(shape[0], count)
    m[idx.start:idx.stop] = True
    return m


# ---------------------------------------------------------------- inference


def reconstruct(model: VaeModel, image: np.ndarray, seed=0, sample: bool = True,
                batch_size: int = 16) -> np.ndarray:
    """Reconstruct a 3D image; 2D models process its axial slices as a batch.

    Latents are drawn with a generator seeded by ``seed``, so output is
    deterministic. ``sample=False`` decodes the posterior mean instead; with a
    collapsed posterior that point lies off the decoder's training distribution.
    """
    cfg = model.config
    dt = cfg.np_dtype
    image = np.asarray(image)
    if cfg.dimensionality == 3:
        batches = [image[None, None]]
    else:
        stack = image[:, None]
        batches = [stack[i:i + batch_size] for i in range(0, len(stack), batch_size)]
    rng = np.random.default_rng(seed)
    outs = []
    with no_grad():
        for b in batches:
            x = Tensor(b.astype(dt))
            if x.shape[1:] != cfg.input_shape:
                raise DimensionError(f"image of shape {image.shape} does not fit model input {cfg.input_shape}")
            mu, logvar = encode(model, x)
            eps = rng.standard_normal(mu.shape) if sample else np.zeros(mu.shape)
            z = reparameterize(mu, logvar, epsilon=eps).z
            outs.append(decode(model, z).data)
    out = np.concatenate(outs, axis=0)
    return out[0, 0] if cfg.dimensionality == 3 else out[:, 0]


def anomaly_map(volume: Volume, model: VaeModel, seed=0, sample: bool = True) -> AnomalyMap:
    recon = reconstruct(model, volume.voxels, seed=seed, sample=sample)
    values = np.abs(volume.voxels.astype(np.float64) - recon.astype(np.float64))
    return AnomalyMap(values=values, volume_id=volume.id, reconstruction=recon.astype(np.float32))


def make_case(volume: Volume, amap: AnomalyMap, slab: Optional[int] = None) -> EvalCase:
    return EvalCase(id=volume.id, image=volume.voxels, reconstruction=amap.reconstruction,
                    anomaly=amap.values, brain_mask=volume.brain_mask, truth=volume.lesion_mask, slab=slab)


# ---------------------------------------------------------------- segmentation


def binarize(values: np.ndarray, threshold: float) -> np.ndarray:
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    return np.asarray(values) > threshold


def erode(brain_mask: np.ndarray, radius: int = EROSION_RADIUS) -> np.ndarray:
    brain_mask = np.asarray(brain_mask, dtype=bool)
    if radius == 0:
        return brain_mask
    st = metrics.connectivity_structure(brain_mask.ndim, "face")
    return ndimage.binary_erosion(brain_mask, structure=st, iterations=radius, border_value=0)


def postprocess(mask: np.ndarray, brain_mask: np.ndarray, threshold: float = float("nan"),
                min_size: int = MIN_COMPONENT, erosion: int = EROSION_RADIUS) -> Segmentation:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != np.shape(brain_mask):
        raise DimensionError(f"mask {mask.shape} and brain mask {np.shape(brain_mask)} differ")
    kept = mask & erode(brain_mask, erosion)
    kept = metrics.remove_small_components(kept, min_size, connectivity="full")
    return Segmentation(mask=kept, threshold=threshold, eroded=erosion > 0, min_component=min_size)


def segment(case: EvalCase, threshold: float) -> Segmentation:
    return postprocess(binarize(case.anomaly, threshold), case.brain_mask, threshold=threshold)


# ---------------------------------------------------------------- calibration


def _lesion_cases(cases: Sequence[EvalCase]) -> List[EvalCase]:
    return [c for c in cases if c.truth is not None and np.any(c.truth & c.domain)]


def calibrate_threshold(cases: Sequence[EvalCase], candidates: Optional[Sequence[float]] = None
                        ) -> ThresholdCalibration:
    """Pick the candidate with the best mean post-processed Dice; ties go to the smaller one."""
    usable = _lesion_cases(cases)
    if not usable:
        raise ValueError("calibration needs at least one case with a non-empty ground truth")
    cand = threshold_grid() if candidates is None else np.sort(np.asarray(candidates, dtype=np.float64))
    scores = np.zeros(len(cand))
    for c in usable:
        for j, t in enumerate(cand):
            scores[j] += metrics.dice(segment(c, t).mask, c.truth, domain=c.domain)
    scores /= len(usable)
    best = int(np.argmax(scores))  # first maximum == smallest threshold
    return ThresholdCalibration(candidates=cand, mean_dice=scores, chosen=float(cand[best]),
                                case_ids=[c.id for c in usable])


def split_half(ids: Sequence[str], seed: int) -> Tuple[List[str], List[str]]:
    """Seeded random split into (calibration, test); calibration gets the extra item when odd."""
    ids = list(ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    k = (len(ids) + 1) // 2
    calib = sorted(ids[i] for i in perm[:k])
    test = sorted(ids[i] for i in perm[k:])
    return calib, test


# ---------------------------------------------------------------- evaluation


@dataclass
class CaseReport:
    id: str
    threshold: float
    dice: float
    spe: Optional[float]
    sen: Optional[float]
    mae: float

    def row(self) -> List[str]:
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        return [self.id, fmt(self.threshold), fmt(self.dice), fmt(self.spe), fmt(self.sen), fmt(self.mae)]


def score_case(case: EvalCase, seg_mask: np.ndarray, threshold: float) -> CaseReport:
    dom = case.domain
    cc = metrics.ConfusionCounts.from_masks(seg_mask, case.truth, domain=dom)
    return CaseReport(id=case.id, threshold=threshold, dice=cc.dice(), spe=cc.specificity(),
                      sen=cc.sensitivity(), mae=metrics.mae(case.image, case.reconstruction, domain=dom))


def aggregate(reports: Iterable[CaseReport]) -> Dict[str, float]:
    """Mean and population std of Dice, and means of the other measures (undefined values skipped)."""
    reports = list(reports)

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return math.fsum(vals) / len(vals) if vals else float("nan")

    dice = [r.dice for r in reports]
    dm = mean(dice)
    std = math.sqrt(math.fsum((d - dm) ** 2 for d in dice) / len(dice)) if dice else float("nan")
    return {
        "n": float(len(reports)),
        "dice_mean": dm,
        "dice_std": std,
        "spe_mean": mean(r.spe for r in reports),
        "sen_mean": mean(r.sen for r in reports),
        "mae_mean": mean(r.mae for r in reports),
    }


def evaluate_split(cases: Sequence[EvalCase], threshold: float,
                   segmentations: Optional[Dict[str, np.ndarray]] = None
                   ) -> Tuple[List[CaseReport], Dict[str, float]]:
    """Score cases at a calibrated threshold; cases without ground truth are skipped."""
    reports = []
    for c in sorted(cases, key=lambda c: c.id):
        if c.truth is None:
            log.warning("case %s has no ground truth; skipped", c.id)
            continue
        mask = segmentations[c.id] if segmentations is not None else segment(c, threshold).mask
        reports.append(score_case(c, mask, threshold))
    return reports, aggregate(reports)


def write_report_csv(reports: Sequence[CaseReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def read_report_csv(path) -> List[CaseReport]:
    opt = lambda s: None if s == "" else float(s)  # noqa: E731
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [CaseReport(id=r["id"], threshold=float(r["threshold"]), dice=float(r["dice"]),
                       spe=opt(r["spe"]), sen=opt(r["sen"]), mae=float(r["mae"])) for r in rows]


def format_aggregate(agg: Dict[str, float]) -> str:
    return (f"n={int(agg['n'])}  Dice {agg['dice_mean']:.3f}±{agg['dice_std']:.3f}  "
            f"Spe {agg['spe_mean']:.3f}  Sen {agg['sen_mean']:.3f}  MAE {agg['mae_mean']:.3f}")


def dump_panels(case: EvalCase, seg_mask: np.ndarray, path, index: Optional[int] = None) -> None:
    """Axial slice as input | reconstruction | anomaly map | segmentation, side by side."""
    i = case.image.shape[0] // 2 if index is None else index
    panels = [case.image[i], case.reconstruction[i], np.clip(case.anomaly[i], 0, 1), seg_mask[i].astype(float)]
    gap = np.ones((panels[0].shape[0], 2))
    row = np.concatenate([p for pair in zip(panels, [gap] * 3 + [None]) for p in pair if p is not None], axis=1)
    write_pgm(row, path)
