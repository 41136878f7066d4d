"""Seeded synthetic end-to-end benchmark and the multi-seed sweeps built on it."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import pipeline as P
from .data import PhantomSpec, Volume, generate_dataset, preprocess
from .trainer import NumericError, TrainConfig, TrainResult, format_kv, train, training_samples

log = logging.getLogger(__name__)

# widths and optimiser settings sized so the default run fits a laptop CPU budget
BENCH_TRAIN = dict(dimensionality=3, bottleneck="dense", latent_dim=128, input_shape=(1, 64, 64, 64),
                   channel_widths=(8, 16, 32, 64), epochs=150, batch_size=4, learning_rate=1e-3)

ARCHITECTURES = {
    "dense3d": dict(dimensionality=3, bottleneck="dense", latent_dim=128),
    "spatial3d": dict(dimensionality=3, bottleneck="spatial", latent_dim=16),
    "dense2d": dict(dimensionality=2, bottleneck="dense", latent_dim=128),
    "spatial2d": dict(dimensionality=2, bottleneck="spatial", latent_dim=16),
}


@dataclass
class BenchmarkConfig:
    seed: int = 0
    n_train: int = 20
    n_test: int = 20
    slab: int = 0  # central axial slices scored, 0 = whole volume
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**BENCH_TRAIN))

    def seeded(self) -> "BenchmarkConfig":
        """Copy with the single run seed pushed into the phantom and training configs."""
        return dataclasses.replace(self, spec=dataclasses.replace(self.spec, seed=self.seed),
                                   train=dataclasses.replace(self.train, seed=self.seed))

    def to_mapping(self) -> Dict[str, str]:
        out = {"seed": str(self.seed), "n_train": str(self.n_train), "n_test": str(self.n_test),
               "slab": str(self.slab)}
        out.update({f"spec.{k}": v for k, v in self.spec.to_mapping().items() if k != "seed"})
        out.update({f"train.{k}": v for k, v in self.train.to_mapping().items()
                    if k not in ("seed", "dataset", "checkpoint", "log")})
        return out

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> "BenchmarkConfig":
        top, spec, tr = {}, {}, {}
        for key, raw in values.items():
            if key.startswith("spec."):
                spec[key[5:]] = raw
            elif key.startswith("train."):
                tr[key[6:]] = raw
            elif key in ("seed", "n_train", "n_test", "slab"):
                top[key] = int(raw)
            else:
                raise KeyError(key)
        train_cfg = TrainConfig.from_mapping({**TrainConfig(**BENCH_TRAIN).to_mapping(), **tr})
        return cls(spec=PhantomSpec.from_mapping(spec), train=train_cfg, **top)


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    calibration: P.ThresholdCalibration
    reports: List[P.CaseReport]
    aggregate: Dict[str, float]
    training: TrainResult
    timings: Dict[str, float]
    calib_ids: List[str]
    test_ids: List[str]


def model_volumes(volumes: Sequence[Volume], train_cfg: TrainConfig) -> List[Volume]:
    arch = train_cfg.architecture
    return [preprocess(v, arch.volume_shape(v.shape[0])) for v in volumes]


def run_benchmark(config: Optional[BenchmarkConfig] = None, out_dir=None) -> BenchmarkResult:
    """Synthesize, train on healthy phantoms, calibrate on half the lesioned set, score the other half."""
    cfg = (config or BenchmarkConfig()).seeded()
    timings = {}
    t0 = time.perf_counter()
    healthy = model_volumes(generate_dataset(cfg.spec, cfg.n_train, False), cfg.train)
    lesioned = model_volumes(generate_dataset(cfg.spec, cfg.n_test, True), cfg.train)
    timings["synth"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tr_cfg = cfg.train
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tr_cfg = dataclasses.replace(tr_cfg, log=str(out_dir / "train_log.csv"),
                                     checkpoint=str(out_dir / "model.uadm"))
    result = train(tr_cfg, training_samples(healthy, tr_cfg.dimensionality, tr_cfg.slices))
    timings["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    slab = cfg.slab or None
    cases = {v.id: P.make_case(v, P.anomaly_map(v, result.model, seed=cfg.seed), slab=slab) for v in lesioned}
    calib_ids, test_ids = P.split_half(sorted(cases), cfg.seed)
    calibration = P.calibrate_threshold([cases[i] for i in calib_ids])
    reports, agg = P.evaluate_split([cases[i] for i in test_ids], calibration.chosen)
    timings["evaluate"] = time.perf_counter() - t0

    if out_dir is not None:
        P.write_report_csv(reports, out_dir / "metrics.csv")
        (out_dir / "calibration.txt").write_text(format_kv(calibration.to_mapping()))
        (out_dir / "aggregate.txt").write_text(P.format_aggregate(agg) + "\n")
    log.info("benchmark seed %d: %s", cfg.seed, P.format_aggregate(agg))
    return BenchmarkResult(config=cfg, calibration=calibration, reports=reports, aggregate=agg,
                           training=result, timings=timings, calib_ids=calib_ids, test_ids=test_ids)


# ---------------------------------------------------------------- sweeps

# desk-scale setting for the multi-seed sweeps: 32^3 grids, narrow networks
SWEEP_SPEC = dict(shape=(32, 32, 32), lesion_radius_min=2.0, lesion_radius_max=3.5)
SWEEP_TRAIN = dict(channel_widths=(4, 8, 16, 32), batch_size=4, learning_rate=1e-3, slices=16)


def sweep_config(arch: str, seed: int, epochs: int, n_train: int = 8, n_test: int = 8) -> BenchmarkConfig:
    a = ARCHITECTURES[arch]
    spatial = (32, 32) if a["dimensionality"] == 2 else (32, 32, 32)
    tr = TrainConfig(epochs=epochs, input_shape=(1,) + spatial, **a, **SWEEP_TRAIN)
    if a["dimensionality"] == 2:
        tr = dataclasses.replace(tr, batch_size=32)
    return BenchmarkConfig(seed=seed, n_train=n_train, n_test=n_test, spec=PhantomSpec(**SWEEP_SPEC), train=tr)


@dataclass
class StabilityRun:
    arch: str
    seed: int
    finite: bool
    final_total: float
    message: str = ""


def stability_sweep(seeds: Sequence[int] = range(5), archs: Sequence[str] = tuple(ARCHITECTURES),
                    epochs: int = 30) -> List[StabilityRun]:
    """Train every (architecture, seed) pair and record whether any loss went non-finite."""
    runs = []
    for arch in archs:
        for seed in seeds:
            cfg = sweep_config(arch, seed, epochs).seeded()
            vols = model_volumes(generate_dataset(cfg.spec, cfg.n_train, False), cfg.train)
            try:
                res = train(cfg.train, training_samples(vols, cfg.train.dimensionality, cfg.train.slices))
                final = res.epoch_means[-1]["total"]
                runs.append(StabilityRun(arch, seed, math.isfinite(final), final))
            except NumericError as exc:
                runs.append(StabilityRun(arch, seed, False, float("nan"), str(exc)))
            log.info("stability %s seed %d: %s", arch, seed, runs[-1])
    return runs


def ordering_sweep(seeds: Sequence[int] = range(5), epochs: int = 40,
                   pairs: Sequence[Tuple[str, str]] = (("dense3d", "spatial3d"), ("dense2d", "spatial2d"))
                   ) -> List[Dict[str, float]]:
    """Held-out mean Dice of dense vs spatial bottlenecks per seed (reported, not asserted)."""
    rows = []
    for seed in seeds:
        row: Dict[str, float] = {"seed": float(seed)}
        for dense, spatial in pairs:
            for arch in (dense, spatial):
                row[arch] = run_benchmark(sweep_config(arch, seed, epochs)).aggregate["dice_mean"]
        rows.append(row)
    return rows
