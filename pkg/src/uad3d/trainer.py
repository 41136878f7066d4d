"""Seeded mini-batch training of the VAEs on the robust loss."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import Volume, central_indices, list_volumes, preprocess, read_volume
from .losses import LOG_COLUMNS, LossState, kl_per_unit, robust_loss
from .models import VaeConfig, VaeModel, decode, encode, reparameterize, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

ACTIVITY_THRESHOLD = 0.01


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(ValueError):
    """A configuration file could not be parsed or holds an unknown key."""


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    precision: str = "f32"
    T: int = 50
    L: int = 10
    beta_mode: str = "cyclical"
    constant_beta: float = 1.0
    dimensionality: int = 3
    bottleneck: str = "dense"
    latent_dim: int = 128
    input_shape: Tuple[int, ...] = (1, 64, 64, 64)
    channel_widths: Tuple[int, ...] = (32, 64, 128, 256)
    leaky_slope: float = 0.2
    slices: int = 0  # 2D only: central axial slices per volume, 0 = all
    dataset: str = ""
    checkpoint: str = ""
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    log: str = ""

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.channel_widths = tuple(int(v) for v in self.channel_widths)
        for name in ("epochs", "batch_size", "T", "L"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def architecture(self) -> VaeConfig:
        return VaeConfig(dimensionality=self.dimensionality, bottleneck=self.bottleneck,
                         latent_dim=self.latent_dim, input_shape=self.input_shape,
                         channel_widths=self.channel_widths, leaky_slope=self.leaky_slope,
                         dtype=self.precision)

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> "TrainConfig":
        defaults = cls()
        kwargs = {}
        for key, raw in values.items():
            if key not in {f.name for f in fields(cls)}:
                raise ConfigError(f"unknown config key: {key}")
            default = getattr(defaults, key)
            try:
                if isinstance(default, tuple):
                    kwargs[key] = tuple(int(v) for v in raw.split(","))
                else:
                    kwargs[key] = type(default)(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    def to_mapping(self) -> Dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out


def parse_kv(text: str) -> Dict[str, str]:
    """Flat ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        out[key] = value
    return out


def load_kv(path) -> Dict[str, str]:
    return parse_kv(Path(path).read_text())


def format_kv(values: Dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              lr: float) -> None:
    """In-place Adam update with bias correction. Missing gradients count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if lr == 0:
            continue
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------- data


def load_training_volumes(directory, arch: Optional[VaeConfig] = None) -> List[Volume]:
    """Read every volume in ``directory``; with ``arch``, preprocess to the shape it consumes."""
    paths = list_volumes(directory)
    if not paths:
        raise FileNotFoundError(f"no .uadv volumes in {directory}")
    vols = [read_volume(p) for p in paths]
    if arch is not None:
        vols = [preprocess(v, arch.volume_shape(v.shape[0])) for v in vols]
    return vols


def training_samples(volumes: Sequence[Volume], dimensionality: int, slices: int = 0) -> np.ndarray:
    """Stack volumes (3D) or their central axial slices (2D) into (N, 1, ...) float arrays."""
    if dimensionality == 3:
        return np.stack([v.voxels for v in volumes])[:, None]
    out = []
    for v in volumes:
        count = v.shape[0] if slices <= 0 else slices
        out.extend(v.voxels[i] for i in central_indices(v.shape[0], count))
    return np.stack(out)[:, None]


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: VaeModel
    log: List[tuple]
    epoch_means: List[Dict[str, float]]


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    init, shuffle, noise = ss.spawn(3)
    return (int(init.generate_state(1)[0]), np.random.Generator(np.random.PCG64(shuffle)),
            np.random.Generator(np.random.PCG64(noise)))


def train(config: TrainConfig, samples: Optional[np.ndarray] = None,
          on_epoch: Optional[Callable[[int, VaeModel], None]] = None) -> TrainResult:
    """Train a VAE on ``samples`` (or on the configured dataset directory).

    Every random choice derives from ``config.seed``. Raises NumericError with
    the last LossState when a loss turns non-finite.
    """
    arch = config.architecture
    if samples is None:
        samples = training_samples(load_training_volumes(config.dataset, arch), arch.dimensionality, config.slices)
    samples = np.asarray(samples, dtype=arch.np_dtype)
    if samples.shape[1:] != arch.input_shape:
        raise T.DimensionError(f"samples of shape {samples.shape[1:]} do not match input {arch.input_shape}")

    init_seed, shuffle_rng, noise_rng = _streams(config.seed)
    model = VaeModel(arch, seed=init_seed)
    state = LossState(T=config.T, L=config.L, beta_mode=config.beta_mode, constant_beta=config.constant_beta)
    opt = AdamState()
    rows: List[tuple] = []
    epoch_means = []
    log_fh = writer = None
    if config.log:
        log_fh = open(config.log, "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_COLUMNS)
    try:
        for epoch in range(config.epochs):
            order = shuffle_rng.permutation(len(samples))
            start = len(rows)
            for i in range(0, len(order), config.batch_size):
                x = Tensor(samples[order[i:i + config.batch_size]])
                model.zero_grad()
                mu, logvar = encode(model, x)
                lat = reparameterize(mu, logvar, noise_rng)
                x_hat = decode(model, lat.z)
                total, _ = robust_loss(state, x, x_hat, mu, logvar)
                comp = state.last
                if not all(math.isfinite(v) for v in (comp.raw_recon, comp.kl, comp.total)):
                    raise NumericError(f"non-finite loss at iteration {comp.t}: {state!r}")
                T.backward(total)
                adam_step({k: p.data for k, p in model.params.items()},
                          {k: p.grad for k, p in model.params.items()}, opt, config.learning_rate)
                rows.append(comp.row())
                if writer is not None:
                    writer.writerow([repr(v) for v in comp.row()])
            ep = np.array(rows[start:], dtype=np.float64)
            epoch_means.append({c: float(ep[:, j].mean()) for j, c in enumerate(LOG_COLUMNS)})
            log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in epoch_means[-1].items()})
            if config.checkpoint and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(model, config.checkpoint)
            if on_epoch is not None:
                on_epoch(epoch, model)
    finally:
        if log_fh is not None:
            log_fh.close()
    model.zero_grad()
    if config.checkpoint:
        save_checkpoint(model, config.checkpoint)
    return TrainResult(model=model, log=rows, epoch_means=epoch_means)


# ---------------------------------------------------------------- diagnostics


@dataclass
class CollapseDiagnostics:
    per_unit_kl: np.ndarray
    active_units: int
    threshold: float = ACTIVITY_THRESHOLD

    @property
    def collapsed_units(self) -> int:
        return int(self.per_unit_kl.size) - self.active_units


def diagnose_collapse(model: VaeModel, samples: np.ndarray, threshold: float = ACTIVITY_THRESHOLD,
                      batch_size: int = 16) -> CollapseDiagnostics:
    """Per-latent-unit KL averaged over ``samples``; units above ``threshold`` nats count as active."""
    dt = model.config.np_dtype
    mus, lvs = [], []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            mu, lv = encode(model, Tensor(np.asarray(samples[i:i + batch_size], dtype=dt)))
            mus.append(mu.data)
            lvs.append(lv.data)
    per_unit = kl_per_unit(np.concatenate(mus), np.concatenate(lvs))
    return CollapseDiagnostics(per_unit_kl=per_unit, active_units=int(np.sum(per_unit > threshold)),
                               threshold=threshold)
