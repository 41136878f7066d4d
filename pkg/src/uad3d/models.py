"""Spatial and dense VAEs in 2D and 3D built on :mod:`uad3d.tensor`.

Encoder: four stride-2 convolutions (kernel 4, padding 1, leaky-ReLU) followed
by two heads producing the posterior mean and log-variance. Decoder: one head
followed by four stride-2 transposed convolutions, ReLU between layers and a
sigmoid on the output. Heads are 3-wide convolutions for the spatial
bottleneck and fully-connected layers for the dense one.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

KERNEL, STRIDE, PAD = 4, 2, 1
HEAD_KERNEL, HEAD_PAD = 3, 1
N_DOWN = 4

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class VaeConfig:
    dimensionality: int = 3
    bottleneck: str = "dense"
    latent_dim: int = 128
    input_shape: Tuple[int, ...] = (1, 64, 64, 64)
    channel_widths: Tuple[int, ...] = (32, 64, 128, 256)
    leaky_slope: float = 0.2
    dtype: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        object.__setattr__(self, "channel_widths", tuple(int(n) for n in self.channel_widths))
        if self.dimensionality not in (2, 3):
            raise ValueError(f"dimensionality must be 2 or 3, got {self.dimensionality}")
        if self.bottleneck not in ("spatial", "dense"):
            raise ValueError(f"bottleneck must be 'spatial' or 'dense', got {self.bottleneck!r}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        if len(self.input_shape) != self.dimensionality + 1 or self.input_shape[0] != 1:
            raise ValueError(f"input_shape must be (1, {'D, ' if self.dimensionality == 3 else ''}H, W), "
                             f"got {self.input_shape}")
        if any(n % 2 ** N_DOWN for n in self.spatial_shape):
            raise ValueError(f"spatial extents {self.spatial_shape} must be divisible by {2 ** N_DOWN}")
        if len(self.channel_widths) != N_DOWN or min(self.channel_widths) < 1:
            raise ValueError("channel_widths needs 4 positive entries")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def spatial_shape(self) -> Tuple[int, ...]:
        return self.input_shape[1:]

    def volume_shape(self, depth: int) -> Tuple[int, ...]:
        """Volume grid this model consumes; 2D models keep ``depth`` axial slices."""
        return self.spatial_shape if self.dimensionality == 3 else (int(depth),) + self.spatial_shape

    @property
    def reduced_shape(self) -> Tuple[int, ...]:
        return tuple(n // 2 ** N_DOWN for n in self.spatial_shape)

    @property
    def latent_shape(self) -> Tuple[int, ...]:
        """Per-sample latent shape (no batch axis)."""
        if self.bottleneck == "dense":
            return (self.latent_dim,)
        return (self.latent_dim,) + self.reduced_shape

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> Dict[str, str]:
        return {
            "dimensionality": str(self.dimensionality),
            "bottleneck": self.bottleneck,
            "latent_dim": str(self.latent_dim),
            "input_shape": ",".join(map(str, self.input_shape)),
            "channel_widths": ",".join(map(str, self.channel_widths)),
            "leaky_slope": repr(self.leaky_slope),
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, str]) -> "VaeConfig":
        ints = lambda s: tuple(int(v) for v in str(s).split(","))  # noqa: E731
        return cls(
            dimensionality=int(d["dimensionality"]),
            bottleneck=d["bottleneck"],
            latent_dim=int(d["latent_dim"]),
            input_shape=ints(d["input_shape"]),
            channel_widths=ints(d["channel_widths"]),
            leaky_slope=float(d.get("leaky_slope", 0.2)),
            dtype=d.get("dtype", "f32"),
        )


@dataclass
class LatentSample:
    mu: Tensor
    logvar: Tensor
    z: Tensor
    epsilon: np.ndarray


def _kaiming(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class VaeModel:
    """Parameters of one VAE plus its configuration.

    ``zero_heads`` zero-initializes the encoder heads (giving mu = logvar = 0)
    and ``zero_output`` the final decoder layer (giving a constant 0.5 output).
    """

    def __init__(self, config: VaeConfig, seed: int = 0, zero_heads: bool = False, zero_output: bool = False):
        self.config = config
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        nd = config.dimensionality
        w = config.channel_widths
        k_down = (KERNEL,) * nd
        k_head = (HEAD_KERNEL,) * nd
        kvol, hvol = KERNEL ** nd, HEAD_KERNEL ** nd

        chans = (1,) + w
        for i in range(N_DOWN):
            self._add(f"enc.conv{i}.weight", _kaiming(rng, (chans[i + 1], chans[i]) + k_down, chans[i] * kvol, dt))
            self._add(f"enc.conv{i}.bias", np.zeros(chans[i + 1], dt))

        n = config.latent_dim
        flat = w[-1] * int(np.prod(config.reduced_shape))
        for head in ("mu", "logvar"):
            if config.bottleneck == "spatial":
                shape, fan = (n, w[-1]) + k_head, w[-1] * hvol
            else:
                shape, fan = (n, flat), flat
            wt = np.zeros(shape, dt) if zero_heads else _kaiming(rng, shape, fan, dt)
            if head == "logvar" and not zero_heads:
                wt *= 0.1  # keeps the initial variance near 1
            self._add(f"enc.{head}.weight", wt)
            self._add(f"enc.{head}.bias", np.zeros(n, dt))

        if config.bottleneck == "spatial":
            self._add("dec.head.weight", _kaiming(rng, (w[-1], n) + k_head, n * hvol, dt))
            self._add("dec.head.bias", np.zeros(w[-1], dt))
        else:
            self._add("dec.head.weight", _kaiming(rng, (flat, n), n, dt))
            self._add("dec.head.bias", np.zeros(flat, dt))

        up = w[::-1] + (1,)
        for i in range(N_DOWN):
            # conv_transpose kernels are laid out (in, out, *k)
            shape = (up[i], up[i + 1]) + k_down
            last = i == N_DOWN - 1
            wt = np.zeros(shape, dt) if (last and zero_output) else _kaiming(rng, shape, up[i] * 2 ** nd, dt)
            self._add(f"dec.up{i}.weight", wt)
            self._add(f"dec.up{i}.bias", np.zeros(up[i + 1], dt))

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr, requires_grad=True)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def encode(model: VaeModel, x: Tensor) -> Tuple[Tensor, Tensor]:
    cfg, p = model.config, model.params
    if x.ndim != cfg.dimensionality + 2 or x.shape[1:] != cfg.input_shape:
        raise DimensionError(f"encode: expected (B,) + {cfg.input_shape}, got {x.shape}")
    h = x
    for i in range(N_DOWN):
        h = T.conv(h, p[f"enc.conv{i}.weight"], p[f"enc.conv{i}.bias"], stride=STRIDE, padding=PAD)
        h = T.leaky_relu(h, cfg.leaky_slope)
    if cfg.bottleneck == "spatial":
        mu = T.conv(h, p["enc.mu.weight"], p["enc.mu.bias"], padding=HEAD_PAD)
        logvar = T.conv(h, p["enc.logvar.weight"], p["enc.logvar.bias"], padding=HEAD_PAD)
    else:
        h = T.reshape(h, (h.shape[0], -1))
        mu = T.dense(h, p["enc.mu.weight"], p["enc.mu.bias"])
        logvar = T.dense(h, p["enc.logvar.weight"], p["enc.logvar.bias"])
    return mu, logvar


def reparameterize(mu: Tensor, logvar: Tensor, rng_seed=None, epsilon: Optional[np.ndarray] = None) -> LatentSample:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I).

    ``rng_seed`` may be an int or a ``numpy.random.Generator``; an explicit
    ``epsilon`` overrides sampling.
    """
    if mu.shape != logvar.shape:
        raise DimensionError(f"reparameterize: mu {mu.shape} vs logvar {logvar.shape}")
    if epsilon is None:
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        epsilon = rng.standard_normal(mu.shape)
    epsilon = np.asarray(epsilon, dtype=mu.dtype).reshape(mu.shape)
    z = T.add(mu, T.mul(T.exp(T.mul(logvar, 0.5)), Tensor(epsilon)))
    return LatentSample(mu=mu, logvar=logvar, z=z, epsilon=epsilon)


def decode(model: VaeModel, z: Tensor) -> Tensor:
    cfg, p = model.config, model.params
    if z.shape[1:] != cfg.latent_shape:
        raise DimensionError(f"decode: expected (B,) + {cfg.latent_shape}, got {z.shape}")
    if cfg.bottleneck == "spatial":
        h = T.conv(z, p["dec.head.weight"], p["dec.head.bias"], padding=HEAD_PAD)
    else:
        h = T.dense(z, p["dec.head.weight"], p["dec.head.bias"])
        h = T.reshape(h, (z.shape[0], cfg.channel_widths[-1]) + cfg.reduced_shape)
    h = T.relu(h)
    for i in range(N_DOWN):
        h = T.conv_transpose(h, p[f"dec.up{i}.weight"], p[f"dec.up{i}.bias"], stride=STRIDE, padding=PAD)
        h = T.relu(h) if i < N_DOWN - 1 else T.sigmoid(h)
    return h


def forward(model: VaeModel, x: Tensor, seed=None, sample: bool = True) -> Tuple[Tensor, LatentSample]:
    """Encode, sample (or take the mean when ``sample`` is False) and decode."""
    mu, logvar = encode(model, x)
    eps = None if sample else np.zeros(mu.shape)
    lat = reparameterize(mu, logvar, seed, epsilon=eps)
    return decode(model, lat.z), lat


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"UADM"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: VaeModel, path) -> None:
    """Write the model as UADM: magic, u32 version, u32-length config text, then tensors.

    Each tensor is (u32 name length, name, u32 rank, u32 extents, f32 LE data).
    """
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    cfg = "\n".join(f"{k}={v}" for k, v in model.config.to_dict().items()).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    _atomic_write(path, buf.getvalue())


def load_checkpoint(path) -> VaeModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a UADM checkpoint")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    text = r.take(r.u32()).decode()
    cfg = VaeConfig.from_dict(dict(line.split("=", 1) for line in text.splitlines() if line))
    model = VaeModel(cfg)
    dt = cfg.np_dtype
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        arr = np.frombuffer(r.take(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
        if name not in model.params or model.params[name].shape != shape:
            raise CheckpointError(f"{path}: unexpected tensor {name} {shape}")
        model.params[name] = Tensor(arr.astype(dt), requires_grad=True)
    return model


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _atomic_write(path, data: bytes) -> None:
    import os
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
