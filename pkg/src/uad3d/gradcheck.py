"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradCheckReport:
    name: str
    errors: List[float]
    tol: float
    elapsed: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e < self.tol for e in self.errors)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    name: str = "",
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``fn(*inputs)`` against central differences.

    ``max_coords`` limits the number of perturbed coordinates per input (chosen
    with a seeded generator); the analytic gradient is compared on those only.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise T.UsageError("grad_check runs in float64 only")
        x.grad = None
        x.requires_grad = True
    out = fn(*inputs)
    if out.size != 1:
        out = T.sum(out)
    T.backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    rng = np.random.default_rng(seed)
    errors = []
    with T.no_grad():
        for x, a in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            num = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(T.sum(fn(*inputs)).data)
                flat[i] = orig - step
                fm = float(T.sum(fn(*inputs)).data)
                flat[i] = orig
                num[j] = (fp - fm) / (2 * step)
            errors.append(relative_error(a.reshape(-1)[idx], num))
    return GradCheckReport(name=name, errors=errors, tol=tol)


def _rand(rng, *shape, positive=False, away_from_zero=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    if away_from_zero:
        x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-300) * 0.2, x)
    return Tensor(x)


def primitive_cases(seed: int = 0) -> Dict[str, tuple]:
    """One (fn, inputs, tol) entry per differentiable primitive."""
    rng = np.random.default_rng(seed)
    r = lambda *s, **kw: _rand(rng, *s, **kw)  # noqa: E731
    weights = rng.standard_normal((3, 4))
    w = lambda y: T.mul(y, Tensor(weights))  # noqa: E731 - breaks the symmetry of plain sums
    return {
        "add": (lambda a, b: w(T.add(a, b)), [r(3, 4), r(3, 4)], 1e-4),
        "sub": (lambda a, b: w(T.sub(a, b)), [r(3, 4), r(3, 4)], 1e-4),
        "mul": (lambda a, b: w(T.mul(a, b)), [r(3, 4), r(3, 4)], 1e-4),
        "mul_scalar": (lambda a, s: w(T.mul(a, s)), [r(3, 4), r()], 1e-4),
        "div": (lambda a, b: w(T.div(a, b)), [r(3, 4), r(3, 4, positive=True)], 1e-4),
        "exp": (lambda a: w(T.exp(a)), [r(3, 4)], 1e-4),
        "log": (lambda a: w(T.log(a)), [r(3, 4, positive=True)], 1e-4),
        "abs": (lambda a: w(T.abs(a)), [r(3, 4, away_from_zero=True)], 1e-4),
        "square": (lambda a: w(T.square(a)), [r(3, 4)], 1e-4),
        "sigmoid": (lambda a: w(T.sigmoid(a)), [r(3, 4)], 1e-4),
        "leaky_relu": (lambda a: w(T.leaky_relu(a, 0.2)), [r(3, 4, away_from_zero=True)], 1e-4),
        "relu": (lambda a: w(T.relu(a)), [r(3, 4, away_from_zero=True)], 1e-4),
        "sum": (lambda a: T.square(T.sum(w(a))), [r(3, 4)], 1e-4),
        "mean": (lambda a: T.square(T.mean(w(a))), [r(3, 4)], 1e-4),
        "reshape": (lambda a: w(T.reshape(a, (3, 4))), [r(2, 6)], 1e-4),
        "dense": (lambda x, W, b: T.square(T.dense(x, W, b)), [r(3, 5), r(4, 5), r(4)], 1e-6),
        "conv2d": (
            lambda x, W, b: T.square(T.conv(x, W, b, stride=2, padding=1)),
            [r(1, 2, 5, 5), r(3, 2, 3, 3), r(3)],
            1e-4,
        ),
        "conv3d": (
            lambda x, W, b: T.square(T.conv(x, W, b, stride=2, padding=1)),
            [r(1, 1, 4, 4, 4), r(2, 1, 4, 4, 4), r(2)],
            1e-4,
        ),
        "conv_transpose2d": (
            lambda x, W, b: T.square(T.conv_transpose(x, W, b, stride=2, padding=1)),
            [r(1, 3, 3, 3), r(3, 2, 4, 4), r(2)],
            1e-4,
        ),
        "conv_transpose3d": (
            lambda x, W, b: T.square(T.conv_transpose(x, W, b, stride=2, padding=1)),
            [r(1, 2, 2, 2, 2), r(2, 1, 4, 4, 4), r(1)],
            1e-4,
        ),
    }


def run_primitive_suite(tol: float = 1e-4, step: float = 1e-5, seed: int = 0) -> List[GradCheckReport]:
    reports = []
    for name, (fn, inputs, case_tol) in primitive_cases(seed).items():
        reports.append(grad_check(fn, inputs, step=step, tol=min(tol, case_tol), name=name))
    return reports


def run_architecture_suite(tol: float = 1e-4, step: float = 1e-5, seed: int = 0,
                           max_coords: int = 24) -> List[GradCheckReport]:
    """Grad-check forward + robust loss for tiny versions of all four architectures."""
    from .losses import LossState, robust_loss
    from .models import VaeConfig, VaeModel, decode, encode

    reports = []
    for dim in (2, 3):
        for bottleneck in ("spatial", "dense"):
            spatial = (16,) * dim
            cfg = VaeConfig(dimensionality=dim, bottleneck=bottleneck, latent_dim=3,
                            input_shape=(1,) + spatial, channel_widths=(2, 3, 3, 4), dtype="f64")
            model = VaeModel(cfg, seed=seed)
            rng = np.random.default_rng(seed + 1)
            # zero biases put dead-ReLU outputs exactly on the kink; move them off it
            for name, prm in model.params.items():
                if name.endswith(".bias"):
                    prm.data[...] = rng.uniform(0.05, 0.2, size=prm.shape)
            x = Tensor(rng.uniform(0.0, 1.0, size=(2,) + cfg.input_shape))
            eps = rng.standard_normal((2,) + cfg.latent_shape)
            state = LossState(T=50, L=10)
            state.sigma.push(0.3)
            state.schedule.t = 10
            names = list(model.params)

            def fn(*params, _names=names, _model=model, _state=state, _eps=eps, _x=x):
                _model.params.update(dict(zip(_names, params)))
                mu, logvar = encode(_model, _x)
                z = mu + T.exp(T.mul(logvar, 0.5)) * Tensor(_eps)
                x_hat = decode(_model, z)
                total, _ = robust_loss(_state, _x, x_hat, mu, logvar, advance=False)
                return total

            rep = grad_check(fn, [model.params[n] for n in names], step=step, tol=tol,
                             name=f"{bottleneck}{dim}d", max_coords=max_coords, seed=seed)
            reports.append(rep)
    return reports
