"""Central finite-difference checks of the analytic gradients.

The oracle only ever evaluates forward passes under ``torch.no_grad``; it
never consults autograd.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import diffcore as dc
from .config import ModelConfig
from .model import InputShapes, build_model

STEP = 1e-6
FLOOR = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def numeric_grads(f: Callable[[], tuple[torch.Tensor, ...]], x: torch.Tensor, h: float = STEP) -> np.ndarray:
    """Central differences of every scalar in ``f()`` w.r.t. each element of ``x``.

    ``x`` is perturbed in place and restored. Returns shape ``(outputs, *x.shape)``.
    """
    flat = x.data.view(-1)
    cols = []
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = np.array([float(v) for v in f()])
            flat[i] = orig - h
            down = np.array([float(v) for v in f()])
            flat[i] = orig
            cols.append((up - down) / (2 * h))
    return np.stack(cols, axis=-1).reshape(-1, *x.shape)


def numeric_grad(f: Callable[[], torch.Tensor], x: torch.Tensor, h: float = STEP) -> np.ndarray:
    return numeric_grads(lambda: (f(),), x, h)[0]


def rel_err(analytic, numeric, floor: float = FLOOR) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _analytic(f, xs):
    for x in xs:
        x.grad = None
    dc.backward(f())
    return [x.grad.numpy().copy() for x in xs]


def check_function(name: str, f: Callable[[], torch.Tensor], xs: list[torch.Tensor], tol: float = 1e-6,
                   signs: list[float] | None = None) -> GradCheckResult:
    """Compare autograd against central differences for every input in ``xs``.

    ``signs`` scales the numeric gradient per input; -1 encodes a gradient
    reversal sitting between that input and the loss.
    """
    analytic = _analytic(f, xs)
    signs = signs or [1.0] * len(xs)
    worst = max(rel_err(a, s * numeric_grad(f, x)) for a, x, s in zip(analytic, xs, signs))
    return GradCheckResult(name, worst, tol)


def _rand(gen, *shape, low=-1.0, high=1.0):
    x = torch.rand(shape, generator=gen, dtype=torch.float64) * (high - low) + low
    return x.requires_grad_(True)


def primitive_checks(seed: int = 0, tol: float = 1e-6) -> list[GradCheckResult]:
    gen = torch.Generator().manual_seed(seed)
    out = []

    def readout(shape):
        w = torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1
        return lambda y: (y * w).sum()

    a, b = _rand(gen, 3, 4), _rand(gen, 4, 2)
    r = readout((3, 2))
    out.append(check_function("matmul", lambda: r(dc.matmul(a, b)), [a, b], tol))

    x = _rand(gen, 4, 5)
    r = readout((4, 5))
    out.append(check_function("softmax_rows", lambda: r(dc.softmax_rows(x)), [x], tol))

    x, g, bb = _rand(gen, 4, 6), _rand(gen, 6), _rand(gen, 6)
    r = readout((4, 6))
    out.append(check_function("layer_norm", lambda: r(dc.layer_norm(x, g, bb)), [x, g, bb], tol))

    x = _rand(gen, 3, 3)
    r = readout((3, 3))
    out.append(check_function("grad_reversal", lambda: r(dc.grad_reversal(x)), [x], tol, signs=[-1.0]))

    x, y = _rand(gen, 3, 4), _rand(gen, 3, 4)
    r = readout((3, 4))
    out.append(check_function("add", lambda: r(dc.add(x, y)), [x, y], tol))
    out.append(check_function("sub", lambda: r(dc.sub(x, y)), [x, y], tol))
    out.append(check_function("scale", lambda: r(dc.scale(x, -2.5)), [x], tol))
    # keep relu inputs away from the kink
    xr = _rand(gen, 3, 4)
    with torch.no_grad():
        xr.add_(torch.sign(xr) * 0.05)
    out.append(check_function("relu", lambda: r(dc.relu(xr)), [xr], tol))
    out.append(check_function("gelu", lambda: r(dc.gelu(x)), [x], tol))
    out.append(check_function("sigmoid", lambda: r(dc.sigmoid(x)), [x], tol))
    xp = _rand(gen, 3, 4, low=0.2, high=2.0)
    out.append(check_function("log", lambda: r(dc.log(xp)), [xp], tol))

    z = _rand(gen, 2, 4)
    r = readout((5, 4))
    out.append(check_function("concat", lambda: r(dc.concat([x, z], axis=0)[:5]), [x, z], tol))
    r = readout((4,))
    out.append(check_function("mean", lambda: r(dc.mean(x, 0)), [x], tol))
    out.append(check_function("sum", lambda: dc.sum(x) * 1.7, [x], tol))
    r = readout((4, 3))
    out.append(check_function("transpose", lambda: r(dc.transpose(x)), [x], tol))
    out.append(check_function("frobenius_sq", lambda: dc.frobenius_sq(x), [x], tol))
    return out


def toy_model_config(**overrides) -> ModelConfig:
    base = dict(d=4, h_l=2, h_m=2, encoder_heads=2, n_v=1, n_a=1, n_t=1, n_c=1, ffn_mult=2,
                dropout=0.0, alpha=1.0, beta=1.0, gamma=1.0)
    base.update(overrides)
    return ModelConfig(**base)


TOY_SHAPES = InputShapes({"visual": 3, "audio": 2, "text": 4}, {"visual": 3, "audio": 3, "text": 3}, 3)


def end_to_end_check(seed: int = 0, tol: float = 1e-4, config: ModelConfig | None = None,
                     shapes: InputShapes = TOY_SHAPES) -> GradCheckResult:
    """Every parameter gradient of the total loss on a two-sample batch vs central differences.

    Autograd routes the common adversarial term through a gradient reversal,
    so the oracle differentiates that term separately and flips its sign for
    every parameter that is not part of the discriminator.
    """
    config = config or toy_model_config(seed=seed)
    model = build_model(config, shapes, seed=seed)
    model.eval()
    gen = torch.Generator().manual_seed(seed + 1)
    batch = {m: torch.randn(2, shapes.dims[m], shapes.lengths[m], generator=gen, dtype=torch.float64)
             for m in shapes.dims}
    labels = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]], dtype=torch.float64)[:, : shapes.num_labels]

    def losses():
        return model(batch["visual"], batch["audio"], batch["text"], labels).losses

    def total():
        return losses()["L_All"]

    def split_terms():
        ls = losses()
        return ls["L_All"] - config.alpha * ls["L_C"], ls["L_C"]

    params = list(model.named_parameters())
    for _, p in params:
        p.grad = None
    dc.backward(total())
    worst = 0.0
    for name, p in params:
        analytic = p.grad.numpy().copy() if p.grad is not None else np.zeros(p.shape)
        rest, common = numeric_grads(split_terms, p)
        sign = 1.0 if name.startswith("amr.discriminator") else -1.0
        numeric = rest + sign * config.alpha * common
        worst = max(worst, rel_err(analytic, numeric))
    return GradCheckResult("end_to_end", worst, tol)


def run_suite(seed: int = 0) -> list[GradCheckResult]:
    return [*primitive_checks(seed), end_to_end_check(seed)]
