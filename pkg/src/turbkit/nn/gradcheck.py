"""Finite-difference validation of layer and model gradients.

Analytic gradients are compared against central differences with step 1e-5
on every parameter and input coordinate; above 10k coordinates a random 5%
sample is checked instead. The relative error for a coordinate is
``|a - n| / max(|a|, |n|, 1e-8)``. Checks require float64 — the whole point
of the 64-bit mode is that finite differences are meaningless in float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NonFiniteError
from ..tensor import Rng

FD_STEP = 1e-5
SAMPLE_THRESHOLD = 10_000
SAMPLE_FRACTION = 0.05


@dataclass
class GradcheckResult:
    max_rel_error: float
    n_checked: int
    worst_coord: str

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def _check_coords(loss_fn, targets, rng: Rng) -> GradcheckResult:
    """Compare analytic grads against central differences of ``loss_fn``.

    ``targets`` is a list of (label, value_array, analytic_grad_array); the
    value arrays are perturbed in place and restored.
    """
    coords = []
    for label, value, grad in targets:
        if not np.isfinite(grad).all():
            raise NonFiniteError(f"analytic gradient for {label} is non-finite")
        coords.extend((label, value, grad, i) for i in range(value.size))

    total = len(coords)
    if total > SAMPLE_THRESHOLD:
        picked = rng.choice(total, int(SAMPLE_FRACTION * total))
        coords = [coords[i] for i in sorted(picked)]

    worst = 0.0
    worst_coord = ""
    for label, value, grad, i in coords:
        orig = value.flat[i]
        value.flat[i] = orig + FD_STEP
        fp = loss_fn()
        value.flat[i] = orig - FD_STEP
        fm = loss_fn()
        value.flat[i] = orig
        numeric = (fp - fm) / (2 * FD_STEP)
        analytic = grad.flat[i]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        if rel > worst:
            worst = rel
            worst_coord = f"{label}[{i}]"
    return GradcheckResult(max_rel_error=worst, n_checked=len(coords),
                           worst_coord=worst_coord)


def gradcheck_layer(layer, x: np.ndarray, rng: Rng) -> GradcheckResult:
    """Check a layer's input and parameter gradients on input ``x`` (float64)."""
    if x.dtype != np.float64:
        raise ValueError("gradcheck requires float64 inputs")
    for name, p in layer.named_parameters():
        if p.value.dtype != np.float64:
            raise ValueError(f"gradcheck requires a float64 layer (param {name})")

    x = x.copy()
    y = layer.forward(x)
    w = rng.normal(y.shape, dtype=np.float64)

    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(w)

    def loss_fn() -> float:
        return float(np.sum(layer.forward(x) * w))

    targets = [("input", x, dx)]
    targets += [(name, p.value, p.grad) for name, p in layer.named_parameters()]
    return _check_coords(loss_fn, targets, rng)


def gradcheck_params(model, loss_fn, rng: Rng) -> GradcheckResult:
    """Check a model's parameter gradients against finite differences of ``loss_fn``.

    ``loss_fn()`` must run a fresh forward pass and return the scalar loss;
    the caller is responsible for having populated ``Param.grad`` with the
    analytic gradients of that same loss before calling.
    """
    targets = [(name, p.value, p.grad) for name, p in model.named_parameters()]
    return _check_coords(loss_fn, targets, rng)
