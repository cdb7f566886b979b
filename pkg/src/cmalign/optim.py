"""Adam optimizer and a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .autodiff import NumericError, ShapeError, Tensor

__all__ = ["Adam", "NonFiniteGradientError", "GradCheckReport", "check_gradient"]


class NonFiniteGradientError(NumericError):
    """A gradient contained NaN/Inf; the update was aborted before any mutation."""

    def __init__(self, param_name: str, flat_index: int):
        super().__init__(f"non-finite gradient in '{param_name}' at flat index {flat_index}")
        self.param_name = param_name
        self.flat_index = flat_index


class Adam:
    """Bias-corrected Adam over a named dict of parameter arrays.

    Moment buffers are keyed and shaped like the parameters; ``step_count``
    increases by exactly 1 per update. Updates are pure arithmetic, so
    identical (state, params, grads) always produce identical results.
    """

    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._names = list(params.keys())  # fixed update order
        self.m = {k: np.zeros_like(params[k]) for k in self._names}
        self.v = {k: np.zeros_like(params[k]) for k in self._names}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        """Update params in place. Aborts (no mutation) on any non-finite gradient."""
        for name in self._names:
            g = grads[name]
            if g.shape != params[name].shape:
                raise ShapeError(f"grad shape {g.shape} != param shape {params[name].shape} for '{name}'")
            finite = np.isfinite(g)
            if not finite.all():
                raise NonFiniteGradientError(name, int(np.flatnonzero(~finite.ravel())[0]))
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in self._names:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    n_coordinates: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def check_gradient(loss_fn: Callable[[Tensor], Tensor], params: np.ndarray,
                   tol: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare the reverse-mode gradient of loss_fn against central differences.

    loss_fn receives a leaf tensor shaped like ``params`` and must return a
    scalar tensor. Per-coordinate error is |analytic - numeric| relative to
    max(1, |analytic|, |numeric|), so tiny gradients are judged absolutely.
    """
    base = np.asarray(params, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = loss_fn(leaf)
    if out.value.shape != ():
        raise ShapeError(f"loss_fn must return a scalar, got shape {out.value.shape}")
    if not np.isfinite(out.value):
        raise NumericError("loss_fn returned a non-finite value at the base point")
    out.backward()
    analytic = leaf.grad.ravel().copy()

    flat = base.ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + step
        f_plus = loss_fn(Tensor(probe.reshape(base.shape))).item()
        probe[i] = flat[i] - step
        f_minus = loss_fn(Tensor(probe.reshape(base.shape))).item()
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"loss_fn returned a non-finite value while perturbing index {i}")
        numeric[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradCheckReport(max_rel_error=float(rel[worst]) if rel.size else 0.0,
                           worst_index=worst, n_coordinates=flat.size, tol=tol)
