"""Finite-difference gradient checking against the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, default_dtype, NonFiniteError


@dataclass
class GradcheckReport:
    name: str
    max_rel_error: float
    tol: float
    per_input: list[float] = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.0e}, {self.checked} coords)"


def _rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    # normwise, so individual near-zero components don't dominate; gradients
    # smaller than ``floor`` overall are judged on absolute error instead
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4,
              tol: float = 1e-4, name: str = "f", max_coords: Optional[int] = None,
              seed: int = 0, floor: float = 0.0) -> GradcheckReport:
    """Compare autodiff gradients of the scalar ``f()`` with central differences.

    ``f`` takes no arguments and must read ``inputs`` (64-bit tensors,
    perturbed in place).  With ``max_coords`` set, only that many randomly
    chosen coordinates per input are differenced.  ``floor`` sets the
    smallest gradient scale used as the error denominator, for inputs whose
    exact gradient is zero (e.g. a bias feeding a normalisation).
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 inputs, got {t.dtype}")
        t.grad = None
    out = f()
    if out.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NonFiniteError(name)
    backward(out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    errors = []
    checked = 0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            numeric[n] = (fp - fm) / (2.0 * step)
        if not np.isfinite(numeric).all():
            raise NonFiniteError(name)
        errors.append(_rel_error(ga.reshape(-1)[coords], numeric, floor))
        checked += coords.size
    return GradcheckReport(name, max(errors, default=0.0), tol, errors, checked)


def check_function(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], step: float = 1e-4,
                   tol: float = 1e-4, name: str = "f", **kw) -> GradcheckReport:
    """Gradcheck ``fn(*tensors)`` for fresh float64 leaves built from ``arrays``."""
    with default_dtype(np.float64):
        leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        return gradcheck(lambda: fn(*leaves), leaves, step=step, tol=tol, name=name, **kw)
