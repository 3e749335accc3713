"""Reverse-mode gradients, a finite-difference checker and Adam.

Gradients come from torch autograd in float64.  Loss functions take the flat
parameter vector and return a scalar tensor; :class:`ParamStore` names the
slices of that vector.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

from .geometry import DTYPE


class NonFiniteError(FloatingPointError):
    def __init__(self, message, primitive=None):
        super().__init__(message)
        self.primitive = primitive


class ParamStore:
    """Flat float64 parameter vector with named, shaped, disjoint slices."""

    def __init__(self, layout, values=None):
        self.layout = {}
        offset = 0
        for name, shape in layout:
            shape = tuple(int(s) for s in shape)
            size = int(np.prod(shape)) if shape else 1
            self.layout[name] = (offset, shape)
            offset += size
        self.size = offset
        if values is None:
            values = torch.zeros(offset, dtype=DTYPE)
        values = torch.as_tensor(values, dtype=DTYPE).detach().clone().reshape(-1)
        if values.numel() != offset:
            raise ValueError(f"parameter vector has {values.numel()} entries, layout needs {offset}")
        self.values = values

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, shape) for name, (_, shape) in self.layout.items()]

    def span(self, name) -> slice:
        offset, shape = self.layout[name]
        return slice(offset, offset + (int(np.prod(shape)) if shape else 1))

    def view(self, name, vec=None) -> torch.Tensor:
        vec = self.values if vec is None else vec
        _, shape = self.layout[name]
        return vec[self.span(name)].reshape(shape)

    def set(self, name, value):
        self.values[self.span(name)] = torch.as_tensor(value, dtype=DTYPE).reshape(-1)

    def copy(self, values=None) -> "ParamStore":
        return ParamStore(self.shapes, self.values if values is None else values)

    def __contains__(self, name):
        return name in self.layout


class _FiniteWatch(TorchFunctionMode):
    """Raises on the first torch primitive whose output is non-finite."""

    def __torch_function__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        outs = out if isinstance(out, (tuple, list)) else (out,)
        for o in outs:
            if isinstance(o, torch.Tensor) and o.is_floating_point():
                if not bool(torch.isfinite(o).all()):
                    name = getattr(func, "__name__", repr(func))
                    raise NonFiniteError(f"non-finite output from primitive {name!r}", name)
        return out


def _as_vector(params):
    if isinstance(params, ParamStore):
        return params.values
    return torch.as_tensor(params, dtype=DTYPE)


def evaluate_with_gradient(loss_fn, params):
    """Return ``(value, gradient)`` of ``loss_fn`` at ``params``.

    On a non-finite value or gradient the evaluation is replayed under
    instrumentation and a :class:`NonFiniteError` names the offending primitive.
    """
    x = _as_vector(params).detach().clone().requires_grad_(True)
    value = loss_fn(x)
    if not bool(torch.isfinite(value)):
        with torch.no_grad(), _FiniteWatch():
            loss_fn(x.detach())
        raise NonFiniteError(f"non-finite loss value {float(value)}")
    grad = None
    if value.requires_grad:
        (grad,) = torch.autograd.grad(value, x, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    if not bool(torch.isfinite(grad).all()):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                with torch.autograd.detect_anomaly(check_nan=True):
                    x2 = x.detach().clone().requires_grad_(True)
                    torch.autograd.grad(loss_fn(x2), x2, allow_unused=True)
        except RuntimeError as err:
            raise NonFiniteError(f"non-finite gradient: {err}".splitlines()[0]) from err
        raise NonFiniteError("non-finite gradient")
    return float(value.detach()), grad.detach()


@dataclass
class GradCheckReport:
    coords: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    rejected: int

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def median_rel_error(self) -> float:
        return float(np.median(self.rel_errors)) if self.rel_errors.size else 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.rel_errors.size > 0 and self.max_rel_error < tol


def relative_error(a, b, floor: float = 1e-8):
    a = np.asarray(a)
    b = np.asarray(b)
    return np.abs(a - b) / (np.maximum(np.abs(a), np.abs(b)) + floor)


def finite_difference_check(
    loss_fn,
    params,
    sample_count: int = 100,
    h: float = 1e-5,
    seed: int = 0,
    grad_fn=None,
    coords=None,
    floor: float = 1e-8,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare the gradient with central differences on sampled coordinates.

    The step is relative: ``h * max(1, |x_i|)``.  A coordinate is rejected as
    non-smooth when the central differences at ``h`` and ``10 h`` disagree by
    more than ``kink_tol`` (a kink or mask flip within ``10 h``); rejected
    coordinates are replaced by fresh samples.
    """
    x = _as_vector(params).detach().clone()
    if grad_fn is None:
        _, grad = evaluate_with_gradient(loss_fn, x)
    else:
        grad = torch.as_tensor(grad_fn(x), dtype=DTYPE)
    grad = grad.numpy()

    def f(vec):
        with torch.no_grad():
            return float(loss_fn(vec))

    def central(i, step):
        xp = x.clone()
        xm = x.clone()
        xp[i] += step
        xm[i] -= step
        return (f(xp) - f(xm)) / (2 * step)

    rng = np.random.default_rng(seed)
    n = x.numel()
    if coords is None:
        candidates = rng.permutation(n)
    else:
        candidates = np.asarray(coords)
    kept, numeric, rejected = [], [], 0
    for i in candidates:
        if len(kept) >= sample_count:
            break
        step = h * max(1.0, abs(float(x[i])))
        fd1 = central(int(i), step)
        fd10 = central(int(i), 10 * step)
        if relative_error(fd1, fd10, floor) > kink_tol:
            rejected += 1
            continue
        kept.append(int(i))
        numeric.append(fd1)
    kept = np.asarray(kept, dtype=np.int64)
    numeric = np.asarray(numeric)
    analytic = grad[kept] if kept.size else np.zeros(0)
    return GradCheckReport(kept, analytic, numeric, relative_error(analytic, numeric, floor), rejected)


@dataclass(frozen=True)
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size, **kw) -> "AdamState":
        return cls(torch.zeros(size, dtype=DTYPE), torch.zeros(size, dtype=DTYPE), **kw)


def adam_step(state: AdamState, params, grad):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    x = _as_vector(params)
    g = torch.as_tensor(grad, dtype=DTYPE)
    if g.shape != state.m.shape or x.shape != g.shape:
        raise ValueError("gradient, parameters and moments must have the same length")
    if not bool(torch.isfinite(g).all()):
        raise NonFiniteError("refusing Adam step with non-finite gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new_x = x - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    return new_x, replace(state, m=m, v=v, step=t)
