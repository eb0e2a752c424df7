"""Dense numeric kernels with exact hand-written backward passes.

The model has a fixed architecture, so there is no taped autodiff graph:
each forward helper is paired with a function returning its analytical
gradient, and ``finite_diff_check`` is the harness that verifies those
gradients against central differences (used by the test suite and the
``grad-check`` CLI command).

Everything operates on float64 and is pure: no function mutates its
arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Negative slope shared by every activation in the model.
LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Operands do not conform."""


class NonFiniteError(FloatingPointError):
    """A value that must be finite is NaN or infinite."""


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# matrix-vector product


def matvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y = A @ x with y_i = sum_k A_ik x_k."""
    a, x = _as_f64(a), _as_f64(x)
    if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec shapes {a.shape} and {x.shape} do not conform")
    return a @ x


def matvec_backward(a: np.ndarray, x: np.ndarray, grad_out: np.ndarray):
    """Gradients of y = A @ x: dA = g x^T, dx = A^T g."""
    a, x, g = _as_f64(a), _as_f64(x), _as_f64(grad_out)
    if g.shape != (a.shape[0],):
        raise ShapeError(f"upstream gradient shape {g.shape} does not match output ({a.shape[0]},)")
    return np.outer(g, x), a.T @ g


# ---------------------------------------------------------------------------
# activations


def leaky_relu(x: np.ndarray, alpha: float = LEAKY_SLOPE) -> np.ndarray:
    """Elementwise max(x, alpha*x)."""
    x = _as_f64(x)
    return np.where(x >= 0.0, x, alpha * x)


def leaky_relu_grad(x: np.ndarray, alpha: float = LEAKY_SLOPE) -> np.ndarray:
    # The derivative at exactly 0 is defined as 1 (measure-zero choice).
    x = _as_f64(x)
    return np.where(x >= 0.0, 1.0, alpha)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, alpha: float = LEAKY_SLOPE) -> np.ndarray:
    return _as_f64(grad_out) * leaky_relu_grad(x, alpha)


def sigmoid(x):
    """1/(1+exp(-x)), stable for large |x|."""
    x = _as_f64(x)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid_backward(x, grad_out):
    s = sigmoid(x)
    return _as_f64(grad_out) * s * (1.0 - s)


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow; used by the BPR loss."""
    return -np.logaddexp(0.0, -_as_f64(x))


# ---------------------------------------------------------------------------
# layer normalization (over the last axis)


def layer_normalize(x: np.ndarray, scale, shift, eps: float) -> np.ndarray:
    """scale * (x - mean)/sqrt(var + eps) + shift along the last axis.

    ``scale`` and ``shift`` broadcast against x's last axis; variance is
    the population variance, so a constant vector maps to ``shift``.
    """
    if eps <= 0.0:
        raise ShapeError("layer_normalize requires eps > 0")
    x = _as_f64(x)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return _as_f64(scale) * xhat + _as_f64(shift)


def layer_normalize_backward(x: np.ndarray, scale, eps: float, grad_out: np.ndarray):
    """Returns (dx, dscale, dshift); dscale/dshift are summed over leading axes."""
    x, g = _as_f64(x), _as_f64(grad_out)
    if g.shape != x.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match {x.shape}")
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    lead = tuple(range(x.ndim - 1))
    dshift = g.sum(axis=lead)
    dscale = (g * xhat).sum(axis=lead)
    dxhat = g * _as_f64(scale)
    # d/dx of (x-mu)*inv with mu, var both functions of x.
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d
    )
    return dx, dscale, dshift


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators; shapes mirror the parameters."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, shape, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0, beta1, beta2, eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One Adam update. Pure: returns (new_params, new_state)."""
    params, grads = _as_f64(params), _as_f64(grads)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError("adam_step: parameter/gradient/state shapes disagree")
    if lr < 0.0:
        raise ShapeError("adam_step requires lr >= 0")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads.ravel()))[0])
        raise NonFiniteError(f"non-finite gradient at flat coordinate {bad}")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = m / (1.0 - state.beta1 ** t)
    vhat = v / (1.0 - state.beta2 ** t)
    new_params = params - lr * mhat / (np.sqrt(vhat) + state.eps)
    return new_params, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    worst_coord: int
    num_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def finite_diff_check(f, params: np.ndarray, grad: np.ndarray, h: float = 1e-5,
                      tol: float = 1e-4, denom_floor: float = 1e-5) -> FiniteDiffReport:
    """Compare an analytical gradient against central differences of f.

    ``f`` receives an array shaped like ``params`` and returns a scalar.
    Relative error per coordinate is |a - n| / max(|a|, |n|, denom_floor),
    so a gradient that is wrong by 2x reports an error near 0.5 and
    zero-gradient coordinates do not divide by zero. The floor sits well
    above the f64 rounding noise of the difference quotient (~1e-10 for
    h=1e-5) while staying far below any gradient that matters.
    """
    params = _as_f64(params)
    grad = _as_f64(grad)
    if grad.shape != params.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match params {params.shape}")
    work = params.copy()
    flat = work.ravel()
    gflat = grad.ravel()
    max_err = 0.0
    worst = -1
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(work))
        flat[i] = orig - h
        fm = float(f(work))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation while perturbing coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        denom = max(abs(gflat[i]), abs(numeric), denom_floor)
        err = abs(gflat[i] - numeric) / denom
        if err > max_err:
            max_err, worst = err, i
    return FiniteDiffReport(max_err, worst, flat.size, tol)
