"""Dense kernels and the reverse-mode pieces the velocity network is built from.

Matrices are plain 2-D numpy arrays laid out one event per row. Parameters
and activations are stored in float32; anything that reduces over the
batch axis (weight gradients, bias gradients, losses) accumulates in
float64 before being cast back to the storage dtype. Passing float64
arrays runs the same code in full double precision, which is what the
finite-difference gradient checks use.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

ACCUM = np.float64


def _check_2d(name: str, a: np.ndarray) -> None:
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with every dot product accumulated in float64.

    The result is cast back to the promoted dtype of the inputs.
    """
    _check_2d("a", a)
    _check_2d("b", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out_dtype = np.result_type(a, b)
    out = a.astype(ACCUM, copy=False) @ b.astype(ACCUM, copy=False)
    return out.astype(out_dtype, copy=False)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) overflows to inf for very negative x; 1/inf == 0 is the right limit
    with np.errstate(over="ignore", under="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray, sig: np.ndarray | None = None) -> np.ndarray:
    """d/dx [x * sigmoid(x)] = sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    if sig is None:
        sig = sigmoid(x)
    return sig * (1.0 + x * (1.0 - sig))


def linear_forward(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``x @ w.T + b`` with ``w`` shaped (out, in), as in most DL frameworks."""
    _check_2d("x", x)
    _check_2d("w", w)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} does not match weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match weight {w.shape}")
    return x @ w.T + b


def linear_backward(
    w: np.ndarray, x: np.ndarray, grad_out: np.ndarray, need_input_grad: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of ``x @ w.T + b`` given dL/d(out).

    Returns ``(grad_x, grad_w, grad_b)``; the weight and bias gradients
    reduce over the batch and are accumulated in float64.
    """
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} inconsistent with x {x.shape}, w {w.shape}")
    grad_w = matmul(grad_out.T, x).astype(w.dtype, copy=False)
    grad_b = grad_out.sum(axis=0, dtype=ACCUM).astype(w.dtype, copy=False)
    grad_x = grad_out @ w if need_input_grad else None
    return grad_x, grad_w, grad_b


def silu_backward(pre: np.ndarray, sig: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * silu_grad(pre, sig)


def mse_rows(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of the squared L2 row norm, plus its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = pred.shape[0]
    loss = float(np.square(diff, dtype=ACCUM).sum() / n)
    grad = (2.0 / n) * diff
    return loss, grad.astype(pred.dtype, copy=False)


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """A gradient buffer shape-matched to ``params``."""
    return {k: np.zeros_like(v) for k, v in params.items()}


def all_finite(arrays) -> bool:
    """True when every array (a sequence or the values of a dict) is free of inf/nan."""
    if isinstance(arrays, dict):
        arrays = arrays.values()
    return all(np.isfinite(a).all() for a in arrays)
