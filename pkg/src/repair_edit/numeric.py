"""Dense float64 helpers, explicit backward rules and a finite-difference checker.

Every matrix in the package is a plain ``numpy.ndarray`` of dtype float64.
There is no general tape: each loss in the package ships its own backward
rule, and :func:`grad_check` is the independent route used to verify them.
"""
from __future__ import annotations

from typing import Callable, Tuple

import numpy as np

FD_STEP = 1e-4


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def ensure_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(x)))[0]
        raise NonFiniteError(f"non-finite {what} at index {tuple(int(i) for i in bad)}")
    return x


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * (a @ b))`` with respect to ``a`` and ``b``."""
    return grad_out @ b.T, a.T @ grad_out


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ShapeError("l2_norm needs at least one entry")
    sq = float(np.dot(v, v))
    if np.isfinite(sq) and sq > 1e-280:
        return float(np.sqrt(sq))
    # rescale when the squares overflow or underflow
    m = np.max(np.abs(v))
    if m == 0.0:
        return 0.0
    return float(m * np.sqrt(np.sum((v / m) ** 2)))


def normalize(v, eps: float = 0.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = l2_norm(v)
    if n <= eps:
        raise ZeroDivisionError("cannot normalize a zero-norm vector")
    return v / n


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation: smooth everywhere, which the gradient checks need
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du


def numerical_grad(f: Callable[[np.ndarray], float], params: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function, entry by entry."""
    x = np.array(params, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = f(x)
        flat[idx] = orig - step
        fm = f(x)
        flat[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            where = np.unravel_index(idx, x.shape)
            raise NonFiniteError(f"loss is non-finite at perturbed index {tuple(int(i) for i in where)}")
        gflat[idx] = (fp - fm) / (2.0 * step)
    return grad


def grad_check(loss_fn: Callable[[np.ndarray], Tuple[float, np.ndarray]], params, step: float = FD_STEP) -> float:
    """Max absolute gap between an analytic gradient and central differences.

    ``loss_fn(params)`` must return ``(loss, grad)`` with ``grad`` shaped like
    ``params``.
    """
    params = np.array(params, dtype=np.float64, copy=True)
    _, analytic = loss_fn(params.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != params.shape:
        raise ShapeError(f"gradient shape {analytic.shape} does not match params {params.shape}")
    numeric = numerical_grad(lambda p: float(loss_fn(p)[0]), params, step)
    return float(np.max(np.abs(analytic - numeric)))
