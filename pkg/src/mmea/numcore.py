"""Dense float64 matrix helpers, trainable parameters and gradient checking.

Matrices are plain ``numpy.ndarray`` objects. Gradients throughout the package
are derived by hand per operation; :func:`grad_check` is the tool used to keep
them honest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces or receives NaN/Inf."""


def as_matrix(x, name="matrix"):
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def check_finite(x, name="matrix"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return x


def matmul(a, b):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def row_l2_normalize(x):
    """Scale every nonzero row to unit Euclidean norm; zero rows stay zero."""
    x = as_matrix(x)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe


def row_l2_normalize_backward(x, y, dy):
    """Vector-Jacobian product of :func:`row_l2_normalize` at ``x``.

    ``y`` is the forward output. Zero rows get zero gradient.
    """
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    dx = (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / safe
    dx[norms[:, 0] == 0] = 0.0
    return dx


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    name: str = ""

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ValueError("grad shape must match value shape")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


@dataclass
class GradCheckReport:
    max_rel_error: dict
    flagged: list
    n_checked: int
    tolerance: float

    @property
    def passed(self):
        return not self.flagged

    def __str__(self):
        lines = [f"grad_check: {self.n_checked} entries, tol={self.tolerance:g}"]
        for name, err in self.max_rel_error.items():
            lines.append(f"  {name}: max rel err {err:.3e}")
        if self.flagged:
            lines.append(f"  flagged {len(self.flagged)} entries, first: {self.flagged[0]}")
        return "\n".join(lines)


def grad_check(loss_evaluator, params, epsilon=1e-5, tolerance=1e-4,
               max_entries_per_param=None, rng=None, abs_floor=1e-8):
    """Compare analytic gradients with central finite differences.

    ``loss_evaluator()`` must return the scalar loss at the current parameter
    values and leave the analytic gradient in each ``Param.grad``. Relative
    error per entry is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for p in params:
        p.zero_grad()
    base = loss_evaluator()
    if not np.isfinite(base):
        raise NonFiniteError("loss is non-finite at the base point")
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(0) if rng is None else rng

    max_err = {}
    flagged = []
    n_checked = 0
    for k, (p, g) in enumerate(zip(params, analytic)):
        name = p.name or f"param{k}"
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            idx = rng.choice(flat.size, size=max_entries_per_param, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = loss_evaluator()
            flat[i] = orig - epsilon
            f_minus = loss_evaluator()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"non-finite loss while probing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = g.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, err)
            if err > tolerance:
                flagged.append((name, int(i), float(a), float(numeric)))
            n_checked += 1
        max_err[name] = worst
    # leave the analytic gradient in place for the caller
    for p, g in zip(params, analytic):
        p.grad = g
    return GradCheckReport(max_err, flagged, n_checked, tolerance)
