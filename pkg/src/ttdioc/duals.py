"""Forward-mode automatic differentiation with vector-valued seeds.

A ``Dual`` carries a numpy value of shape ``S`` together with a derivative
array of shape ``S + (n_seed,)``; one evaluation with identity seeds yields
the full gradient of a scalar result. The seed dimension is fixed within an
evaluation, and arithmetic propagates derivatives by the chain rule exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class EvaluationError(RuntimeError):
    """An objective evaluation produced a non-finite value."""


class Dual:
    __slots__ = ("val", "dot")

    # defer mixed array expressions to our operators instead of numpy's
    __array_ufunc__ = None

    def __init__(self, val, dot):
        self.val = val if isinstance(val, np.ndarray) else np.asarray(val, dtype=float)
        self.dot = dot if isinstance(dot, np.ndarray) else np.asarray(dot, dtype=float)

    @classmethod
    def seed(cls, x) -> "Dual":
        """Promote a vector to a Dual with identity seeds (one per entry)."""
        x = np.asarray(x, dtype=float)
        n = x.size
        return cls(x, np.eye(n).reshape(x.shape + (n,)))

    @classmethod
    def constant(cls, x, n_seed: int) -> "Dual":
        x = np.asarray(x, dtype=float)
        return cls(x, np.zeros(x.shape + (n_seed,)))

    @property
    def n_seed(self) -> int:
        return self.dot.shape[-1]

    @property
    def shape(self):
        return self.val.shape

    def __len__(self):
        return len(self.val)

    def __getitem__(self, key) -> "Dual":
        return Dual(self.val[key], self.dot[key])

    def __neg__(self) -> "Dual":
        return Dual(-self.val, -self.dot)

    def __add__(self, other) -> "Dual":
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.dot + other.dot)
        return Dual(self.val + other, self.dot)

    __radd__ = __add__

    def __sub__(self, other) -> "Dual":
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.dot - other.dot)
        return Dual(self.val - other, self.dot)

    def __rsub__(self, other) -> "Dual":
        return Dual(other - self.val, -self.dot)

    def __mul__(self, other) -> "Dual":
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                self.dot * other.val[..., None]
                + other.dot * self.val[..., None],
            )
        if isinstance(other, np.ndarray):
            return Dual(self.val * other, self.dot * other[..., None])
        return Dual(self.val * other, self.dot * other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Dual":
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            val = self.val * inv
            dot = (self.dot - other.dot * val[..., None]) * inv[..., None]
            return Dual(val, dot)
        if isinstance(other, np.ndarray):
            return Dual(self.val / other, self.dot / other[..., None])
        return Dual(self.val / other, self.dot / other)

    def __rtruediv__(self, other) -> "Dual":
        inv = 1.0 / self.val
        val = other * inv
        return Dual(val, -self.dot * (val * inv)[..., None])

    def __pow__(self, k) -> "Dual":
        if not isinstance(k, (int, float)):
            raise TypeError("only scalar exponents are supported")
        val = self.val**k
        return Dual(val, self.dot * (k * self.val ** (k - 1))[..., None])

    def sin(self) -> "Dual":
        return Dual(np.sin(self.val), self.dot * np.cos(self.val)[..., None])

    def cos(self) -> "Dual":
        return Dual(np.cos(self.val), self.dot * (-np.sin(self.val))[..., None])

    def exp(self) -> "Dual":
        val = np.exp(self.val)
        return Dual(val, self.dot * val[..., None])

    def sqrt(self) -> "Dual":
        val = np.sqrt(self.val)
        return Dual(val, self.dot * (0.5 / val)[..., None])

    def sum(self) -> "Dual":
        return Dual(self.val.sum(), self.dot.reshape(-1, self.n_seed).sum(axis=0))

    def __repr__(self):
        return f"Dual(val={self.val!r})"


def sin(x):
    return x.sin() if isinstance(x, Dual) else np.sin(x)


def cos(x):
    return x.cos() if isinstance(x, Dual) else np.cos(x)


def exp(x):
    return x.exp() if isinstance(x, Dual) else np.exp(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, Dual) else np.sqrt(x)


def matvec(mat: np.ndarray, x):
    """mat @ x for a plain vector or a Dual vector."""
    if isinstance(x, Dual):
        return Dual(mat @ x.val, mat @ x.dot)
    return mat @ x


def stack(items):
    """Stack scalars-or-Duals into a vector, promoting constants as needed."""
    duals = [it for it in items if isinstance(it, Dual)]
    if not duals:
        return np.array(items, dtype=float)
    n_seed = duals[0].n_seed
    vals, dots = [], []
    for it in items:
        if isinstance(it, Dual):
            vals.append(it.val)
            dots.append(it.dot)
        else:
            vals.append(np.asarray(it, dtype=float))
            dots.append(np.zeros(np.shape(it) + (n_seed,)))
    return Dual(np.stack(vals), np.stack(dots))


def concat(items):
    duals = [it for it in items if isinstance(it, Dual)]
    if not duals:
        return np.concatenate([np.atleast_1d(it) for it in items])
    n_seed = duals[0].n_seed
    vals, dots = [], []
    for it in items:
        if isinstance(it, Dual):
            v = np.atleast_1d(it.val)
            d = it.dot.reshape(v.shape + (n_seed,))
        else:
            v = np.atleast_1d(np.asarray(it, dtype=float))
            d = np.zeros(v.shape + (n_seed,))
        vals.append(v)
        dots.append(d)
    return Dual(np.concatenate(vals), np.concatenate(dots, axis=0))


def dot(a, b):
    """Inner product; either side may be a Dual vector."""
    if isinstance(a, Dual):
        if isinstance(b, Dual):
            return (a * b).sum()
        return Dual(b @ a.val, b @ a.dot)
    if isinstance(b, Dual):
        return Dual(a @ b.val, a @ b.dot)
    return float(np.dot(a, b))


def value(x):
    return x.val if isinstance(x, Dual) else x


@dataclass(frozen=True)
class BoxedFunction:
    """A differentiable scalar function of a fixed-dimension vector.

    ``evaluator`` maps an input vector to ``(value, gradient)`` with the
    gradient of matching dimension.
    """

    dimension: int
    evaluator: Callable[[np.ndarray], tuple]

    def __call__(self, x: np.ndarray) -> tuple:
        f, g = self.evaluator(np.asarray(x, dtype=float))
        return float(f), np.asarray(g, dtype=float)


def boxed(dimension: int, fn: Callable) -> BoxedFunction:
    """Wrap a Dual-valued scalar function into a BoxedFunction via AD."""

    def evaluator(x):
        out = fn(Dual.seed(x))
        v = float(out.val)
        if not np.isfinite(v):
            raise EvaluationError(f"non-finite objective value {v!r}")
        return v, np.array(out.dot, dtype=float)

    return BoxedFunction(dimension, evaluator)


def grad_check(f: BoxedFunction, x, h: float) -> float:
    """Max relative error between the AD gradient and central differences.

    The relative error per coordinate uses a unit floor in the denominator so
    near-zero gradients compare absolutely.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    _, g = f(x)
    worst = 0.0
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fp, _ = f(x + e)
        fm, _ = f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError("non-finite value in finite-difference stencil")
        fd = (fp - fm) / (2.0 * h)
        err = abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1.0)
        worst = max(worst, err)
    return worst
