"""Minimal reverse-mode autodiff over float64 numpy arrays.

Tensors may carry leading batch axes; every op works on the trailing axes and
requires batch axes to match exactly. The only implicit expansion is adding a
bias-like operand over the leading axes, and scalar multiplication.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

_SEQ = itertools.count()
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# every differentiable op; each has a hand-written backward rule below
OPS = ("add", "sub", "mul", "mul_scalar", "sum", "mean", "reshape", "swapaxes", "concat_last_axis",
       "mean_pool_rows", "gate_heads", "matmul", "linear", "sigmoid", "gelu", "softmax_rows",
       "layer_norm")


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericalError(ArithmeticError):
    """A forward op produced NaN or Inf."""

    def __init__(self, op: str, message: str | None = None):
        self.op = op
        super().__init__(message or f"{op}: non-finite value in forward output")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar for the handful of ops where it reads naturally
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._seq = next(_SEQ)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may instead match the trailing axes of ``a`` (bias add)."""
    if a.shape == b.shape:
        return _result("add", a.data + b.data, (a, b), lambda g: (g, g))
    if 1 <= b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        bshape = b.shape
        return _result("add", a.data + b.data, (a, b),
                       lambda g: (g, g.reshape((-1,) + bshape).sum(axis=0)))
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("mul_scalar", x.data * c, (x,), lambda g: (g * c,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _result("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return _result("reshape", data, (x,), lambda g: (g.reshape(src),))


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    return _result("swapaxes", np.swapaxes(x.data, axis1, axis2), (x,),
                   lambda g: (np.swapaxes(g, axis1, axis2),))


def concat_last_axis(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_last_axis: no inputs")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_last_axis: leading shapes differ {lead} vs {t.shape[:-1]}")
    widths = [t.shape[-1] for t in tensors]
    cuts = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _result("concat_last_axis", np.concatenate([t.data for t in tensors], axis=-1),
                   tuple(tensors), backward)


def mean_pool_rows(x: Tensor) -> Tensor:
    """Mean over the token axis: ``[..., n, d] -> [..., d]``."""
    if x.ndim < 2:
        raise ShapeError(f"mean_pool_rows: need at least 2 axes, got {x.shape}")
    n = x.shape[-2]
    return _result("mean_pool_rows", x.data.mean(axis=-2), (x,),
                   lambda g: (np.repeat(g[..., None, :] / n, n, axis=-2),))


def gate_heads(x: Tensor, h: Tensor) -> Tensor:
    """Scale each head block: ``x[..., H, n, d] * h[..., H]``."""
    if x.ndim < 3 or h.shape != x.shape[:-2]:
        raise ShapeError(f"gate_heads: gates {h.shape} do not match heads of {x.shape}")
    xd, hd = x.data, h.data
    return _result("gate_heads", xd * hd[..., None, None], (x, h),
                   lambda g: (g * hd[..., None, None], (g * xd).sum(axis=(-1, -2))))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a shared 2-D matrix or has exactly the batch axes of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _result("matmul", out, (a, b), backward)
    if a.shape[:-2] == b.shape[:-2]:
        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    else:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _result("matmul", ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: ``x @ weight + bias`` with ``weight[k, n]``."""
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    k, n = wd.shape
    x2 = xd.reshape(-1, k)
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(xd.shape[:-1] + (n,))

    def backward(g):
        g2 = g.reshape(-1, n)
        grads = ((g2 @ wd.T).reshape(xd.shape), x2.T @ g2)
        return grads + ((g2.sum(axis=0),) if bias is not None else ())

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result("linear", out, parents, backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
    return _result("gelu", xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _result("softmax_rows", s, (x,),
                   lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).reshape(-1, d).sum(axis=0), g.reshape(-1, d).sum(axis=0)

    return _result("layer_norm", xhat * gd + bias.data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Ops reachable from an output, in execution order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> Tape:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf]

    def backward(self, output: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = Tape.record(loss)
    tape.backward(loss)
    return tape


def fd_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
             indices: Sequence[tuple[int, ...]] | None = None) -> float:
    """Compare analytic gradients of scalar ``f`` at ``x`` with central differences.

    Returns ``max |fd - grad| / max(1, |fd|, |grad|)`` over the checked
    coordinates (all of them unless ``indices`` is given).
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"fd_check: step {h} outside [1e-6, 1e-3]")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    backward(f(probe))
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    coords = list(np.ndindex(base.shape)) if indices is None else [tuple(i) for i in indices]
    worst = 0.0
    for idx in coords:
        plus = base.copy()
        plus[idx] += h
        minus = base.copy()
        minus[idx] -= h
        fd = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2.0 * h)
        an = float(analytic[idx])
        worst = max(worst, abs(fd - an) / max(1.0, abs(fd), abs(an)))
    return worst
