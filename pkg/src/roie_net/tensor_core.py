"""Reverse-mode autodiff over dense NCHW arrays.

Each operation computes its forward result with numpy and records a
closure that pushes gradients back to its inputs. `backward` replays the
recorded graph in reverse topological order, starting from a scalar loss.

Operations are pure functions of their inputs (batch_norm's train-mode
running-stat update is the one documented exception), and a recorded graph
belongs to one logical thread; distinct forward passes on disjoint graphs
are independent. Single precision is the training default; the finite-
difference checking utilities expect graphs built in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

DEFAULT_DTYPE = np.float32

# Score maps are clamped to [BCE_EPS, 1 - BCE_EPS] before the logarithm so
# saturated sigmoid outputs cannot produce -inf.
BCE_EPS = 1e-7


class Tensor:
    """A dense array node in a recorded computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter:
    """A named, trainable tensor. Names form unique paths within a model."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data, dtype=None):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True, dtype=dtype)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = value

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    # Never mutate an existing grad buffer in place: closures may hand the
    # same array to several parents.
    t.grad = g if t.grad is None else t.grad + g


def _require_4d(t: Tensor, op: str) -> tuple:
    if t.data.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D NCHW tensor, got shape {t.data.shape}")
    return t.data.shape


# ---------------------------------------------------------------------------
# convolutions


def conv2d_depthwise(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel 3x3 cross-correlation, stride 1, zero padding 1.

    Spatial size is preserved; each output channel sees only its own input
    channel.
    """
    n, c, h, w = _require_4d(x, "conv2d_depthwise")
    if weight.data.shape != (c, 1, 3, 3):
        raise ShapeError(
            f"conv2d_depthwise: weight shape {weight.data.shape} does not match "
            f"(C, 1, 3, 3) with C={c}"
        )
    if bias is not None and bias.data.shape != (c,):
        raise ShapeError(f"conv2d_depthwise: bias shape {bias.data.shape} != ({c},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wd = weight.data
    out = np.zeros((n, c, h, w), dtype=x.data.dtype)
    for di in range(3):
        for dj in range(3):
            out += xp[:, :, di : di + h, dj : dj + w] * wd[:, 0, di, dj].reshape(1, c, 1, 1)
    if bias is not None:
        out = out + bias.data.reshape(1, c, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    dxp[:, :, di : di + h, dj : dj + w] += g * wd[:, 0, di, dj].reshape(1, c, 1, 1)
            _accum(x, dxp[:, :, 1 : 1 + h, 1 : 1 + w])
        if weight.requires_grad:
            dw = np.empty_like(wd)
            for di in range(3):
                for dj in range(3):
                    dw[:, 0, di, dj] = np.einsum(
                        "nchw,nchw->c", xp[:, :, di : di + h, dj : dj + w], g
                    )
            _accum(weight, dw)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    return _result(out, parents, backward_fn)


def conv2d_pointwise(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution: a per-pixel affine map across channels."""
    n, c_in, h, w = _require_4d(x, "conv2d_pointwise")
    if weight.data.ndim != 4 or weight.data.shape[1:] != (c_in, 1, 1):
        raise ShapeError(
            f"conv2d_pointwise: weight shape {weight.data.shape} does not match "
            f"(Cout, {c_in}, 1, 1)"
        )
    c_out = weight.data.shape[0]
    if bias is not None and bias.data.shape != (c_out,):
        raise ShapeError(f"conv2d_pointwise: bias shape {bias.data.shape} != ({c_out},)")

    w2 = weight.data.reshape(c_out, c_in)
    xr = x.data.transpose(0, 2, 3, 1).reshape(-1, c_in)
    outr = xr @ w2.T
    if bias is not None:
        outr = outr + bias.data
    out = outr.reshape(n, h, w, c_out).transpose(0, 3, 1, 2)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g: np.ndarray) -> None:
        gr = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        if x.requires_grad:
            _accum(x, (gr @ w2).reshape(n, h, w, c_in).transpose(0, 3, 1, 2))
        if weight.requires_grad:
            _accum(weight, (gr.T @ xr).reshape(c_out, c_in, 1, 1))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    return _result(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# normalization and activations


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.1,
    epsilon: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and updates the running
    buffers in place; eval mode normalizes with the running buffers. The
    population (biased) variance is used for both normalization and the
    running update.
    """
    n, c, h, w = _require_4d(x, "batch_norm")
    for name, arr in (("gamma", gamma.data), ("beta", beta.data)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm: {name} shape {arr.shape} != ({c},)")
    for name, arr in (("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm: {name} shape {arr.shape} != ({c},)")
    if epsilon <= 0:
        raise ConfigError(f"batch_norm: epsilon must be positive, got {epsilon}")
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"batch_norm: momentum must be in [0, 1], got {momentum}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")

    dt = x.data.dtype
    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(dt)
        var = running_var.astype(dt)

    inv = 1.0 / np.sqrt(var + dt.type(epsilon))
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward_fn(g: np.ndarray) -> None:
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gi = gamma.data.reshape(1, c, 1, 1) * inv.reshape(1, c, 1, 1)
            if mode == "train":
                m = n * h * w
                sum_g = g.sum(axis=(0, 2, 3), keepdims=True)
                sum_gx = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
                _accum(x, gi / m * (m * g - sum_g - xhat * sum_gx))
            else:
                _accum(x, gi * g)

    return _result(out, (x, gamma, beta), backward_fn)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x). The subgradient at 0 is taken as 0."""
    out = np.maximum(x.data, 0)

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g * (x.data > 0))

    return _result(out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function; output strictly inside (0, 1)."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    # Keep the open-interval guarantee even where rounding would hit 0 or 1.
    fi = np.finfo(d.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g * out * (1.0 - out))

    return _result(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# pooling and resampling


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over disjoint windows.

    Backward routes the gradient to the window argmax; ties go to the first
    element in row-major window order.
    """
    n, c, h, w = _require_4d(x, "max_pool2")
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: spatial dims must be even, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray) -> None:
        dwin = np.zeros_like(windows)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        _accum(x, dwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))

    return _result(out, (x,), backward_fn)


@lru_cache(maxsize=64)
def _upsample_coeffs(size: int, dtype_name: str):
    """Source indices/weights for scale-2 bilinear sampling, half-pixel centers.

    Output index o samples input coordinate (o + 0.5) / 2 - 0.5, clamped to
    the valid range. Also returns the dense interpolation matrix used by the
    backward pass.
    """
    dt = np.dtype(dtype_name)
    src = (np.arange(2 * size, dtype=np.float64) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0.0, size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    wgt = (src - i0).astype(dt)
    mat = np.zeros((2 * size, size), dtype=dt)
    rows = np.arange(2 * size)
    np.add.at(mat, (rows, i0), 1.0 - wgt)
    np.add.at(mat, (rows, i1), wgt)
    return i0, i1, wgt, mat


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Bilinear upsampling by a factor of 2 with half-pixel sample centers.

    The lerp form `a + w*(b - a)` preserves constant inputs exactly.
    """
    n, c, h, w = _require_4d(x, "upsample_bilinear2")
    dt_name = x.data.dtype.name
    i0, i1, wi, mat_h = _upsample_coeffs(h, dt_name)
    j0, j1, wj, mat_w = _upsample_coeffs(w, dt_name)

    top = x.data[:, :, i0, :]
    rows = top + wi.reshape(1, 1, -1, 1) * (x.data[:, :, i1, :] - top)
    left = rows[:, :, :, j0]
    out = left + wj.reshape(1, 1, 1, -1) * (rows[:, :, :, j1] - left)

    def backward_fn(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        gr = g.reshape(n * c, 2 * h, 2 * w)
        drows = gr @ mat_w
        _accum(x, (mat_h.T @ drows).reshape(n, c, h, w))

    return _result(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# shape plumbing


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving input order."""
    if len(inputs) == 0:
        raise ConfigError("concat_channels: empty input list")
    shapes = [_require_4d(t, "concat_channels") for t in inputs]
    n, _, h, w = shapes[0]
    for s in shapes[1:]:
        if (s[0], s[2], s[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: incompatible shapes {shapes}")
    out = np.concatenate([t.data for t in inputs], axis=1)
    offsets = np.cumsum([0] + [s[1] for s in shapes])

    def backward_fn(g: np.ndarray) -> None:
        for t, lo, hi in zip(inputs, offsets[:-1], offsets[1:]):
            _accum(t, g[:, lo:hi])

    return _result(out, tuple(inputs), backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """View the same elements under a new shape; gradient reshapes back."""
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.data.shape} as {shape}")
    out = x.data.reshape(shape)

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, g.reshape(x.data.shape))

    return _result(out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, shape (N, C, 1, 1)."""
    n, c, h, w = _require_4d(x, "global_avg_pool")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g / (h * w), x.data.shape).copy())

    return _result(out, (x,), backward_fn)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map per batch row: (N, C) @ (K, C)^T + bias."""
    if x.data.ndim != 2:
        raise ShapeError(f"dense: expected 2-D input, got shape {x.data.shape}")
    if weight.data.ndim != 2 or weight.data.shape[1] != x.data.shape[1]:
        raise ShapeError(
            f"dense: weight shape {weight.data.shape} does not match input C={x.data.shape[1]}"
        )
    k = weight.data.shape[0]
    if bias is not None and bias.data.shape != (k,):
        raise ShapeError(f"dense: bias shape {bias.data.shape} != ({k},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            _accum(x, g @ weight.data)
        if weight.requires_grad:
            _accum(weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    return _result(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# elementwise algebra


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    sa, sb = a.data.shape, b.data.shape
    if len(sa) == len(sb) == 4 and sa[0] == sb[0]:
        # Allowed: size-1 channel or spatial axes broadcasting against full
        # axes (score maps over channels, attention scales over space).
        if all(da == db or da == 1 or db == 1 for da, db in zip(sa[1:], sb[1:])):
            return
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def ew_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; size-1 axes broadcast, backward sums them back."""
    _check_broadcast(a, b, "ew_mul")
    out = a.data * b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(out, (a, b), backward_fn)


def ew_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with the same broadcast rule as ew_mul."""
    _check_broadcast(a, b, "ew_add")
    out = a.data + b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _result(out, (a, b), backward_fn)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    sv = a.data.dtype.type(s)
    out = a.data * sv

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g * sv)

    return _result(out, (a,), backward_fn)


def reduce_mean(x: Tensor) -> Tensor:
    """Mean over all elements, as a 0-d tensor. Scalarization plumbing for
    losses and gradient checks."""
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    size = x.data.size

    def backward_fn(g: np.ndarray) -> None:
        _accum(x, np.full(x.data.shape, g / size, dtype=x.data.dtype))

    return _result(out, (x,), backward_fn)


def bce_loss(x: Tensor, y: Tensor) -> Tensor:
    """Mean binary cross-entropy between a score map and a {0,1} mask.

    x is clamped to [BCE_EPS, 1 - BCE_EPS] before the logarithm; pixels in
    the clamped region get zero gradient, consistent with that clamp.
    """
    if x.data.shape != y.data.shape:
        raise ShapeError(f"bce_loss: shape mismatch {x.data.shape} vs {y.data.shape}")
    dt = x.data.dtype
    lo = dt.type(BCE_EPS)
    hi = dt.type(1.0 - BCE_EPS)
    xc = np.clip(x.data, lo, hi)
    yd = y.data
    n = x.data.size
    out = np.asarray(-(yd * np.log(xc) + (1.0 - yd) * np.log1p(-xc)).mean(), dtype=dt)

    def backward_fn(g: np.ndarray) -> None:
        if x.requires_grad:
            inside = (x.data > lo) & (x.data < hi)
            dx = np.where(inside, (-(yd / xc) + (1.0 - yd) / (1.0 - xc)) / n, dt.type(0))
            _accum(x, g * dx)
        if y.requires_grad:
            _accum(y, g * (-(np.log(xc) - np.log1p(-xc)) / n))

    return _result(out, (x, y), backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: Tensor) -> list:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[Sequence[Parameter]] = None) -> None:
    """Populate gradients of everything reachable from a scalar loss.

    Grads recorded by any previous backward pass over the same tensors are
    discarded first, so replaying on a fresh forward pass is deterministic.
    When `params` is given, parameters the loss does not depend on receive
    zero gradients instead of None.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not require grad; no parameters reachable")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is not None:
        for p in params:
            if p.tensor.grad is None:
                p.tensor.grad = np.zeros_like(p.tensor.data)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(e.passed for e in self.entries)

    def worst(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def __str__(self) -> str:
        lines = [
            f"  {'ok ' if e.passed else 'BAD'} {e.name}: max rel err {e.max_rel_error:.3e}"
            for e in self.entries
        ]
        status = "PASS" if self.ok else "FAIL"
        return f"grad check ({status}, tol {self.tolerance:g})\n" + "\n".join(lines)


def max_relative_error(
    analytic: np.ndarray, numerical: np.ndarray, floor: float = 1e-7
) -> float:
    """Max over elements of |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numerical)), floor)
    return float(np.max(np.abs(analytic - numerical) / denom)) if analytic.size else 0.0


def numerical_gradients(
    build: Callable[[], Tensor], params: Sequence[Parameter], step: float = 1e-5
) -> dict:
    """Central finite differences of the scalar build() output per parameter
    element. build() must rerun the forward pass from current parameter
    values each call."""
    grads = {}
    for p in params:
        flat = p.tensor.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(build().data)
            flat[i] = orig - step
            f_minus = float(build().data)
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * step)
        grads[p.name] = g.reshape(p.tensor.data.shape)
    return grads


def grad_check(
    build: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Reports per-parameter max relative error; never raises on failure.
    Intended for graphs small enough to difference (<= ~1e4 parameters),
    built in double precision.
    """
    loss = build()
    backward(loss, params)
    analytic = {p.name: p.tensor.grad.copy() for p in params}
    numeric = numerical_gradients(build, params, step)
    report = GradCheckReport(tolerance=tolerance)
    for p in params:
        err = max_relative_error(analytic[p.name], numeric[p.name], floor)
        report.entries.append(GradCheckEntry(p.name, err, err <= tolerance))
    return report


__all__ = [
    "BCE_EPS",
    "DEFAULT_DTYPE",
    "GradCheckEntry",
    "GradCheckReport",
    "Parameter",
    "Tensor",
    "backward",
    "batch_norm",
    "bce_loss",
    "concat_channels",
    "conv2d_depthwise",
    "conv2d_pointwise",
    "dense",
    "ew_add",
    "ew_mul",
    "global_avg_pool",
    "grad_check",
    "max_pool2",
    "max_relative_error",
    "numerical_gradients",
    "reduce_mean",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "upsample_bilinear2",
]
