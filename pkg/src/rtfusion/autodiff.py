"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine is a classic tape: every operation records its parents and a
closure that maps the output gradient to per-parent gradients. Calling
``backward()`` on a scalar output walks the tape in reverse topological
order and accumulates gradients into every tensor that requires them.

All data lives in 64-bit floats so that central finite differences (see
``grad_check``) are a trustworthy oracle at tolerance 1e-6. Convolution is
cross-correlation (no kernel flip), and out-of-bounds bilinear samples read
zeros, matching the usual deep-learning conventions.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "GradCheckReport",
    "SGD",
    "no_grad",
    "make_op",
    "concat",
    "conv2d",
    "grouped_conv2d",
    "bilinear_sample",
    "global_avg_pool",
    "scale_channels",
    "linear",
    "grad_check",
    "sgd_step",
]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """Dense n-dimensional float64 array with optional gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    # -- basic protocol -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        head = f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}"
        if self.data.size <= 8:
            head += f", data={self.data.tolist()}"
        return head + ")"

    # -- autodiff -------------------------------------------------------

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data

        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return make_op(out_data, (self, other), bwd)

    __radd__ = __add__

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data

        def bwd(g):
            return (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            )

        return make_op(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __sub__(self, other):
        other = _as_tensor(other)
        out_data = self.data - other.data

        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

        return make_op(out_data, (self, other), bwd)

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __truediv__(self, other):
        other = _as_tensor(other)
        out_data = self.data / other.data

        def bwd(g):
            return (
                _unbroadcast(g / other.data, self.shape),
                _unbroadcast(-g * self.data / (other.data * other.data), other.shape),
            )

        return make_op(out_data, (self, other), bwd)

    def __rtruediv__(self, other):
        return _as_tensor(other).__truediv__(self)

    def __neg__(self):
        return make_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        e = float(exponent)
        out_data = self.data ** e

        def bwd(g):
            return (g * e * self.data ** (e - 1.0),)

        return make_op(out_data, (self,), bwd)

    def __getitem__(self, key):
        out_data = self.data[key]

        def bwd(g):
            buf = np.zeros_like(self.data)
            buf[key] += g
            return (buf,)

        return make_op(out_data, (self,), bwd)

    # -- pointwise functions ---------------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0.0

        def bwd(g):
            return (g * mask,)

        return make_op(np.where(mask, self.data, 0.0), (self,), bwd)

    def sigmoid(self) -> "Tensor":
        x = self.data
        s = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def bwd(g):
            return (g * s * (1.0 - s),)

        return make_op(s, (self,), bwd)

    def exp(self) -> "Tensor":
        e = np.exp(self.data)

        def bwd(g):
            return (g * e,)

        return make_op(e, (self,), bwd)

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise ValueError("log requires strictly positive input; clamp first")

        def bwd(g):
            return (g / self.data,)

        return make_op(np.log(self.data), (self,), bwd)

    def sqrt(self) -> "Tensor":
        r = np.sqrt(self.data)

        def bwd(g):
            return (g * 0.5 / r,)

        return make_op(r, (self,), bwd)

    def softplus(self) -> "Tensor":
        x = self.data
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        s = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def bwd(g):
            return (g * s,)

        return make_op(out, (self,), bwd)

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)

        def bwd(g):
            return (g * sign,)

        return make_op(np.abs(self.data), (self,), bwd)

    def clamp(self, lo: float | None = None, hi: float | None = None) -> "Tensor":
        out = np.clip(self.data, lo, hi)
        mask = np.ones_like(self.data)
        if lo is not None:
            mask *= self.data >= lo
        if hi is not None:
            mask *= self.data <= hi

        def bwd(g):
            return (g * mask,)

        return make_op(out, (self,), bwd)

    # -- reductions and reshaping ----------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            shaped = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(shaped, self.shape).copy(),)

        return make_op(out, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = self.data.reshape(shape)

        def bwd(g):
            return (g.reshape(self.shape),)

        return make_op(out, (self,), bwd)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))

        def bwd(g):
            return (np.ascontiguousarray(g.transpose(inverse)),)

        return make_op(np.ascontiguousarray(self.data.transpose(axes)), (self,), bwd)


class Parameter(Tensor):
    """Trainable tensor with a name unique within its model."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def make_op(data: np.ndarray, parents: tuple[Tensor, ...],
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    """Create a tape node; records nothing when no parent needs gradients."""
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for k in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return make_op(out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# Convolution (shared grouped engine, im2col + matmul)
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols


def _conv_engine(x: Tensor, kernel: Tensor, bias: Tensor | None,
                 groups: int, stride: int, padding: int) -> Tensor:
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects a 4-D input and a 4-D kernel")
    b, cin, h, w = x.shape
    cout, cpg, kh, kw = kernel.shape
    if kh != kw:
        raise ValueError("only square kernels are supported")
    k = kh
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if cin % groups != 0 or cout % groups != 0:
        raise ValueError(f"channel counts ({cin} in, {cout} out) not divisible by groups={groups}")
    if cpg != cin // groups:
        raise ValueError(
            f"kernel expects {cpg} channels per group but input provides {cin // groups}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},)")

    og = cout // groups
    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        oh, ow = h, w
        colsg = x.data.reshape(b, groups, cpg, oh * ow)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        oh = (h + 2 * padding - k) // stride + 1
        ow = (w + 2 * padding - k) // stride + 1
        if oh < 1 or ow < 1:
            raise ValueError("kernel does not fit inside the padded input")
        cols = _im2col(xp, k, stride, oh, ow)
        colsg = cols.reshape(b, groups, cpg * k * k, oh * ow)
    wg = kernel.data.reshape(groups, og, cpg * k * k)
    out = np.matmul(wg[None], colsg)  # (b, groups, og, oh*ow)
    out = out.reshape(b, cout, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        gg = g.reshape(b, groups, og, oh * ow)
        dw = np.matmul(gg, colsg.transpose(0, 1, 3, 2)).sum(axis=0)
        dw = dw.reshape(cout, cpg, k, k)
        dcols = np.matmul(wg.transpose(0, 2, 1)[None], gg)
        if pointwise:
            dx = dcols.reshape(b, cin, h, w)
        else:
            dcols = dcols.reshape(b, cin, k, k, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * oh:stride,
                        j:j + stride * ow:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return make_op(out, parents, bwd)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D cross-correlation over [b, c, h, w] maps."""
    return _conv_engine(x, kernel, bias, 1, stride, padding)


def grouped_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                   groups: int = 1, stride: int = 1, padding: int = 0) -> Tensor:
    """Grouped cross-correlation; group i reads its own slice of input channels."""
    return _conv_engine(x, kernel, bias, groups, stride, padding)


# ---------------------------------------------------------------------------
# Bilinear sampling (zero padding outside the map)
# ---------------------------------------------------------------------------

def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample [b, c, h, w] maps at continuous (y, x) pixel locations.

    ``coords`` has shape [b, 2, oh, ow] with channel 0 holding y and channel 1
    holding x. Neighbours outside the map contribute zero; gradients flow to
    both the map values and the coordinates.
    """
    if x.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2:
        raise ValueError("bilinear_sample expects x[b,c,h,w] and coords[b,2,oh,ow]")
    if coords.shape[0] != x.shape[0]:
        raise ValueError("batch size mismatch between input and coords")
    b, c, h, w = x.shape
    oh, ow = coords.shape[2], coords.shape[3]
    p = oh * ow

    ys = coords.data[:, 0].reshape(b, p)
    xs = coords.data[:, 1].reshape(b, p)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0

    xflat = x.data.reshape(b, c, h * w)
    bidx = np.arange(b)[:, None, None]
    cidx = np.arange(c)[None, :, None]

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yc = y0 + dy
        xc = x0 + dx
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        flat = np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)
        vals = xflat[bidx, cidx, flat[:, None, :]] * valid[:, None, :]
        wy = fy if dy == 1 else 1.0 - fy
        wx = fx if dx == 1 else 1.0 - fx
        corners.append((vals, wy * wx * valid, flat))

    out = np.zeros((b, c, p), dtype=np.float64)
    for vals, weight, _ in corners:
        out += vals * weight[:, None, :]
    out = out.reshape(b, c, oh, ow)

    def bwd(g):
        gf = g.reshape(b, c, p)
        # map gradient: fold the four weighted one-hot scatters into one
        # [b, p, h*w] matrix, then contract the sample axis with a matmul
        scatter = np.zeros((b, p, h * w), dtype=np.float64)
        rows = np.broadcast_to(np.arange(p)[None], (b, p))
        bb = np.broadcast_to(np.arange(b)[:, None], (b, p))
        for _, weight, flat in corners:
            np.add.at(scatter, (bb, rows, flat), weight)
        dmap = np.matmul(gf, scatter).reshape(b, c, h, w)

        # coordinate gradient via the interpolation weight derivatives;
        # corner values are already zero outside the map
        v00, v01, v10, v11 = (corner[0] for corner in corners)
        wy0 = (1.0 - fy)[:, None, :]
        wy1 = fy[:, None, :]
        wx0 = (1.0 - fx)[:, None, :]
        wx1 = fx[:, None, :]
        dy = (wx0 * (v10 - v00) + wx1 * (v11 - v01)) * gf
        dxx = (wy0 * (v01 - v00) + wy1 * (v11 - v10)) * gf
        dcoords = np.stack([dy.sum(axis=1), dxx.sum(axis=1)], axis=1)
        return dmap, dcoords.reshape(b, 2, oh, ow)

    return make_op(out, (x, coords), bwd)


# ---------------------------------------------------------------------------
# Pooling / gating helpers
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [b, c, h, w] -> [b, c, 1, 1]."""
    if x.ndim != 4:
        raise ValueError("global_avg_pool expects a 4-D tensor")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bwd(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_op(out, (x,), bwd)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply [b, c, h, w] by per-channel weights [b, c, 1, 1]."""
    if x.ndim != 4 or s.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ValueError("scale_channels expects x[b,c,h,w] and s[b,c,1,1]")
    out = x.data * s.data

    def bwd(g):
        return g * s.data, (g * x.data).sum(axis=(2, 3), keepdims=True)

    return make_op(out, (x, s), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully-connected map: [b, n] @ weight[m, n].T + bias[m]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError("linear expects x[b,n] and weight[m,n]")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError("bias shape must match the output width")
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        dx = g @ weight.data
        dw = g.T @ x.data
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    return make_op(out, parents, bwd)


# ---------------------------------------------------------------------------
# Verification and optimisation
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    failures: list[str] = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max_rel_err={self.max_rel_err:.3e} over {self.n_checked} probes"


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               tol: float = 1e-6, n_probes: int = 10, step: float = 1e-5,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of a scalar computation with central differences.

    Probes ``n_probes`` random coordinates per input. Relative error uses a
    1e-12 absolute floor in the denominator; any non-finite gradient fails.
    """
    rng = rng or np.random.default_rng(0)
    inputs = list(inputs)
    for t in inputs:
        if not t.requires_grad:
            raise ValueError("grad_check inputs must require gradients")
        t.zero_grad()

    out = f(*inputs)
    if out.size != 1:
        raise ValueError("grad_check target must produce a scalar")
    out.backward()

    analytic = []
    for t in inputs:
        if t.grad is None:
            analytic.append(np.zeros_like(t.data))
        else:
            analytic.append(t.grad.copy())

    max_rel = 0.0
    n_checked = 0
    failures: list[str] = []
    for idx, t in enumerate(inputs):
        n = min(n_probes, t.data.size)
        probes = rng.choice(t.data.size, size=n, replace=False)
        for pos in probes:
            coord = np.unravel_index(pos, t.data.shape)
            saved = t.data[coord]
            with no_grad():
                t.data[coord] = saved + step
                f_hi = float(f(*inputs).data)
                t.data[coord] = saved - step
                f_lo = float(f(*inputs).data)
                t.data[coord] = saved
            numeric = (f_hi - f_lo) / (2.0 * step)
            a = float(analytic[idx].reshape(-1)[pos])
            if not (np.isfinite(a) and np.isfinite(numeric)):
                failures.append(f"input {idx} coord {pos}: non-finite gradient "
                                f"(analytic={a}, numeric={numeric})")
                continue
            denom = max(abs(a), abs(numeric), 1e-12)
            rel = abs(a - numeric) / denom
            max_rel = max(max_rel, rel)
            n_checked += 1
            if rel > tol:
                failures.append(f"input {idx} coord {pos}: analytic={a:.9g} "
                                f"numeric={numeric:.9g} rel={rel:.3e}")

    for t in inputs:
        t.zero_grad()
    return GradCheckReport(max_rel, not failures, n_checked, failures)


class SGD:
    """Classic momentum SGD: v <- momentum*v + grad; p <- p - lr*v."""

    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                name = getattr(p, "name", "<unnamed>")
                raise RuntimeError(f"parameter {name} has no gradient; run backward() first")
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             velocities: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """One-shot functional SGD update; returns the velocity buffers."""
    params = list(params)
    if velocities is None:
        velocities = [np.zeros_like(p.data) for p in params]
    for p, v in zip(params, velocities):
        if p.grad is None:
            name = getattr(p, "name", "<unnamed>")
            raise RuntimeError(f"parameter {name} has no gradient; run backward() first")
        v *= momentum
        v += p.grad
        p.data -= lr * v
        p.grad = None
    return velocities
