"""Minimal dense-tensor engine with reverse-mode differentiation.

Only the operations the segmentation network needs are provided: grouped
convolution, transposed convolution, max pooling, ReLU, batch normalization,
channel concatenation and channel softmax, plus the few elementwise and
reduction helpers that the losses are built from.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the upstream gradient back to them. Calling
:func:`backward_pass` on a scalar walks that tape in reverse topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "LayerSpec",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "no_grad",
    "grad_enabled",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "relu",
    "batchnorm2d",
    "channel_concat",
    "softmax_channels",
    "log_softmax_channels",
    "add",
    "batch_slice",
    "layer_forward",
    "backward_pass",
    "finite_difference_check",
    "LAYER_KINDS",
]

LAYER_KINDS = (
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "relu",
    "batchnorm2d",
    "channel_concat",
    "softmax_channels",
)

# Toggled off only by benchmarks that have already validated their inputs.
CHECK_FINITE = True

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _check_finite(*arrays: np.ndarray) -> None:
    if not CHECK_FINITE:
        return
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError("non-finite values in tensor input")


# ----------------------------------------------------------------------------
# im2col helpers
# ----------------------------------------------------------------------------

def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Strided view of shape (B, C, ho, wo, kh, kw) over a padded input."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]


def _cb(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> contiguous (C, B, H, W)."""
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _bc(x: np.ndarray) -> np.ndarray:
    """(C, B, H, W) -> contiguous (B, C, H, W)."""
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _im2col(xc: np.ndarray, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    """Channel-major columns: (C, B, Hp, Wp) -> (C, kh, kw, B, ho, wo)."""
    c, b = xc.shape[:2]
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=xc.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
    return cols


def _col2im(cols: np.ndarray, canvas_shape, sh, sw) -> np.ndarray:
    """Scatter-add (C, kh, kw, B, ho, wo) columns onto a (C, B, Hp, Wp) canvas."""
    _, kh, kw, _, ho, wo = cols.shape
    out = np.zeros(canvas_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += cols[:, i, j]
    return out


def _pad(x: np.ndarray, ph: int, pw: int, value: float = 0.0) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


# ----------------------------------------------------------------------------
# layer ops
# ----------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0,
           groups: int = 1) -> Tensor:
    """Grouped 2-D convolution. ``weight`` has shape (Cout, Cin/groups, kh, kw)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input, got shape {xd.shape}")
    b, cin, h, w = xd.shape
    cout, cg, kh, kw = wd.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"groups={groups} must divide in_channels={cin} and out_channels={cout}")
    if cg * groups != cin:
        raise ShapeError(f"weight expects {cg * groups} input channels, input has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    _check_finite(xd)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")

    og = cout // groups
    pointwise = kh == kw == 1 and sh == sw == 1 and ph == pw == 0
    xc = _pad(_cb(xd), ph, pw)
    if pointwise:
        cols = xc.reshape(groups, cg, b * h * w)
    else:
        cols = _im2col(xc, kh, kw, sh, sw, ho, wo).reshape(groups, cg * kh * kw, b * ho * wo)
    wmat = wd.reshape(groups, og, cg * kh * kw)
    out = _bc((wmat @ cols).reshape(cout, b, ho, wo))
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def backward(g: np.ndarray) -> None:
        gg = _cb(g).reshape(groups, og, b * ho * wo)
        if weight.requires_grad:
            _accumulate(weight, (gg @ cols.transpose(0, 2, 1)).reshape(wd.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = wmat.transpose(0, 2, 1) @ gg
            if pointwise:
                _accumulate(x, _bc(gcols.reshape(cin, b, h, w)))
            else:
                gxc = _col2im(gcols.reshape(cin, kh, kw, b, ho, wo), xc.shape, sh, sw)
                _accumulate(x, _bc(gxc[:, :, ph : ph + h, pw : pw + w]))

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _result(out, parents, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=2,
                     padding=1, output_padding=1) -> Tensor:
    """Transposed convolution; ``weight`` has shape (Cin, Cout, kh, kw).

    Output extent is ``(in - 1) * stride - 2 * padding + k + output_padding``,
    so the default 3x3 / stride 2 / padding 1 / output_padding 1 doubles it.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects a 4-D input, got shape {xd.shape}")
    b, cin, h, w = xd.shape
    wcin, cout, kh, kw = wd.shape
    if wcin != cin:
        raise ShapeError(f"weight expects {wcin} input channels, input has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    _check_finite(xd)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    if (oph and oph >= sh) or (opw and opw >= sw):
        raise ShapeError("output_padding must be smaller than stride")
    ho = (h - 1) * sh - 2 * ph + kh + oph
    wo = (w - 1) * sw - 2 * pw + kw + opw
    canvas = (cout, b, (h - 1) * sh + kh + oph, (w - 1) * sw + kw + opw)
    xrows = _cb(xd).reshape(cin, b * h * w)
    wmat = wd.reshape(cin, cout * kh * kw)
    cols = (wmat.T @ xrows).reshape(cout, kh, kw, b, h, w)
    full = _col2im(cols, canvas, sh, sw)
    out = _bc(full[:, :, ph : ph + ho, pw : pw + wo])
    if bias is not None:
        out += bias.data.reshape(1, cout, 1, 1)

    def backward(g: np.ndarray) -> None:
        gfull = np.zeros(canvas, dtype=g.dtype)
        gfull[:, :, ph : ph + ho, pw : pw + wo] = g.transpose(1, 0, 2, 3)
        gcols = _im2col(gfull, kh, kw, sh, sw, h, w).reshape(cout * kh * kw, b * h * w)
        if weight.requires_grad:
            _accumulate(weight, (xrows @ gcols.T).reshape(wd.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accumulate(x, _bc((wmat @ gcols).reshape(cin, b, h, w)))

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _result(out, parents, backward, "conv_transpose2d")


def maxpool2d(x: Tensor, kernel=3, stride=2, padding=1) -> Tensor:
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-D input, got shape {xd.shape}")
    _check_finite(xd)
    b, c, h, w = xd.shape
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    xp = _pad(xd, ph, pw, value=-np.inf)
    win = _windows(xp, kh, kw, sh, sw, ho, wo).reshape(b, c, ho, wo, kh * kw)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                sel = idx == i * kw + j
                gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += g * sel
        _accumulate(x, gxp[:, :, ph : ph + h, pw : pw + w])

    return _result(np.ascontiguousarray(out), [x], backward, "maxpool2d")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    _check_finite(xd)
    mask = xd > 0
    out = xd * mask

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _result(out, [x], backward, "relu")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Optional[np.ndarray] = None,
                running_var: Optional[np.ndarray] = None, training: bool = True,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics are used and the running buffers (if
    given) are updated in place; otherwise the running buffers are used.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"batchnorm2d expects a 4-D input, got shape {xd.shape}")
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm params must have shape ({c},)")
    _check_finite(xd)
    axes = (0, 2, 3)
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
        if running_var is not None:
            unbiased = var * (n / max(n - 1, 1))
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError("running statistics required in inference mode")
        mean, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, c, 1, 1)
            if training:
                m1 = gxhat.mean(axis=axes, keepdims=True)
                m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (gxhat - m1 - xhat * m2) * inv.reshape(1, c, 1, 1)
            else:
                gx = gxhat * inv.reshape(1, c, 1, 1)
            _accumulate(x, gx)

    return _result(out, [x, gamma, beta], backward, "batchnorm2d")


def channel_concat(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("channel_concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _accumulate(t, g[:, lo:hi])

    return _result(out, list(tensors), backward, "channel_concat")


def softmax_channels(x: Tensor) -> Tensor:
    xd = x.data
    _check_finite(xd)
    z = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _result(p, [x], backward, "softmax_channels")


def log_softmax_channels(x: Tensor) -> Tensor:
    xd = x.data
    _check_finite(xd)
    z = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g - p * g.sum(axis=1, keepdims=True))

    return _result(out, [x], backward, "log_softmax_channels")


# ----------------------------------------------------------------------------
# small helpers used by residual blocks and losses
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out, [a, b], backward, "add")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * a.data.dtype.type(c)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * c)

    return _result(out, [a], backward, "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, [a, b], backward, "mul")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.full(a.shape, g / n, dtype=a.data.dtype))

    return _result(out, [a], backward, "mean")


def batch_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the batch axis."""
    out = a.data[start:stop]

    def backward(g: np.ndarray) -> None:
        full = np.zeros(a.shape, dtype=g.dtype)
        full[start:stop] = g
        _accumulate(a, full)

    return _result(out, [a], backward, "batch_slice")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# layer specification and dispatch
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: Tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    groups: int = 1
    output_padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if min(self.kernel) < 0 or self.stride < 0 or self.padding < 0:
            raise ValueError("kernel, stride and padding must be nonnegative")
        if self.kind in ("conv2d", "conv_transpose2d"):
            if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
                raise ValueError(
                    f"groups={self.groups} must divide in_channels={self.in_channels} "
                    f"and out_channels={self.out_channels}"
                )

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        kh, kw = self.kernel
        if self.kind == "conv2d":
            return {
                "weight": (self.out_channels, self.in_channels // self.groups, kh, kw),
                "bias": (self.out_channels,),
            }
        if self.kind == "conv_transpose2d":
            return {"weight": (self.in_channels, self.out_channels, kh, kw), "bias": (self.out_channels,)}
        if self.kind == "batchnorm2d":
            return {"gamma": (self.out_channels,), "beta": (self.out_channels,)}
        return {}

    def output_shape(self, in_shape: Sequence[int]) -> Tuple[int, ...]:
        b, c, h, w = in_shape
        kh, kw = self.kernel
        s, p = self.stride, self.padding
        if self.kind in ("conv2d", "maxpool2d"):
            cout = self.out_channels if self.kind == "conv2d" else c
            return (b, cout, (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1)
        if self.kind == "conv_transpose2d":
            op = self.output_padding
            return (b, self.out_channels, (h - 1) * s - 2 * p + kh + op, (w - 1) * s - 2 * p + kw + op)
        return tuple(in_shape)


def layer_forward(spec: LayerSpec, input, params: Optional[Dict[str, Tensor]] = None, **kwargs) -> Tensor:
    """Run one layer described by ``spec``.

    ``input`` is a Tensor, or a sequence of Tensors for ``channel_concat``.
    ``params`` maps the names from :meth:`LayerSpec.param_shapes` to Tensors;
    ``bias`` may be omitted. Extra keyword arguments go to batchnorm
    (``running_mean``, ``running_var``, ``training``).
    """
    params = params or {}
    kind = spec.kind
    if kind == "channel_concat":
        return channel_concat(list(input))
    x = input
    if kind in ("conv2d", "conv_transpose2d", "batchnorm2d"):
        expected = spec.param_shapes()
        for name, shape in expected.items():
            if name == "bias" and name not in params:
                continue
            if name not in params:
                raise ShapeError(f"missing parameter {name!r} for {kind}")
            if tuple(params[name].shape) != tuple(shape):
                raise ShapeError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
        if x.data.ndim != 4 or x.shape[1] != spec.in_channels:
            raise ShapeError(f"{kind} expects {spec.in_channels} input channels, got shape {x.shape}")
    if kind == "conv2d":
        return conv2d(x, params["weight"], params.get("bias"), spec.stride, spec.padding, spec.groups)
    if kind == "conv_transpose2d":
        return conv_transpose2d(x, params["weight"], params.get("bias"), spec.stride, spec.padding,
                                spec.output_padding)
    if kind == "maxpool2d":
        return maxpool2d(x, spec.kernel, spec.stride, spec.padding)
    if kind == "relu":
        return relu(x)
    if kind == "batchnorm2d":
        return batchnorm2d(x, params["gamma"], params["beta"], **kwargs)
    return softmax_channels(x)


# ----------------------------------------------------------------------------
# backward and gradient checking
# ----------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward_pass(output: Tensor, output_gradient=None,
                  params: Optional[Dict[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """Reverse-mode sweep from ``output``.

    ``output_gradient`` defaults to ones for a scalar output. Gradients are
    accumulated into ``.grad`` of every leaf with ``requires_grad``. If
    ``params`` is given, a dict of their gradients is returned, with zeros for
    parameters the forward pass never touched.
    """
    if output._backward is None and not output.requires_grad:
        raise TapeError("no recorded forward tape for this tensor")
    if output_gradient is None:
        if output.data.size != 1:
            raise ShapeError("output_gradient required for a non-scalar output")
        g0 = np.ones(output.shape, dtype=output.dtype)
    else:
        g0 = np.asarray(output_gradient.data if isinstance(output_gradient, Tensor) else output_gradient,
                        dtype=output.dtype)
        if g0.shape != output.shape:
            raise ShapeError(f"output_gradient shape {g0.shape} != output shape {output.shape}")

    order = _topo_order(output)
    for node in order:
        if node._backward is not None:
            node.grad = None
    output.grad = np.array(g0, copy=True)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node is not output:
                node.grad = None  # free intermediate buffers
    if params is None:
        return {}
    return {
        name: (p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype))
        for name, p in params.items()
    }


def finite_difference_check(function: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``point`` is cast to float64.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    y = function(x)
    if y.data.size != 1:
        raise ShapeError("function must return a scalar")
    if not np.isfinite(y.data).all():
        raise NonFiniteError("function value is not finite")
    backward_pass(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        with no_grad():
            fp = float(function(Tensor(x0.copy())).data)
        flat[i] = orig - step
        with no_grad():
            fm = float(function(Tensor(x0.copy())).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value near coordinate {i}")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
