"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Only the primitives needed by the sparse layers and the DVMN network are
provided. Every primitive is a pure function of its inputs; when a
:class:`Tape` is active and at least one input requires a gradient, the
primitive is recorded together with whatever it needs for its gradient rule.

Masks and other non-differentiable maps are passed around as plain numpy
arrays and therefore never receive a gradient.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int]

DEFAULT_DTYPE = np.float64


class Tensor:
    """A numpy array plus the bookkeeping needed for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic sugar; comparison operators are left alone so tensors hash by identity
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; divide by a constant")
        return divide(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _needs_grad(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

GradientRule = Callable[[np.ndarray, tuple, dict], Sequence[Optional[np.ndarray]]]
_GRADIENT_RULES: Dict[str, GradientRule] = {}
_ACTIVE_TAPES: List["Tape"] = []


def gradient_rule(name: str):
    """Register the vector-Jacobian product of primitive ``name``."""
    def register(fn: GradientRule) -> GradientRule:
        _GRADIENT_RULES[name] = fn
        return fn
    return register


class Node:
    __slots__ = ("op", "inputs", "output", "saved")

    def __init__(self, op, inputs, output, saved):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.saved = saved


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives executed inside the block are
    appended in execution order.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple, output: Tensor, saved: dict) -> None:
        if op not in _GRADIENT_RULES:
            raise KeyError(f"no gradient rule registered for primitive {op!r}")
        self.nodes.append(Node(op, inputs, output, saved))


def _emit(op: str, out: np.ndarray, inputs: tuple, saved: Optional[dict] = None) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    track = bool(_ACTIVE_TAPES) and any(_needs_grad(t) for t in inputs)
    result = Tensor(out, requires_grad=track)
    if track:
        _ACTIVE_TAPES[-1].record(op, inputs, result, saved or {})
    return result


def backward(tape: Tape, loss: Tensor, seed: ArrayLike = 1.0) -> Dict[Tensor, np.ndarray]:
    """Replay ``tape`` in reverse and return gradients of ``loss``.

    The returned mapping covers every tensor that requires a gradient and
    that ``loss`` depends on. Leaf tensors also get their ``.grad`` set.
    """
    seed_arr = np.asarray(seed, dtype=loss.dtype)
    if loss.size != 1 or seed_arr.size != 1:
        raise ValueError("backward needs a scalar loss and a scalar seed")
    grads: Dict[int, np.ndarray] = {id(loss): np.broadcast_to(seed_arr, loss.shape).copy()}
    owners: Dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        owners.pop(id(node.output), None)
        parts = _GRADIENT_RULES[node.op](g, node.inputs, node.saved)
        for inp, part in zip(node.inputs, parts):
            if part is None or not _needs_grad(inp):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + part
            else:
                grads[key] = part
                owners[key] = inp
    result = {}
    for key, g in grads.items():
        t = owners[key]
        t.grad = g
        result[t] = g
    return result


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _like(x, ref) -> np.ndarray:
    return np.asarray(_data(x), dtype=_data(ref).dtype) if not isinstance(x, Tensor) else x.data


def add(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else b
    return _emit("add", _like(a, ref) + _like(b, ref), (a, b))


@gradient_rule("add")
def _add_grad(g, inputs, saved):
    a, b = inputs
    return (_unbroadcast(g, np.shape(_data(a))), _unbroadcast(g, np.shape(_data(b))))


def sub(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else b
    return _emit("sub", _like(a, ref) - _like(b, ref), (a, b))


@gradient_rule("sub")
def _sub_grad(g, inputs, saved):
    a, b = inputs
    return (_unbroadcast(g, np.shape(_data(a))), _unbroadcast(-g, np.shape(_data(b))))


def mul(a, b) -> Tensor:
    ref = a if isinstance(a, Tensor) else b
    return _emit("mul", _like(a, ref) * _like(b, ref), (a, b))


@gradient_rule("mul")
def _mul_grad(g, inputs, saved):
    a, b = inputs
    da, db = _data(a), _data(b)
    return (_unbroadcast(g * db, np.shape(da)) if _needs_grad(a) else None,
            _unbroadcast(g * da, np.shape(db)) if _needs_grad(b) else None)


def divide(x: Tensor, denom: ArrayLike) -> Tensor:
    """``x / denom`` for a constant (non-differentiable) denominator."""
    d = np.asarray(denom, dtype=x.dtype)
    return _emit("divide", x.data / d, (x,), {"denom": d, "shape": x.shape})


@gradient_rule("divide")
def _divide_grad(g, inputs, saved):
    return (_unbroadcast(g / saved["denom"], saved["shape"]),)


def relu(x: Tensor) -> Tensor:
    return _emit("relu", np.maximum(x.data, 0), (x,))


@gradient_rule("relu")
def _relu_grad(g, inputs, saved):
    return (g * (inputs[0].data > 0),)


def square(x: Tensor) -> Tensor:
    return _emit("square", x.data * x.data, (x,))


@gradient_rule("square")
def _square_grad(g, inputs, saved):
    return (2.0 * g * inputs[0].data,)


def absolute(x: Tensor) -> Tensor:
    return _emit("abs", np.abs(x.data), (x,))


@gradient_rule("abs")
def _abs_grad(g, inputs, saved):
    return (g * np.sign(inputs[0].data),)


def select(cond: np.ndarray, a, b) -> Tensor:
    """Pick ``a`` where ``cond`` is nonzero and ``b`` elsewhere.

    ``cond`` is a constant map broadcast against the operands; the gradient
    is routed to whichever operand was picked.
    """
    ref = a if isinstance(a, Tensor) else b
    c = np.asarray(cond) != 0
    out = np.where(c, _like(a, ref), _like(b, ref))
    return _emit("select", out, (a, b), {"cond": c})


@gradient_rule("select")
def _select_grad(g, inputs, saved):
    a, b = inputs
    c = saved["cond"]
    zero = np.zeros((), dtype=g.dtype)
    return (_unbroadcast(np.where(c, g, zero), np.shape(_data(a))) if _needs_grad(a) else None,
            _unbroadcast(np.where(c, zero, g), np.shape(_data(b))) if _needs_grad(b) else None)


def gate(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero ``x`` wherever ``mask`` is 0, writing an exact +0.0 there."""
    return select(mask, x, 0.0)


def total(x: Tensor) -> Tensor:
    return _emit("sum", np.asarray(x.data.sum()), (x,), {"shape": x.shape})


@gradient_rule("sum")
def _sum_grad(g, inputs, saved):
    return (np.broadcast_to(g, saved["shape"]).copy(),)


def mean(x: Tensor) -> Tensor:
    return divide(total(x), float(x.size))


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    arrays = [_data(t) for t in tensors]
    ref = next((t for t in tensors if isinstance(t, Tensor)), None)
    dtype = ref.dtype if ref is not None else arrays[0].dtype
    out = np.concatenate([a.astype(dtype, copy=False) for a in arrays], axis=axis)
    sizes = [a.shape[axis] for a in arrays]
    return _emit("concat", out, tuple(tensors), {"axis": axis, "sizes": sizes})


@gradient_rule("concat")
def _concat_grad(g, inputs, saved):
    bounds = np.cumsum(saved["sizes"])[:-1]
    return tuple(np.split(g, bounds, axis=saved["axis"]))


def diff(x: Tensor, axis: int) -> Tensor:
    """First-order forward difference along ``axis``."""
    return _emit("diff", np.diff(x.data, axis=axis), (x,), {"axis": axis, "shape": x.shape})


@gradient_rule("diff")
def _diff_grad(g, inputs, saved):
    axis = saved["axis"]
    out = np.zeros(saved["shape"], dtype=g.dtype)
    n = saved["shape"][axis]
    hi = [slice(None)] * len(saved["shape"])
    lo = list(hi)
    hi[axis] = slice(1, n)
    lo[axis] = slice(0, n - 1)
    out[tuple(hi)] += g
    out[tuple(lo)] -= g
    return (out,)


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias of shape (C,) to an NCHW tensor."""
    return add(x, reshape(b, (1, -1, 1, 1)))


def reshape(x: Tensor, shape) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), {"shape": x.shape})


@gradient_rule("reshape")
def _reshape_grad(g, inputs, saved):
    return (g.reshape(saved["shape"]),)


def block_mean(x: Tensor, kh: int, kw: int) -> Tensor:
    """Average over non-overlapping kh x kw blocks, broadcast back to full size."""
    n, c, h, w = x.shape
    if h % kh or w % kw:
        raise ValueError(f"block {kh}x{kw} does not tile a {h}x{w} map")
    return _emit("block_mean", _block_mean(x.data, kh, kw), (x,), {"k": (kh, kw)})


def _block_mean(a: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, h, w = a.shape
    m = a.reshape(n, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5), keepdims=True)
    return np.broadcast_to(m, (n, c, h // kh, kh, w // kw, kw)).reshape(n, c, h, w)


@gradient_rule("block_mean")
def _block_mean_grad(g, inputs, saved):
    # the block average is self-adjoint
    return (_block_mean(g, *saved["k"]),)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In training mode the running statistics arrays are updated in place.
    """
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        count = xd.size // xd.shape[1]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    return _emit("batch_norm", out, (x, gamma, beta),
                 {"xhat": xhat, "inv": inv, "training": training})


@gradient_rule("batch_norm")
def _batch_norm_grad(g, inputs, saved):
    x, gamma, beta = inputs
    xhat, inv = saved["xhat"], saved["inv"]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    gx = g * gamma.data[None, :, None, None]
    if saved["training"]:
        m = g.size // g.shape[1]
        dx = (inv[None, :, None, None] / m) * (
            m * gx - gx.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (gx * xhat).sum(axis=(0, 2, 3), keepdims=True))
    else:
        dx = gx * inv[None, :, None, None]
    return (dx, dgamma, dbeta)


# ---------------------------------------------------------------------------
# Convolution machinery
# ---------------------------------------------------------------------------

def output_size(n: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def same_padding(kernel: int, dilation: int = 1) -> int:
    """Per-side zero padding that keeps the spatial size at stride 1."""
    return dilation * (kernel - 1) // 2


def _pad(a: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
             ho: int, wo: int) -> np.ndarray:
    """Read-only (N, C, kh, kw, Ho, Wo) view of every tap of every window."""
    sn, sc, sh, sw = xp.strides
    n, c = xp.shape[:2]
    return np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False)


def _im2col(xp, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    view = _windows(xp, kh, kw, stride, dilation, ho, wo)
    n, c = xp.shape[:2]
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, padded_shape, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    """Scatter-add (N*Ho*Wo, C*kh*kw) columns back onto a padded map."""
    n, c = padded_shape[:2]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            out[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                c0:c0 + stride * (wo - 1) + 1:stride] += blocks[:, :, i, j]
    return out


def _check_conv(x: np.ndarray, w: np.ndarray, in_axis: int, stride: int, dilation: int,
                padding: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"expected 4-axis input and weights, got {x.shape} and {w.shape}")
    if w.shape[in_axis] != x.shape[1]:
        raise ValueError(f"weights expect {w.shape[in_axis]} input channels, "
                         f"input has {x.shape[1]}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("stride and dilation must be >= 1 and padding >= 0")


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, Cin, H, W) with ``w`` (Cout, Cin, kh, kw)."""
    xd, wd = x.data, _data(w)
    _check_conv(xd, wd, 1, stride, dilation, padding)
    n, cin, h, wdt = xd.shape
    cout, _, kh, kw = wd.shape
    ho = output_size(h, kh, stride, dilation, padding)
    wo = output_size(wdt, kw, stride, dilation, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"convolution of a {h}x{wdt} input with a {kh}x{kw} kernel "
                         f"(dilation {dilation}, padding {padding}) has no output")
    xp = _pad(xd, padding)
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    out = cols @ wd.reshape(cout, -1).T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    y = _emit("conv2d", out, (x, w), {"cols": cols, "xp_shape": xp.shape, "kernel": (kh, kw),
                                      "stride": stride, "dilation": dilation,
                                      "padding": padding, "out_hw": (ho, wo)})
    return channel_bias(y, b) if b is not None else y


@gradient_rule("conv2d")
def _conv2d_grad(g, inputs, saved):
    x, w = inputs
    wd = _data(w)
    cout = wd.shape[0]
    kh, kw = saved["kernel"]
    ho, wo = saved["out_hw"]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    gw = (gm.T @ saved["cols"]).reshape(wd.shape) if _needs_grad(w) else None
    gx = None
    if _needs_grad(x):
        gcols = gm @ wd.reshape(cout, -1)
        gxp = _col2im(gcols, saved["xp_shape"], kh, kw, saved["stride"], saved["dilation"],
                      ho, wo)
        p = saved["padding"]
        gx = gxp[:, :, p:gxp.shape[2] - p, p:gxp.shape[3] - p] if p else gxp
    return (gx, gw)


def transposed_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
                      padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``w`` has shape (Cin, Cout, kh, kw).

    The output extent is ``(H - 1) * stride - 2 * padding + kh``.
    """
    xd, wd = x.data, _data(w)
    _check_conv(xd, wd, 0, stride, 1, padding)
    n, cin, h, wdt = xd.shape
    _, cout, kh, kw = wd.shape
    hp, wp = (h - 1) * stride + kh, (wdt - 1) * stride + kw
    if hp - 2 * padding <= 0 or wp - 2 * padding <= 0:
        raise ValueError("transposed convolution has no output with this padding")
    xm = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    cols = xm @ wd.reshape(cin, -1)
    outp = _col2im(cols, (n, cout, hp, wp), kh, kw, stride, 1, h, wdt)
    out = np.ascontiguousarray(outp[:, :, padding:hp - padding, padding:wp - padding])
    y = _emit("transposed_conv2d", out, (x, w),
              {"xm": xm, "kernel": (kh, kw), "stride": stride, "padding": padding,
               "in_hw": (h, wdt)})
    return channel_bias(y, b) if b is not None else y


@gradient_rule("transposed_conv2d")
def _transposed_conv2d_grad(g, inputs, saved):
    x, w = inputs
    wd = _data(w)
    cin = wd.shape[0]
    kh, kw = saved["kernel"]
    h, wdt = saved["in_hw"]
    gp = _pad(g, saved["padding"])
    gcols = _im2col(gp, kh, kw, saved["stride"], 1, h, wdt)
    gw = (saved["xm"].T @ gcols).reshape(wd.shape) if _needs_grad(w) else None
    gx = None
    if _needs_grad(x):
        gx = (gcols @ wd.reshape(cin, -1).T).reshape(g.shape[0], h, wdt, cin)
        gx = gx.transpose(0, 3, 1, 2)
    return (gx, gw)


# ---------------------------------------------------------------------------
# Mask-only window operations (no gradients)
# ---------------------------------------------------------------------------

def check_binary(o: np.ndarray, what: str = "mask") -> None:
    if not np.all((o == 0) | (o == 1)):
        raise ValueError(f"{what} must be binary (values 0 or 1)")


def _window_reduce(o: np.ndarray, k: int, dilation: int, stride: int,
                   padding: Optional[int], reduce) -> np.ndarray:
    o = np.asarray(o)
    if o.ndim != 4:
        raise ValueError(f"expected an (N, C, H, W) map, got shape {o.shape}")
    side = 2 * k + 1
    pad = dilation * k if padding is None else padding
    ho = output_size(o.shape[2], side, stride, dilation, pad)
    wo = output_size(o.shape[3], side, stride, dilation, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError("window has no output positions")
    view = _windows(_pad(o, pad), side, side, stride, dilation, ho, wo)
    return reduce(view, axis=(2, 3))


def max_pool_window(o: np.ndarray, k: int = 1, dilation: int = 1, stride: int = 1,
                    padding: Optional[int] = None, strict: bool = True) -> np.ndarray:
    """Max over the (2k+1)^2 dilated window; zero padding defaults to ``dilation * k``."""
    if strict:
        check_binary(np.asarray(o))
    return _window_reduce(o, k, dilation, stride, padding, np.max)


def window_count(o: np.ndarray, k: int = 1, dilation: int = 1, stride: int = 1,
                 padding: Optional[int] = None) -> np.ndarray:
    """Number of nonzero taps in each (2k+1)^2 dilated window."""
    return _window_reduce(o, k, dilation, stride, padding, np.sum)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], params: Sequence[Tensor], fd_step: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called with tensors shaped like ``params`` and must return a
    scalar tensor. The error per entry is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    leaves = [Tensor(np.array(p.data, dtype=np.float64), requires_grad=True) for p in params]
    with Tape() as tape:
        loss = f(*leaves)
    grads = backward(tape, loss)
    worst = 0.0
    for idx, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros_like(leaf.data))
        base = [Tensor(q.data) for q in leaves]
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for pos in range(flat.size):
            bumped = flat.copy()
            bumped[pos] += fd_step
            base[idx] = Tensor(bumped.reshape(leaf.shape))
            up = f(*base).item()
            bumped[pos] -= 2 * fd_step
            base[idx] = Tensor(bumped.reshape(leaf.shape))
            down = f(*base).item()
            numeric.reshape(-1)[pos] = (up - down) / (2 * fd_step)
        if np.isnan(analytic).any() or np.isnan(numeric).any():
            raise FloatingPointError("NaN in gradient estimate")
        denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
