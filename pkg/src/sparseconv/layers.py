"""Sparsity-invariant layers: SI-convolution, the binary switch, SISL, and the
SI-residual bottleneck, plus the simplified fusion blocks used by DVMN.

Feature maps are :class:`~sparseconv.tensor.Tensor` objects of shape
(N, C, H, W). Validity masks are plain numpy arrays of shape (N, 1, H, W)
holding exactly 0 or 1; they never carry gradients.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .tensor import (
    Tensor,
    add,
    block_mean,
    channel_bias,
    check_binary,
    concat,
    conv2d,
    divide,
    gate,
    max_pool_window,
    relu,
    select,
    window_count,
)

EPSILON = 1e-5
VARIANTS = ("plain", "pre_activation", "pre_addition")


@dataclass
class SIConvParams:
    w: Tensor
    b: Tensor
    k: int = 1
    d: int = 1
    stride: int = 1
    epsilon: float = EPSILON

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        side = 2 * self.k + 1
        if self.w.shape[2:] != (side, side):
            raise ValueError(f"weights {self.w.shape} do not match half-kernel k={self.k}")
        if self.d < 1 or self.stride < 1 or self.k < 0:
            raise ValueError("need k >= 0, d >= 1, stride >= 1")

    @property
    def in_channels(self) -> int:
        return self.w.shape[1]

    @property
    def out_channels(self) -> int:
        return self.w.shape[0]


@dataclass
class SislParams:
    branch_d1: SIConvParams
    branch_d2: SIConvParams
    share_weights: bool = False
    d_switch: int = 2

    def __post_init__(self):
        a, b = self.branch_d1, self.branch_d2
        if a.d != 1 or b.d != self.d_switch or self.d_switch < 2:
            raise ValueError("SISL branches need dilation 1 and d_switch >= 2")
        if (a.k, a.stride, a.w.shape) != (b.k, b.stride, b.w.shape):
            raise ValueError("SISL branches must agree on kernel, stride and channels")
        if self.share_weights and (a.w is not b.w or a.b is not b.b):
            raise ValueError("shared SISL branches must reference the same tensors")

    @property
    def in_channels(self) -> int:
        return self.branch_d1.in_channels

    @property
    def out_channels(self) -> int:
        return self.branch_d1.out_channels

    @property
    def stride(self) -> int:
        return self.branch_d1.stride


@dataclass
class Conv1x1:
    w: Tensor
    b: Tensor


@dataclass
class BottleneckParams:
    reduce: Conv1x1
    inner: Union[SIConvParams, SislParams]
    expand: Conv1x1
    residual_projection: Optional[Conv1x1] = None
    width_ratio: float = 0.5
    variant: str = "plain"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown bottleneck variant {self.variant!r}")
        if not 0 < self.width_ratio <= 1:
            raise ValueError("width_ratio must lie in (0, 1]")
        width = bottleneck_width(self.out_channels, self.width_ratio)
        if self.reduce.w.shape[0] != width or self.inner.in_channels != width \
                or self.inner.out_channels != width or self.expand.w.shape[1] != width:
            raise ValueError(f"inner width must be {width} for {self.out_channels} outputs")
        needs_projection = self.in_channels != self.out_channels or self.inner.stride > 1
        if needs_projection != (self.residual_projection is not None):
            raise ValueError("a residual projection is required exactly when channels "
                             "change or the block is strided")

    @property
    def in_channels(self) -> int:
        return self.reduce.w.shape[1]

    @property
    def out_channels(self) -> int:
        return self.expand.w.shape[0]


def bottleneck_width(out_channels: int, width_ratio: float) -> int:
    return max(1, int(round(width_ratio * out_channels)))


# ---------------------------------------------------------------------------
# Parameter construction
# ---------------------------------------------------------------------------

class ParamStore:
    """Creates named parameters deterministically and keeps them in order."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def normal(self, name: str, shape, std: float) -> Tensor:
        return self._add(name, self.rng.normal(0.0, std, size=shape))

    def constant(self, name: str, shape, value: float = 0.0) -> Tensor:
        return self._add(name, np.full(shape, value))

    def conv1x1(self, name: str, in_ch: int, out_ch: int) -> Conv1x1:
        return Conv1x1(self.normal(f"{name}.w", (out_ch, in_ch, 1, 1), np.sqrt(2.0 / in_ch)),
                       self.constant(f"{name}.b", (out_ch,)))

    def si_conv(self, name: str, in_ch: int, out_ch: int, k: int = 1, d: int = 1,
                stride: int = 1, epsilon: float = EPSILON) -> SIConvParams:
        # the valid-tap normalisation already averages over the window
        side = 2 * k + 1
        w = self.normal(f"{name}.w", (out_ch, in_ch, side, side), np.sqrt(2.0 / in_ch))
        b = self.constant(f"{name}.b", (out_ch,))
        return SIConvParams(w, b, k=k, d=d, stride=stride, epsilon=epsilon)

    def sisl(self, name: str, in_ch: int, out_ch: int, k: int = 1, stride: int = 1,
             d_switch: int = 2, share_weights: bool = False,
             epsilon: float = EPSILON) -> SislParams:
        first = self.si_conv(f"{name}.d1", in_ch, out_ch, k=k, stride=stride, epsilon=epsilon)
        if share_weights:
            second = SIConvParams(first.w, first.b, k=k, d=d_switch, stride=stride,
                                  epsilon=epsilon)
        else:
            second = self.si_conv(f"{name}.d{d_switch}", in_ch, out_ch, k=k, d=d_switch,
                                  stride=stride, epsilon=epsilon)
        return SislParams(first, second, share_weights=share_weights, d_switch=d_switch)

    def bottleneck(self, name: str, in_ch: int, out_ch: int, width_ratio: float = 0.5,
                   stride: int = 1, use_sisl: bool = False, d_switch: int = 2,
                   share_weights: bool = False, variant: str = "plain",
                   epsilon: float = EPSILON) -> BottleneckParams:
        width = bottleneck_width(out_ch, width_ratio)
        reduce = self.conv1x1(f"{name}.reduce", in_ch, width)
        if use_sisl:
            inner = self.sisl(f"{name}.inner", width, width, stride=stride, d_switch=d_switch,
                              share_weights=share_weights, epsilon=epsilon)
        else:
            inner = self.si_conv(f"{name}.inner", width, width, stride=stride, epsilon=epsilon)
        expand = self.conv1x1(f"{name}.expand", width, out_ch)
        projection = None
        if in_ch != out_ch or stride > 1:
            projection = self.conv1x1(f"{name}.project", in_ch, out_ch)
        return BottleneckParams(reduce, inner, expand, projection, width_ratio, variant)


# ---------------------------------------------------------------------------
# Forward operations
# ---------------------------------------------------------------------------

def _check_pair(x: Tensor, o: np.ndarray) -> None:
    o = np.asarray(o)
    if o.ndim != 4 or o.shape[1] != 1 or o.shape[0] != x.shape[0] or o.shape[2:] != x.shape[2:]:
        raise ValueError(f"mask of shape {o.shape} does not accompany features {x.shape}")
    check_binary(o)


def _si_conv(x: Tensor, o: np.ndarray, p: SIConvParams) -> Tuple[Tensor, np.ndarray]:
    """SI-convolution returning the valid-tap count instead of the pooled mask."""
    pad = p.d * p.k
    num = conv2d(gate(x, o), p.w, stride=p.stride, dilation=p.d, padding=pad)
    count = window_count(o, p.k, p.d, p.stride, pad)
    y = channel_bias(divide(num, count + p.epsilon), p.b)
    return y, count


def si_conv_forward(x: Tensor, o: np.ndarray, p: SIConvParams) -> Tuple[Tensor, np.ndarray]:
    """Sparsity-invariant convolution and its max-pooled validity mask.

    Each output is the weighted sum over valid taps divided by the number of
    valid taps plus epsilon, plus the bias. A window without valid taps
    yields the bias and an invalid output pixel.
    """
    _check_pair(x, o)
    y, _ = _si_conv(x, o, p)
    return y, max_pool_window(o, p.k, p.d, p.stride, p.d * p.k, strict=False)


def switch_map(o: np.ndarray, k: int = 1) -> np.ndarray:
    """Binary switch: 0 where every non-centre tap of the undilated window is empty."""
    o = np.asarray(o)
    check_binary(o)
    if k < 1:
        raise ValueError("switch needs k >= 1")
    return np.minimum(window_count(o, k, 1, 1, k) - o, 1)


def _sisl(x: Tensor, o: np.ndarray, p: SislParams):
    y1, c1 = _si_conv(x, o, p.branch_d1)
    y2, c2 = _si_conv(x, o, p.branch_d2)
    if y1.shape != y2.shape:
        raise ValueError(f"SISL branches disagree: {y1.shape} vs {y2.shape}")
    s = p.stride
    sw = switch_map(o, p.branch_d1.k)[:, :, ::s, ::s]
    y = select(sw, y1, y2)
    count = sw * c1 + (1 - sw) * c2
    return y, count, sw


def sisl_forward(x: Tensor, o: np.ndarray, p: SislParams) -> Tuple[Tensor, np.ndarray]:
    """Sparsity Invariant Switch Layer.

    The dilation-1 branch is used where the switch is on; elsewhere the
    dilated branch fills in. The same switch blends the two pooled masks.
    """
    _check_pair(x, o)
    y, _, sw = _sisl(x, o, p)
    a, b = p.branch_d1, p.branch_d2
    m1 = max_pool_window(o, a.k, a.d, a.stride, a.d * a.k, strict=False)
    m2 = max_pool_window(o, b.k, b.d, b.stride, b.d * b.k, strict=False)
    mask = np.rint(sw * m1 + (1 - sw) * m2)
    return y, mask


def first_layer_masks(o: np.ndarray, k: int = 1, d_switch: int = 2
                      ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Output masks of a stride-1 plain SI-conv and a SISL on the same input.

    Returns (plain, sisl, switch). Only the mask is needed, so no weights.
    """
    o = np.asarray(o)
    plain = max_pool_window(o, k, 1, 1, k, strict=False)
    dilated = max_pool_window(o, k, d_switch, 1, d_switch * k, strict=False)
    sw = switch_map(o, k)
    return plain, np.rint(sw * plain + (1 - sw) * dilated), sw


def _inner(x: Tensor, o: np.ndarray, inner) -> Tuple[Tensor, np.ndarray]:
    if isinstance(inner, SislParams):
        y, count, _ = _sisl(x, o, inner)
        return y, count
    return _si_conv(x, o, inner)


def _conv1x1(x: Tensor, c: Conv1x1, stride: int = 1) -> Tensor:
    return conv2d(x, c.w, c.b, stride=stride)


def si_bottleneck_forward(x: Tensor, o: np.ndarray, p: BottleneckParams
                          ) -> Tuple[Tensor, np.ndarray]:
    """SI-residual bottleneck: 1x1 reduce, sparse 3x3 (SI-conv or SISL), 1x1 expand.

    The input is gated by its mask on entry so invalid pixels never reach the
    1x1 convolutions or the residual. The output mask is the inner layer's
    valid-tap count clipped to one.
    """
    _check_pair(x, o)
    if x.shape[1] != p.in_channels:
        raise ValueError(f"bottleneck expects {p.in_channels} channels, got {x.shape[1]}")
    stride = p.inner.stride
    xg = gate(x, o)
    if p.residual_projection is None:
        residual = xg
    else:
        residual = _conv1x1(xg, p.residual_projection, stride)

    if p.variant == "pre_activation":
        h = _conv1x1(relu(xg), p.reduce)
        h, count = _inner(relu(h), o, p.inner)
        h = _conv1x1(relu(h), p.expand)
        y = add(h, residual)
    else:
        h = relu(_conv1x1(xg, p.reduce))
        h, count = _inner(h, o, p.inner)
        h = _conv1x1(relu(h), p.expand)
        if p.variant == "pre_addition":
            y = add(relu(h), residual)
        else:
            y = relu(add(h, residual))
    mask = np.minimum(count, 1)
    if isinstance(p.inner, SIConvParams):
        q = p.inner
        pooled = max_pool_window(o, q.k, q.d, q.stride, q.d * q.k, strict=False)
        if not np.array_equal(mask, pooled):
            raise AssertionError("bottleneck mask disagrees with max pooling")
    return y, mask


# ---------------------------------------------------------------------------
# Fusion blocks (simplified concat + 1x1 designs)
# ---------------------------------------------------------------------------

SPP_SCALES = (2, 4, 8)


def _pool_size(n: int, scale: int) -> int:
    # largest block that tiles the axis without exceeding the scale
    for size in range(min(scale, n), 0, -1):
        if n % size == 0:
            return size
    return 1


def spp_fuse(f_img: Tensor, f_depth: Tensor, p: Conv1x1,
             scales: Tuple[int, ...] = SPP_SCALES) -> Tensor:
    """Fuse the two encoder outputs with average-pooled pyramid context.

    Output channels are half the concatenated encoder channels.
    """
    if f_img.shape != f_depth.shape:
        raise ValueError(f"encoder outputs differ: {f_img.shape} vs {f_depth.shape}")
    joint = concat([f_img, f_depth], axis=1)
    h, w = joint.shape[2:]
    pyramid = [block_mean(joint, _pool_size(h, s), _pool_size(w, s)) for s in scales]
    stacked = concat([joint] + pyramid, axis=1)
    if p.w.shape[1] != stacked.shape[1]:
        raise ValueError(f"fusion weights expect {p.w.shape[1]} channels, got {stacked.shape[1]}")
    return _conv1x1(stacked, p)


def spp_params(store: ParamStore, name: str, channels: int,
               scales: Tuple[int, ...] = SPP_SCALES) -> Conv1x1:
    """Weights for :func:`spp_fuse` with ``channels`` per encoder."""
    return store.conv1x1(name, 2 * channels * (1 + len(scales)), channels)


def fusion_block(f_decoder: Tensor, f_skip: Tensor, o_stage: np.ndarray, p: Conv1x1) -> Tensor:
    """Skip fusion that re-injects the stage validity mask as an extra channel."""
    o_stage = np.asarray(o_stage)
    if f_decoder.shape[2:] != f_skip.shape[2:] or o_stage.shape[2:] != f_decoder.shape[2:] \
            or f_decoder.shape[0] != f_skip.shape[0]:
        raise ValueError("decoder, skip and mask must share batch and spatial shape")
    if p.w.shape[0] != f_decoder.shape[1]:
        raise ValueError("fusion output channels must equal the decoder channels")
    joint = concat([f_decoder, f_skip, o_stage.astype(f_decoder.dtype)], axis=1)
    return _conv1x1(joint, p)


def fusion_params(store: ParamStore, name: str, decoder_ch: int, skip_ch: int) -> Conv1x1:
    return store.conv1x1(name, decoder_ch + skip_ch + 1, decoder_ch)


def mask_density(o: np.ndarray) -> float:
    """Fraction of valid pixels."""
    o = np.asarray(o)
    return float(o.mean()) if o.size else 0.0
