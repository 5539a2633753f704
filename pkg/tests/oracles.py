"""Brute-force reference implementations used as test oracles.

Everything here is written with explicit loops over output pixels and taps,
independent of the strided-view machinery in the library.
"""

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, dilation=1, padding=0):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(ho):
        for j in range(wo):
            for a in range(kh):
                for c in range(kw):
                    r = i * stride + a * dilation - padding
                    q = j * stride + c * dilation - padding
                    if 0 <= r < h and 0 <= q < wd:
                        out[:, :, i, j] += x[:, :, r, q] @ w[:, :, a, c].T
    if b is not None:
        out += b[None, :, None, None]
    return out


def transposed_conv2d_loops(x, w, b=None, stride=1, padding=0):
    """Scatter-accumulate definition; w has shape (in, out, kh, kw)."""
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    full = np.zeros((n, cout, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for i in range(h):
        for j in range(wd):
            full[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += \
                np.einsum("nc,cokl->nokl", x[:, :, i, j], w)
    ho, wo = full.shape[2] - 2 * padding, full.shape[3] - 2 * padding
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def window_taps(h, w, i, j, k, d, stride=1, pad=None):
    """Input coordinates (or None when padded) of the window at output (i, j)."""
    pad = d * k if pad is None else pad
    taps = []
    for a in range(2 * k + 1):
        for c in range(2 * k + 1):
            r = i * stride + a * d - pad
            q = j * stride + c * d - pad
            taps.append((r, q) if 0 <= r < h and 0 <= q < w else None)
    return taps


def maxpool_loops(o, k, d, stride=1):
    h, w = o.shape
    pad = d * k
    ho = (h + 2 * pad - d * 2 * k - 1) // stride + 1
    wo = (w + 2 * pad - d * 2 * k - 1) // stride + 1
    out = np.zeros((ho, wo))
    for i in range(ho):
        for j in range(wo):
            vals = [o[t] for t in window_taps(h, w, i, j, k, d, stride) if t is not None]
            out[i, j] = max(vals) if vals else 0.0
    return out


def si_conv_loops(x, o, w, b, k, d, stride=1, eps=1e-5):
    """Literal valid-tap normalised convolution on (C, H, W) input, mask (H, W)."""
    cin, h, wd = x.shape
    cout = w.shape[0]
    pad = d * k
    ho = (h + 2 * pad - d * 2 * k - 1) // stride + 1
    wo = (wd + 2 * pad - d * 2 * k - 1) // stride + 1
    y = np.zeros((cout, ho, wo))
    mask = np.zeros((ho, wo))
    for i in range(ho):
        for j in range(wo):
            num = np.zeros(cout)
            cnt = 0.0
            for t, (a, c) in zip(window_taps(h, wd, i, j, k, d, stride),
                                 [(a, c) for a in range(2 * k + 1) for c in range(2 * k + 1)]):
                if t is None:
                    continue
                cnt += o[t]
                num += o[t] * (w[:, :, a, c] @ x[:, t[0], t[1]])
                mask[i, j] = max(mask[i, j], o[t])
            y[:, i, j] = num / (cnt + eps) + b
    return y, mask


def switch_loops(o, k=1):
    """s = min(sum over undilated window minus centre, 1), zero padded."""
    h, w = o.shape
    s = np.zeros_like(o, dtype=float)
    for i in range(h):
        for j in range(w):
            total = sum(o[t] for t in window_taps(h, w, i, j, k, 1) if t is not None)
            s[i, j] = min(total - o[i, j], 1)
    return s


def random_mask(rng, shape, density):
    return (rng.random(shape) < density).astype(np.float64)
