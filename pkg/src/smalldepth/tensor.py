"""Rank-4 NCHW kernels: convolution, bilinear resize, softmax, reductions.

All functions are pure and follow the dtype of their inputs, so the same
code serves float32 production paths and float64 verification paths.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

AXES = {"channel": 1, "height": 2, "width": 3}


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k_h: int
    k_w: int
    groups: int = 1
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    has_bias: bool = False

    def __post_init__(self):
        if self.k_h < 1 or self.k_w < 1:
            raise ValueError(f"kernel extents must be >= 1, got {self.k_h}x{self.k_w}")
        if min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError("stride and dilation must be >= 1")
        if self.groups < 1 or self.c_in % self.groups or self.c_out % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide c_in={self.c_in} and c_out={self.c_out}"
            )

    @classmethod
    def same(cls, c_in, c_out, k_h, k_w=None, groups=1, dilation=1, stride=1, has_bias=False):
        """Spec whose output keeps the input size at stride 1 (odd kernels only)."""
        k_w = k_h if k_w is None else k_w
        d = (dilation, dilation) if isinstance(dilation, int) else tuple(dilation)
        s = (stride, stride) if isinstance(stride, int) else tuple(stride)
        pad = (d[0] * (k_h - 1) // 2, d[1] * (k_w - 1) // 2)
        return cls(c_in, c_out, k_h, k_w, groups, s, d, pad, has_bias)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in // self.groups, self.k_h, self.k_w)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding[0] - self.dilation[0] * (self.k_h - 1) - 1) // self.stride[0] + 1
        ow = (w + 2 * self.padding[1] - self.dilation[1] * (self.k_w - 1) - 1) // self.stride[1] + 1
        return oh, ow

    def with_kernel(self, k_h: int, k_w: int) -> "ConvSpec":
        pad = (self.dilation[0] * (k_h - 1) // 2, self.dilation[1] * (k_w - 1) // 2)
        return replace(self, k_h=k_h, k_w=k_w, padding=pad)


def _check_conv(x: np.ndarray, spec: ConvSpec, w: np.ndarray):
    if x.ndim != 4:
        raise ValueError(f"expected NCHW input, got shape {x.shape}")
    if x.shape[1] != spec.c_in:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.c_in}")
    if tuple(w.shape) != spec.weight_shape:
        raise ValueError(f"weight shape {tuple(w.shape)} != {spec.weight_shape}")
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])
    if oh < 1 or ow < 1:
        raise ValueError(f"input {x.shape[2:]} too small for {spec}")
    return oh, ow


def _tap(xp: np.ndarray, spec: ConvSpec, i: int, j: int, oh: int, ow: int) -> np.ndarray:
    """View of padded input sampled by kernel tap (i, j): shape (n, c, oh, ow)."""
    sh, sw = spec.stride
    r0 = i * spec.dilation[0]
    c0 = j * spec.dilation[1]
    return xp[:, :, r0:r0 + sh * (oh - 1) + 1:sh, c0:c0 + sw * (ow - 1) + 1:sw]


def _pad(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    ph, pw = spec.padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d(x: np.ndarray, spec: ConvSpec, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Grouped, strided, dilated cross-correlation.

    Accumulates one kernel tap at a time; depthwise groups (one input and one
    output channel per group) take an elementwise path instead of matmul.
    """
    oh, ow = _check_conv(x, spec, w)
    n = x.shape[0]
    g = spec.groups
    cig = spec.c_in // g
    cog = spec.c_out // g
    dtype = np.result_type(x, w)
    xp = _pad(x, spec)
    out = np.zeros((n, spec.c_out, oh, ow), dtype=dtype)
    if cig == 1 and cog == 1:
        for i in range(spec.k_h):
            for j in range(spec.k_w):
                out += _tap(xp, spec, i, j, oh, ow) * w[:, 0, i, j][None, :, None, None]
    else:
        acc = out.reshape(n, g, cog, oh * ow)
        wg = w.reshape(g, cog, cig, spec.k_h, spec.k_w)
        for i in range(spec.k_h):
            for j in range(spec.k_w):
                xs = _tap(xp, spec, i, j, oh, ow).reshape(n, g, cig, oh * ow)
                acc += np.matmul(wg[None, :, :, :, i, j], xs)
    if b is not None:
        out += np.asarray(b, dtype=dtype)[None, :, None, None]
    return out


def conv2d_grad_input(gout: np.ndarray, spec: ConvSpec, w: np.ndarray, in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of conv2d with respect to its input."""
    n, _, oh, ow = gout.shape
    g = spec.groups
    cig = spec.c_in // g
    cog = spec.c_out // g
    ph, pw = spec.padding
    h, wd = in_hw
    gxp = np.zeros((n, spec.c_in, h + 2 * ph, wd + 2 * pw), dtype=np.result_type(gout, w))
    if cig == 1 and cog == 1:
        for i in range(spec.k_h):
            for j in range(spec.k_w):
                _tap(gxp, spec, i, j, oh, ow)[...] += gout * w[:, 0, i, j][None, :, None, None]
    else:
        gg = gout.reshape(n, g, cog, oh * ow)
        wg = w.reshape(g, cog, cig, spec.k_h, spec.k_w)
        for i in range(spec.k_h):
            for j in range(spec.k_w):
                wt = np.swapaxes(wg[:, :, :, i, j], 1, 2)[None]
                contrib = np.matmul(wt, gg).reshape(n, spec.c_in, oh, ow)
                _tap(gxp, spec, i, j, oh, ow)[...] += contrib
    return gxp[:, :, ph:ph + h, pw:pw + wd]


def conv2d_grad_weight(gout: np.ndarray, spec: ConvSpec, x: np.ndarray) -> np.ndarray:
    """Adjoint of conv2d with respect to its weight."""
    n, _, oh, ow = gout.shape
    g = spec.groups
    cig = spec.c_in // g
    cog = spec.c_out // g
    xp = _pad(x, spec)
    gw = np.zeros(spec.weight_shape, dtype=np.result_type(gout, x))
    if cig == 1 and cog == 1:
        for i in range(spec.k_h):
            for j in range(spec.k_w):
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", gout, _tap(xp, spec, i, j, oh, ow))
    else:
        gg = gout.reshape(n, g, cog, oh * ow)
        gwg = gw.reshape(g, cog, cig, spec.k_h, spec.k_w)
        for i in range(spec.k_h):
            for j in range(spec.k_w):
                xs = _tap(xp, spec, i, j, oh, ow).reshape(n, g, cig, oh * ow)
                gwg[:, :, :, i, j] = np.matmul(gg, np.swapaxes(xs, 2, 3)).sum(axis=0)
    return gw


def conv2d_reference(x, spec: ConvSpec, w, b=None) -> np.ndarray:
    """Direct nested-loop convolution; slow, used only as a test oracle."""
    oh, ow = _check_conv(x, spec, w)
    n, _, h, wd = x.shape
    cig = spec.c_in // spec.groups
    cog = spec.c_out // spec.groups
    out = np.zeros((n, spec.c_out, oh, ow), dtype=np.float64)
    for b_ in range(n):
        for o in range(spec.c_out):
            grp = o // cog
            for y in range(oh):
                for xx in range(ow):
                    s = 0.0
                    for ci in range(cig):
                        c = grp * cig + ci
                        for i in range(spec.k_h):
                            r = y * spec.stride[0] - spec.padding[0] + i * spec.dilation[0]
                            if r < 0 or r >= h:
                                continue
                            for j in range(spec.k_w):
                                q = xx * spec.stride[1] - spec.padding[1] + j * spec.dilation[1]
                                if 0 <= q < wd:
                                    s += float(w[o, ci, i, j]) * float(x[b_, c, r, q])
                    out[b_, o, y, xx] = s + (float(b[o]) if b is not None else 0.0)
    return out


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix for align_corners=False linear sampling."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    if x.size == 0:
        raise ValueError("cannot resize an empty tensor")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    mh = _interp_matrix(h, out_h, x.dtype)
    mw = _interp_matrix(w, out_w, x.dtype)
    return np.matmul(np.matmul(mh, x), mw.T)


def bilinear_resize_adjoint(g: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    out_h, out_w = g.shape[2:]
    if (in_h, in_w) == (out_h, out_w):
        return g.copy()
    mh = _interp_matrix(in_h, out_h, g.dtype)
    mw = _interp_matrix(in_w, out_w, g.dtype)
    return np.matmul(np.matmul(mh.T, g), mw)


def _axis(axis) -> int:
    return AXES[axis] if isinstance(axis, str) else int(axis)


def log_softmax_axis(x: np.ndarray, axis="channel") -> np.ndarray:
    ax = _axis(axis)
    shifted = x - x.max(axis=ax, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))


def softmax_axis(x: np.ndarray, axis="channel") -> np.ndarray:
    ax = _axis(axis)
    e = np.exp(x - x.max(axis=ax, keepdims=True))
    return e / e.sum(axis=ax, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _nonempty(x: np.ndarray, axes=None):
    if x.size == 0:
        raise ValueError("empty reduction domain")
    if axes is not None:
        for a in np.atleast_1d(axes):
            if x.shape[_axis(a)] == 0:
                raise ValueError("empty reduction domain")


def reduce_mean(x: np.ndarray, axes=None) -> np.ndarray:
    _nonempty(x, axes)
    return x.mean(axis=_norm_axes(axes), keepdims=axes is not None)


def reduce_var(x: np.ndarray, axes=None) -> np.ndarray:
    """Population (biased) variance."""
    _nonempty(x, axes)
    return x.var(axis=_norm_axes(axes), keepdims=axes is not None)


def reduce_median(x: np.ndarray) -> float:
    """Lower-central median: for even counts, the smaller of the two middle values."""
    _nonempty(x)
    flat = np.sort(np.asarray(x).ravel())
    return flat[(flat.size - 1) // 2].item()


def _norm_axes(axes):
    if axes is None:
        return None
    return tuple(_axis(a) for a in np.atleast_1d(axes))


def pad_kernel(w: np.ndarray, k_h: int, k_w: int) -> np.ndarray:
    """Zero-pad a kernel so it sits centered inside a (k_h, k_w) window."""
    kh, kw = w.shape[2:]
    if (kh - k_h) % 2 or (kw - k_w) % 2 or kh > k_h or kw > k_w:
        raise ValueError(f"cannot center a {kh}x{kw} kernel in {k_h}x{k_w}")
    top = (k_h - kh) // 2
    left = (k_w - kw) // 2
    out = np.zeros(w.shape[:2] + (k_h, k_w), dtype=w.dtype)
    out[:, :, top:top + kh, left:left + kw] = w
    return out


def crop_kernel(w: np.ndarray, kh: int, kw: int) -> np.ndarray:
    top = (w.shape[2] - kh) // 2
    left = (w.shape[3] - kw) // 2
    return w[:, :, top:top + kh, left:left + kw]


def delta_kernel(channels: int, groups: int, k_h: int, k_w: int, dtype=np.float32) -> np.ndarray:
    """Grouped identity filter: output channel o copies input channel o."""
    cig = channels // groups
    w = np.zeros((channels, cig, k_h, k_w), dtype=dtype)
    for o in range(channels):
        w[o, o % cig, k_h // 2, k_w // 2] = 1.0
    return w
