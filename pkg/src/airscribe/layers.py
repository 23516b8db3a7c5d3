"""Differentiable layers on dense numpy arrays.

Each layer owns its parameters, gradients, and running buffers, caches the
activations it needs during forward, and implements the exact analytic
backward pass (validated against central finite differences). Convolutions
use the cross-correlation convention (no kernel flip). 4-D activations are
laid out (batch, channels, height, width) with EEG electrodes on the
height axis and time on the width axis.
"""

from __future__ import annotations

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view

# Cap on im2col buffer sizes (elements); larger workloads are chunked over
# the batch axis so peak memory stays bounded.
_GEMM_CHUNK = 20_000_000

# Kernels at least this wide (and one row tall) run through the rFFT path,
# which is much faster for long temporal kernels.
_FFT_MIN_WIDTH = 16


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _pad_split(k: int) -> tuple[int, int]:
    # "same" padding for stride 1; the extra sample of even kernels goes after
    return (k - 1) // 2, (k - 1) - (k - 1) // 2


def _use_fft(kh: int, kw: int) -> bool:
    return kh == 1 and kw >= _FFT_MIN_WIDTH


def _corr2d_gemm(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, h, wp = xp.shape
    f, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wp - kw + 1
    wm = np.ascontiguousarray(w.reshape(f, -1).T)
    out = np.empty((n, f, ho, wo), dtype=xp.dtype)
    per_sample = wo * c * kh * kw
    chunk = max(1, min(n, _GEMM_CHUNK // max(per_sample, 1)))
    for n0 in range(0, n, chunk):
        n1 = min(n, n0 + chunk)
        xs = xp[n0:n1]
        for y in range(ho):
            win = sliding_window_view(xs[:, :, y : y + kh, :], kw, axis=3)
            cols = win.transpose(0, 3, 1, 2, 4).reshape((n1 - n0) * wo, c * kh * kw)
            out[n0:n1, :, y, :] = (
                (cols @ wm).reshape(n1 - n0, wo, f).transpose(0, 2, 1)
            )
    return out


def _fill_cols_kh1(colsT: np.ndarray, sample: np.ndarray, kw: int, wo: int) -> None:
    # rows of the transposed im2col are contiguous slab copies
    c = sample.shape[0]
    for ci in range(c):
        base = sample[ci]
        for j in range(kw):
            colsT[ci * kw + j] = base[:, j : j + wo].ravel()


def _corr2d_gemm_kh1(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    # one-row kernels, per-sample gemm: everything stays contiguous
    n, c, h, wp = xp.shape
    f, _, _, kw = w.shape
    wo = wp - kw + 1
    wm = np.ascontiguousarray(w.reshape(f, c * kw))
    out = np.empty((n, f, h, wo), dtype=xp.dtype)
    colsT = np.empty((c * kw, h * wo), dtype=xp.dtype)
    for i in range(n):
        _fill_cols_kh1(colsT, xp[i], kw, wo)
        np.matmul(wm, colsT, out=out[i].reshape(f, h * wo))
    return out


def _corr2d_colmix(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    # kernel spans the full height and one sample: a pure (channel, height) mix
    n, c, h, wp = xp.shape
    f = w.shape[0]
    wm = np.ascontiguousarray(w[:, :, :, 0].reshape(f, c * h))
    out = np.empty((n, f, 1, wp), dtype=xp.dtype)
    for i in range(n):
        np.matmul(wm, xp[i].reshape(c * h, wp), out=out[i, :, 0, :])
    return out


def _corr2d_dw_gemm(xp: np.ndarray, dy: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    _, f, ho, wo = dy.shape
    dwm = np.zeros((c * kh * kw, f), dtype=xp.dtype)
    per_sample = wo * c * kh * kw
    chunk = max(1, min(n, _GEMM_CHUNK // max(per_sample, 1)))
    for n0 in range(0, n, chunk):
        n1 = min(n, n0 + chunk)
        xs = xp[n0:n1]
        for y in range(ho):
            win = sliding_window_view(xs[:, :, y : y + kh, :], kw, axis=3)
            cols = win.transpose(0, 3, 1, 2, 4).reshape((n1 - n0) * wo, c * kh * kw)
            dyr = dy[n0:n1, :, y, :].transpose(0, 2, 1).reshape((n1 - n0) * wo, f)
            dwm += cols.T @ dyr
    return dwm.T.reshape(f, c, kh, kw)


def _corr2d_dw_gemm_kh1(xp: np.ndarray, dy: np.ndarray, kw: int) -> np.ndarray:
    n, c, h, _ = xp.shape
    f = dy.shape[1]
    wo = dy.shape[3]
    dwm = np.zeros((c * kw, f), dtype=xp.dtype)
    colsT = np.empty((c * kw, h * wo), dtype=xp.dtype)
    for i in range(n):
        _fill_cols_kh1(colsT, xp[i], kw, wo)
        dwm += colsT @ dy[i].reshape(f, h * wo).T
    return dwm.T.reshape(f, c, 1, kw)


def _conv_dx_shift_kh1(dy: np.ndarray, w: np.ndarray, wp: int) -> np.ndarray:
    # contract filters first, then scatter the kw shifted slabs
    n, f, h, wo = dy.shape
    _, c, _, kw = w.shape
    wm = np.ascontiguousarray(w.reshape(f, c * kw))
    dxp = np.zeros((n, c, h, wp), dtype=dy.dtype)
    for i in range(n):
        u = (wm.T @ dy[i].reshape(f, h * wo)).reshape(c, kw, h, wo)
        for ci in range(c):
            for j in range(kw):
                dxp[i, ci, :, j : j + wo] += u[ci, j]
    return dxp


def _fft_mul(a: np.ndarray, b: np.ndarray, pattern: str) -> np.ndarray:
    # pattern 'fwd': out[n,f,h,k] = sum_c a[n,c,h,k] b[f,c,k]
    if a.shape[1] == 1 and pattern == "fwd":
        return a[:, 0][:, np.newaxis] * b[np.newaxis, :, 0, np.newaxis, :]
    if pattern == "fwd":
        return np.einsum("nchk,fck->nfhk", a, b)
    raise ValueError(pattern)


def _corr2d_fft(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    _, _, _, wp = xp.shape
    f, _, _, kw = w.shape
    wo = wp - kw + 1
    nfft = scipy.fft.next_fast_len(wp, real=True)
    xf = scipy.fft.rfft(xp, n=nfft, axis=3, workers=-1)
    wf = scipy.fft.rfft(w[:, :, 0, :], n=nfft, axis=2, workers=-1)
    yf = _fft_mul(xf, np.conj(wf), "fwd")
    y = scipy.fft.irfft(yf, n=nfft, axis=3, workers=-1)[..., :wo]
    return y.astype(xp.dtype, copy=False)


def _conv_backward_fft(xp: np.ndarray, w: np.ndarray, dy: np.ndarray):
    f, c, _, kw = w.shape
    _, _, _, wp = xp.shape
    nfft = scipy.fft.next_fast_len(wp, real=True)
    xf = scipy.fft.rfft(xp, n=nfft, axis=3, workers=-1)
    wf = scipy.fft.rfft(w[:, :, 0, :], n=nfft, axis=2, workers=-1)
    dyf = scipy.fft.rfft(dy, n=nfft, axis=3, workers=-1)
    if c == 1:
        dxf = (dyf * wf[np.newaxis, :, 0, np.newaxis, :]).sum(axis=1, keepdims=True)
        dwf = (xf[:, 0][:, np.newaxis] * np.conj(dyf)).sum(axis=(0, 2))[:, np.newaxis]
    else:
        dxf = np.einsum("nfhk,fck->nchk", dyf, wf)
        dwf = np.einsum("nchk,nfhk->fck", xf, np.conj(dyf))
    dxp = scipy.fft.irfft(dxf, n=nfft, axis=3, workers=-1)[..., :wp]
    dw = scipy.fft.irfft(dwf, n=nfft, axis=2, workers=-1)[..., :kw]
    return dxp.astype(xp.dtype, copy=False), dw.astype(xp.dtype, copy=False)[
        :, :, np.newaxis, :
    ]


def _corr2d(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    _, _, kh, kw = w.shape
    if _use_fft(kh, kw):
        return _corr2d_fft(xp, w)
    if kw == 1 and kh == xp.shape[2]:
        return _corr2d_colmix(xp, w)
    if kh == 1:
        return _corr2d_gemm_kh1(xp, w)
    return _corr2d_gemm(xp, w)


def _conv_backward(xp: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Gradients of a valid cross-correlation: returns (dxp, dw)."""
    f, c, kh, kw = w.shape
    if _use_fft(kh, kw):
        return _conv_backward_fft(xp, w, dy)
    if kw == 1 and kh == xp.shape[2]:
        n, _, h, wp = xp.shape
        wm = np.ascontiguousarray(w[:, :, :, 0].reshape(f, c * kh))
        dwm = np.zeros((f, c * kh), dtype=xp.dtype)
        dxp = np.empty_like(xp)
        for i in range(n):
            dyi = dy[i, :, 0, :]
            dwm += dyi @ xp[i].reshape(c * kh, wp).T
            np.matmul(wm.T, dyi, out=dxp[i].reshape(c * kh, wp))
        return dxp, dwm.reshape(f, c, kh, 1)
    if kh == 1:
        dxp = _conv_dx_shift_kh1(dy, w, xp.shape[3])
        dw = _corr2d_dw_gemm_kh1(xp, dy, kw)
        return dxp, dw
    dyp = np.pad(dy, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    w_swap = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dxp = _corr2d_gemm(dyp, w_swap)
    dw = _corr2d_dw_gemm(xp, dy, kh, kw)
    return dxp, dw


def _depthwise_forward(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, c, h, wp = xp.shape
    _, m, kh, kw = w.shape
    ho, wo = h - kh + 1, wp - kw + 1
    out = np.zeros((n, c, m, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += (
                xp[:, :, np.newaxis, i : i + ho, j : j + wo]
                * w[np.newaxis, :, :, i, j, np.newaxis, np.newaxis]
            )
    return out


def _depthwise_backward(xp: np.ndarray, w: np.ndarray, dy5: np.ndarray):
    _, _, kh, kw = w.shape
    _, _, _, ho, wo = dy5.shape
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i : i + ho, j : j + wo]
            dw[:, :, i, j] = np.einsum("ncyt,ncmyt->cm", window, dy5)
            dxp[:, :, i : i + ho, j : j + wo] += np.einsum(
                "cm,ncmyt->ncyt", w[:, :, i, j], dy5
            )
    return dxp, dw


class Layer:
    """Base layer: params/grads/buffers plus forward and backward."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.rng: np.random.Generator | None = None
        self._cache = None

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> None:
        pass

    def forward(self, x, train=False, update_stats=True):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called before forward")
        return self._cache


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, padding="valid", bias=True):
        super().__init__()
        if padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh, self.kw = kernel
        self.padding = padding
        self.bias = bias

    def init_params(self, rng, dtype=np.float32):
        fan_in = self.in_channels * self.kh * self.kw
        fan_out = self.out_channels * self.kh * self.kw
        self.params["weight"] = glorot_uniform(
            rng,
            (self.out_channels, self.in_channels, self.kh, self.kw),
            fan_in,
            fan_out,
            dtype,
        )
        if self.bias:
            self.params["bias"] = np.zeros(self.out_channels, dtype=dtype)

    def _pads(self):
        if self.padding == "same":
            pt, pb = _pad_split(self.kh)
            pl, pr = _pad_split(self.kw)
            return pt, pb, pl, pr
        return 0, 0, 0, 0

    def forward(self, x, train=False, update_stats=True):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"conv2d expected (N, {self.in_channels}, H, W), got {x.shape}"
            )
        pt, pb, pl, pr = self._pads()
        if self.padding == "valid" and (x.shape[2] < self.kh or x.shape[3] < self.kw):
            raise ValueError(
                f"conv2d kernel ({self.kh}x{self.kw}) larger than input {x.shape}"
            )
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt + pb + pl + pr else x
        self._cache = (xp, x.shape)
        out = _corr2d(xp, self.params["weight"])
        if self.bias:
            out += self.params["bias"][np.newaxis, :, np.newaxis, np.newaxis]
        return out

    def backward(self, dy):
        xp, x_shape = self._need_cache()
        if self.bias:
            self.grads["bias"] = dy.sum(axis=(0, 2, 3))
        dxp, dw = _conv_backward(xp, self.params["weight"], dy)
        self.grads["weight"] = dw
        pt, _, pl, _ = self._pads()
        return dxp[:, :, pt : pt + x_shape[2], pl : pl + x_shape[3]]

    def config(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": (self.kh, self.kw),
            "padding": self.padding,
            "bias": self.bias,
        }


class DepthwiseConv2d(Layer):
    """Per-channel convolution with a depth multiplier.

    Output channel order is input-channel major: channel c of the input
    produces output channels c * multiplier + m.
    """

    kind = "depthwise_conv2d"

    def __init__(self, in_channels, multiplier, kernel, padding="valid"):
        super().__init__()
        if padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
        self.in_channels = in_channels
        self.multiplier = multiplier
        self.kh, self.kw = kernel
        self.padding = padding

    def init_params(self, rng, dtype=np.float32):
        fan_in = self.kh * self.kw
        fan_out = self.kh * self.kw * self.multiplier
        self.params["weight"] = glorot_uniform(
            rng,
            (self.in_channels, self.multiplier, self.kh, self.kw),
            fan_in,
            fan_out,
            dtype,
        )

    def _pads(self):
        if self.padding == "same":
            return *_pad_split(self.kh), *_pad_split(self.kw)
        return 0, 0, 0, 0

    def forward(self, x, train=False, update_stats=True):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"depthwise_conv2d expected (N, {self.in_channels}, H, W), got {x.shape}"
            )
        pt, pb, pl, pr = self._pads()
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt + pb + pl + pr else x
        self._cache = (xp, x.shape)
        out5 = _depthwise_forward(xp, self.params["weight"])
        n, c, m, ho, wo = out5.shape
        return out5.reshape(n, c * m, ho, wo)

    def backward(self, dy):
        xp, x_shape = self._need_cache()
        n, _, ho, wo = dy.shape
        dy5 = dy.reshape(n, self.in_channels, self.multiplier, ho, wo)
        dxp, dw = _depthwise_backward(xp, self.params["weight"], dy5)
        self.grads["weight"] = dw
        pt, _, pl, _ = self._pads()
        return dxp[:, :, pt : pt + x_shape[2], pl : pl + x_shape[3]]

    def config(self):
        return {
            "in_channels": self.in_channels,
            "multiplier": self.multiplier,
            "kernel": (self.kh, self.kw),
            "padding": self.padding,
        }


class SeparableConv2d(Layer):
    """Depthwise convolution followed by a pointwise channel mix."""

    kind = "separable_conv2d"

    def __init__(self, in_channels, out_channels, kernel, padding="same"):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh, self.kw = kernel
        self.padding = padding

    def init_params(self, rng, dtype=np.float32):
        self.params["depthwise"] = glorot_uniform(
            rng,
            (self.in_channels, 1, self.kh, self.kw),
            self.kh * self.kw,
            self.kh * self.kw,
            dtype,
        )
        self.params["pointwise"] = glorot_uniform(
            rng,
            (self.out_channels, self.in_channels),
            self.in_channels,
            self.out_channels,
            dtype,
        )

    def _pads(self):
        if self.padding == "same":
            return *_pad_split(self.kh), *_pad_split(self.kw)
        return 0, 0, 0, 0

    def forward(self, x, train=False, update_stats=True):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"separable_conv2d expected (N, {self.in_channels}, H, W), got {x.shape}"
            )
        pt, pb, pl, pr = self._pads()
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt + pb + pl + pr else x
        mid5 = _depthwise_forward(xp, self.params["depthwise"])
        n, c, _, ho, wo = mid5.shape
        mid = mid5.reshape(n, c, ho, wo)
        self._cache = (xp, x.shape, mid)
        return np.einsum("nchw,fc->nfhw", mid, self.params["pointwise"])

    def backward(self, dy):
        xp, x_shape, mid = self._need_cache()
        self.grads["pointwise"] = np.einsum("nfhw,nchw->fc", dy, mid)
        dmid = np.einsum("nfhw,fc->nchw", dy, self.params["pointwise"])
        dmid5 = dmid[:, :, np.newaxis, :, :]
        dxp, ddw = _depthwise_backward(xp, self.params["depthwise"], dmid5)
        self.grads["depthwise"] = ddw
        pt, _, pl, _ = self._pads()
        return dxp[:, :, pt : pt + x_shape[2], pl : pl + x_shape[3]]

    def config(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": (self.kh, self.kw),
            "padding": self.padding,
        }


class BatchNorm(Layer):
    """Batch normalization over the batch (and spatial) axes per feature."""

    kind = "batch_norm"

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum

    def init_params(self, rng, dtype=np.float32):
        self.params["gamma"] = np.ones(self.num_features, dtype=dtype)
        self.params["beta"] = np.zeros(self.num_features, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(self.num_features, dtype=dtype)
        self.buffers["running_var"] = np.ones(self.num_features, dtype=dtype)

    def _bshape(self, ndim):
        return (1, self.num_features) + (1,) * (ndim - 2)

    @staticmethod
    def _sum(x, axes):
        if x.ndim == 4 and axes == (0, 2, 3):
            return np.einsum("nchw->c", x)
        return x.sum(axis=axes)

    @staticmethod
    def _dot(a, b, axes):
        if a.ndim == 4 and axes == (0, 2, 3):
            return np.einsum("nchw,nchw->c", a, b)
        return (a * b).sum(axis=axes)

    def forward(self, x, train=False, update_stats=True):
        if x.shape[1] != self.num_features:
            raise ValueError(
                f"batch_norm expected {self.num_features} features, got shape {x.shape}"
            )
        axes = (0,) + tuple(range(2, x.ndim))
        bshape = self._bshape(x.ndim)
        m_count = int(np.prod([x.shape[a] for a in axes]))
        if train:
            mean = self._sum(x, axes) / m_count
            var = self._dot(x, x, axes) / m_count - mean * mean
            var = np.maximum(var, 0.0)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(bshape)) * inv.reshape(bshape)
            if update_stats:
                m = self.momentum
                self.buffers["running_mean"] = (
                    (1 - m) * self.buffers["running_mean"] + m * mean
                ).astype(x.dtype)
                self.buffers["running_var"] = (
                    (1 - m) * self.buffers["running_var"] + m * var
                ).astype(x.dtype)
        else:
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            xhat = (x - self.buffers["running_mean"].reshape(bshape)) * inv.reshape(
                bshape
            )
        self._cache = (xhat, inv, axes, bshape, train, m_count)
        return self.params["gamma"].reshape(bshape) * xhat + self.params[
            "beta"
        ].reshape(bshape)

    def backward(self, dy):
        xhat, inv, axes, bshape, train, m = self._need_cache()
        self.grads["gamma"] = self._dot(dy, xhat, axes)
        self.grads["beta"] = self._sum(dy, axes)
        gamma_inv = (self.params["gamma"] * inv).reshape(bshape)
        if not train:
            return dy * gamma_inv
        s1 = self.grads["beta"].reshape(bshape)   # sum of dy per feature
        s2 = self.grads["gamma"].reshape(bshape)  # sum of dy * xhat per feature
        return gamma_inv * (dy - s1 / m - xhat * (s2 / m))

    def config(self):
        return {
            "num_features": self.num_features,
            "eps": self.eps,
            "momentum": self.momentum,
        }


class Elu(Layer):
    kind = "elu"

    def forward(self, x, train=False, update_stats=True):
        positive = x > 0
        out = np.where(positive, x, np.expm1(np.minimum(x, 0.0)))
        self._cache = (positive, out)
        return out

    def backward(self, dy):
        positive, out = self._need_cache()
        return dy * np.where(positive, 1.0, out + 1.0)


class Relu(Layer):
    kind = "relu"

    def forward(self, x, train=False, update_stats=True):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._need_cache()


class _Pool(Layer):
    def __init__(self, pool):
        super().__init__()
        self.ph, self.pw = pool

    def _blocks(self, x):
        n, c, h, w = x.shape
        ho, wo = h // self.ph, w // self.pw
        if ho == 0 or wo == 0:
            raise ValueError(f"pool ({self.ph}x{self.pw}) larger than input {x.shape}")
        r = x[:, :, : ho * self.ph, : wo * self.pw]
        r = r.reshape(n, c, ho, self.ph, wo, self.pw).transpose(0, 1, 2, 4, 3, 5)
        return r.reshape(n, c, ho, wo, self.ph * self.pw), (n, c, h, w, ho, wo)

    def _scatter(self, dblocks, dims):
        n, c, h, w, ho, wo = dims
        d = dblocks.reshape(n, c, ho, wo, self.ph, self.pw).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros((n, c, h, w), dtype=dblocks.dtype)
        dx[:, :, : ho * self.ph, : wo * self.pw] = d.reshape(
            n, c, ho * self.ph, wo * self.pw
        )
        return dx

    def config(self):
        return {"pool": (self.ph, self.pw)}


class AvgPool(_Pool):
    """Non-overlapping average pooling; trailing remainders are dropped."""

    kind = "avg_pool"

    def forward(self, x, train=False, update_stats=True):
        blocks, dims = self._blocks(x)
        self._cache = dims
        return blocks.mean(axis=-1)

    def backward(self, dy):
        dims = self._need_cache()
        scale = 1.0 / (self.ph * self.pw)
        dblocks = np.repeat(
            (dy * scale)[..., np.newaxis], self.ph * self.pw, axis=-1
        )
        return self._scatter(dblocks, dims)


class MaxPool(_Pool):
    """Non-overlapping max pooling; gradient flows to the argmax only."""

    kind = "max_pool"

    def forward(self, x, train=False, update_stats=True):
        blocks, dims = self._blocks(x)
        idx = blocks.argmax(axis=-1)
        self._cache = (idx, dims)
        return np.take_along_axis(blocks, idx[..., np.newaxis], axis=-1)[..., 0]

    def backward(self, dy):
        idx, dims = self._need_cache()
        dblocks = np.zeros(dy.shape + (self.ph * self.pw,), dtype=dy.dtype)
        np.put_along_axis(dblocks, idx[..., np.newaxis], dy[..., np.newaxis], axis=-1)
        return self._scatter(dblocks, dims)


class Dropout(Layer):
    """Inverted dropout: active in train mode only, identity in eval."""

    kind = "dropout"

    def __init__(self, p):
        super().__init__()
        if not (0 <= p < 1):
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def forward(self, x, train=False, update_stats=True):
        if not train or self.p == 0.0:
            self._cache = None
            return x
        if self.rng is None:
            raise RuntimeError("dropout layer has no RNG attached")
        keep = self.rng.random(x.shape) >= self.p
        mask = keep.astype(x.dtype) / (1.0 - self.p)
        self._cache = mask
        return x * mask

    def backward(self, dy):
        if self._cache is None:
            return dy
        return dy * self._cache

    def config(self):
        return {"p": self.p}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False, update_stats=True):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._need_cache())


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.bias = bias

    def init_params(self, rng, dtype=np.float32):
        self.params["weight"] = glorot_uniform(
            rng,
            (self.in_features, self.out_features),
            self.in_features,
            self.out_features,
            dtype,
        )
        if self.bias:
            self.params["bias"] = np.zeros(self.out_features, dtype=dtype)

    def forward(self, x, train=False, update_stats=True):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(
                f"dense expected (N, {self.in_features}), got {x.shape}"
            )
        self._cache = x
        out = x @ self.params["weight"]
        if self.bias:
            out += self.params["bias"]
        return out

    def backward(self, dy):
        x = self._need_cache()
        self.grads["weight"] = x.T @ dy
        if self.bias:
            self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"].T

    def config(self):
        return {
            "in_features": self.in_features,
            "out_features": self.out_features,
            "bias": self.bias,
        }


class L2Normalize(Layer):
    """Scale each sample vector to unit Euclidean norm (eps-guarded)."""

    kind = "l2_normalize"

    def __init__(self, eps=1e-12):
        super().__init__()
        self.eps = eps

    def forward(self, x, train=False, update_stats=True):
        norm = np.sqrt((x * x).sum(axis=1))
        denom = np.maximum(norm, self.eps)
        out = x / denom[:, np.newaxis]
        self._cache = (x, norm, denom)
        return out

    def backward(self, dy):
        x, norm, denom = self._need_cache()
        dx = dy / denom[:, np.newaxis]
        active = norm > self.eps
        dot = (dy * x).sum(axis=1)
        dx[active] -= x[active] * (dot[active] / denom[active] ** 3)[:, np.newaxis]
        return dx

    def config(self):
        return {"eps": self.eps}


class Softmax(Layer):
    """Row-wise softmax with max subtraction for numerical stability."""

    kind = "softmax"

    def forward(self, x, train=False, update_stats=True):
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        self._cache = p
        return p

    def backward(self, dy):
        p = self._need_cache()
        return p * (dy - (dy * p).sum(axis=1, keepdims=True))


LAYER_KINDS = {
    cls.kind: cls
    for cls in (
        Conv2d,
        DepthwiseConv2d,
        SeparableConv2d,
        BatchNorm,
        Elu,
        Relu,
        AvgPool,
        MaxPool,
        Dropout,
        Flatten,
        Dense,
        L2Normalize,
        Softmax,
    )
}


def layer_from_config(kind: str, config: dict) -> Layer:
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    cfg = dict(config)
    if "kernel" in cfg:
        cfg["kernel"] = tuple(cfg["kernel"])
    if "pool" in cfg:
        cfg["pool"] = tuple(cfg["pool"])
    return LAYER_KINDS[kind](**cfg)
