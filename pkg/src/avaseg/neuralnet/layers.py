"""Network layers with forward and analytic backward passes.

All spatial ops use (N, C, H, W) arrays. Convolutions are stride-1
cross-correlations with zero same-padding, realized as im2col + GEMM; the
input gradient reuses the same machinery with rotated kernels.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Conv2D", "BatchNorm2D", "MaxPool2x2", "UpsampleBilinear2x",
    "Dropout", "ReLU", "Sigmoid",
]


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(N*H*W, C*k*k) patch matrix of a same-padded input."""
    n, c, h, w = x.shape
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, k, k, h, w), strides=(sn, sc, sh, sw, sh, sw))
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(n * h * w, c * k * k)


class Conv2D:
    """k x k convolution, zero same-padding, He-normal init."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int,
                 rng: np.random.Generator, dtype=np.float32):
        if ksize not in (1, 3):
            raise ValueError(f"only 1x1 and 3x3 kernels are supported, got {ksize}")
        fan_in = in_ch * ksize * ksize
        self.w = (rng.standard_normal((out_ch, in_ch, ksize, ksize))
                  * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.ksize = ksize
        self.pad = (ksize - 1) // 2
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.shape[1] != self.w.shape[1]:
            raise ValueError(f"expected {self.w.shape[1]} input channels, got {x.shape[1]}")
        n, _, h, w = x.shape
        k = self.ksize
        col = _im2col(x, k, self.pad)
        out_ch = self.w.shape[0]
        y = col @ self.w.reshape(out_ch, -1).T + self.b
        y = np.ascontiguousarray(y.reshape(n, h, w, out_ch).transpose(0, 3, 1, 2))
        self._cache = (col, x.shape) if training else None
        return y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        col, xshape = self._cache
        n, c, h, w = xshape
        out_ch = self.w.shape[0]
        k = self.ksize
        gy_mat = gy.transpose(0, 2, 3, 1).reshape(n * h * w, out_ch)
        self.gw += (gy_mat.T @ col).reshape(self.w.shape)
        self.gb += gy.sum(axis=(0, 2, 3))
        # input gradient = same-padded correlation with rotated kernels
        w_rot = self.w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gcol = _im2col(gy, k, self.pad)
        gx = gcol @ w_rot.reshape(c, -1).T
        return np.ascontiguousarray(gx.reshape(n, h, w, c).transpose(0, 3, 1, 2))

    def params(self):
        return (("w", self.w), ("b", self.b))

    def grads(self):
        return (("w", self.gw), ("b", self.gb))


class BatchNorm2D:
    """Per-channel batch normalization (eps 1e-5, running-stat momentum 0.9)."""

    EPS = 1e-5
    MOMENTUM = 0.9

    def __init__(self, channels: int, dtype=np.float32):
        self.gain = np.ones(channels, dtype=dtype)
        self.offset = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.ggain = np.zeros_like(self.gain)
        self.goffset = np.zeros_like(self.offset)
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        c = x.shape[1]
        if c != self.gain.shape[0]:
            raise ValueError(f"expected {self.gain.shape[0]} channels, got {c}")
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if m <= 1:
                raise ValueError("train-mode batch norm needs more than one value per channel")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.EPS)
            xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
            self.running_mean = (self.MOMENTUM * self.running_mean
                                 + (1.0 - self.MOMENTUM) * mean).astype(self.running_mean.dtype)
            var_unbiased = var * (m / (m - 1))
            self.running_var = (self.MOMENTUM * self.running_var
                                + (1.0 - self.MOMENTUM) * var_unbiased).astype(self.running_var.dtype)
            self._cache = (xhat, inv_std, m)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.EPS)
            xhat = (x - self.running_mean[:, None, None]) * inv_std[:, None, None]
            self._cache = None
        return self.gain[:, None, None] * xhat + self.offset[:, None, None]

    def backward(self, gy: np.ndarray) -> np.ndarray:
        xhat, inv_std, m = self._cache
        self.ggain += (gy * xhat).sum(axis=(0, 2, 3))
        self.goffset += gy.sum(axis=(0, 2, 3))
        gxhat = gy * self.gain[:, None, None]
        sum_g = gxhat.sum(axis=(0, 2, 3))[:, None, None]
        sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3))[:, None, None]
        return inv_std[:, None, None] / m * (m * gxhat - sum_g - xhat * sum_gx)

    def params(self):
        return (("gain", self.gain), ("offset", self.offset))

    def grads(self):
        return (("gain", self.ggain), ("offset", self.goffset))

    def stats(self):
        return (("running_mean", self.running_mean), ("running_var", self.running_var))


class MaxPool2x2:
    """2x2 max pooling, stride 2; gradient routes to the first argmax in scan order."""

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max pool needs even spatial dims, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5) \
               .reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, x.shape) if training else None
        return y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        idx, (n, c, h, w) = self._cache
        gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=gy.dtype)
        np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
        return gwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
                   .reshape(n, c, h, w)


_UPSAMPLE_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """(2n, n) bilinear interpolation operator, align-corners-false convention."""
    key = (n, np.dtype(dtype).str)
    m = _UPSAMPLE_CACHE.get(key)
    if m is None:
        src = (np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5
        i0 = np.floor(src).astype(int)
        frac = src - i0
        i1 = np.clip(i0 + 1, 0, n - 1)
        i0 = np.clip(i0, 0, n - 1)
        m64 = np.zeros((2 * n, n))
        rows = np.arange(2 * n)
        np.add.at(m64, (rows, i0), 1.0 - frac)
        np.add.at(m64, (rows, i1), frac)
        m = m64.astype(dtype)
        _UPSAMPLE_CACHE[key] = m
    return m


class UpsampleBilinear2x:
    """Doubles H and W bilinearly; backward is the exact adjoint operator."""

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        h, w = x.shape[2], x.shape[3]
        uh = _upsample_matrix(h, x.dtype)
        uw = _upsample_matrix(w, x.dtype)
        self._cache = (h, w) if training else None
        return np.matmul(np.matmul(uh, x), uw.T)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        h, w = self._cache
        uh = _upsample_matrix(h, gy.dtype)
        uw = _upsample_matrix(w, gy.dtype)
        return np.matmul(np.matmul(uh.T, gy), uw)


class Dropout:
    """Inverted dropout: zero with probability rate, scale survivors by 1/(1-rate)."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if not training or self.rate == 0.0:
            self._cache = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an explicit rng")
        keep = (rng.random(x.shape) >= self.rate)
        scale = np.asarray(1.0 / (1.0 - self.rate), dtype=x.dtype)
        mask = keep.astype(x.dtype) * scale
        self._cache = mask
        return x * mask

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            return gy
        return gy * self._cache


class ReLU:
    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        y = np.maximum(x, 0)
        self._cache = (x > 0) if training else None
        return y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        return gy * self._cache


class Sigmoid:
    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        y = 1.0 / (1.0 + np.exp(-x))
        self._cache = y if training else None
        return y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        y = self._cache
        return gy * y * (1.0 - y)
