"""Network layers with explicit forward and backward passes.

There is no autodiff tape: the layer set is small and fixed, so every layer
implements its own exact backward, and finite-difference checking
(:mod:`turbkit.nn.gradcheck`) is the single source of truth for correctness.

Conventions:

* activations are [H, W, C] numpy arrays; no batch axis (batching is a loop
  with gradient accumulation);
* ``forward`` caches whatever ``backward`` needs, so a single layer instance
  must not be used concurrently — ``backward`` consumes the most recent
  ``forward``;
* ``backward(dy)`` returns the input gradient and *accumulates* parameter
  gradients into ``Param.grad`` (call ``zero_grad`` between optimizer steps);
* weight init is uniform(-b, b) with b = sqrt(6 / fan_in), biases zero.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from ..tensor import Rng

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh form: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


class Param:
    """A named parameter array with a same-shaped gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)


class Module:
    """Base for layers and containers; tracks params and children by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Param):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        """Yield (qualified_name, Param) in deterministic registration order."""
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad[...] = 0

    def param_count(self) -> int:
        return sum(p.value.size for _, p in self.named_parameters())

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


class Sequential(Module):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self._children[str(i)] = layer

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def __len__(self):
        return len(self.layers)


def _kaiming_uniform(rng: Rng, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return (rng.uniform(shape, dtype=np.float64) * 2.0 - 1.0).astype(dtype) * dtype.type(bound)


class Conv2d(Module):
    """KxK convolution (cross-correlation), zero 'same' padding, optional stride.

    ``init`` is ``"kaiming"`` or ``"zero"`` (zero is used for output
    projections so a fresh model starts as the identity).
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, bias: bool = True, init: str = "kaiming",
                 rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ShapeError("kernel_size must be odd")
        dtype = np.dtype(dtype)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        shape = (kernel_size, kernel_size, in_channels, out_channels)
        if init == "zero":
            w = np.zeros(shape, dtype=dtype)
        elif init == "kaiming":
            w = _kaiming_uniform(rng, shape, kernel_size * kernel_size * in_channels, dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Param(w)
        self.bias = Param(np.zeros(out_channels, dtype=dtype)) if bias else None

    def _pads(self, h, w):
        k, s = self.kernel_size, self.stride
        ho = -(-h // s)
        wo = -(-w // s)
        th = max((ho - 1) * s + k - h, 0)
        tw = max((wo - 1) * s + k - w, 0)
        return ho, wo, th // 2, th - th // 2, tw // 2, tw - tw // 2

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise ShapeError(f"expected [H,W,{self.in_channels}], got {x.shape}")
        h, w, _ = x.shape
        ho, wo, pt, pb, pl, pr = self._pads(h, w)
        xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0)))
        self._xp = xp
        self._dims = (h, w, ho, wo, pt, pl)
        k, s = self.kernel_size, self.stride
        wgt = self.weight.value
        out = np.zeros((ho, wo, self.out_channels), dtype=x.dtype)
        for a in range(k):
            for b in range(k):
                out += xp[a:a + (ho - 1) * s + 1:s, b:b + (wo - 1) * s + 1:s] @ wgt[a, b]
        if self.bias is not None:
            out += self.bias.value
        return out

    def backward(self, dy):
        xp = self._xp
        h, w, ho, wo, pt, pl = self._dims
        k, s = self.kernel_size, self.stride
        wgt = self.weight.value
        dxp = np.zeros_like(xp)
        for a in range(k):
            for b in range(k):
                sl = (slice(a, a + (ho - 1) * s + 1, s), slice(b, b + (wo - 1) * s + 1, s))
                self.weight.grad[a, b] += np.einsum("hwc,hwd->cd", xp[sl], dy)
                dxp[sl] += dy @ wgt[a, b].T
        if self.bias is not None:
            self.bias.grad += dy.sum(axis=(0, 1))
        return dxp[pt:pt + h, pl:pl + w]


class DepthwiseConv3x3(Module):
    """Per-channel 3x3 convolution, stride 1, zero 'same' padding."""

    def __init__(self, channels: int, init: str = "kaiming",
                 rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        dtype = np.dtype(dtype)
        self.channels = channels
        if init == "delta":
            k = np.zeros((3, 3, channels), dtype=dtype)
            k[1, 1, :] = 1
        elif init == "kaiming":
            k = _kaiming_uniform(rng, (3, 3, channels), 9, dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.kernel = Param(k)
        self.bias = Param(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.channels:
            raise ShapeError(f"expected [H,W,{self.channels}], got {x.shape}")
        h, w, c = x.shape
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        self._xp = xp
        self._hw = (h, w)
        ker = self.kernel.value
        out = np.zeros_like(x)
        for a in range(3):
            for b in range(3):
                out += xp[a:a + h, b:b + w] * ker[a, b]
        return out + self.bias.value

    def backward(self, dy):
        xp = self._xp
        h, w = self._hw
        ker = self.kernel.value
        dxp = np.zeros_like(xp)
        for a in range(3):
            for b in range(3):
                sl = (slice(a, a + h), slice(b, b + w))
                self.kernel.grad[a, b] += np.einsum("hwc,hwc->c", xp[sl], dy)
                dxp[sl] += dy * ker[a, b]
        self.bias.grad += dy.sum(axis=(0, 1))
        return dxp[1:1 + h, 1:1 + w]


class ChannelLayerNorm(Module):
    """Per-pixel normalization across channels, then learned scale and shift."""

    EPS = 1e-6

    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        dtype = np.dtype(dtype)
        self.channels = channels
        self.gamma = Param(np.ones(channels, dtype=dtype))
        self.beta = Param(np.zeros(channels, dtype=dtype))

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.channels:
            raise ShapeError(f"expected [H,W,{self.channels}], got {x.shape}")
        mu = x.mean(axis=2, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + x.dtype.type(self.EPS))
        xhat = xc * inv
        self._xhat = xhat
        self._inv = inv
        return self.gamma.value * xhat + self.beta.value

    def backward(self, dy):
        xhat, inv = self._xhat, self._inv
        dxhat = dy * self.gamma.value
        self.gamma.grad += np.sum(dy * xhat, axis=(0, 1))
        self.beta.grad += dy.sum(axis=(0, 1))
        mean_d = dxhat.mean(axis=2, keepdims=True)
        mean_dx = np.mean(dxhat * xhat, axis=2, keepdims=True)
        return inv * (dxhat - mean_d - xhat * mean_dx)


class MultiHeadChannelAttention(Module):
    """Attention across the channel dimension (a C x C map instead of HW x HW).

    Queries, keys, and values come from 1x1 convolutions. Per head, the
    attention matrix is ``softmax(K @ Q^T / scale)`` with the softmax over the
    dimension contracted against V, so each output channel's weights sum to 1.
    ``scale`` is one learnable scalar per head (init 1). The output projection
    result is added to the input when ``residual`` is set.
    """

    def __init__(self, channels: int, heads: int, residual: bool = True,
                 rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        if channels % heads:
            raise ShapeError(f"channels {channels} not divisible by heads {heads}")
        dtype = np.dtype(dtype)
        self.channels = channels
        self.heads = heads
        self.residual = residual
        self.to_q = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.to_k = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.to_v = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.proj = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.attn_scale = Param(np.ones(heads, dtype=dtype))

    def _split(self, x, h, w):
        # [H,W,C] -> [heads, C/heads, H*W]
        return x.reshape(h * w, self.heads, -1).transpose(1, 2, 0)

    def _merge(self, x, h, w):
        return x.transpose(2, 0, 1).reshape(h, w, self.channels)

    def forward(self, x):
        h, w, _ = x.shape
        q = self._split(self.to_q(x), h, w)
        k = self._split(self.to_k(x), h, w)
        v = self._split(self.to_v(x), h, w)
        scale = self.attn_scale.value[:, None, None]
        scores = np.einsum("hcp,hdp->hcd", k, q)
        m = scores / scale
        m = m - m.max(axis=2, keepdims=True)
        a = np.exp(m)
        a /= a.sum(axis=2, keepdims=True)
        out = np.einsum("hcd,hdp->hcp", a, v)
        self._cache = (x, q, k, v, a, scores)
        y = self.proj(self._merge(out, h, w))
        return y + x if self.residual else y

    def attention_matrix(self, x) -> np.ndarray:
        """Return the [heads, C/h, C/h] attention map for an input (test hook)."""
        self.forward(x)
        return self._cache[4]

    def backward(self, dy):
        x, q, k, v, a, scores = self._cache
        h, w, _ = x.shape
        dout = self._split(self.proj.backward(dy), h, w)
        da = np.einsum("hcp,hdp->hcd", dout, v)
        dv = np.einsum("hcd,hcp->hdp", a, dout)
        # softmax backward (rows of `a` sum to 1)
        dm = a * (da - np.sum(da * a, axis=2, keepdims=True))
        scale = self.attn_scale.value[:, None, None]
        dscores = dm / scale
        self.attn_scale.grad += -np.sum(dm * scores, axis=(1, 2)) / self.attn_scale.value ** 2
        dk = np.einsum("hcd,hdp->hcp", dscores, q)
        dq = np.einsum("hcd,hcp->hdp", dscores, k)
        dx = self.to_q.backward(self._merge(dq, h, w))
        dx = dx + self.to_k.backward(self._merge(dk, h, w))
        dx = dx + self.to_v.backward(self._merge(dv, h, w))
        return dx + dy if self.residual else dx


class LocalFeedForward(Module):
    """Pointwise expand -> depthwise 3x3 -> GELU -> pointwise project (+ residual).

    The depthwise stage mixes spatially neighboring pixels at high resolution,
    which is what distinguishes this block from a plain MLP.
    """

    def __init__(self, channels: int, expansion: float = 2.0, residual: bool = True,
                 rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.hidden = math.ceil(expansion * channels)
        self.residual = residual
        self.expand = Conv2d(channels, self.hidden, 1, rng=rng, dtype=dtype)
        self.dw = DepthwiseConv3x3(self.hidden, rng=rng, dtype=dtype)
        self.proj = Conv2d(self.hidden, channels, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        pre = self.dw(self.expand(x))
        self._pre = pre
        y = self.proj(gelu(pre))
        return y + x if self.residual else y

    def backward(self, dy):
        dpre = self.proj.backward(dy) * gelu_grad(self._pre)
        dx = self.expand.backward(self.dw.backward(dpre))
        return dx + dy if self.residual else dx


class TransformerLayer(Module):
    """Pre-norm block: x + attn(norm(x)), then u + ffn(norm(u))."""

    def __init__(self, channels: int, heads: int, expansion: float = 2.0,
                 rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        self.norm1 = ChannelLayerNorm(channels, dtype=dtype)
        self.attn = MultiHeadChannelAttention(channels, heads, residual=False,
                                              rng=rng, dtype=dtype)
        self.norm2 = ChannelLayerNorm(channels, dtype=dtype)
        self.ffn = LocalFeedForward(channels, expansion, residual=False,
                                    rng=rng, dtype=dtype)

    def forward(self, x):
        u = x + self.attn(self.norm1(x))
        return u + self.ffn(self.norm2(u))

    def backward(self, dy):
        du = dy + self.norm2.backward(self.ffn.backward(dy))
        return du + self.norm1.backward(self.attn.backward(du))


class ConvBlock(Module):
    """Two 3x3 convolutions with a GELU between, plus residual.

    Drop-in replacement for :class:`TransformerLayer` in the
    convolution-backbone ablation; channel count is preserved.
    """

    def __init__(self, channels: int, heads: int = 1, expansion: float = 2.0,
                 rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)

    def forward(self, x):
        pre = self.conv1(x)
        self._pre = pre
        return x + self.conv2(gelu(pre))

    def backward(self, dy):
        dpre = self.conv2.backward(dy) * gelu_grad(self._pre)
        return dy + self.conv1.backward(dpre)


class DownsampleLearned(Module):
    """Stride-2 3x3 convolution doubling the channel count; needs even dims."""

    def __init__(self, channels: int, rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(channels, 2 * channels, 3, stride=2, rng=rng, dtype=dtype)

    def forward(self, x):
        if x.shape[0] % 2 or x.shape[1] % 2:
            raise ShapeError(f"downsample needs even dims, got {x.shape[:2]}")
        return self.conv(x)

    def backward(self, dy):
        return self.conv.backward(dy)


class UpsampleLearned(Module):
    """Nearest 2x upsampling followed by a 3x3 convolution halving channels."""

    def __init__(self, channels: int, rng: Rng | None = None, dtype=np.float32):
        super().__init__()
        if channels % 2:
            raise ShapeError("upsample needs an even channel count")
        self.conv = Conv2d(channels, channels // 2, 3, rng=rng, dtype=dtype)

    def forward(self, x):
        up = np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)
        return self.conv(up)

    def backward(self, dy):
        dup = self.conv.backward(dy)
        h, w, c = dup.shape
        return dup.reshape(h // 2, 2, w // 2, 2, c).sum(axis=(1, 3))
