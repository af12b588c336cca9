"""Dense array primitives: convolution, warping, resampling, and seeded RNG.

Arrays are plain ``numpy.ndarray`` with an ``[H, W, C]`` layout for images
and feature maps. All operations here are pure functions: they never mutate
their inputs and hold no hidden state, so they are safe to call from multiple
threads. The only stateful object is :class:`Rng`, which is single-owner.

Two precisions are in play. Production paths run in float32; float64 exists
for gradient checking and identity tests, where the functions simply follow
the dtype of their input.
"""

from __future__ import annotations

import hashlib
import math
import struct

import numpy as np

from .errors import NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32

_PADDING_MODES = ("same", "same_edge", "valid")


def check_finite(arr: np.ndarray, what: str = "input") -> None:
    """Raise NonFiniteError if *arr* contains NaN or Inf."""
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains non-finite values")


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """(out_size, pad_before, pad_after) for ceil-mode 'same' padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    before = total // 2
    return out, before, total - before


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1,
           padding: str = "same") -> np.ndarray:
    """2-D cross-correlation of an [H,W,Cin] array with a [kh,kw,Cin,Cout] kernel.

    Semantics are cross-correlation (no kernel flip)::

        out[i, j, d] = sum_{a,b,c} pad(x)[i*stride + a, j*stride + b, c] * kernel[a, b, c, d]

    Padding modes:

    * ``"same"``      -- zero fill; output spatial dims are ceil(H/stride) x ceil(W/stride);
      requires odd kernel dims.
    * ``"same_edge"`` -- like ``"same"`` but replicating the border (used for
      blurring, where zero fill would darken edges).
    * ``"valid"``     -- no padding; output is (H-kh)//stride+1 x (W-kw)//stride+1.
    """
    if padding not in _PADDING_MODES:
        raise ValueError(f"unknown padding mode {padding!r}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects [H,W,Cin] and [kh,kw,Cin,Cout], "
                         f"got {x.shape} and {kernel.shape}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, image has {cin}")
    if kh > h or kw > w:
        if padding == "valid":
            raise ShapeError("kernel larger than image under valid padding")
    check_finite(x, "conv2d input")

    if padding == "valid":
        ho = (h - kh) // stride + 1
        wo = (w - kw) // stride + 1
        xp = x
    else:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("same padding requires odd kernel dims")
        ho, pt, pb = _same_padding(h, kh, stride)
        wo, pl, pr = _same_padding(w, kw, stride)
        mode = "constant" if padding == "same" else "edge"
        xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0)), mode=mode)

    out = np.zeros((ho, wo, cout), dtype=np.result_type(x, kernel))
    k = kernel.astype(out.dtype, copy=False)
    for a in range(kh):
        for b in range(kw):
            sl = xp[a:a + (ho - 1) * stride + 1:stride,
                    b:b + (wo - 1) * stride + 1:stride]
            out += sl @ k[a, b]
    return out


def warp_bilinear(x: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp an [H,W,C] image by a per-pixel displacement field.

    ``out[r, c] = x[r + flow[r,c,1], c + flow[r,c,0]]`` with bilinear
    interpolation; flow channel 0 is the horizontal (column) displacement and
    channel 1 the vertical (row) displacement, both in pixels. Samples outside
    the image clamp to the nearest edge pixel. Zero flow is a bit-exact
    identity.
    """
    if x.ndim != 3:
        raise ShapeError(f"expected [H,W,C] image, got {x.shape}")
    h, w, _ = x.shape
    if flow.shape != (h, w, 2):
        raise ShapeError(f"flow must be [{h},{w},2], got {flow.shape}")
    check_finite(x, "warp input")
    check_finite(flow, "flow field")

    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xs = np.clip(cols + flow[..., 0], 0, w - 1)
    ys = np.clip(rows + flow[..., 1], 0, h - 1)

    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(x.dtype)[..., None]
    fy = (ys - y0).astype(x.dtype)[..., None]

    top = (1 - fx) * x[y0, x0] + fx * x[y0, x1]
    bot = (1 - fx) * x[y1, x0] + fx * x[y1, x1]
    return (1 - fy) * top + fy * bot


def downsample2x(x: np.ndarray) -> np.ndarray:
    """Parameter-free 2x2 average pooling; requires even spatial dims."""
    if x.ndim != 3:
        raise ShapeError(f"expected [H,W,C], got {x.shape}")
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample2x needs even dims, got {h}x{w}")
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x upsampling (each pixel duplicated into a 2x2 block)."""
    if x.ndim != 3:
        raise ShapeError(f"expected [H,W,C], got {x.shape}")
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def gaussian_kernel(sigma: float, radius: int | None = None,
                    dtype=np.float64) -> np.ndarray:
    """Square 2-D Gaussian kernel of side ``2*radius + 1``, normalized to sum 1.

    ``sigma == 0`` yields a delta kernel. The default radius is
    ``ceil(3*sigma)``, which captures >99% of the mass.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if radius is None:
        radius = int(math.ceil(3 * sigma))
    if radius < 0:
        raise ValueError("radius must be >= 0")
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    if sigma == 0:
        g = (d == 0).astype(np.float64)
    else:
        g = np.exp(-(d * d) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    k /= k.sum()
    return k.astype(dtype)


def gaussian_blur(img: np.ndarray, sigma: float, radius: int | None = None) -> np.ndarray:
    """Blur each channel of an [H,W,C] image with a normalized Gaussian.

    Uses edge-replicating padding so the mean brightness is approximately
    conserved (no dark halo).
    """
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma, radius, dtype=img.dtype)[:, :, None, None]
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c:c + 1] = conv2d(img[:, :, c:c + 1], k, padding="same_edge")
    return out


# ---------------------------------------------------------------------------
# Deterministic RNG
# ---------------------------------------------------------------------------

_SEED_MASK = (1 << 64) - 1


def derive_seed(master_seed: int, *parts: int | str) -> int:
    """Derive a 64-bit sub-seed from a master seed and a label path.

    The derivation is SHA-256 over a canonical little-endian encoding, so it
    is identical on every platform and safe to persist (e.g. per-sample seeds
    recorded in a dataset manifest).
    """
    h = hashlib.sha256()
    h.update(b"turbkit-seed-v1")
    h.update(struct.pack("<Q", int(master_seed) & _SEED_MASK))
    for part in parts:
        if isinstance(part, (int, np.integer)):
            h.update(b"i" + struct.pack("<Q", int(part) & _SEED_MASK))
        elif isinstance(part, str):
            h.update(b"s" + part.encode("utf-8") + b"\x00")
        else:
            raise TypeError(f"seed parts must be int or str, got {type(part)!r}")
    return int.from_bytes(h.digest()[:8], "little")


class Rng:
    """Counter-based random generator (numpy Philox) with a fixed 64-bit seed.

    Philox is a counter-based algorithm: the stream is a pure function of the
    key, so identical seeds produce byte-identical streams on every platform
    and across process restarts. Instances are single-owner; never share one
    across threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed & _SEED_MASK))

    def spawn(self, *parts: int | str) -> "Rng":
        """Independent child generator keyed by ``derive_seed(seed, *parts)``."""
        return Rng(derive_seed(self.seed, *parts))

    def normal(self, shape=(), std: float = 1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        out = self._gen.standard_normal(size=shape, dtype=np.dtype(dtype))
        if std != 1.0:
            out = out * np.asarray(std, dtype=out.dtype)
        return out

    def uniform(self, shape=(), dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.random(size=shape, dtype=np.dtype(dtype))

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=False)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
