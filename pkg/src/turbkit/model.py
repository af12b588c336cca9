"""Restoration network: U-shaped channel-attention backbone with two heads.

The backbone encodes the degraded frame through four stages (each halving
resolution and doubling width via learned downsampling) and decodes back up
with additive encoder-to-decoder skip connections. Two heads consume the
full-resolution features:

* the reconstruction head predicts the clean frame (added to the input when
  ``global_residual`` is on, so a freshly built model is the identity);
* the degradation head takes that *restored image* and re-applies a learned
  degradation operator, producing a re-degraded frame whose distance to the
  network input drives the self-supervised loss term. Its pre-output
  activation is exposed as the "turbulence map" for visualization.

Inputs of arbitrary size are reflect-padded up to a multiple of 16 and the
outputs cropped back.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError, TurbkitError
from .metrics import psnr
from .nn.layers import (
    ChannelLayerNorm,
    Conv2d,
    ConvBlock,
    Module,
    Sequential,
    TransformerLayer,
)
from .tensor import Rng

PAD_MULTIPLE = 16


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches. Defaults are the desk-scale (toy) configuration."""

    stage_depths: tuple[int, int, int, int] = (1, 1, 1, 2)
    base_channels: int = 8
    heads_per_stage: tuple[int, int, int, int] = (1, 2, 4, 8)
    recon_depth: int = 1
    degrade_depth: int = 1
    ffn_expansion: float = 2.0
    in_channels: int = 3
    global_residual: bool = True
    backbone_kind: str = "transformer"
    use_degradation_head: bool = True

    def __post_init__(self):
        if len(self.stage_depths) != 4 or len(self.heads_per_stage) != 4:
            raise ValueError("stage_depths and heads_per_stage must have 4 entries")
        if any(d < 1 for d in self.stage_depths):
            raise ValueError("all stage depths must be >= 1")
        if self.recon_depth < 1 or self.degrade_depth < 1:
            raise ValueError("head depths must be >= 1")
        if self.backbone_kind not in ("transformer", "conv"):
            raise ValueError(f"unknown backbone_kind {self.backbone_kind!r}")
        for s in range(4):
            width = self.base_channels * (1 << s)
            if width % self.heads_per_stage[s]:
                raise ValueError(f"stage {s} width {width} not divisible by "
                                 f"{self.heads_per_stage[s]} heads")

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        """Full-scale variant: stage depths (4, 6, 6, 8), 4-layer heads."""
        return cls(stage_depths=(4, 6, 6, 8), base_channels=48,
                   heads_per_stage=(1, 2, 4, 8), recon_depth=4, degrade_depth=4)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        d["heads_per_stage"] = list(self.heads_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stage_depths"] = tuple(d["stage_depths"])
        d["heads_per_stage"] = tuple(d["heads_per_stage"])
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    """Blend between the supervised and self-supervised loss terms."""

    alpha_loss: float = 0.9

    def __post_init__(self):
        if not (0.0 <= self.alpha_loss <= 1.0):
            raise ValueError(f"alpha_loss must be in [0,1], got {self.alpha_loss}")


@dataclass
class LossTerms:
    total: float
    recon: float | None  # mean-L1(restored, clean); None on unsupervised steps
    cycle: float         # mean-L1(redegraded, degraded)


@dataclass
class ModelOutput:
    restored: np.ndarray
    redegraded: np.ndarray
    turbulence_map: np.ndarray | None = None


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(n + pad)
    if n == 1:
        return np.zeros(n + pad, dtype=np.intp)
    period = 2 * (n - 1)
    j = idx % period
    return np.where(j < n, j, period - j)


def _block(kind: str, channels: int, heads: int, expansion: float, rng, dtype) -> Module:
    if kind == "conv":
        return ConvBlock(channels, rng=rng, dtype=dtype)
    return TransformerLayer(channels, heads, expansion, rng=rng, dtype=dtype)


class _Downsample(Module):
    # Wrapper kept distinct from nn.DownsampleLearned so stage widths stay explicit.
    def __init__(self, channels, rng, dtype):
        super().__init__()
        self.conv = Conv2d(channels, 2 * channels, 3, stride=2, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.conv(x)

    def backward(self, dy):
        return self.conv.backward(dy)


class _Upsample(Module):
    def __init__(self, channels, rng, dtype):
        super().__init__()
        self.conv = Conv2d(channels, channels // 2, 3, rng=rng, dtype=dtype)

    def forward(self, x):
        return self.conv(np.repeat(np.repeat(x, 2, axis=0), 2, axis=1))

    def backward(self, dy):
        dup = self.conv.backward(dy)
        h, w, c = dup.shape
        return dup.reshape(h // 2, 2, w // 2, 2, c).sum(axis=(1, 3))


class TurbNetModel(Module):
    """Backbone plus reconstruction and degradation heads.

    ``init="random"`` fills even the normally zero-initialized output
    projections with random weights; gradient checks use it to avoid starting
    on the kink of the L1 loss.
    """

    def __init__(self, config: ModelConfig, rng: Rng, dtype=np.float32,
                 init: str = "default"):
        super().__init__()
        dtype = np.dtype(dtype)
        self.config = config
        self.dtype = dtype
        c0 = config.base_channels
        kind = config.backbone_kind
        exp = config.ffn_expansion
        final_init = "zero" if init == "default" else "kaiming"

        def stage(s):
            width = c0 * (1 << s)
            return Sequential([
                _block(kind, width, config.heads_per_stage[s], exp, rng, dtype)
                for _ in range(config.stage_depths[s])
            ])

        self.input_proj = Conv2d(config.in_channels, c0, 3, rng=rng, dtype=dtype)
        self.enc0, self.enc1, self.enc2, self.enc3 = (stage(s) for s in range(4))
        self.down0 = _Downsample(c0, rng, dtype)
        self.down1 = _Downsample(2 * c0, rng, dtype)
        self.down2 = _Downsample(4 * c0, rng, dtype)
        # Decoder mirrors the encoder: a stage at the bottleneck width, then
        # upsample + additive skip + stage at each higher resolution.
        self.dec3 = stage(3)
        self.up2 = _Upsample(8 * c0, rng, dtype)
        self.dec2 = stage(2)
        self.up1 = _Upsample(4 * c0, rng, dtype)
        self.dec1 = stage(1)
        self.up0 = _Upsample(2 * c0, rng, dtype)
        self.dec0 = stage(0)

        self.recon_body = Sequential([
            _block(kind, c0, config.heads_per_stage[0], exp, rng, dtype)
            for _ in range(config.recon_depth)
        ])
        self.recon_out = Conv2d(c0, config.in_channels, 3, init=final_init,
                                rng=rng, dtype=dtype)

        # The degradation head is always built (even when disabled) so that
        # weight initialization consumes the same RNG stream either way; the
        # flag only controls whether forward() uses it.
        self.degrade_in = Conv2d(config.in_channels, c0, 3, rng=rng, dtype=dtype)
        self.degrade_body = Sequential([
            _block(kind, c0, config.heads_per_stage[0], exp, rng, dtype)
            for _ in range(config.degrade_depth)
        ])
        self.degrade_out = Conv2d(c0, config.in_channels, 3, init=final_init,
                                  rng=rng, dtype=dtype)

    # -- padding ----------------------------------------------------------

    def _pad_input(self, x):
        h, w, _ = x.shape
        ph = (-h) % PAD_MULTIPLE
        pw = (-w) % PAD_MULTIPLE
        if ph == 0 and pw == 0:
            return x, None
        iy = _reflect_index(h, ph)
        ix = _reflect_index(w, pw)
        return x[iy][:, ix], (h, w, iy, ix)

    def _unpad_grad(self, d, pad_info):
        if pad_info is None:
            return d
        h, w, iy, ix = pad_info
        acc_rows = np.zeros((h, d.shape[1], d.shape[2]), dtype=d.dtype)
        np.add.at(acc_rows, iy, d)
        acc = np.zeros((w, h, d.shape[2]), dtype=d.dtype)
        np.add.at(acc, ix, acc_rows.transpose(1, 0, 2))
        return acc.transpose(1, 0, 2)

    # -- forward / backward -------------------------------------------------

    def _checked(self, name, value):
        if not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite activations after {name}")
        return value

    def _backbone_forward(self, xp):
        t = self._checked("input_proj", self.input_proj(xp))
        skips = []
        for s, (enc, down) in enumerate([(self.enc0, self.down0),
                                         (self.enc1, self.down1),
                                         (self.enc2, self.down2)]):
            t = self._checked(f"enc{s}", enc(t))
            skips.append(t)
            t = self._checked(f"down{s}", down(t))
        t = self.enc3(t)
        t = self._checked("dec3", self.dec3(t))
        for s, (up, dec) in ((2, (self.up2, self.dec2)),
                             (1, (self.up1, self.dec1)),
                             (0, (self.up0, self.dec0))):
            t = up(t)
            t = t + skips[s]
            t = self._checked(f"dec{s}", dec(t))
        return t

    def _backbone_backward(self, dt):
        dskips = [None, None, None]
        for s, (up, dec) in ((0, (self.up0, self.dec0)),
                             (1, (self.up1, self.dec1)),
                             (2, (self.up2, self.dec2))):
            dt = dec.backward(dt)
            dskips[s] = dt
            dt = up.backward(dt)
        dt = self.dec3.backward(dt)
        dt = self.enc3.backward(dt)
        for s, (enc, down) in ((2, (self.enc2, self.down2)),
                               (1, (self.enc1, self.down1)),
                               (0, (self.enc0, self.down0))):
            dt = down.backward(dt)
            dt = dt + dskips[s]
            dt = enc.backward(dt)
        return self.input_proj.backward(dt)

    def forward(self, degraded: np.ndarray) -> ModelOutput:
        if degraded.ndim != 3 or degraded.shape[2] != self.config.in_channels:
            raise ShapeError(f"expected [H,W,{self.config.in_channels}], "
                             f"got {degraded.shape}")
        x = degraded.astype(self.dtype, copy=False)
        xp, pad_info = self._pad_input(x)
        self._pad_info = pad_info

        feat = self._backbone_forward(xp)
        pred = self.recon_out(self.recon_body(feat))
        restored_p = pred + xp if self.config.global_residual else pred
        self._checked("recon_head", restored_p)

        turb_map_p = None
        if self.config.use_degradation_head:
            g = self.degrade_body(self.degrade_in(restored_p))
            turb_map_p = g
            redegraded_p = self.degrade_out(g) + restored_p
            self._checked("degrade_head", redegraded_p)
        else:
            redegraded_p = restored_p

        h, w, _ = degraded.shape
        crop = (slice(0, h), slice(0, w))
        return ModelOutput(
            restored=restored_p[crop],
            redegraded=redegraded_p[crop],
            turbulence_map=None if turb_map_p is None else turb_map_p[crop],
        )

    def backward(self, d_restored: np.ndarray, d_redegraded: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for the most recent forward pass.

        Takes the loss gradients w.r.t. the (cropped) restored and redegraded
        outputs; returns the gradient w.r.t. the network input.
        """
        pad_info = self._pad_info
        if pad_info is None:
            dr_p, dd_p = d_restored, d_redegraded
        else:
            hp = len(pad_info[2])
            wp = len(pad_info[3])
            dr_p = np.zeros((hp, wp, d_restored.shape[2]), dtype=d_restored.dtype)
            dd_p = np.zeros_like(dr_p)
            dr_p[:d_restored.shape[0], :d_restored.shape[1]] = d_restored
            dd_p[:d_redegraded.shape[0], :d_redegraded.shape[1]] = d_redegraded

        if self.config.use_degradation_head:
            dg = self.degrade_out.backward(dd_p)
            d_restored_total = dr_p + dd_p + self.degrade_in.backward(
                self.degrade_body.backward(dg))
        else:
            d_restored_total = dr_p + dd_p

        dfeat = self.recon_body.backward(self.recon_out.backward(d_restored_total))
        dxp = self._backbone_backward(dfeat)
        if self.config.global_residual:
            dxp = dxp + d_restored_total
        return self._unpad_grad(dxp, pad_info)

    # -- degradation operator ----------------------------------------------

    def apply_degradation_head(self, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Run the learned degradation operator on an image.

        Returns (degraded_prediction, turbulence_map). The head is fully
        convolutional with stride 1, so no padding is needed.
        """
        if not self.config.use_degradation_head:
            raise TurbkitError("degradation head is disabled in this model config")
        x = img.astype(self.dtype, copy=False)
        g = self.degrade_body(self.degrade_in(x))
        return self.degrade_out(g) + x, g


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def loss(output: ModelOutput, clean: np.ndarray | None, degraded: np.ndarray,
         weights: LossWeights, supervised: bool = True) -> LossTerms:
    """Blended restoration loss.

    Supervised: ``alpha * L1(restored, clean) + (1-alpha) * L1(redegraded,
    degraded)``. Unsupervised (no clean reference): the re-degradation term
    alone. Both terms are mean absolute error.
    """
    terms, _, _ = loss_with_grads(output, clean, degraded, weights, supervised)
    return terms


def loss_with_grads(output: ModelOutput, clean: np.ndarray | None,
                    degraded: np.ndarray, weights: LossWeights,
                    supervised: bool = True,
                    grad_scale: float = 1.0):
    """Loss terms plus gradients w.r.t. the two model outputs."""
    restored, redegraded = output.restored, output.redegraded
    if redegraded.shape != degraded.shape:
        raise ShapeError(f"redegraded {redegraded.shape} vs degraded {degraded.shape}")
    n = restored.size
    dtype = restored.dtype

    diff_cycle = redegraded - degraded
    cycle = float(np.mean(np.abs(diff_cycle)))

    if supervised:
        if clean is None:
            raise TurbkitError("supervised loss requires a clean reference")
        if restored.shape != clean.shape:
            raise ShapeError(f"restored {restored.shape} vs clean {clean.shape}")
        alpha = weights.alpha_loss
        diff_recon = restored - clean
        recon = float(np.mean(np.abs(diff_recon)))
        total = alpha * recon + (1.0 - alpha) * cycle
        d_restored = np.sign(diff_recon) * dtype.type(alpha * grad_scale / n)
        d_redegraded = np.sign(diff_cycle) * dtype.type((1.0 - alpha) * grad_scale / n)
        return LossTerms(total, recon, cycle), d_restored, d_redegraded

    d_restored = np.zeros_like(restored)
    d_redegraded = np.sign(diff_cycle) * dtype.type(grad_scale / n)
    return LossTerms(cycle, None, cycle), d_restored, d_redegraded


def validate_turbulence_map(model: TurbNetModel, clean: np.ndarray,
                            degraded: np.ndarray) -> float:
    """PSNR between the learned operator applied to the clean frame and the
    actually degraded frame.

    A model whose operator has learned nothing (identity at init) scores the
    trivial baseline ``psnr(clean, degraded)``; a useful operator scores
    higher because it reproduces the real degradation.
    """
    predicted, _ = model.apply_degradation_head(clean)
    return psnr(degraded, predicted)


def param_count(config: ModelConfig) -> int:
    """Total parameter count for a config (deterministic in the config)."""
    return TurbNetModel(config, Rng(0)).param_count()
