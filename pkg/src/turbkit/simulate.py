"""Simplified atmospheric-turbulence forward model and dataset synthesis.

A degraded frame is produced from a clean one by composing three effects, in
this order: a spatially correlated per-pixel displacement (tilt), a spatially
varying Gaussian blur, and additive sensor noise clipped back to [0, 1].
Each call draws a fresh random realization of the distortion fields, and the
fields themselves vary smoothly across the frame — the two behaviors a
spatially invariant blur model misses.

All randomness flows through :class:`turbkit.tensor.Rng`; a (params, seed)
pair reproduces a degraded image byte-identically.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as tio
from .errors import DataError, ShapeError
from .tensor import Rng, derive_seed, gaussian_blur, warp_bilinear

# Default linear map from D/r0 (dimensionless turbulence strength) to pixel
# magnitudes. Engineering constants; adjust per optical setup.
TILT_PX_PER_D_OVER_R0 = 0.8
BLUR_PX_PER_D_OVER_R0 = 0.5


@dataclass(frozen=True)
class TurbulenceParams:
    """Knobs of the turbulence forward model.

    ``d_over_r0`` is recorded for provenance (aperture over Fried parameter);
    the operative magnitudes are the tilt RMS, the blur range, and the noise
    level. ``corr_length_px`` sets the spatial scale over which the distortion
    fields vary.
    """

    d_over_r0: float = 3.0
    corr_length_px: float = 8.0
    tilt_rms_px: float = 2.4
    sigma_blur_min: float = 0.0
    sigma_blur_max: float = 1.5
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not (self.d_over_r0 > 0):
            raise ValueError(f"d_over_r0 must be > 0, got {self.d_over_r0}")
        if not (self.corr_length_px > 0):
            raise ValueError(f"corr_length_px must be > 0, got {self.corr_length_px}")
        for name in ("tilt_rms_px", "sigma_blur_min", "sigma_blur_max", "noise_sigma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.sigma_blur_min > self.sigma_blur_max:
            raise ValueError("sigma_blur_min must be <= sigma_blur_max")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TurbulenceParams":
        return cls(**d)


@dataclass
class DegradationField:
    """One random realization of the distortion: tilt vectors, blur widths, noise level.

    ``tilt`` is [H,W,2] in pixels (channel 0 horizontal, 1 vertical);
    ``sigma_map`` is [H,W,1] with per-pixel Gaussian blur std.
    """

    tilt: np.ndarray
    sigma_map: np.ndarray
    noise_sigma: float


def d_over_r0_to_params(d_over_r0: float, base: TurbulenceParams) -> TurbulenceParams:
    """Rescale tilt and blur magnitudes linearly with turbulence strength.

    ``tilt_rms_px = 0.8 * d_over_r0`` and ``sigma_blur_max = 0.5 * d_over_r0``;
    everything else is copied from *base* (``sigma_blur_min`` is clamped down
    if needed to keep the min <= max invariant).
    """
    if not (d_over_r0 > 0):
        raise ValueError(f"d_over_r0 must be > 0, got {d_over_r0}")
    sigma_max = BLUR_PX_PER_D_OVER_R0 * d_over_r0
    return dataclasses.replace(
        base,
        d_over_r0=d_over_r0,
        tilt_rms_px=TILT_PX_PER_D_OVER_R0 * d_over_r0,
        sigma_blur_max=sigma_max,
        sigma_blur_min=min(base.sigma_blur_min, sigma_max),
    )


def _smooth(field: np.ndarray, corr_length: float) -> np.ndarray:
    return gaussian_blur(field, corr_length)


def sample_degradation(params: TurbulenceParams, h: int, w: int, rng: Rng,
                       dtype=np.float32) -> DegradationField:
    """Draw one correlated realization of the distortion fields.

    Tilt: white Gaussian noise smoothed by a Gaussian of std
    ``corr_length_px``, mean-centered per component (a global mean tilt is
    just a camera shift), then rescaled so the RMS displacement magnitude
    equals ``tilt_rms_px`` exactly. Blur map: a smoothed uniform field,
    min-max normalized to [0,1] and mapped onto
    [sigma_blur_min, sigma_blur_max].
    """
    if h < 8 or w < 8:
        raise ShapeError(f"field dims must be >= 8, got {h}x{w}")

    if params.tilt_rms_px == 0:
        tilt = np.zeros((h, w, 2), dtype=dtype)
    else:
        tilt = rng.normal((h, w, 2), dtype=dtype)
        tilt = _smooth(tilt, params.corr_length_px)
        tilt -= tilt.mean(axis=(0, 1), keepdims=True)
        rms = float(np.sqrt(np.mean(np.sum(tilt.astype(np.float64) ** 2, axis=2))))
        if rms > 0:
            tilt *= np.asarray(params.tilt_rms_px / rms, dtype=dtype)

    if params.sigma_blur_max == params.sigma_blur_min:
        sigma_map = np.full((h, w, 1), params.sigma_blur_min, dtype=dtype)
    else:
        u = rng.uniform((h, w, 1), dtype=dtype)
        u = _smooth(u, params.corr_length_px)
        lo, hi = float(u.min()), float(u.max())
        if hi > lo:
            u = (u - lo) / (hi - lo)
        else:
            u = np.full_like(u, 0.5)
        sigma_map = params.sigma_blur_min + (params.sigma_blur_max - params.sigma_blur_min) * u

    return DegradationField(tilt=tilt, sigma_map=sigma_map,
                            noise_sigma=params.noise_sigma)


def apply_degradation(img: np.ndarray, field: DegradationField, rng: Rng,
                      blur_bins: int = 8) -> np.ndarray:
    """Degrade an image: warp by the tilt, blur per the sigma map, add noise.

    The spatially varying blur is approximated by quantizing the sigma map
    into ``blur_bins`` levels spanning its observed range, blurring the whole
    image once per level, and linearly interpolating each pixel between its
    two bracketing levels. A constant sigma map therefore reduces to a single
    exact global blur. Noise is i.i.d. Gaussian added at the end, followed by
    a clip to [0, 1]. With zero tilt, zero blur, and zero noise the function
    is an exact identity.
    """
    if img.ndim != 3:
        raise ShapeError(f"expected [H,W,C] image, got {img.shape}")
    h, w, _ = img.shape
    if field.tilt.shape != (h, w, 2):
        raise ShapeError(f"tilt shape {field.tilt.shape} does not match image {h}x{w}")
    if field.sigma_map.shape != (h, w, 1):
        raise ShapeError(f"sigma_map shape {field.sigma_map.shape} does not match image {h}x{w}")
    if blur_bins < 2:
        raise ValueError("blur_bins must be >= 2")

    out = img
    if np.any(field.tilt):
        out = warp_bilinear(out, field.tilt.astype(img.dtype, copy=False))

    lo = float(field.sigma_map.min())
    hi = float(field.sigma_map.max())
    if hi > 0:
        if hi == lo:
            out = gaussian_blur(out, lo)
        else:
            levels = np.linspace(lo, hi, blur_bins)
            stack = np.stack([gaussian_blur(out, float(s)) for s in levels])
            pos = (field.sigma_map[..., 0] - lo) / (hi - lo) * (blur_bins - 1)
            i0 = np.clip(np.floor(pos).astype(np.intp), 0, blur_bins - 2)
            t = (pos - i0).astype(img.dtype)[..., None]
            rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            out = (1 - t) * stack[i0, rr, cc] + t * stack[i0 + 1, rr, cc]

    if field.noise_sigma > 0:
        out = out + rng.normal(out.shape, std=field.noise_sigma, dtype=img.dtype)

    return np.clip(out, 0.0, 1.0)


def degrade_pair(clean: np.ndarray, params: TurbulenceParams, seed: int,
                 blur_bins: int = 8) -> np.ndarray:
    """Degrade one image deterministically from (params, seed)."""
    rng = Rng(seed)
    field = sample_degradation(params, clean.shape[0], clean.shape[1], rng,
                               dtype=clean.dtype)
    return apply_degradation(clean, field, rng, blur_bins=blur_bins)


def synthesize_dataset(clean_dir: str | Path, out_dir: str | Path,
                       params: TurbulenceParams, count: int,
                       blur_bins: int = 8) -> tio.SceneManifest:
    """Write ``count`` (clean, degraded) PNG pairs plus a manifest.

    Clean sources are the PNGs in *clean_dir* (sorted by name), cycled when
    ``count`` exceeds their number. Each pair gets its own sub-seed derived
    from ``params.seed`` and the pair index, recorded in the manifest, so
    re-running with identical inputs reproduces every degraded file
    byte-for-byte.
    """
    clean_dir = Path(clean_dir)
    out_dir = Path(out_dir)
    sources = sorted(p for p in clean_dir.glob("*.png") if p.is_file())
    if count > 0 and not sources:
        raise DataError(f"no .png images found in {clean_dir}")

    (out_dir / "clean").mkdir(parents=True, exist_ok=True)
    (out_dir / "degraded").mkdir(parents=True, exist_ok=True)

    params_record = params.to_dict()
    params_record["blur_bins"] = blur_bins
    entries = []
    for i in range(count):
        src = sources[i % len(sources)]
        clean = tio.load_image(src)
        pair_seed = derive_seed(params.seed, "pair", i)
        degraded = degrade_pair(clean, params, pair_seed, blur_bins=blur_bins)

        scene_id = f"pair_{i:05d}"
        clean_rel = f"clean/{scene_id}.png"
        degraded_rel = f"degraded/{scene_id}.png"
        tio.save_image(clean, out_dir / clean_rel)
        tio.save_image(degraded, out_dir / degraded_rel)
        entries.append(tio.ManifestEntry(
            scene_id=scene_id, degraded_path=degraded_rel, clean_path=clean_rel,
            seed=pair_seed, params=params_record))

    manifest = tio.SceneManifest(entries=entries, root=out_dir)
    tio.save_manifest(manifest, out_dir / "manifest.json")
    return manifest
