"""Image-quality and text-recognition metrics.

PSNR and SSIM compare restored frames against clean references. The two
task-driven metrics score OCR output on scene datasets:

* word detection ratio — per scene, the fraction of ground-truth words that
  received a matching detection, averaged over scenes;
* detected-LCS score — per scene, the summed longest-common-subsequence
  length between each matched (detected, true) word pair, with the grand
  total divided by the number of scenes (not by word count, so scenes with
  more words can score higher).

Which detection corresponds to which ground-truth word is an *input*
(``word_matches``), normally produced by the OCR evaluation pipeline. A
greedy highest-LCS matcher is provided as a convenience for quick runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import conv2d, gaussian_kernel

#: Sentinel returned by :func:`psnr` when the two images are identical.
PSNR_INF = math.inf

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def psnr(ref: np.ndarray, test: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    if ref.shape != test.shape:
        raise ShapeError(f"psnr shape mismatch: {ref.shape} vs {test.shape}")
    diff = ref.astype(np.float64) - test.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def ssim(ref: np.ndarray, test: np.ndarray) -> float:
    """Mean structural similarity over an 11x11 Gaussian window (sigma 1.5).

    Computed per channel on the valid interior (no padding) and averaged;
    constants C1=0.01^2, C2=0.03^2 assume a unit dynamic range.
    """
    if ref.shape != test.shape:
        raise ShapeError(f"ssim shape mismatch: {ref.shape} vs {test.shape}")
    if ref.ndim != 3:
        raise ShapeError(f"expected [H,W,C] images, got {ref.shape}")
    h, w, _ = ref.shape
    if min(h, w) < _SSIM_WINDOW:
        raise ShapeError(f"image {h}x{w} is smaller than the {_SSIM_WINDOW}x"
                         f"{_SSIM_WINDOW} SSIM window")

    radius = (_SSIM_WINDOW - 1) // 2
    win = gaussian_kernel(_SSIM_SIGMA, radius)[:, :, None, None]

    def filt(img):
        return conv2d(img, win, padding="valid")

    x = ref.astype(np.float64)
    y = test.astype(np.float64)
    vals = []
    for c in range(x.shape[2]):
        xc = x[:, :, c:c + 1]
        yc = y[:, :, c:c + 1]
        mu_x = filt(xc)
        mu_y = filt(yc)
        var_x = filt(xc * xc) - mu_x * mu_x
        var_y = filt(yc * yc) - mu_y * mu_y
        cov = filt(xc * yc) - mu_x * mu_y
        num = (2 * mu_x * mu_y + _SSIM_C1) * (2 * cov + _SSIM_C2)
        den = (mu_x * mu_x + mu_y * mu_y + _SSIM_C1) * (var_x + var_y + _SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def lcs_length(a: str, b: str) -> int:
    """Length of the longest common *subsequence* (not substring); case-sensitive."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for ca in a:
        cur = [0]
        for j, cb in enumerate(b, start=1):
            if ca == cb:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


@dataclass
class OcrSceneResult:
    """OCR output for one scene: truth words, detections, and their pairing."""

    scene_id: str
    gt_words: list[str]
    detections: list[str]
    word_matches: list[tuple[int, int]] = field(default_factory=list)

    def validate(self) -> None:
        seen_gt = set()
        for gi, di in self.word_matches:
            if not (0 <= gi < len(self.gt_words)):
                raise ValueError(f"match gt_index {gi} out of range "
                                 f"(scene has {len(self.gt_words)} gt words)")
            if not (0 <= di < len(self.detections)):
                raise ValueError(f"match detection_index {di} out of range "
                                 f"(scene has {len(self.detections)} detections)")
            if gi in seen_gt:
                raise ValueError(f"gt_index {gi} appears in more than one match")
            seen_gt.add(gi)


@dataclass
class MetricsReport:
    """Aggregated evaluation numbers; fields are None when not computed."""

    psnr_db: float | None = None
    ssim: float | None = None
    awdr: float | None = None
    ad_lcs: float | None = None
    n_pairs: int = 0
    n_scenes: int = 0

    def to_dict(self) -> dict:
        return {
            "psnr_db": self.psnr_db,
            "ssim": self.ssim,
            "awdr": self.awdr,
            "ad_lcs": self.ad_lcs,
            "n_pairs": self.n_pairs,
            "n_scenes": self.n_scenes,
        }


def awdr(scenes: list[OcrSceneResult]) -> float:
    """Average word detection ratio: mean over scenes of matched/total gt words."""
    if not scenes:
        raise ValueError("awdr needs at least one scene")
    ratios = []
    for s in scenes:
        if not s.gt_words:
            raise ValueError(f"scene {s.scene_id!r} has zero gt words")
        s.validate()
        ratios.append(len(s.word_matches) / len(s.gt_words))
    return float(np.mean(ratios))


def ad_lcs(scenes: list[OcrSceneResult], ignore_case: bool = False) -> float:
    """Summed LCS over matched word pairs, divided by the number of scenes.

    Unmatched ground-truth words contribute zero. The divisor is the scene
    count, so the value grows with words-per-scene by design.
    """
    if not scenes:
        raise ValueError("ad_lcs needs at least one scene")
    total = 0
    for s in scenes:
        s.validate()
        for gi, di in s.word_matches:
            gt = s.gt_words[gi]
            det = s.detections[di]
            if ignore_case:
                gt, det = gt.lower(), det.lower()
            total += lcs_length(det, gt)
    return total / len(scenes)


def greedy_match(gt_words: list[str], detections: list[str],
                 ignore_case: bool = False) -> list[tuple[int, int]]:
    """Convenience matcher: repeatedly pair the highest-LCS (gt, detection) pair.

    Ties break by gt order, then detection order; pairs with zero LCS are not
    matched. This is a pragmatic default, not a canonical matching rule —
    real evaluations should supply ``word_matches`` from their own pipeline.
    """
    def score(g, d):
        if ignore_case:
            g, d = g.lower(), d.lower()
        return lcs_length(g, d)

    scores = {(gi, di): score(g, d)
              for gi, g in enumerate(gt_words)
              for di, d in enumerate(detections)}
    matches = []
    free_gt = set(range(len(gt_words)))
    free_det = set(range(len(detections)))
    while free_gt and free_det:
        best = max(((scores[(gi, di)], -gi, -di, gi, di)
                    for gi in free_gt for di in free_det))
        s, _, _, gi, di = best
        if s <= 0:
            break
        matches.append((gi, di))
        free_gt.remove(gi)
        free_det.remove(di)
    return sorted(matches)
