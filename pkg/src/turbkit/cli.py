"""Command-line entry point.

Subcommands cover the whole pipeline: ``simulate`` (synthesize degraded
datasets), ``train`` / ``finetune`` (optimization), ``infer`` (restore
images), ``eval`` (metrics report), and ``gradcheck`` (finite-difference
validation of every layer and of a micro end-to-end model).

Exit codes: 0 success, 1 domain error (bad data, failed check), 2 usage
error. All commands are deterministic given identical flags and seeds.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import io as tio
from . import metrics as tmetrics
from .errors import TurbkitError
from .model import ModelConfig, TurbNetModel, param_count
from .nn.gradcheck import gradcheck_layer, gradcheck_params
from .nn.layers import (
    ChannelLayerNorm,
    Conv2d,
    ConvBlock,
    DepthwiseConv3x3,
    DownsampleLearned,
    LocalFeedForward,
    MultiHeadChannelAttention,
    TransformerLayer,
    UpsampleLearned,
)
from .simulate import TurbulenceParams, d_over_r0_to_params, synthesize_dataset
from .tensor import Rng
from .train import Adam, TrainConfig, fine_tune_mixed, load_pairs, train

LAYER_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3

# name -> (factory(rng) -> layer, input shape); float64 throughout.
GRADCHECK_LAYERS = {
    "pointwise_conv": (lambda rng: Conv2d(6, 4, 1, rng=rng, dtype=np.float64), (5, 5, 6)),
    "conv3x3": (lambda rng: Conv2d(3, 5, 3, rng=rng, dtype=np.float64), (6, 5, 3)),
    "depthwise_conv3x3": (lambda rng: DepthwiseConv3x3(4, rng=rng, dtype=np.float64), (6, 5, 4)),
    "layernorm": (lambda rng: ChannelLayerNorm(6, dtype=np.float64), (4, 4, 6)),
    "channel_attention": (lambda rng: MultiHeadChannelAttention(4, 2, rng=rng, dtype=np.float64), (4, 4, 4)),
    "local_ffn": (lambda rng: LocalFeedForward(4, 2.0, rng=rng, dtype=np.float64), (4, 4, 4)),
    "transformer_layer": (lambda rng: TransformerLayer(4, 2, 2.0, rng=rng, dtype=np.float64), (4, 4, 4)),
    "conv_block": (lambda rng: ConvBlock(4, rng=rng, dtype=np.float64), (4, 4, 4)),
    "downsample": (lambda rng: DownsampleLearned(4, rng=rng, dtype=np.float64), (6, 6, 4)),
    "upsample": (lambda rng: UpsampleLearned(4, rng=rng, dtype=np.float64), (3, 3, 4)),
}

MICRO_CONFIG = ModelConfig(stage_depths=(1, 1, 1, 1), base_channels=4,
                           heads_per_stage=(1, 2, 4, 8), recon_depth=1,
                           degrade_depth=1)


def _merge_config(cls, defaults: dict, file_values: dict, flag_values: dict,
                  label: str, quiet: bool = False):
    """Apply precedence flags > config file > defaults, printing provenance."""
    merged = dict(defaults)
    source = {k: "default" for k in merged}
    for k, v in file_values.items():
        if k not in merged:
            raise TurbkitError(f"unknown {label} config key {k!r}")
        merged[k] = v
        source[k] = "config-file"
    for k, v in flag_values.items():
        if v is None:
            continue
        merged[k] = v
        source[k] = "flag"
    if not quiet:
        for k in sorted(merged):
            print(f"{label}.{k} = {merged[k]!r} ({source[k]})", file=sys.stderr)
    return cls.from_dict(merged)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise TurbkitError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise TurbkitError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise TurbkitError(f"{path}: config must be a JSON object")
    return doc


def _tuple_fields(d: dict) -> dict:
    d = dict(d)
    for key in ("stage_depths", "heads_per_stage"):
        if key in d and isinstance(d[key], list):
            d[key] = tuple(d[key])
    return d


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    base = TurbulenceParams(seed=args.seed,
                            corr_length_px=args.corr_length,
                            noise_sigma=args.noise)
    params = d_over_r0_to_params(args.d_over_r0, base)
    manifest = synthesize_dataset(args.clean, args.out, params, args.count,
                                  blur_bins=args.blur_bins)
    print(f"wrote {len(manifest.entries)} pairs to {args.out}")
    return 0


def _resolve_train_configs(args, in_channels: int | None, quiet=False):
    doc = _load_config_file(getattr(args, "config", None))
    model_file = _tuple_fields(doc.get("model", {}))
    train_file = doc.get("train", {})
    model_flags = {}
    if in_channels is not None:
        model_flags["in_channels"] = in_channels
    train_flags = {
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr_init": getattr(args, "lr", None),
        "seed": getattr(args, "seed", None),
        "alpha_loss": getattr(args, "alpha", None),
        "mix_ratio_real": getattr(args, "mix_ratio", None),
    }
    model_cfg = _merge_config(ModelConfig, ModelConfig().to_dict(), model_file,
                              model_flags, "model", quiet)
    train_cfg = _merge_config(TrainConfig, TrainConfig().to_dict(), train_file,
                              train_flags, "train", quiet)
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    manifest = tio.load_manifest(args.manifest)
    probe = tio.load_image(manifest.resolve(manifest.entries[0].degraded_path))

    if args.ckpt:
        loaded = tio.load_checkpoint(args.ckpt)
        model = loaded.model
        _, train_cfg = _resolve_train_configs(args, None)
        adam = Adam(model, train_cfg)
        if loaded.optimizer_state is not None:
            adam.load_state_dict(loaded.optimizer_state)
        start_step = loaded.step
    else:
        model_cfg, train_cfg = _resolve_train_configs(args, probe.shape[2])
        model = TurbNetModel(model_cfg, Rng(train_cfg.seed))
        adam = None
        start_step = 0

    out = Path(args.out)
    log = train(model, manifest, train_cfg, out_dir=out, adam=adam,
                start_step=start_step, progress=True)
    log.save(out / "train_log.jsonl")
    print(f"finished at step {log.steps[-1].step if log.steps else start_step}; "
          f"checkpoints in {out}")
    return 0


def cmd_finetune(args) -> int:
    synthetic = tio.load_manifest(args.synthetic)
    real = tio.load_manifest(args.real)
    loaded = tio.load_checkpoint(args.ckpt)
    model = loaded.model
    _, train_cfg = _resolve_train_configs(args, None)
    out = Path(args.out)
    log = fine_tune_mixed(model, synthetic, real, train_cfg, out_dir=out,
                          progress=True)
    log.save(out / "finetune_log.jsonl")
    print(f"finetune complete; checkpoints in {out}")
    return 0


def _turbulence_map_png(turb_map: np.ndarray) -> np.ndarray:
    energy = np.sqrt(np.mean(turb_map.astype(np.float64) ** 2, axis=2, keepdims=True))
    lo, hi = energy.min(), energy.max()
    if hi > lo:
        energy = (energy - lo) / (hi - lo)
    else:
        energy = np.zeros_like(energy)
    return energy


def cmd_infer(args) -> int:
    loaded = tio.load_checkpoint(args.ckpt)
    model: TurbNetModel = loaded.model
    in_dir = Path(args.indir)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = sorted(in_dir.glob("*.png"))
    if not images:
        raise TurbkitError(f"no .png images in {in_dir}")
    if (args.emit_turbulence_map or args.emit_redegraded) \
            and not model.config.use_degradation_head:
        raise TurbkitError("checkpoint was trained without a degradation head")
    for src in images:
        img = tio.load_image(src)
        out = model.forward(img)
        tio.save_image(np.clip(out.restored, 0.0, 1.0), out_dir / src.name)
        if args.emit_redegraded:
            tio.save_image(np.clip(out.redegraded, 0.0, 1.0),
                           out_dir / f"{src.stem}_redegraded.png")
        if args.emit_turbulence_map:
            tio.save_image(_turbulence_map_png(out.turbulence_map),
                           out_dir / f"{src.stem}_turbmap.png")
    print(f"restored {len(images)} images into {out_dir}")
    return 0


def _format_value(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}" if np.isfinite(v) else str(v)
    return str(v)


def cmd_eval(args) -> int:
    if args.pairs is None and args.ocr is None:
        raise TurbkitError("eval needs --pairs and/or --ocr")
    report = tmetrics.MetricsReport()

    if args.pairs is not None:
        manifest = tio.load_manifest(args.pairs)
        ps, ss = [], []
        for e in manifest.entries:
            if e.clean_path is None:
                continue
            clean = tio.load_image(manifest.resolve(e.clean_path))
            test = tio.load_image(manifest.resolve(e.degraded_path))
            ps.append(tmetrics.psnr(clean, test))
            ss.append(tmetrics.ssim(clean, test))
        if ps:
            report.psnr_db = float(np.mean(ps))
            report.ssim = float(np.mean(ss))
            report.n_pairs = len(ps)

    if args.ocr is not None:
        scenes = tio.load_ocr_results(args.ocr)
        if args.greedy_match:
            for s in scenes:
                s.word_matches = tmetrics.greedy_match(
                    s.gt_words, s.detections, ignore_case=args.ignore_case)
        if scenes:
            report.awdr = tmetrics.awdr(scenes)
            report.ad_lcs = tmetrics.ad_lcs(scenes, ignore_case=args.ignore_case)
            report.n_scenes = len(scenes)

    if args.json:
        print(json.dumps(report.to_dict(), sort_keys=True))
    else:
        for key, value in report.to_dict().items():
            print(f"{key:10s} {_format_value(value)}")
    return 0


def cmd_gradcheck(args) -> int:
    failures = 0
    if args.layer is not None:
        if args.layer not in GRADCHECK_LAYERS:
            names = ", ".join(sorted(GRADCHECK_LAYERS))
            print(f"unknown layer {args.layer!r}; valid names: {names}",
                  file=sys.stderr)
            return 2
        selected = [args.layer]
    elif args.model:
        selected = []
    else:
        selected = sorted(GRADCHECK_LAYERS)

    for name in selected:
        factory, shape = GRADCHECK_LAYERS[name]
        layer = factory(Rng(args.seed))
        x = Rng(args.seed + 1).normal(shape, dtype=np.float64)
        result = gradcheck_layer(layer, x, Rng(args.seed + 2))
        ok = result.passed(LAYER_TOLERANCE)
        print(f"{name:20s} max_rel_error={result.max_rel_error:.3e} "
              f"({result.n_checked} coords) {'ok' if ok else 'FAIL'}")
        failures += 0 if ok else 1

    if args.model or args.layer is None:
        result = model_gradcheck(args.seed)
        ok = result.passed(MODEL_TOLERANCE)
        print(f"{'model (micro)':20s} max_rel_error={result.max_rel_error:.3e} "
              f"({result.n_checked} coords) {'ok' if ok else 'FAIL'}")
        failures += 0 if ok else 1

    return 0 if failures == 0 else 1


def model_gradcheck(seed: int):
    """End-to-end finite-difference check of the training loss gradients.

    Builds a float64 micro model with randomized output projections (the
    zero-init identity point sits exactly on the L1 kink, where finite
    differences are undefined) and checks every parameter against central
    differences of the total loss.
    """
    from .model import LossWeights, loss_with_grads

    model = TurbNetModel(MICRO_CONFIG, Rng(seed), dtype=np.float64, init="random")
    data_rng = Rng(seed + 1)
    degraded = data_rng.uniform((16, 16, 3), dtype=np.float64)
    clean = data_rng.uniform((16, 16, 3), dtype=np.float64)
    weights = LossWeights(0.9)

    def loss_fn() -> float:
        out = model.forward(degraded)
        terms, _, _ = loss_with_grads(out, clean, degraded, weights)
        return terms.total

    model.zero_grad()
    out = model.forward(degraded)
    _, d_r, d_d = loss_with_grads(out, clean, degraded, weights)
    model.backward(d_r, d_d)
    return gradcheck_params(model, loss_fn, Rng(seed + 2))


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="turbkit",
        description="Turbulence degradation simulator, restoration model, and metrics.")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("TURBKIT_THREADS", "0")),
                        help="cap worker threads (0 = auto); the reference "
                             "pipeline is sequential, so this is a no-op cap")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a degraded dataset")
    p.add_argument("--clean", required=True, help="directory of clean PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--d-over-r0", dest="d_over_r0", type=float, default=3.0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--corr-length", dest="corr_length", type=float, default=8.0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--blur-bins", dest="blur_bins", type=int, default=8)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train on a synthetic manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON file with {'model': {...}, 'train': {...}}")
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", help="resume from a checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="mixed synthetic+real fine-tuning")
    p.add_argument("--synthetic", required=True)
    p.add_argument("--real", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--mix-ratio", dest="mix_ratio", type=float)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", help="restore a directory of images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-turbulence-map", action="store_true")
    p.add_argument("--emit-redegraded", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics over pairs and/or OCR results")
    p.add_argument("--pairs", help="manifest of (clean, test) image pairs")
    p.add_argument("--ocr", help="JSON file of per-scene OCR results")
    p.add_argument("--json", action="store_true")
    p.add_argument("--greedy-match", dest="greedy_match", action="store_true",
                   help="fill word_matches with the convenience greedy matcher")
    p.add_argument("--ignore-case", dest="ignore_case", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p.add_argument("--layer", help="check a single layer by name")
    p.add_argument("--model", action="store_true", help="check only the micro model")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="print the parameter count of a config")
    p.add_argument("--config")
    p.set_defaults(func=cmd_params)
    return parser


def cmd_params(args) -> int:
    doc = _load_config_file(args.config)
    cfg = ModelConfig.from_dict({**ModelConfig().to_dict(),
                                 **_tuple_fields(doc.get("model", {}))})
    print(param_count(cfg))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TurbkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
