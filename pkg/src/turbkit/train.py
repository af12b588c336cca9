"""Optimization: Adam with a cosine-annealed learning rate, plus the mixed
synthetic-plus-real fine-tuning regime.

Determinism contract: given (seed, config, manifests), two runs on one
platform produce bit-identical parameters, checkpoints, and logs. Batches
are composed from seeded per-epoch shuffles, gradients accumulate in item
order, and every random stream is derived from the config seed with a
distinct label, so optional features never perturb each other's draws.
"""

from __future__ import annotations

import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NonFiniteError
from .io import SceneManifest, load_image, save_checkpoint
from .metrics import psnr, ssim
from .model import LossWeights, TurbNetModel, loss_with_grads
from .tensor import Rng, derive_seed


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 1e-4
    lr_min: float = 1e-6
    epochs: int = 50
    batch_size: int = 8
    alpha_loss: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mix_ratio_real: float = 0.5

    def __post_init__(self):
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must be <= lr_init")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not (0.0 < b < 1.0):
                raise ValueError(f"{name} must be in (0,1), got {b}")
        if not (0.0 <= self.alpha_loss <= 1.0):
            raise ValueError("alpha_loss must be in [0,1]")
        if not (0.0 <= self.mix_ratio_real <= 1.0):
            raise ValueError("mix_ratio_real must be in [0,1]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine annealing from lr_init (step 0) down to lr_min (step == total)."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (
        1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """Standard Adam with bias correction; zeroes gradients after each step."""

    def __init__(self, model: TurbNetModel, cfg: TrainConfig):
        self.cfg = cfg
        self._names = [name for name, _ in model.named_parameters()]
        self._params = dict(model.named_parameters())
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in self._params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in self._params.items()}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in self._names:
            p = self._params[name]
            g = p.grad
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient in {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.value -= (lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(p.value.dtype)
            p.grad[...] = 0

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self._names:
            self.m[name][...] = state["m"][name]
            self.v[name][...] = state["v"][name]


# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    loss_recon: float | None
    loss_cycle: float
    source: str = "synthetic"


@dataclass
class EpochRecord:
    epoch: int
    step: int
    psnr: float | None = None
    ssim: float | None = None


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = []
        for rec in self.steps:
            lines.append(json.dumps({"kind": "step", **dataclasses.asdict(rec)},
                                    sort_keys=True))
        for rec in self.epochs:
            lines.append(json.dumps({"kind": "epoch", **dataclasses.asdict(rec)},
                                    sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())


# ---------------------------------------------------------------------------
# Data access
# ---------------------------------------------------------------------------

@dataclass
class Pair:
    scene_id: str
    degraded: np.ndarray
    clean: np.ndarray | None


def load_pairs(manifest: SceneManifest, require_clean: bool) -> list[Pair]:
    """Load every manifest entry into memory (desk-scale datasets)."""
    if not manifest.entries:
        raise DataError("manifest has no entries")
    pairs = []
    for e in manifest.entries:
        clean = None
        if e.clean_path is not None:
            clean = load_image(manifest.resolve(e.clean_path))
        elif require_clean:
            raise DataError(f"scene {e.scene_id!r} has no clean_path; "
                            "supervised training needs clean references")
        pairs.append(Pair(e.scene_id, load_image(manifest.resolve(e.degraded_path)),
                          clean))
    return pairs


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def _run_batch(model, items: list[Pair], weights: LossWeights, supervised: bool,
               adam: Adam, lr: float):
    n = len(items)
    tot = rec = cyc = 0.0
    have_recon = supervised
    for item in items:
        out = model.forward(item.degraded)
        terms, d_r, d_d = loss_with_grads(out, item.clean, item.degraded, weights,
                                          supervised=supervised, grad_scale=1.0 / n)
        model.backward(d_r, d_d)
        tot += terms.total / n
        cyc += terms.cycle / n
        if supervised:
            rec += terms.recon / n
    if not math.isfinite(tot):
        raise NonFiniteError("training loss is non-finite")
    adam.step(lr)
    return tot, (rec if have_recon else None), cyc


def evaluate_pairs(model, pairs: list[Pair]) -> tuple[float, float]:
    """Mean PSNR/SSIM of restored output against clean references."""
    ps, ss = [], []
    for item in pairs:
        out = model.forward(item.degraded)
        ps.append(psnr(item.clean, np.clip(out.restored, 0.0, 1.0)))
        ss.append(ssim(item.clean, np.clip(out.restored, 0.0, 1.0)))
    return float(np.mean(ps)), float(np.mean(ss))


def _checkpoint_path(out_dir: Path, epoch: int) -> Path:
    return out_dir / f"ckpt_epoch_{epoch + 1:04d}.tbk"


def train(model: TurbNetModel, manifest: SceneManifest, cfg: TrainConfig,
          out_dir: str | Path | None = None,
          eval_pairs_list: list[Pair] | None = None,
          adam: Adam | None = None, start_step: int = 0,
          progress: bool = False) -> TrainLog:
    """Supervised training over (clean, degraded) pairs.

    Runs ``cfg.epochs`` epochs of seeded shuffles; the cosine schedule spans
    ``epochs * ceil(n_pairs / batch_size)`` optimizer steps. When ``out_dir``
    is given, a checkpoint (with optimizer state) is written after every
    epoch. Resuming: pass the checkpoint's Adam state and step count; the run
    continues exactly as if uninterrupted.
    """
    pairs = load_pairs(manifest, require_clean=True)
    n = len(pairs)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if start_step % steps_per_epoch:
        raise DataError(f"start_step {start_step} is not an epoch boundary "
                        f"(steps_per_epoch={steps_per_epoch})")
    start_epoch = start_step // steps_per_epoch

    adam = adam or Adam(model, cfg)
    weights = LossWeights(cfg.alpha_loss)
    log = TrainLog()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    step = start_step
    for epoch in range(start_epoch, cfg.epochs):
        order = Rng(derive_seed(cfg.seed, "epoch-shuffle", epoch)).permutation(n)
        for batch_idx in _batches(order, cfg.batch_size):
            lr = cosine_lr(step, total_steps, cfg)
            tot, rec, cyc = _run_batch(model, [pairs[i] for i in batch_idx],
                                       weights, True, adam, lr)
            log.steps.append(StepRecord(step, lr, tot, rec, cyc))
            step += 1
        ep = EpochRecord(epoch=epoch, step=step)
        if eval_pairs_list:
            ep.psnr, ep.ssim = evaluate_pairs(model, eval_pairs_list)
        log.epochs.append(ep)
        if progress:
            print(f"epoch {epoch + 1}/{cfg.epochs} loss={tot:.5f}", file=sys.stderr)
        if out_path is not None:
            save_checkpoint(_checkpoint_path(out_path, epoch), model, step=step,
                            train_config=cfg.to_dict(),
                            optimizer_state=adam.state_dict())
    return log


def fine_tune_mixed(model: TurbNetModel, synthetic: SceneManifest,
                    real_unlabeled: SceneManifest, cfg: TrainConfig,
                    out_dir: str | Path | None = None,
                    eval_pairs_list: list[Pair] | None = None,
                    progress: bool = False) -> TrainLog:
    """Fine-tune on a blend of labeled synthetic and unlabeled real frames.

    The step grid is the synthetic epoch schedule; at each step a Bernoulli
    draw with probability ``cfg.mix_ratio_real`` replaces the synthetic batch
    by a batch of real frames trained with the self-supervised term only.
    Keeping synthetic batches in the mix is what prevents the model from
    forgetting its synthetic pretraining. With ``mix_ratio_real == 0`` this
    reduces exactly to :func:`train`.
    """
    syn_pairs = load_pairs(synthetic, require_clean=True)
    real_pairs = load_pairs(real_unlabeled, require_clean=False)
    n = len(syn_pairs)
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    adam = Adam(model, cfg)
    weights = LossWeights(cfg.alpha_loss)
    log = TrainLog()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    decide = Rng(derive_seed(cfg.seed, "mix-decision"))
    real_rng = Rng(derive_seed(cfg.seed, "real-shuffle"))
    real_order: list[int] = []

    def next_real_batch() -> list[Pair]:
        nonlocal real_order
        batch = []
        for _ in range(min(cfg.batch_size, len(real_pairs))):
            if not real_order:
                real_order = list(real_rng.permutation(len(real_pairs)))
            batch.append(real_pairs[real_order.pop(0)])
        return batch

    step = 0
    for epoch in range(cfg.epochs):
        order = Rng(derive_seed(cfg.seed, "epoch-shuffle", epoch)).permutation(n)
        for batch_idx in _batches(order, cfg.batch_size):
            lr = cosine_lr(step, total_steps, cfg)
            use_real = bool(decide.uniform(dtype=np.float64) < cfg.mix_ratio_real)
            if use_real:
                tot, rec, cyc = _run_batch(model, next_real_batch(), weights,
                                           False, adam, lr)
                log.steps.append(StepRecord(step, lr, tot, rec, cyc, source="real"))
            else:
                tot, rec, cyc = _run_batch(model, [syn_pairs[i] for i in batch_idx],
                                           weights, True, adam, lr)
                log.steps.append(StepRecord(step, lr, tot, rec, cyc))
            step += 1
        ep = EpochRecord(epoch=epoch, step=step)
        if eval_pairs_list:
            ep.psnr, ep.ssim = evaluate_pairs(model, eval_pairs_list)
        log.epochs.append(ep)
        if progress:
            print(f"finetune epoch {epoch + 1}/{cfg.epochs}", file=sys.stderr)
        if out_path is not None:
            save_checkpoint(_checkpoint_path(out_path, epoch), model, step=step,
                            train_config=cfg.to_dict(),
                            optimizer_state=adam.state_dict())
    return log
