"""Two-stage optimization.

Stage 1 trains encoder/decoder/discriminator end to end on (cover,
watermarked) pairs. Stage 2 keeps the same objective but transfers the RGB
residual of each watermarked image onto a second, disjoint cover before
decoding, so the watermark must survive being detached from the image it
was computed on. A stage-1 step is the degenerate stage-2 step with both
covers equal, and the implementation shares that single code path.

Determinism: all randomness in an epoch flows from a generator seeded by
(run seed, stage, epoch), so resuming at epoch k replays the exact stream
an uninterrupted run would have used.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch

from . import noise
from .core import (
    Checkpoint,
    ConfigurationError,
    Corpus,
    random_message_batch,
    save_checkpoint,
    load_checkpoint,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    breakdown,
    generator_loss,
    loss_adversarial,
    loss_image,
    loss_message,
    loss_total,
)
from .models import ModelBundle, bundle_to_checkpoint, decode, discriminate, encode


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-4
    decoder_lr: float | None = None  # None = same as learning_rate
    epochs_stage1: int = 100
    epochs_stage2: int = 100
    batch_size: int = 16
    seed: int = 0
    noise_kinds: list[str] | None = None  # None = full 18-kind suite + Identity
    val_every: int = 5
    grad_clip: float = 1.0
    workers: int = 1
    allow_stage2_only: bool = False  # ablation: skip the stage-1 prerequisite

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.decoder_lr is not None and self.decoder_lr <= 0:
            raise ConfigurationError("decoder learning rate must be positive")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ConfigurationError("epoch counts must be nonnegative")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def epoch_generator(seed: int, stage: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + stage) * 1_000_003 + epoch)


def _make_optimizers(bundle: ModelBundle, lr: float, decoder_lr: float | None = None):
    # a decoder stepped more slowly than the encoder gives the encoder a
    # stable decoding target to adapt its residual against
    opt_gen = torch.optim.AdamW([
        {"params": list(bundle.encoder.parameters()), "lr": lr},
        {"params": list(bundle.decoder.parameters()),
         "lr": lr if decoder_lr is None else decoder_lr},
    ])
    opt_disc = torch.optim.AdamW(bundle.discriminator.parameters(), lr=lr)
    return opt_gen, opt_disc


def _step(
    bundle: ModelBundle,
    opt_gen: torch.optim.Optimizer,
    opt_disc: torch.optim.Optimizer,
    covers: torch.Tensor,
    covers2: torch.Tensor,
    weights: LossWeights,
    generator: torch.Generator,
    kinds: list[str] | None,
    grad_clip: float,
) -> LossBreakdown:
    bits = random_message_batch(covers.shape[0], bundle.cfg.message_length, generator)
    spec = noise.sample_train_spec(generator, kinds)

    marked = encode(bundle, covers, bits)
    residual = marked - covers
    marked2 = (covers2 + residual).clamp(0.0, 1.0)
    distorted = noise.apply(spec, marked2, covers2, generator)
    logits = decode(bundle, distorted)

    score_fake = discriminate(bundle, marked2)
    l_img = loss_image(covers2, marked2, weights.alpha)
    l_msg = loss_message(bits, logits)
    l_adv = generator_loss(score_fake)
    total = loss_total(l_img, l_msg, l_adv, weights)
    if not bool(torch.isfinite(total.detach())):
        raise RuntimeError(
            f"non-finite loss (image={float(l_img)}, message={float(l_msg)}, "
            f"adversarial={float(l_adv)}) under spec {spec}"
        )

    opt_gen.zero_grad(set_to_none=True)
    total.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            [p for g in opt_gen.param_groups for p in g["params"]], grad_clip
        )
    opt_gen.step()

    # one discriminator update per encoder/decoder update
    score_real = discriminate(bundle, covers2)
    score_fake_d = discriminate(bundle, marked2.detach())
    l_disc, _ = loss_adversarial(score_real, score_fake_d)
    opt_disc.zero_grad(set_to_none=True)
    l_disc.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(bundle.discriminator.parameters(), grad_clip)
    opt_disc.step()

    return breakdown(l_img, l_msg, l_adv, weights)


def train_step_stage1(bundle, opt_gen, opt_disc, covers, weights, generator,
                      kinds=None, grad_clip=1.0) -> LossBreakdown:
    return _step(bundle, opt_gen, opt_disc, covers, covers, weights, generator, kinds, grad_clip)


def train_step_stage2(bundle, opt_gen, opt_disc, pair, weights, generator,
                      kinds=None, grad_clip=1.0) -> LossBreakdown:
    covers, covers2 = pair
    if covers.shape != covers2.shape:
        raise ValueError("stage-2 step requires a paired batch of equal shapes")
    return _step(bundle, opt_gen, opt_disc, covers, covers2, weights, generator, kinds, grad_clip)


@torch.no_grad()
def _validate(bundle: ModelBundle, corpus: Corpus, batch_size: int, seed: int,
              max_batches: int = 4) -> dict:
    """Identity-path bit accuracy (latent and single-shot) and PSNR."""
    from .evaluation import bit_accuracy, psnr  # local import; evaluation depends on models

    bundle.eval()
    g = torch.Generator().manual_seed(seed)
    acc_latent, acc_single, psnrs = [], [], []
    for i, batch in enumerate(corpus.batches(batch_size)):
        if i >= max_batches:
            break
        covers = batch[0] if isinstance(batch, tuple) else batch
        if covers.shape[0] < 2:
            break
        bits = random_message_batch(covers.shape[0], bundle.cfg.message_length, g)
        marked = encode(bundle, covers, bits)
        hard = (torch.sigmoid(decode(bundle, marked)) > 0.5).float()
        for j in range(covers.shape[0]):
            acc_latent.append(bit_accuracy(bits[j], hard[j]))
            psnrs.append(psnr(covers[j], marked[j]))
        # single-shot: residual from item 0 stamped onto the rest
        eps = marked[0] - covers[0]
        stamped = (covers[1:] + eps).clamp(0.0, 1.0)
        hard2 = (torch.sigmoid(decode(bundle, stamped)) > 0.5).float()
        for j in range(stamped.shape[0]):
            acc_single.append(bit_accuracy(bits[0], hard2[j]))
    bundle.train()
    mean = lambda xs: sum(xs) / len(xs) if xs else float("nan")
    return {
        "val_acc_latent": mean(acc_latent),
        "val_acc_single_shot": mean(acc_single),
        "val_psnr": min(mean(psnrs), 99.0),
    }


def run_training(
    cfg: TrainConfig,
    bundle: ModelBundle,
    corpus: Corpus,
    out_dir: str | Path,
    val_corpus: Corpus | None = None,
    resume: str | Path | None = None,
) -> Path:
    """Run stage-1 then stage-2 epochs; returns the final checkpoint path.

    Writes ``metrics.jsonl`` (one record per epoch) and atomic checkpoints
    under ``out_dir``. Deterministic for a fixed (cfg, bundle seed) in
    single-worker mode.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.rmk"
    metrics_path = out_dir / "metrics.jsonl"

    if cfg.epochs_stage2 > 0 and cfg.epochs_stage1 == 0 and not cfg.allow_stage2_only:
        raise ConfigurationError(
            "stage 2 without stage 1 requires allow_stage2_only (ablation flag)"
        )

    start_stage, start_epoch = 1, 0
    stage1_trained = False
    opt_gen, opt_disc = _make_optimizers(bundle, cfg.learning_rate, cfg.decoder_lr)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.arch != bundle.cfg.as_dict():
            raise ConfigurationError("resume checkpoint architecture differs from config")
        bundle.load_state_dicts(ckpt.state["model"])
        if "opt_gen" in ckpt.state:
            opt_gen.load_state_dict(ckpt.state["opt_gen"])
            opt_disc.load_state_dict(ckpt.state["opt_disc"])
        stage1_trained = ckpt.stage1_trained
        if ckpt.stage == "stage2":
            start_stage, start_epoch = 2, ckpt.epoch
        else:
            start_stage, start_epoch = 1, ckpt.epoch
    else:
        metrics_path.write_text("")

    val = val_corpus or corpus
    bundle.train()

    def save(stage_name: str, epoch: int, s1_done: bool) -> None:
        ckpt = bundle_to_checkpoint(
            bundle, stage_name, cfg.seed, epoch,
            extra_state={
                "opt_gen": opt_gen.state_dict(),
                "opt_disc": opt_disc.state_dict(),
                "train_config": cfg.as_dict(),
            },
            stage1_trained=s1_done,
        )
        save_checkpoint(ckpt, ckpt_path)

    def log(record: dict) -> None:
        with open(metrics_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def run_stage(stage: int, epochs: int, first_epoch: int, s1_done: bool) -> None:
        paired = stage == 2
        data = Corpus(corpus.paths, corpus.size, seed=corpus.seed, paired=paired)
        for epoch in range(first_epoch, epochs):
            g = epoch_generator(cfg.seed, stage, epoch)
            sums = {"loss_image": 0.0, "loss_message": 0.0, "loss_adversarial": 0.0,
                    "loss_total": 0.0}
            steps = 0
            for batch in data.batches(cfg.batch_size, epoch=epoch, workers=cfg.workers):
                if paired:
                    bd = train_step_stage2(bundle, opt_gen, opt_disc, batch, cfg.weights,
                                           g, cfg.noise_kinds, cfg.grad_clip)
                else:
                    bd = train_step_stage1(bundle, opt_gen, opt_disc, batch, cfg.weights,
                                           g, cfg.noise_kinds, cfg.grad_clip)
                for k, v in bd.as_dict().items():
                    sums[k] += v
                steps += 1
            record = {"stage": stage, "epoch": epoch}
            record.update({k: v / max(steps, 1) for k, v in sums.items()})
            if (epoch + 1) % cfg.val_every == 0 or epoch + 1 == epochs:
                record.update(_validate(bundle, val, cfg.batch_size, seed=cfg.seed))
                save(f"stage{stage}", epoch + 1, s1_done or (stage == 1 and epoch + 1 == epochs))
            else:
                record.update({"val_acc_latent": None, "val_acc_single_shot": None,
                               "val_psnr": None})
            log(record)

    if cfg.epochs_stage1 == 0 and cfg.epochs_stage2 == 0:
        save("init", 0, False)
        return ckpt_path

    if start_stage == 1 and cfg.epochs_stage1 > 0:
        run_stage(1, cfg.epochs_stage1, start_epoch, s1_done=False)
        stage1_trained = True
        start_epoch = 0
    elif start_stage == 1:
        start_epoch = 0

    if cfg.epochs_stage2 > 0:
        # fresh optimizer state for the changed loss landscape
        if start_stage == 1:
            opt_gen, opt_disc = _make_optimizers(bundle, cfg.learning_rate, cfg.decoder_lr)
        run_stage(2, cfg.epochs_stage2, start_epoch if start_stage == 2 else 0,
                  s1_done=stage1_trained)
        save("stage2", cfg.epochs_stage2, stage1_trained)
    else:
        save("stage1", cfg.epochs_stage1, stage1_trained)

    return ckpt_path
