"""Metrics and experiment harnesses: robustness tables, residual attack,
cross-domain transfer, noise sweeps, and decoder saliency maps.

Evaluation protocols:
  latent       — the encoder runs once per cover image.
  single_shot  — per batch, a residual is built from one cover/message pair
                 and stamped onto different covers before decoding.
Sign-variant test factors (Contrast ±0.8 and friends) are evaluated at both
signs and averaged into one table entry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch

from . import noise
from .core import Corpus, quantize_roundtrip, random_message_batch
from .embedder import ResidualWatermark, stamp
from .losses import loss_message, ssim
from .models import ModelBundle, decode, encode

PSNR_CAP = 99.0  # sentinel for identical images


def bit_accuracy(bits: torch.Tensor, extracted: torch.Tensor) -> float:
    """Percent of matching bits: (1 − mean(xor)) · 100; symmetric."""
    if bits.shape != extracted.shape:
        raise ValueError(f"length mismatch {tuple(bits.shape)} vs {tuple(extracted.shape)}")
    a = bits.round().to(torch.int64)
    b = extracted.round().to(torch.int64)
    return float((1.0 - (a ^ b).float().mean()) * 100.0)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10·log10(1/MSE) on the [0, 1] scale; capped sentinel for identical inputs."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def apd(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean absolute pixel difference on the 0–255 scale."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return float((a - b).abs().mean() * 255.0)


@dataclass
class EvalReport:
    paradigm: str  # "latent" | "single_shot"
    accuracies: dict[str, float]  # per-distortion bit accuracy, percent
    quality: dict[str, float] = field(default_factory=dict)  # psnr/ssim/apd
    metadata: dict = field(default_factory=dict)

    @property
    def average(self) -> float:
        return sum(self.accuracies.values()) / len(self.accuracies)

    def to_json(self) -> str:
        return json.dumps(
            {
                "paradigm": self.paradigm,
                "accuracies": self.accuracies,
                "average": self.average,
                "quality": self.quality,
                "metadata": self.metadata,
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            paradigm=d["paradigm"],
            accuracies=d["accuracies"],
            quality=d["quality"],
            metadata=d["metadata"],
        )

    def render(self) -> str:
        lines = [f"paradigm: {self.paradigm}"]
        width = max(len(k) for k in self.accuracies)
        for k, v in self.accuracies.items():
            lines.append(f"  {k:<{width}}  {v:6.2f}%")
        lines.append(f"  {'AVG':<{width}}  {self.average:6.2f}%")
        for k, v in self.quality.items():
            lines.append(f"  {k}: {v:.4f}")
        return "\n".join(lines)


def _cell_generator(seed: int, spec_index: int, batch_index: int) -> torch.Generator:
    return torch.Generator().manual_seed(
        (seed * 1_000_003 + spec_index) * 1_000_003 + batch_index
    )


@torch.no_grad()
def _hard_bits(bundle: ModelBundle, images: torch.Tensor) -> torch.Tensor:
    return (torch.sigmoid(decode(bundle, images)) > 0.5).float()


@torch.no_grad()
def evaluate_robustness(
    bundle: ModelBundle,
    corpus: Corpus,
    suite: list[noise.DistortionSpec] | None = None,
    paradigm: str = "single_shot",
    seed: int = 0,
    batch_size: int = 8,
    max_batches: int = 8,
    attack: str | None = None,  # None | "cross" | "exact"
    roundtrip: bool = False,
    stamp_corpus: Corpus | None = None,
    metadata: dict | None = None,
) -> EvalReport:
    """Per-distortion bit accuracy plus invisibility metrics.

    ``attack`` enables the residual-removal adversary: "cross" subtracts a
    residual estimated from a different cover pair, "exact" subtracts the
    very residual that was stamped (the cancellation control).
    ``stamp_corpus`` supplies covers for the stamping side in cross-domain
    runs; by default the paired half of ``corpus`` is used.
    ``roundtrip`` pushes stamped images through the 8-bit storage path.
    """
    if paradigm not in ("latent", "single_shot"):
        raise ValueError(f"unknown paradigm {paradigm!r}")
    if suite is None:
        suite = noise.test_suite()
    bundle.eval()
    L = bundle.cfg.message_length

    acc: dict[str, list[float]] = {s.kind: [] for s in suite}
    quality: dict[str, list[float]] = {"psnr": [], "ssim": [], "apd": []}

    source = Corpus(corpus.paths, corpus.size, seed=corpus.seed, paired=True)
    batches_a = source.batches(batch_size)
    batches_b = (
        stamp_corpus.batches(batch_size) if stamp_corpus is not None else None
    )

    for batch_index, pair in enumerate(batches_a):
        if batch_index >= max_batches:
            break
        covers_a, covers_b = pair
        if batches_b is not None:
            try:
                covers_b = next(batches_b)
            except StopIteration:
                break
            if isinstance(covers_b, tuple):
                covers_b = covers_b[0]

        g_msg = _cell_generator(seed, 0, batch_index)
        if paradigm == "latent":
            bits = random_message_batch(covers_b.shape[0], L, g_msg)
            marked = encode(bundle, covers_b, bits)
            targets = bits
        else:
            bits = random_message_batch(1, L, g_msg)
            eps = encode(bundle, covers_a[:1], bits)[0] - covers_a[0]
            marked = (covers_b + eps).clamp(0.0, 1.0)
            targets = bits.expand(covers_b.shape[0], L)
            if attack == "exact":
                marked = (marked - eps).clamp(0.0, 1.0)
            elif attack == "cross":
                eps_a = encode(bundle, covers_a[1:2], bits)[0] - covers_a[1]
                marked = (marked - eps_a).clamp(0.0, 1.0)
            elif attack is not None:
                raise ValueError(f"unknown attack mode {attack!r}")
        if roundtrip:
            marked = quantize_roundtrip(marked)

        for j in range(covers_b.shape[0]):
            quality["psnr"].append(min(psnr(covers_b[j], marked[j]), PSNR_CAP))
            quality["apd"].append(apd(covers_b[j], marked[j]))
        quality["ssim"].append(float(ssim(covers_b, marked)))

        for spec_index, spec in enumerate(suite):
            variant_acc = []
            for v_index, variant in enumerate(spec.expand()):
                g = _cell_generator(seed, 1 + spec_index * 10 + v_index, batch_index)
                distorted = noise.apply(variant, marked, covers_b, g)
                hard = _hard_bits(bundle, distorted)
                variant_acc.append(
                    sum(bit_accuracy(targets[j], hard[j]) for j in range(hard.shape[0]))
                    / hard.shape[0]
                )
            acc[spec.kind].append(sum(variant_acc) / len(variant_acc))

    mean = lambda xs: sum(xs) / len(xs)
    extrapolated = sorted(
        {
            s.kind
            for s in suite
            for variant in s.expand()
            for name, value in variant.params.items()
            if not (
                noise.TRAIN_RANGES[s.kind][name][0]
                <= value
                <= noise.TRAIN_RANGES[s.kind][name][1]
            )
        }
    )
    meta = {
        "extrapolated_kinds": extrapolated,  # test factors beyond the train range
        "seed": seed,
        "batch_size": batch_size,
        "max_batches": max_batches,
        "attack": attack,
        "roundtrip": roundtrip,
        "suite": json.loads(noise.suite_to_json(suite)),
        "corpus_size": len(corpus),
    }
    meta.update(metadata or {})
    return EvalReport(
        paradigm=paradigm,
        accuracies={k: mean(v) for k, v in acc.items()},
        quality={k: mean(v) for k, v in quality.items()},
        metadata=meta,
    )


def residual_attack(
    bundle: ModelBundle,
    corpus: Corpus,
    suite: list[noise.DistortionSpec] | None = None,
    seed: int = 0,
    exact: bool = False,
    **kwargs,
) -> EvalReport:
    """Residual-removal attack: subtract an attacker-estimated ε before distorting."""
    return evaluate_robustness(
        bundle, corpus, suite, paradigm="single_shot", seed=seed,
        attack="exact" if exact else "cross", **kwargs,
    )


def cross_domain(
    bundle: ModelBundle,
    corpus_source: Corpus,
    corpus_target: Corpus,
    suite: list[noise.DistortionSpec] | None = None,
    seed: int = 0,
    roundtrip: bool = False,
    **kwargs,
) -> EvalReport:
    """Build residuals on ``corpus_source`` and stamp ``corpus_target`` covers.

    Call with swapped corpora for the reverse direction. ``roundtrip``
    models the stored-file (8-bit) application path.
    """
    return evaluate_robustness(
        bundle, corpus_source, suite, paradigm="single_shot", seed=seed,
        roundtrip=roundtrip, stamp_corpus=corpus_target, **kwargs,
    )


def noise_sweep(
    bundle: ModelBundle,
    corpus: Corpus,
    kind: str,
    levels: list[float],
    seed: int = 0,
    paradigm: str = "single_shot",
    **kwargs,
) -> list[float]:
    """Accuracy at each intensity level of one distortion kind."""
    (param,) = noise.TRAIN_RANGES[kind] or ("p",)
    out = []
    for level in levels:
        spec = noise.DistortionSpec(kind=kind, params={param: level}, mode="test")
        report = evaluate_robustness(
            bundle, corpus, [spec], paradigm=paradigm, seed=seed, **kwargs
        )
        out.append(report.accuracies[kind])
    return out


def decoder_saliency(
    bundle: ModelBundle, marked: torch.Tensor, bits: torch.Tensor
) -> torch.Tensor:
    """|∂ message-loss / ∂ image| summed over channels, min-max normalized.

    Returns an (H, W) map in [0, 1].
    """
    bundle.eval()
    img = marked.detach().unsqueeze(0).requires_grad_(True)
    logits = decode(bundle, img)
    loss = loss_message(bits.unsqueeze(0), logits)
    (grad,) = torch.autograd.grad(loss, img)
    heat = grad[0].abs().sum(dim=0)
    lo, hi = heat.min(), heat.max()
    if hi > lo:
        heat = (heat - lo) / (hi - lo)
    else:
        heat = torch.zeros_like(heat)
    return heat
