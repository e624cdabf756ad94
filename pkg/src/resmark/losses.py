"""Training objectives: image fidelity, message recovery, adversarial term.

The total objective is λ1·L_image + λ2·L_message + λ3·L_adversarial, with
L_image = MSE + α·(1 − SSIM). Stage 2 applies the same weights to the
transferred-cover pair instead of the original one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.005  # SSIM weight inside the image loss
    image: float = 0.2
    message: float = 1.0
    adversarial: float = 0.001

    def __post_init__(self):
        if min(self.alpha, self.image, self.message, self.adversarial) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    image: float
    message: float
    adversarial: float
    total: float

    def as_dict(self) -> dict:
        return {
            "loss_image": self.image,
            "loss_message": self.message,
            "loss_adversarial": self.adversarial,
            "loss_total": self.total,
        }


def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return g.outer(g)


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = 11) -> torch.Tensor:
    """Single-scale SSIM with an 11×11 Gaussian window on the [0, 1] range.

    Averaged over channels and positions; symmetric in (a, b); returns a
    scalar tensor in [−1, 1].
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    c = a.shape[1]
    win = _gaussian_window(window_size, dtype=a.dtype).to(a.device)
    win = win.expand(c, 1, window_size, window_size).contiguous()

    # valid convolution only: zero padding would pollute border statistics
    mu_a = F.conv2d(a, win, groups=c)
    mu_b = F.conv2d(b, win, groups=c)
    mu_a2, mu_b2, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = F.conv2d(a * a, win, groups=c) - mu_a2
    var_b = F.conv2d(b * b, win, groups=c) - mu_b2
    cov = F.conv2d(a * b, win, groups=c) - mu_ab

    c1 = 0.01**2
    c2 = 0.03**2
    ssim_map = ((2 * mu_ab + c1) * (2 * cov + c2)) / ((mu_a2 + mu_b2 + c1) * (var_a + var_b + c2))
    return ssim_map.mean()


def loss_image(cover: torch.Tensor, marked: torch.Tensor, alpha: float = 0.005) -> torch.Tensor:
    """MSE(cover, marked) + α·(1 − SSIM); zero iff the images are identical."""
    if cover.shape != marked.shape:
        raise ValueError(f"shape mismatch {tuple(cover.shape)} vs {tuple(marked.shape)}")
    return F.mse_loss(marked, cover) + alpha * (1.0 - ssim(cover, marked))


def loss_message(bits: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """MSE between target bits and sigmoid-squashed decoder logits."""
    if bits.shape != logits.shape:
        raise ValueError(f"shape mismatch {tuple(bits.shape)} vs {tuple(logits.shape)}")
    return F.mse_loss(torch.sigmoid(logits), bits)


def loss_adversarial(
    score_real: torch.Tensor, score_fake: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(discriminator loss, generator loss) from realness scores in (0, 1).

    The discriminator minimizes −[log s_real + log(1 − s_fake)]; the encoder
    minimizes the non-saturating −log s_fake. Scores are ε-clamped.
    """
    sr = score_real.clamp(_EPS, 1 - _EPS)
    sf = score_fake.clamp(_EPS, 1 - _EPS)
    disc = -(torch.log(sr) + torch.log(1 - sf)).mean()
    return disc, generator_loss(score_fake)


def generator_loss(score_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating encoder term: −log(score_fake), ε-clamped."""
    return -torch.log(score_fake.clamp(_EPS, 1 - _EPS)).mean()


def loss_total(
    l_image: torch.Tensor | float,
    l_message: torch.Tensor | float,
    l_adversarial: torch.Tensor | float,
    weights: LossWeights,
) -> torch.Tensor:
    return (
        weights.image * l_image
        + weights.message * l_message
        + weights.adversarial * l_adversarial
    )


def breakdown(
    l_image: torch.Tensor, l_message: torch.Tensor, l_adversarial: torch.Tensor, weights: LossWeights
) -> LossBreakdown:
    total = loss_total(l_image, l_message, l_adversarial, weights)
    return LossBreakdown(
        image=float(l_image.detach()),
        message=float(l_message.detach()),
        adversarial=float(l_adversarial.detach()),
        total=float(total.detach()),
    )


def ssim_constant_images(value_a: float, value_b: float) -> float:
    """Closed-form SSIM for constant images: only the luminance term survives."""
    c1 = 0.01**2
    return (2 * value_a * value_b + c1) / (value_a**2 + value_b**2 + c1)
