"""Encoder, decoder, and discriminator.

The encoder is a U-shaped convolutional network that concatenates ±1 message
planes to the feature map at every scale and emits a tanh-bounded residual
(cap ``strength``) added to the cover. The decoder is a convolutional stem
followed by windowed-attention blocks (alternating plain / shifted windows),
global pooling, and a linear head producing one logit per message bit. The
discriminator is a small strided-convolution classifier with a scalar
realness output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Checkpoint, ConfigurationError

STEM_DOWNSAMPLE = 4  # two stride-2 convolutions in the decoder stem


@dataclass(frozen=True)
class ArchConfig:
    base_channels: int = 32
    encoder_scales: int = 3
    decoder_blocks: int = 4
    window: int = 8
    message_length: int = 64
    image_size: tuple[int, int] = (128, 128)
    strength: float = 0.05  # residual amplitude cap

    def __post_init__(self):
        h, w = self.image_size
        counts = (self.base_channels, self.encoder_scales, self.decoder_blocks,
                  self.window, self.message_length, h, w)
        if min(counts) <= 0:
            raise ConfigurationError(f"all architecture counts must be positive: {self}")
        down = 2 ** (self.encoder_scales - 1)
        for dim, name in ((h, "H"), (w, "W")):
            if dim % down:
                raise ConfigurationError(f"{name}={dim} not divisible by downsampling factor {down}")
            if dim % self.window:
                raise ConfigurationError(f"{name}={dim} not divisible by window {self.window}")
            if (dim // STEM_DOWNSAMPLE) % self.window:
                raise ConfigurationError(
                    f"{name}/{STEM_DOWNSAMPLE}={dim // STEM_DOWNSAMPLE} not divisible by "
                    f"window {self.window}"
                )
        if not 0 < self.strength <= 1:
            raise ConfigurationError(f"strength must be in (0, 1], got {self.strength}")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def message_to_planes(bits: torch.Tensor, spatial: tuple[int, int]) -> torch.Tensor:
    """Broadcast each bit (remapped 0→−1, 1→+1) over an (h, w) plane.

    Accepts (L,) or (B, L); returns (L, h, w) or (B, L, h, w).
    """
    h, w = spatial
    signed = 2.0 * bits - 1.0
    return signed[..., None, None].expand(*signed.shape, h, w)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(ch, 8), ch)


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), _norm(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1), _norm(cout), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class Encoder(nn.Module):
    """Message-conditioned residual predictor, |residual| ≤ strength."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        c, L = cfg.base_channels, cfg.message_length
        scales = cfg.encoder_scales
        widths = [c * (2**i) for i in range(scales)]

        self.down = nn.ModuleList()
        prev = 3
        for width in widths:
            self.down.append(_ConvBlock(prev + L, width))
            prev = width
        self.up = nn.ModuleList()
        for i in range(scales - 2, -1, -1):
            self.up.append(_ConvBlock(widths[i + 1] + widths[i] + L, widths[i]))
        self.head = nn.Conv2d(widths[0], 3, 1)

    def residual(self, image: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        feats = []
        x = image
        for i, block in enumerate(self.down):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            planes = message_to_planes(bits, x.shape[-2:]).to(x.dtype)
            x = block(torch.cat([x, planes], dim=1))
            feats.append(x)
        for j, block in enumerate(self.up):
            skip = feats[len(self.down) - 2 - j]
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            planes = message_to_planes(bits, x.shape[-2:]).to(x.dtype)
            x = block(torch.cat([x, skip, planes], dim=1))
        return self.cfg.strength * torch.tanh(self.head(x))

    def forward(self, image: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
        return (image + self.residual(image, bits)).clamp(0.0, 1.0)


class _WindowAttention(nn.Module):
    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        self.window = window
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        # learned relative position bias, one table entry per (dy, dx) offset
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        coords = torch.stack(torch.meshgrid(
            torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + window - 1
        self.register_buffer("rel_index", rel[0] * (2 * window - 1) + rel[1], persistent=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        # x: (num_windows*B, tokens, dim)
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn + self.rel_bias[self.rel_index].permute(2, 0, 1)[None]
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class _SwinBlock(nn.Module):
    """Windowed self-attention block with optional cyclic shift."""

    def __init__(self, dim: int, window: int, heads: int, shift: int):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim))

    @staticmethod
    def _partition(x: torch.Tensor, window: int) -> torch.Tensor:
        b, h, w, c = x.shape
        x = x.view(b, h // window, window, w // window, window, c)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)

    @staticmethod
    def _merge(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
        b = windows.shape[0] // ((h // window) * (w // window))
        x = windows.view(b, h // window, w // window, window, window, -1)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)

    def _mask(self, h: int, w: int, device, dtype) -> torch.Tensor | None:
        if self.shift == 0:
            return None
        img_mask = torch.zeros(1, h, w, 1, device=device)
        slices = (slice(0, -self.window), slice(-self.window, -self.shift), slice(-self.shift, None))
        cnt = 0
        for hs in slices:
            for ws in slices:
                img_mask[:, hs, ws, :] = cnt
                cnt += 1
        mw = self._partition(img_mask, self.window).squeeze(-1)
        attn_mask = mw.unsqueeze(1) - mw.unsqueeze(2)
        return attn_mask.masked_fill(attn_mask != 0, -100.0).to(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, H, W, C)
        b, h, w, c = x.shape
        shortcut = x
        x = self.norm1(x)
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        windows = self._partition(x, self.window)
        windows = self.attn(windows, self._mask(h, w, x.device, x.dtype))
        x = self._merge(windows, self.window, h, w)
        if self.shift:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(1, 2))
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class Decoder(nn.Module):
    """Distortion-robust message extractor; returns (B, L) logits."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        dim = 2 * c
        self.stem = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1), _norm(c), nn.GELU(),
            nn.Conv2d(c, dim, 3, stride=2, padding=1), _norm(dim), nn.GELU(),
        )
        h, w = cfg.image_size
        # learned absolute position embedding: global pooling is otherwise
        # translation-invariant and blind to spatially structured watermarks
        self.pos = nn.Parameter(
            0.02 * torch.randn(1, h // STEM_DOWNSAMPLE, w // STEM_DOWNSAMPLE, dim)
        )
        heads = max(1, dim // 16)
        self.blocks = nn.ModuleList(
            _SwinBlock(dim, cfg.window, heads, shift=0 if i % 2 == 0 else cfg.window // 2)
            for i in range(cfg.decoder_blocks)
        )
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, cfg.message_length)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = self.stem(image)
        x = x.permute(0, 2, 3, 1)  # (B, H', W', C)
        x = x + self.pos
        for block in self.blocks:
            x = block(x)
        x = self.norm(x.mean(dim=(1, 2)))
        return self.head(x)


class Discriminator(nn.Module):
    """4-layer strided convolutional real/watermarked classifier (raw logit)."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        c = cfg.base_channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), _norm(2 * c), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1), _norm(4 * c), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * c, 4 * c, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
        )
        self.head = nn.Linear(4 * c, 1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = self.net(image).mean(dim=(2, 3))
        return self.head(x).squeeze(-1)


@dataclass
class ModelBundle:
    encoder: Encoder
    decoder: Decoder
    discriminator: Discriminator
    cfg: ArchConfig

    def train(self) -> "ModelBundle":
        for m in (self.encoder, self.decoder, self.discriminator):
            m.train()
        return self

    def eval(self) -> "ModelBundle":
        for m in (self.encoder, self.decoder, self.discriminator):
            m.eval()
        return self

    def parameters(self):
        for m in (self.encoder, self.decoder, self.discriminator):
            yield from m.parameters()

    def state_dicts(self) -> dict:
        return {
            "encoder": self.encoder.state_dict(),
            "decoder": self.decoder.state_dict(),
            "discriminator": self.discriminator.state_dict(),
        }

    def load_state_dicts(self, state: dict) -> None:
        self.encoder.load_state_dict(state["encoder"])
        self.decoder.load_state_dict(state["decoder"])
        self.discriminator.load_state_dict(state["discriminator"])


def init_model(cfg: ArchConfig, seed: int = 0) -> ModelBundle:
    """Deterministically initialized bundle; identical (cfg, seed) → identical params."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        bundle = ModelBundle(Encoder(cfg), Decoder(cfg), Discriminator(cfg), cfg)
    return bundle


def _check_batch(bundle: ModelBundle, images: torch.Tensor) -> torch.Tensor:
    if images.dim() == 3:
        images = images.unsqueeze(0)
    h, w = bundle.cfg.image_size
    if images.shape[1:] != (3, h, w):
        raise ValueError(
            f"expected batch of (3, {h}, {w}) images, got {tuple(images.shape)}"
        )
    return images


def encode(bundle: ModelBundle, covers: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
    """Embed messages: clamp(cover + bounded residual); shape-preserving."""
    covers = _check_batch(bundle, covers)
    if bits.dim() == 1:
        bits = bits.unsqueeze(0)
    if bits.shape != (covers.shape[0], bundle.cfg.message_length):
        raise ValueError(
            f"expected messages of shape ({covers.shape[0]}, "
            f"{bundle.cfg.message_length}), got {tuple(bits.shape)}"
        )
    return bundle.encoder(covers, bits)


def decode(bundle: ModelBundle, images: torch.Tensor) -> torch.Tensor:
    """Extract per-bit logits; hard bits are sigmoid(logit) > 0.5."""
    return bundle.decoder(_check_batch(bundle, images))


def discriminate(bundle: ModelBundle, images: torch.Tensor) -> torch.Tensor:
    """Sigmoid-squashed realness score in (0, 1), one per batch item."""
    return torch.sigmoid(bundle.discriminator(_check_batch(bundle, images)))


def bundle_to_checkpoint(
    bundle: ModelBundle, stage: str, seed: int, epoch: int,
    extra_state: dict | None = None, stage1_trained: bool = False,
) -> Checkpoint:
    state = {"model": bundle.state_dicts()}
    if extra_state:
        state.update(extra_state)
    return Checkpoint(
        arch=bundle.cfg.as_dict(), stage=stage, seed=seed, epoch=epoch,
        state=state, stage1_trained=stage1_trained,
    )


def bundle_from_checkpoint(ckpt: Checkpoint) -> ModelBundle:
    cfg = ArchConfig.from_dict(ckpt.arch)
    bundle = init_model(cfg, ckpt.seed)
    try:
        bundle.load_state_dicts(ckpt.state["model"])
    except (KeyError, RuntimeError) as exc:
        raise ConfigurationError(f"checkpoint incompatible with its config: {exc}") from exc
    return bundle
