"""JPEG compression: a differentiable surrogate and the real codec round-trip.

The surrogate follows the codec pipeline (YCbCr conversion, 8×8 block DCT,
quality-scaled quantization tables) but replaces hard rounding with the
smooth map x − sin(2πx)/(2π), which agrees with round() at integers and has
bounded, nonvanishing gradients. No chroma subsampling is applied.
"""

from __future__ import annotations

import io
import math

import numpy as np
import torch
from PIL import Image

# Standard Annex-K quantization tables.
_LUMA_TABLE = torch.tensor(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=torch.float64,
)

_CHROMA_TABLE = torch.tensor(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=torch.float64,
)

_RGB_TO_YCC = torch.tensor(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ],
    dtype=torch.float64,
)
_YCC_TO_RGB = torch.linalg.inv(_RGB_TO_YCC)


def _dct_matrix(n: int = 8, dtype=torch.float64) -> torch.Tensor:
    k = torch.arange(n, dtype=dtype)
    mat = torch.cos((2 * k[None, :] + 1) * k[:, None] * math.pi / (2 * n))
    mat = mat * math.sqrt(2.0 / n)
    mat[0] = mat[0] / math.sqrt(2.0)
    return mat


def quality_tables(quality: float, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """IJG quality scaling of the standard tables, clamped to [1, 255]."""
    q = float(quality)
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    out = []
    for table in (_LUMA_TABLE, _CHROMA_TABLE):
        t = torch.floor((table * scale + 50.0) / 100.0).clamp(1.0, 255.0)
        out.append(t.to(dtype))
    return out[0], out[1]


def soft_round(x: torch.Tensor) -> torch.Tensor:
    return x - torch.sin(2 * math.pi * x) / (2 * math.pi)


def _blockify(x: torch.Tensor) -> torch.Tensor:
    # (B, C, H, W) -> (B, C, nH, nW, 8, 8)
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // 8, 8, w // 8, 8)
    return x.permute(0, 1, 2, 4, 3, 5)


def _unblockify(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, c = x.shape[:2]
    return x.permute(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


def jpeg_surrogate(img: torch.Tensor, quality: float) -> torch.Tensor:
    """Differentiable JPEG approximation on a (B, 3, H, W) batch in [0, 1].

    H and W are replicate-padded to multiples of 8 when needed and cropped
    back afterwards.
    """
    single = img.dim() == 3
    if single:
        img = img.unsqueeze(0)
    b, c, h, w = img.shape
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    if pad_h or pad_w:
        img = torch.nn.functional.pad(img, (0, pad_w, 0, pad_h), mode="replicate")

    dtype = img.dtype
    m = _RGB_TO_YCC.to(dtype)
    offset = torch.tensor([0.0, 0.5, 0.5], dtype=dtype).view(1, 3, 1, 1)
    ycc = torch.einsum("ij,bjhw->bihw", m, img) + offset

    # codec works on 0..255 values centered at zero
    x = ycc * 255.0 - 128.0
    blocks = _blockify(x)

    d = _dct_matrix(dtype=dtype)
    coeffs = d @ blocks @ d.T
    luma, chroma = quality_tables(quality, dtype=dtype)
    qtab = torch.stack([luma, chroma, chroma])  # (3, 8, 8)
    qtab = qtab.view(1, 3, 1, 1, 8, 8)
    coeffs = soft_round(coeffs / qtab) * qtab
    blocks = d.T @ coeffs @ d

    x = _unblockify(blocks, img.shape[2], img.shape[3])
    ycc = (x + 128.0) / 255.0
    rgb = torch.einsum("ij,bjhw->bihw", _YCC_TO_RGB.to(dtype), ycc - offset)
    rgb = rgb[:, :, :h, :w].clamp(0.0, 1.0)
    return rgb.squeeze(0) if single else rgb


def jpeg_codec(img: torch.Tensor, quality: int) -> torch.Tensor:
    """Real JPEG round-trip through Pillow (non-differentiable, test mode)."""
    single = img.dim() == 3
    if single:
        img = img.unsqueeze(0)
    out = []
    for one in img:
        arr = one.detach().clamp(0, 1).mul(255).add(0.5).floor().to(torch.uint8)
        pil = Image.fromarray(arr.permute(1, 2, 0).cpu().numpy())
        buf = io.BytesIO()
        pil.save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        back = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
        out.append(torch.from_numpy(back).permute(2, 0, 1).to(img.dtype))
    res = torch.stack(out)
    return res.squeeze(0) if single else res
