"""The distortion suite: 18 attack kinds plus Identity.

Train mode draws intensities uniformly from per-kind ranges and keeps every
kernel differentiable w.r.t. the watermarked image (masking kinds use
input-independent masks, so gradients flow through the kept pixels; JPEG
uses the smooth surrogate). Test mode applies the fixed factors, with the
real codec for JPEG. Geometry-changing kinds always renormalize back to
(3, H, W) with black fill so the fixed-size decoder can consume the output.

Magnitudes quoted on the 0–255 scale (Gaussian noise σ) are divided by 255
internally; all images stay in [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import torch
import torch.nn.functional as F

from .jpeg import jpeg_codec, jpeg_surrogate

# train ranges and fixed test factors per kind; ± test entries expand to
# sign variants whose accuracies are averaged by the evaluation harness
TRAIN_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "JPEG": {"q": (40, 100)},
    "GN": {"sigma": (3, 10)},
    "GF": {"sigma": (3, 8)},
    "Dropout": {"p": (0.7, 1.0)},
    "MF": {"sigma": (0, 7)},
    "Color": {"p": (-0.5, 0.5)},
    "Bright": {"p": (0.0, 0.5)},
    "Saturation": {"p": (-0.8, 0.8)},
    "Hue": {"p": (-0.7, 0.7)},
    "Contrast": {"p": (-0.8, 0.8)},
    "Resize": {"p": (-0.5, 0.5)},
    "Crop": {"p": (0.7, 1.0)},
    "PIP": {"p": (0.25, 1.0)},
    "Padding": {"p": (0, 50)},
    "Occlusion": {"p": (0.0625, 0.25)},
    "Rotate": {"r": (0, 360)},
    "Shear": {"s": (0, 30)},
    "Affine": {"r": (0, 360), "s": (0, 30)},
    "Identity": {},
}

# several test factors deliberately exceed the train range (MF, Color,
# Saturation); they are applied as printed
TEST_POINTS: dict[str, list[dict[str, float]]] = {
    "JPEG": [{"q": 50}],
    "GN": [{"sigma": 10}],
    "GF": [{"sigma": 8}],
    "Dropout": [{"p": 0.7}],
    "MF": [{"sigma": 11}],
    "Color": [{"p": 0.9}, {"p": -0.9}],
    "Bright": [{"p": 0.5}],
    "Saturation": [{"p": 0.9}, {"p": -0.9}],
    "Hue": [{"p": 0.6}, {"p": -0.6}],
    "Contrast": [{"p": 0.8}, {"p": -0.8}],
    "Resize": [{"p": 0.5}, {"p": -0.5}],
    "Crop": [{"p": 0.7}],
    "PIP": [{"p": 0.25}],
    "Padding": [{"p": 50}],
    "Occlusion": [{"p": 0.25}],
    "Rotate": [{"r": 180}],
    "Shear": [{"s": 30}],
    "Affine": [{"r": 180, "s": 30}],
}

KINDS = tuple(TRAIN_RANGES)  # includes Identity


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    params: dict[str, float] = field(default_factory=dict)
    mode: str = "test"  # "train" | "test"
    variants: tuple[dict[str, float], ...] | None = None  # ± test factors

    def __post_init__(self):
        if self.kind not in TRAIN_RANGES:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        if self.mode not in ("train", "test"):
            raise ValueError(f"mode must be train or test, got {self.mode!r}")
        if self.mode == "train":
            for name, (lo, hi) in TRAIN_RANGES[self.kind].items():
                v = self.params.get(name)
                if v is None or not (lo <= v <= hi):
                    raise ValueError(
                        f"{self.kind}.{name}={v} outside train range [{lo}, {hi}]"
                    )

    def expand(self) -> list["DistortionSpec"]:
        """Sign variants as individual single-parameter specs."""
        if not self.variants:
            return [self]
        return [replace(self, params=dict(v), variants=None) for v in self.variants]


def sample_train_spec(
    generator: torch.Generator, kinds: tuple[str, ...] | list[str] | None = None
) -> DistortionSpec:
    """Uniform kind over the 18 distortions plus Identity; uniform params in range.

    ``kinds`` restricts the draw to a subset (training-policy ablations).
    """
    pool = tuple(kinds) if kinds else KINDS
    for k in pool:
        if k not in TRAIN_RANGES:
            raise ValueError(f"unknown distortion kind {k!r}")
    idx = int(torch.randint(len(pool), (1,), generator=generator))
    kind = pool[idx]
    params = {}
    for name, (lo, hi) in TRAIN_RANGES[kind].items():
        params[name] = lo + (hi - lo) * float(torch.rand(1, generator=generator))
    return DistortionSpec(kind=kind, params=params, mode="train")


def test_suite() -> list[DistortionSpec]:
    """The 18 fixed-factor test specs (Identity excluded)."""
    suite = []
    for kind, variants in TEST_POINTS.items():
        suite.append(
            DistortionSpec(
                kind=kind,
                params=dict(variants[0]),
                mode="test",
                variants=tuple(variants) if len(variants) > 1 else None,
            )
        )
    return suite


def suite_to_json(suite: list[DistortionSpec]) -> str:
    return json.dumps(
        [
            {"kind": s.kind, "params": s.params, "mode": s.mode,
             "variants": list(s.variants) if s.variants else None}
            for s in suite
        ],
        indent=1,
    )


def suite_from_json(text: str) -> list[DistortionSpec]:
    return [
        DistortionSpec(
            kind=d["kind"], params=d["params"], mode=d["mode"],
            variants=tuple(d["variants"]) if d.get("variants") else None,
        )
        for d in json.loads(text)
    ]


# ---------------------------------------------------------------------------
# kernels


def _odd_kernel(value: float) -> int:
    k = int(round(value))
    if k < 1:
        return 1
    return k if k % 2 == 1 else k + 1


def _gaussian_blur(img: torch.Tensor, kernel: int) -> torch.Tensor:
    if kernel == 1:
        return img
    sigma = kernel / 6.0
    coords = torch.arange(kernel, dtype=img.dtype, device=img.device) - (kernel - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    c = img.shape[1]
    pad = kernel // 2
    x = F.pad(img, (pad, pad, pad, pad), mode="reflect")
    x = F.conv2d(x, g.view(1, 1, 1, kernel).expand(c, 1, 1, kernel), groups=c)
    x = F.conv2d(x, g.view(1, 1, kernel, 1).expand(c, 1, kernel, 1), groups=c)
    return x


def _median_filter(img: torch.Tensor, kernel: int) -> torch.Tensor:
    if kernel == 1:
        return img
    pad = kernel // 2
    x = F.pad(img, (pad, pad, pad, pad), mode="reflect")
    x = x.unfold(2, kernel, 1).unfold(3, kernel, 1)
    return x.flatten(-2).median(dim=-1).values


def _grayscale(img: torch.Tensor) -> torch.Tensor:
    w = torch.tensor([0.299, 0.587, 0.114], dtype=img.dtype, device=img.device)
    return torch.einsum("c,bchw->bhw", w, img).unsqueeze(1)


_RGB_TO_YUV = torch.tensor(
    [
        [0.299, 0.587, 0.114],
        [-0.14713, -0.28886, 0.436],
        [0.615, -0.51499, -0.10001],
    ],
    dtype=torch.float64,
)
_YUV_TO_RGB = torch.linalg.inv(_RGB_TO_YUV)


def _hue_rotate(img: torch.Tensor, fraction: float) -> torch.Tensor:
    """Rotate the chroma plane by fraction·180°; linear, hence differentiable."""
    angle = fraction * math.pi
    m = _RGB_TO_YUV.to(img.dtype)
    yuv = torch.einsum("ij,bjhw->bihw", m, img)
    cos, sin = math.cos(angle), math.sin(angle)
    rot = torch.tensor(
        [[1, 0, 0], [0, cos, -sin], [0, sin, cos]], dtype=img.dtype, device=img.device
    )
    yuv = torch.einsum("ij,bjhw->bihw", rot, yuv)
    return torch.einsum("ij,bjhw->bihw", _YUV_TO_RGB.to(img.dtype), yuv)


def _affine_apply(img: torch.Tensor, rotate_deg: float, shear_deg: float) -> torch.Tensor:
    """Rotate and/or shear with bilinear sampling and black fill.

    The matrix is assembled in float64 so that full turns collapse to the
    identity map up to float rounding.
    """
    theta = math.radians(rotate_deg)
    shear = math.radians(shear_deg)
    rot = torch.tensor(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]],
        dtype=torch.float64,
    )
    sh = torch.tensor([[1.0, math.tan(shear)], [0.0, 1.0]], dtype=torch.float64)
    m = rot @ sh
    mat = torch.zeros(img.shape[0], 2, 3, dtype=torch.float64)
    mat[:, :2, :2] = m
    grid = F.affine_grid(mat, list(img.shape), align_corners=False).to(img.dtype)
    return F.grid_sample(img, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def _square_mask(
    shape: tuple[int, int, int, int],
    area_fraction: float,
    generator: torch.Generator,
    dtype,
) -> torch.Tensor:
    """Per-item (B, 1, H, W) mask: ones inside a random square of the given area."""
    b, _, h, w = shape
    side_h = min(h, int(round(math.sqrt(area_fraction) * h)))
    side_w = min(w, int(round(math.sqrt(area_fraction) * w)))
    mask = torch.zeros(b, 1, h, w, dtype=dtype)
    for i in range(b):
        top = int(torch.randint(h - side_h + 1, (1,), generator=generator))
        left = int(torch.randint(w - side_w + 1, (1,), generator=generator))
        mask[i, :, top : top + side_h, left : left + side_w] = 1.0
    return mask


def apply(
    spec: DistortionSpec,
    marked: torch.Tensor,
    cover: torch.Tensor,
    generator: torch.Generator | int | None = None,
) -> torch.Tensor:
    """Distort a watermarked batch; always returns a clamped (B, 3, H, W) batch.

    ``cover`` is consulted by kinds that restore original content (Dropout)
    or need natural canvases (PIP). Train-mode kernels propagate gradients
    to ``marked``.
    """
    if marked.shape != cover.shape:
        raise ValueError(f"shape mismatch {tuple(marked.shape)} vs {tuple(cover.shape)}")
    single = marked.dim() == 3
    if single:
        marked, cover = marked.unsqueeze(0), cover.unsqueeze(0)
    if isinstance(generator, int):
        generator = torch.Generator().manual_seed(generator)
    if generator is None:
        generator = torch.Generator().manual_seed(0)

    b, _, h, w = marked.shape
    p = spec.params
    kind = spec.kind

    if kind == "Identity":
        out = marked
    elif kind == "JPEG":
        if spec.mode == "train":
            out = jpeg_surrogate(marked, p["q"])
        else:
            out = jpeg_codec(marked, int(round(p["q"])))
    elif kind == "GN":
        noise = torch.randn(marked.shape, generator=generator, dtype=marked.dtype)
        out = marked + noise * (p["sigma"] / 255.0)
    elif kind == "GF":
        out = _gaussian_blur(marked, _odd_kernel(p["sigma"]))
    elif kind == "MF":
        out = _median_filter(marked, _odd_kernel(p["sigma"]))
    elif kind == "Dropout":
        keep = (torch.rand(b, 1, h, w, generator=generator) < p["p"]).to(marked.dtype)
        out = cover + keep * (marked - cover)
    elif kind == "Color":
        out = marked * (1.0 + p["p"])
    elif kind == "Bright":
        out = marked * (1.0 + p["p"])
    elif kind == "Saturation":
        gray = _grayscale(marked)
        out = gray + (1.0 + p["p"]) * (marked - gray)
    elif kind == "Hue":
        out = _hue_rotate(marked, p["p"])
    elif kind == "Contrast":
        mean = marked.mean(dim=(1, 2, 3), keepdim=True)
        out = mean + (1.0 + p["p"]) * (marked - mean)
    elif kind == "Resize":
        nh = max(1, int(round((1.0 + p["p"]) * h)))
        nw = max(1, int(round((1.0 + p["p"]) * w)))
        if (nh, nw) == (h, w):
            out = marked
        else:
            x = F.interpolate(marked, size=(nh, nw), mode="bilinear", align_corners=False)
            out = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    elif kind == "Crop":
        mask = _square_mask((b, 1, h, w), p["p"], generator, marked.dtype)
        out = marked * mask
    elif kind == "Occlusion":
        mask = _square_mask((b, 1, h, w), p["p"], generator, marked.dtype)
        out = marked * (1.0 - mask)
    elif kind == "Padding":
        pad = int(round(p["p"]))
        if pad == 0:
            out = marked
        else:
            x = F.pad(marked, (pad, pad, pad, pad), mode="constant", value=0.0)
            out = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    elif kind == "PIP":
        side_h = max(1, int(round(math.sqrt(p["p"]) * h)))
        side_w = max(1, int(round(math.sqrt(p["p"]) * w)))
        small = F.interpolate(marked, size=(side_h, side_w), mode="bilinear", align_corners=False)
        canvas = torch.roll(cover, shifts=1, dims=0)
        out = canvas.clone()
        for i in range(b):
            top = int(torch.randint(h - side_h + 1, (1,), generator=generator))
            left = int(torch.randint(w - side_w + 1, (1,), generator=generator))
            out[i, :, top : top + side_h, left : left + side_w] = small[i]
    elif kind == "Rotate":
        out = _affine_apply(marked, p["r"], 0.0)
    elif kind == "Shear":
        out = _affine_apply(marked, 0.0, p["s"])
    elif kind == "Affine":
        out = _affine_apply(marked, p["r"], p["s"])
    else:  # pragma: no cover - guarded by DistortionSpec
        raise ValueError(f"unknown distortion kind {kind!r}")

    out = out.clamp(0.0, 1.0)
    return out.squeeze(0) if single else out
