"""Shared conventions: images, messages, corpora, and checkpoint I/O.

Images live as float32 torch tensors of shape (3, H, W) with values in
[0, 1]; batches stack on a leading dimension. Messages are float tensors of
length L with entries in {0, 1}. Every operation here is a pure function of
its inputs plus an explicit seed.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}

CHECKPOINT_MAGIC = "resmark-checkpoint-v1"

STAGE_ORDER = {"init": 0, "stage1": 1, "stage2": 2}


class ConfigurationError(ValueError):
    """Raised for invalid run configuration (bad corpus, incompatible resume, ...)."""


def validate_image(img: torch.Tensor) -> torch.Tensor:
    """Check the (…, 3, H, W), finite, [0, 1] contract and return the input."""
    if img.shape[-3] != 3:
        raise ValueError(f"expected 3 channels, got shape {tuple(img.shape)}")
    if not torch.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("image values outside [0, 1]")
    return img


def load_image(path: str | Path, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Load an 8-bit image as a (3, H, W) float tensor in [0, 1].

    Non-RGB inputs are converted (grayscale replicated across channels).
    When ``size`` is given the image is bilinearly resized to (H, W).
    """
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(img: torch.Tensor, path: str | Path) -> None:
    """Write a (3, H, W) tensor as an 8-bit image; pixel = round-half-up(clamp(v)·255)."""
    arr = to_uint8(img)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """Quantize to uint8 with the round-half-up convention."""
    v = img.detach().clamp(0.0, 1.0).cpu().numpy().astype(np.float64)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def quantize_roundtrip(img: torch.Tensor) -> torch.Tensor:
    """Simulate the 8-bit storage path: round(clamp(img)·255)/255.

    Used wherever a residual is applied to stored files rather than float
    tensors, so saturation at 0/255 is honestly modelled.
    """
    v = img.clamp(0.0, 1.0)
    return torch.floor(v * 255.0 + 0.5) / 255.0


def random_message(length: int, seed: int) -> torch.Tensor:
    """I.i.d. uniform bits in {0, 1} as float32; deterministic in (length, seed)."""
    if length <= 0:
        raise ValueError(f"message length must be positive, got {length}")
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, 2, (length,), generator=g).float()


def random_message_batch(batch: int, length: int, generator: torch.Generator) -> torch.Tensor:
    """(batch, L) of uniform bits drawn from an explicit generator stream."""
    return torch.randint(0, 2, (batch, length), generator=generator).float()


def message_to_hex(bits: torch.Tensor) -> str:
    """Pack a {0,1} vector into a hex string of L/4 digits (L padded to a nibble)."""
    b = [int(round(float(x))) for x in bits]
    value = 0
    for bit in b:
        value = (value << 1) | bit
    pad = (-len(b)) % 4
    value <<= pad
    return format(value, f"0{(len(b) + pad) // 4}x")


def hex_to_message(hexstr: str, length: int) -> torch.Tensor:
    value = int(hexstr, 16)
    total = len(hexstr) * 4
    if total < length:
        raise ValueError(f"hex string {hexstr!r} too short for {length} bits")
    bits = [(value >> (total - 1 - i)) & 1 for i in range(length)]
    return torch.tensor(bits, dtype=torch.float32)


def message_to_bitstring(bits: torch.Tensor) -> str:
    return "".join(str(int(round(float(x)))) for x in bits)


@dataclass
class Corpus:
    """A directory (or explicit list) of image files with deterministic iteration.

    ``paired`` mode yields disjoint (cover, second-cover) batches for
    residual-transfer training and evaluation.
    """

    paths: list[Path]
    size: tuple[int, int]
    seed: int = 0
    paired: bool = False

    @classmethod
    def from_dir(
        cls,
        root: str | Path,
        size: tuple[int, int],
        seed: int = 0,
        paired: bool = False,
    ) -> "Corpus":
        root = Path(root)
        paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS)
        if not paths:
            raise ConfigurationError(f"no images found under {root}")
        return cls(paths=paths, size=size, seed=seed, paired=paired)

    def __len__(self) -> int:
        return len(self.paths)

    def _order(self, epoch: int) -> list[int]:
        g = torch.Generator().manual_seed(self.seed * 1_000_003 + epoch)
        return torch.randperm(len(self.paths), generator=g).tolist()

    def _load_stack(self, indices: Sequence[int], workers: int) -> torch.Tensor:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                imgs = list(pool.map(lambda i: load_image(self.paths[i], self.size), indices))
        else:
            imgs = [load_image(self.paths[i], self.size) for i in indices]
        return torch.stack(imgs)

    def batches(
        self, batch_size: int, epoch: int = 0, workers: int = 1
    ) -> Iterator[torch.Tensor] | Iterator[tuple[torch.Tensor, torch.Tensor]]:
        """One epoch of batches; drops the last incomplete batch.

        Order is a pure function of (seed, epoch) regardless of worker count
        (parallel loads reassemble in index order).
        """
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        need = 2 * batch_size if self.paired else batch_size
        if len(self.paths) < need:
            raise ConfigurationError(
                f"corpus of {len(self.paths)} images cannot fill a "
                f"{'paired ' if self.paired else ''}batch of {batch_size}"
            )
        order = self._order(epoch)
        step = need
        for start in range(0, len(order) - step + 1, step):
            chunk = order[start : start + step]
            if self.paired:
                yield (
                    self._load_stack(chunk[:batch_size], workers),
                    self._load_stack(chunk[batch_size:], workers),
                )
            else:
                yield self._load_stack(chunk, workers)


def iterate_batches(corpus: Corpus, batch_size: int, epoch: int = 0, workers: int = 1):
    return corpus.batches(batch_size, epoch=epoch, workers=workers)


@dataclass
class Checkpoint:
    """Single-file training state: parameter blobs plus a JSON header.

    On disk this is a zip archive with two entries:
      header.json  — architecture config, stage marker, seed, epoch
      state.pt     — torch-serialized parameter / optimizer / RNG blobs
    """

    arch: dict
    stage: str  # "init" | "stage1" | "stage2"
    seed: int
    epoch: int
    state: dict = field(default_factory=dict)
    stage1_trained: bool = False

    def header(self) -> dict:
        return {
            "magic": CHECKPOINT_MAGIC,
            "arch": self.arch,
            "stage": self.stage,
            "seed": self.seed,
            "epoch": self.epoch,
            "stage1_trained": self.stage1_trained,
        }


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Atomic, byte-reproducible write (fixed zip metadata, temp-then-rename)."""
    if ckpt.stage not in STAGE_ORDER:
        raise ValueError(f"unknown stage marker {ckpt.stage!r}")
    path = Path(path)
    buf = io.BytesIO()
    torch.save(ckpt.state, buf)
    blob = buf.getvalue()
    header = json.dumps(ckpt.header(), sort_keys=True, indent=1).encode()

    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name, data in (("header.json", header), ("state.pt", blob)):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("magic") != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"{path} is not a recognized checkpoint")
        state = torch.load(io.BytesIO(zf.read("state.pt")), weights_only=False)
    return Checkpoint(
        arch=header["arch"],
        stage=header["stage"],
        seed=header["seed"],
        epoch=header["epoch"],
        state=state,
        stage1_trained=header["stage1_trained"],
    )


def checkpoint_hash(path: str | Path) -> str:
    """SHA-256 of the checkpoint file; used to fingerprint residuals and reports."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
