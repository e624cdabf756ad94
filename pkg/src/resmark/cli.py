"""Command-line surface: train, make-residual, stamp, extract, eval, attack,
bench, saliency. All commands accept --config (YAML) plus flag overrides;
every run echoes its resolved configuration into the output directory.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import evaluation, noise
from .config import arch_from_config, echo_config, resolve_config, train_from_config
from .core import (
    ConfigurationError,
    Corpus,
    checkpoint_hash,
    hex_to_message,
    load_checkpoint,
    load_image,
    message_to_bitstring,
    message_to_hex,
    random_message,
)
from .embedder import (
    extract,
    load_residual,
    make_residual,
    save_residual,
    stamp_files,
    throughput_benchmark,
)
from .models import bundle_from_checkpoint, init_model
from .training import run_training


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, help="master seed for all randomness")
    p.add_argument("--workers", type=int, help="worker count for parallel sections")
    p.add_argument("--out", dest="output", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resmark",
        description="Invisible image watermarking: two-stage training, "
        "single-shot residual stamping, robustness evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run stage-1/stage-2 training")
    _add_common(p)
    p.add_argument("--corpus", help="directory of training images")
    p.add_argument("--val-corpus", dest="val_corpus", help="held-out validation images")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--epochs-stage1", type=int, dest="epochs_stage1")
    p.add_argument("--epochs-stage2", type=int, dest="epochs_stage2")
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")

    p = sub.add_parser("make-residual", help="derive a reusable RGB residual")
    _add_common(p)
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--message", help="hex message (L/4 digits); random from seed if omitted")
    p.add_argument("--template", help="template cover image (packaged default if omitted)")
    p.add_argument("--residual", help="output residual file")

    p = sub.add_parser("stamp", help="stamp a residual onto a directory of images")
    _add_common(p)
    p.add_argument("--residual", help="residual file")
    p.add_argument("--in", dest="input", help="input image directory")
    p.add_argument("--roundtrip", action="store_true", default=None,
                   help="quantize through the 8-bit storage path")

    p = sub.add_parser("extract", help="decode the message from an image")
    _add_common(p)
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--in", dest="input", help="image file")

    p = sub.add_parser("eval", help="robustness evaluation over the distortion suite")
    _add_common(p)
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--corpus", help="test image directory")
    p.add_argument("--paradigm", choices=["latent", "single_shot"])
    p.add_argument("--suite", help="serialized distortion suite (default: the 18 test factors)")
    p.add_argument("--roundtrip", action="store_true", default=None)

    p = sub.add_parser("attack", help="residual-removal attack evaluation")
    _add_common(p)
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--corpus", help="test image directory")
    p.add_argument("--suite", help="serialized distortion suite (default: the 18 test factors)")
    p.add_argument("--exact", action="store_true",
                   help="exact-cancellation control instead of cross-image attack")

    p = sub.add_parser("bench", help="stamping throughput benchmark")
    _add_common(p)
    p.add_argument("--residual", help="residual file")
    p.add_argument("--count", type=int, help="number of synthetic images")

    p = sub.add_parser("saliency", help="decoder gradient heatmap for an image/message")
    _add_common(p)
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--in", dest="input", help="image file")
    p.add_argument("--message", help="hex message")

    return parser


def _overrides(args: argparse.Namespace) -> dict:
    direct = ("seed", "workers", "output", "corpus", "val_corpus", "checkpoint",
              "residual", "input", "message", "template", "paradigm", "suite",
              "roundtrip", "count")
    train_keys = ("epochs_stage1", "epochs_stage2", "learning_rate", "batch_size")
    out = {}
    for key in direct:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    for key in train_keys:
        value = getattr(args, key, None)
        if value is not None:
            out[f"train.{key}"] = value
    return out


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise ConfigurationError(f"missing required setting: {key}")
    return cfg[key]


def _load_bundle(cfg: dict):
    path = _require(cfg, "checkpoint")
    ckpt = load_checkpoint(path)
    return bundle_from_checkpoint(ckpt), ckpt, checkpoint_hash(path)


def default_template(size: tuple[int, int]) -> torch.Tensor:
    """The packaged held-out template image, resized to the model size."""
    with resources.as_file(resources.files("resmark.data") / "template.png") as p:
        return load_image(p, size)


def _message_for(cfg: dict, length: int) -> torch.Tensor:
    if cfg.get("message"):
        return hex_to_message(cfg["message"], length)
    return random_message(length, cfg["seed"])


def _suite_for(cfg: dict) -> list[noise.DistortionSpec]:
    if cfg.get("suite"):
        return noise.suite_from_json(Path(cfg["suite"]).read_text())
    return noise.test_suite()


def cmd_train(cfg: dict, args) -> int:
    out = Path(cfg["output"])
    echo_config(cfg, out)
    arch = arch_from_config(cfg)
    train_cfg = train_from_config(cfg)
    corpus = Corpus.from_dir(_require(cfg, "corpus"), arch.image_size, seed=cfg["seed"])
    val = (
        Corpus.from_dir(cfg["val_corpus"], arch.image_size, seed=cfg["seed"])
        if cfg.get("val_corpus")
        else None
    )
    bundle = init_model(arch, cfg["seed"])
    path = run_training(train_cfg, bundle, corpus, out, val_corpus=val,
                        resume=getattr(args, "resume", None))
    print(f"checkpoint written to {path}")
    return 0


def cmd_make_residual(cfg: dict, args) -> int:
    out = Path(cfg["output"])
    echo_config(cfg, out)
    bundle, ckpt, chash = _load_bundle(cfg)
    if ckpt.stage == "init":
        raise ConfigurationError("checkpoint is untrained; train before deriving residuals")
    bits = _message_for(cfg, bundle.cfg.message_length)
    if cfg.get("template"):
        template = load_image(cfg["template"], bundle.cfg.image_size)
        template_id = str(cfg["template"])
    else:
        template = default_template(bundle.cfg.image_size)
        template_id = "packaged-default"
    residual = make_residual(bundle, template, bits, checkpoint_hash=chash,
                             template_id=template_id)
    path = Path(cfg["residual"] or out / "watermark.rmr")
    save_residual(residual, path)
    print(f"residual written to {path} (message {message_to_hex(bits)})")
    return 0


def cmd_stamp(cfg: dict, args) -> int:
    out = Path(cfg["output"])
    echo_config(cfg, out)
    residual = load_residual(_require(cfg, "residual"))
    in_root = Path(_require(cfg, "input"))
    if in_root.is_dir():
        inputs = sorted(
            p for p in in_root.rglob("*")
            if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"}
        )
    else:
        inputs = [Path(line) for line in in_root.read_text().splitlines() if line.strip()]
        in_root = Path(in_root).parent
    n = stamp_files(residual, inputs, in_root, out, workers=cfg["workers"],
                    roundtrip=bool(cfg["roundtrip"]))
    print(f"stamped {n} images into {out}")
    return 0


def cmd_extract(cfg: dict, args) -> int:
    bundle, _, _ = _load_bundle(cfg)
    img = load_image(_require(cfg, "input"))
    bits = extract(bundle, img)
    print(f"hex: {message_to_hex(bits)}")
    print(f"bits: {message_to_bitstring(bits)}")
    return 0


def cmd_eval(cfg: dict, args, attack: str | None = None) -> int:
    out = Path(cfg["output"])
    echo_config(cfg, out)
    bundle, _, chash = _load_bundle(cfg)
    corpus = Corpus.from_dir(_require(cfg, "corpus"), bundle.cfg.image_size, seed=cfg["seed"])
    report = evaluation.evaluate_robustness(
        bundle, corpus, _suite_for(cfg),
        paradigm=cfg["paradigm"] if attack is None else "single_shot",
        seed=cfg["seed"],
        batch_size=cfg["eval_batch_size"],
        max_batches=cfg["eval_batches"],
        attack=attack,
        roundtrip=bool(cfg["roundtrip"]),
        metadata={"checkpoint_hash": chash},
    )
    name = "attack_report.json" if attack else "eval_report.json"
    (out / name).write_text(report.to_json())
    print(report.render())
    return 0


def cmd_attack(cfg: dict, args) -> int:
    return cmd_eval(cfg, args, attack="exact" if args.exact else "cross")


def cmd_bench(cfg: dict, args) -> int:
    out = Path(cfg["output"])
    echo_config(cfg, out)
    residual = load_residual(_require(cfg, "residual"))
    report = throughput_benchmark(residual, n=cfg["count"], workers=cfg["workers"],
                                  seed=cfg["seed"])
    for key, value in report.items():
        print(f"{key}: {value}")
    return 0


def cmd_saliency(cfg: dict, args) -> int:
    out = Path(cfg["output"])
    echo_config(cfg, out)
    bundle, _, _ = _load_bundle(cfg)
    img = load_image(_require(cfg, "input"), bundle.cfg.image_size)
    bits = _message_for(cfg, bundle.cfg.message_length)
    heat = evaluation.decoder_saliency(bundle, img, bits)
    arr = np.floor(heat.numpy() * 255.0 + 0.5).astype(np.uint8)
    path = out / "saliency.png"
    Image.fromarray(arr, mode="L").save(path)
    print(f"saliency map written to {path}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "make-residual": cmd_make_residual,
    "stamp": cmd_stamp,
    "extract": cmd_extract,
    "eval": cmd_eval,
    "attack": cmd_attack,
    "bench": cmd_bench,
    "saliency": cmd_saliency,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.config, _overrides(args))
        return _COMMANDS[args.command](cfg, args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
