import json
import math

import pytest
import torch

from resmark.jpeg import jpeg_codec, jpeg_surrogate, quality_tables, soft_round
from resmark.noise import (
    KINDS,
    TEST_POINTS,
    TRAIN_RANGES,
    DistortionSpec,
    apply,
    sample_train_spec,
    suite_from_json,
    suite_to_json,
)
from resmark.noise import test_suite as distortion_suite


def _img_batch(b=2, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 3, size, size, generator=g) * 0.8 + 0.1


class TestSpecs:
    def test_kind_count(self):
        assert len(KINDS) == 19 and "Identity" in KINDS
        assert len(TEST_POINTS) == 18 and "Identity" not in TEST_POINTS

    def test_suite_has_18_entries(self):
        suite = distortion_suite()
        assert len(suite) == 18
        assert {s.kind for s in suite} == set(TEST_POINTS)

    def test_signed_factors_expand(self):
        by_kind = {s.kind: s for s in distortion_suite()}
        assert len(by_kind["Color"].expand()) == 2
        assert len(by_kind["JPEG"].expand()) == 1
        params = [v.params["p"] for v in by_kind["Hue"].expand()]
        assert sorted(params) == [-0.6, 0.6]

    def test_train_range_enforced(self):
        with pytest.raises(ValueError):
            DistortionSpec("JPEG", {"q": 30}, mode="train")
        DistortionSpec("JPEG", {"q": 30}, mode="test")  # test factors unconstrained

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            DistortionSpec("Sharpen", {})

    def test_json_roundtrip(self):
        suite = distortion_suite()
        again = suite_from_json(suite_to_json(suite))
        assert again == suite

    def test_sampling_in_range(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(200):
            s = sample_train_spec(g)
            for name, (lo, hi) in TRAIN_RANGES[s.kind].items():
                assert lo <= s.params[name] <= hi

    def test_sampling_uniform_over_kinds(self):
        # binomial oracle: 19000 draws, each kind expected 1000 ± 150 (>5 sigma)
        g = torch.Generator().manual_seed(123)
        counts = {k: 0 for k in KINDS}
        for _ in range(19_000):
            counts[sample_train_spec(g).kind] += 1
        for k, n in counts.items():
            assert 850 <= n <= 1150, (k, n)

    def test_sampling_subset(self):
        g = torch.Generator().manual_seed(0)
        kinds = ("Identity", "GN")
        for _ in range(20):
            assert sample_train_spec(g, kinds).kind in kinds
        with pytest.raises(ValueError):
            sample_train_spec(g, ("Nope",))


class TestIdentityLimits:
    """Parameter values at which a distortion must reduce to a no-op."""

    def test_identity_kind(self):
        x = _img_batch()
        assert torch.equal(apply(DistortionSpec("Identity"), x, x), x)

    @pytest.mark.parametrize(
        "kind,params",
        [
            ("Dropout", {"p": 1.0}),
            ("Color", {"p": 0.0}),
            ("Bright", {"p": 0.0}),
            ("Saturation", {"p": 0.0}),
            ("Hue", {"p": 0.0}),
            ("Contrast", {"p": 0.0}),
            ("Resize", {"p": 0.0}),
            ("Crop", {"p": 1.0}),
            ("Padding", {"p": 0}),
            ("Rotate", {"r": 0}),
            ("Rotate", {"r": 360}),
            ("Shear", {"s": 0}),
            ("Affine", {"r": 0, "s": 0}),
            ("Affine", {"r": 360, "s": 0}),
        ],
    )
    def test_limit_is_noop(self, kind, params):
        x = _img_batch()
        out = apply(DistortionSpec(kind, params), x, x, generator=0)
        assert (out - x).abs().max() <= 1e-5, kind

    def test_gn_sigma_zero(self):
        x = _img_batch()
        out = apply(DistortionSpec("GN", {"sigma": 0}, mode="test"), x, x, generator=0)
        assert torch.equal(out, x)


class TestKernelOracles:
    def test_gn_matches_half_normal_oracle(self):
        # E|N(0, sigma)| = sigma·sqrt(2/pi); interior pixels avoid the clamp
        sigma = 10.0
        x = torch.full((8, 3, 64, 64), 0.5)
        out = apply(DistortionSpec("GN", {"sigma": sigma}), x, x, generator=7)
        mean_abs = (out - x).abs().mean().item()
        expected = (sigma / 255.0) * math.sqrt(2 / math.pi)
        assert mean_abs == pytest.approx(expected, rel=0.05)

    def test_gf_preserves_constant(self):
        x = torch.full((1, 3, 32, 32), 0.37)
        out = apply(DistortionSpec("GF", {"sigma": 8}), x, x)
        assert (out - x).abs().max() <= 1e-6

    def test_gf_smooths(self):
        x = _img_batch(1)
        out = apply(DistortionSpec("GF", {"sigma": 8}), x, x)
        assert out.var() < x.var()

    def test_mf_removes_salt_noise(self):
        x = torch.full((1, 3, 33, 33), 0.5)
        noisy = x.clone()
        noisy[0, :, ::7, ::7] = 1.0  # isolated impulses
        out = apply(DistortionSpec("MF", {"sigma": 5}), noisy, x)
        assert (out - x).abs().max() <= 1e-6

    def test_dropout_mixes_cover_and_marked(self):
        g = torch.Generator().manual_seed(3)
        cover = torch.zeros(4, 3, 32, 32)
        marked = torch.ones(4, 3, 32, 32)
        out = apply(DistortionSpec("Dropout", {"p": 0.7}), marked, cover, generator=3)
        frac = out.mean().item()  # fraction of kept watermark pixels
        assert frac == pytest.approx(0.7, abs=0.03)
        # mask is shared across channels
        assert torch.equal(out[:, 0], out[:, 1])

    def test_brightness_scales(self):
        x = torch.full((1, 3, 8, 8), 0.4)
        out = apply(DistortionSpec("Bright", {"p": 0.5}), x, x)
        assert torch.allclose(out, torch.full_like(x, 0.6))

    def test_contrast_fixed_point_at_mean(self):
        x = torch.full((1, 3, 8, 8), 0.42)
        out = apply(DistortionSpec("Contrast", {"p": 0.8}), x, x)
        assert torch.allclose(out, x, atol=1e-6)

    def test_saturation_minus_one_is_grayscale(self):
        x = _img_batch(1)
        out = apply(DistortionSpec("Saturation", {"p": -1.0}, mode="test"), x, x)
        assert (out[:, 0] - out[:, 1]).abs().max() <= 1e-5
        assert (out[:, 1] - out[:, 2]).abs().max() <= 1e-5

    def test_hue_preserves_grayscale(self):
        x = torch.full((1, 3, 16, 16), 0.5)
        out = apply(DistortionSpec("Hue", {"p": 0.6}), x, x)
        assert (out - x).abs().max() <= 5e-5

    def test_crop_keeps_square_region(self):
        x = torch.ones(1, 3, 32, 32)
        out = apply(DistortionSpec("Crop", {"p": 0.7}), x, x, generator=1)
        kept = out.sum().item() / (3 * 32 * 32)
        side = round(math.sqrt(0.7) * 32)
        assert kept == pytest.approx(side * side / (32 * 32), abs=1e-6)

    def test_occlusion_complements_crop(self):
        x = torch.ones(1, 3, 32, 32)
        c = apply(DistortionSpec("Crop", {"p": 0.25}, mode="test"), x, x, generator=5)
        o = apply(DistortionSpec("Occlusion", {"p": 0.25}), x, x, generator=5)
        assert torch.equal(c + o, torch.ones_like(x))

    def test_pip_places_shrunk_copy_on_other_cover(self):
        covers = _img_batch(4)
        marked = torch.ones_like(covers)
        out = apply(DistortionSpec("PIP", {"p": 0.25}), marked, covers, generator=2)
        canvas = torch.roll(covers, 1, dims=0)
        changed = (out - canvas).abs().sum(dim=1) > 1e-6
        area = changed.float().mean(dim=(1, 2))
        assert torch.all((area - 0.25).abs() < 0.02)

    def test_padding_shrinks_content(self):
        x = torch.ones(1, 3, 32, 32)
        out = apply(DistortionSpec("Padding", {"p": 50}), x, x)
        assert out[0, :, 0, 0].max() < 0.5  # border comes from the zero pad
        assert out[0, :, 16, 16].min() > 0.9

    def test_rotate_180_flips(self):
        x = _img_batch(1, 16)
        out = apply(DistortionSpec("Rotate", {"r": 180}), x, x)
        assert torch.allclose(out, torch.flip(x, dims=(2, 3)), atol=1e-4)

    def test_resize_preserves_shape(self):
        x = _img_batch(1, 32)
        for p in (-0.5, 0.5):
            out = apply(DistortionSpec("Resize", {"p": p}), x, x)
            assert out.shape == x.shape
            assert not torch.equal(out, x)

    def test_output_always_clamped(self):
        g = torch.Generator().manual_seed(9)
        x = _img_batch(2)
        for spec in distortion_suite():
            for variant in spec.expand():
                out = apply(variant, x, x, generator=9)
                assert out.min() >= 0 and out.max() <= 1, spec.kind
                assert out.shape == x.shape, spec.kind


class TestGradients:
    TRAIN_KINDS = [
        ("JPEG", {"q": 70.0}),
        ("GN", {"sigma": 5.0}),
        ("GF", {"sigma": 5.0}),
        ("Dropout", {"p": 0.8}),
        ("MF", {"sigma": 5.0}),
        ("Color", {"p": 0.3}),
        ("Bright", {"p": 0.3}),
        ("Saturation", {"p": 0.4}),
        ("Hue", {"p": 0.3}),
        ("Contrast", {"p": 0.4}),
        ("Resize", {"p": 0.3}),
        ("Crop", {"p": 0.8}),
        ("PIP", {"p": 0.5}),
        ("Padding", {"p": 20.0}),
        ("Occlusion", {"p": 0.1}),
        ("Rotate", {"r": 45.0}),
        ("Shear", {"s": 15.0}),
        ("Affine", {"r": 45.0, "s": 15.0}),
        ("Identity", {}),
    ]

    @pytest.mark.parametrize("kind,params", TRAIN_KINDS, ids=[k for k, _ in TRAIN_KINDS])
    def test_gradient_flows_and_matches_fd(self, kind, params):
        # every train-mode kernel must be differentiable wrt the marked image
        spec = DistortionSpec(kind, params, mode="train")
        g0 = torch.Generator().manual_seed(11)
        base = torch.rand(1, 3, 16, 16, generator=g0, dtype=torch.float64) * 0.5 + 0.25
        cover = torch.rand(1, 3, 16, 16, generator=g0, dtype=torch.float64) * 0.5 + 0.25
        target = torch.rand(1, 3, 16, 16, generator=g0, dtype=torch.float64)

        def f(x):
            out = apply(spec, x, cover, generator=torch.Generator().manual_seed(11))
            return ((out - target) ** 2).mean()

        x = base.clone().requires_grad_(True)
        f(x).backward()
        assert x.grad is not None
        assert torch.isfinite(x.grad).all()

        h = 1e-5
        flat = base.clone().flatten()
        gflat = x.grad.flatten()
        idx = torch.randperm(flat.numel(), generator=torch.Generator().manual_seed(1))[:4]
        for i in idx.tolist():
            orig = flat[i].item()
            flat[i] = orig + h
            hi = float(f(flat.view_as(base)))
            flat[i] = orig - h
            lo = float(f(flat.view_as(base)))
            flat[i] = orig
            num = (hi - lo) / (2 * h)
            ana = float(gflat[i])
            assert abs(num - ana) <= 1e-2 * max(abs(num), abs(ana), 1e-3), (kind, i, num, ana)


class TestJPEG:
    def test_surrogate_high_quality_near_identity(self):
        x = _img_batch(1, 32, seed=4)
        out = jpeg_surrogate(x, 100)
        assert (out - x).abs().max() <= 2 / 255

    def test_surrogate_tracks_codec_at_q50(self):
        # natural image statistics; i.i.d. noise is a pathological JPEG input
        from resmark.synthetic import synthetic_image

        x = synthetic_image((64, 64), seed=5).unsqueeze(0)
        sur = jpeg_surrogate(x, 50)
        real = jpeg_codec(x, 50)
        assert (sur - real).abs().mean() <= 6 / 255

    def test_codec_matches_pillow(self):
        import io

        import numpy as np
        from PIL import Image

        x = _img_batch(1, 32, seed=6)
        out = jpeg_codec(x, 75)
        arr = (x[0].numpy().transpose(1, 2, 0) * 255 + 0.5).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="JPEG", quality=75)
        ref = np.asarray(Image.open(buf)).astype(np.float32) / 255.0
        assert np.abs(out[0].numpy().transpose(1, 2, 0) - ref).max() <= 1e-6

    def test_quality_tables_q50_are_reference(self):
        # the unscaled baseline tables: a few spot values
        luma, chroma = quality_tables(50)
        assert luma[0, 0] == 16 and luma[7, 7] == 99
        assert chroma[0, 0] == 17 and chroma[7, 7] == 99

    def test_quality_scaling_monotone(self):
        prev = None
        for q in (10, 30, 50, 70, 90):
            luma, _ = quality_tables(q)
            if prev is not None:
                assert torch.all(luma <= prev)
            prev = luma

    def test_soft_round_matches_round_at_integers(self):
        x = torch.arange(-3.0, 3.01, 0.5)
        at_int = x[x == x.round()]
        assert torch.allclose(soft_round(at_int), at_int, atol=1e-6)

    def test_soft_round_close_to_hard_round(self):
        x = torch.linspace(-2, 2, 401)
        assert (soft_round(x) - x.round()).abs().max() <= 0.5

    def test_soft_round_differentiable(self):
        x = torch.linspace(-1, 1, 21, dtype=torch.float64).requires_grad_(True)
        soft_round(x).sum().backward()
        # d/dx [x - sin(2πx)/(2π)] = 1 - cos(2πx)
        expected = 1 - torch.cos(2 * math.pi * x.detach())
        assert torch.allclose(x.grad, expected, atol=1e-8)

    def test_surrogate_pads_non_multiple_of_8(self):
        x = torch.rand(1, 3, 20, 28)
        out = jpeg_surrogate(x, 80)
        assert out.shape == x.shape
