import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from refguard.backends import make_sibling_backend, make_toy_backend
from refguard.core import (
    InvariantViolation,
    LossWeights,
    NoiseBudget,
    ProtectionRecord,
    clamp_to_pixel_range,
)
from refguard.evaluation import (
    EmbeddingFailure,
    EmbeddingScorer,
    EvalReport,
    QualityScorer,
    RobustnessTransform,
    aggregate_ism,
    apply_real_transform,
    get_embedding_scorer,
    get_quality_scorer,
    ism,
    make_toy_embedding_scorer,
    parse_robustness_spec,
    psnr,
    quality_score,
    robustness_suite,
    ssim,
    transfer_harness,
)
from refguard.pgd import pgd_protect

from conftest import seeded_image


class TestPsnr:
    def test_identical_images_are_infinite(self, image16):
        assert psnr(image16, image16) == math.inf

    def test_uniform_offset_closed_form(self):
        a = torch.zeros(16, 16, 3, dtype=torch.float64)
        b = a + 13.0 / 255.0
        want = 20.0 * math.log10(255.0 / 13.0)
        assert psnr(a, b) == pytest.approx(want, abs=1e-6)

    def test_tenth_offset(self):
        a = torch.zeros(8, 8, 3, dtype=torch.float64)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_symmetry(self, image16):
        other = (image16 + 0.03).clamp(0, 1)
        assert psnr(image16, other) == pytest.approx(psnr(other, image16), rel=1e-12)

    def test_shape_mismatch(self, image16):
        with pytest.raises(ValueError):
            psnr(image16, torch.rand(8, 8, 3))

    def test_monotone_in_error(self, image16):
        near = clamp_to_pixel_range(image16 + 0.01)
        far = clamp_to_pixel_range(image16 + 0.1)
        assert psnr(image16, near) > psnr(image16, far)


class TestSsim:
    def test_self_similarity_is_one(self):
        img = seeded_image(3, 16, 16)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_constant_images_closed_form(self):
        a = torch.full((16, 16, 3), 0.5, dtype=torch.float64)
        b = torch.full((16, 16, 3), 0.6, dtype=torch.float64)
        # zero variances leave only the luminance term
        want = (2 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4)
        assert ssim(a, b) == pytest.approx(want, abs=1e-6)

    def test_symmetry(self):
        a = seeded_image(4, 16, 16)
        b = seeded_image(5, 16, 16)
        assert ssim(a, b) == pytest.approx(ssim(b, a), rel=1e-9)

    def test_bounded_by_one(self):
        a = seeded_image(4, 16, 16)
        b = (a + 0.05).clamp(0, 1)
        val = ssim(a, b)
        assert val <= 1.0
        assert val > 0.5

    def test_degrades_with_noise(self):
        a = seeded_image(4, 32, 32)
        mild = (a + 0.02 * torch.randn(32, 32, 3, generator=torch.Generator().manual_seed(0))).clamp(0, 1)
        harsh = (a + 0.3 * torch.randn(32, 32, 3, generator=torch.Generator().manual_seed(1))).clamp(0, 1)
        assert ssim(a, mild) > ssim(a, harsh)

    def test_window_floor(self):
        small = torch.rand(8, 8, 3)
        with pytest.raises(ValueError, match="11"):
            ssim(small, small)


class TestIsm:
    def test_toy_scorer_self_similarity(self, image16):
        scorer = make_toy_embedding_scorer(seed=0)
        assert ism(scorer, image16, image16) == pytest.approx(1.0, abs=1e-9)

    def test_range_and_sensitivity(self, image16):
        scorer = make_toy_embedding_scorer(seed=0)
        other = seeded_image(99, 16, 16)
        val = ism(scorer, image16, other)
        assert val is not None
        assert -1.0 - 1e-9 <= val <= 1.0 + 1e-9
        assert val < 1.0 - 1e-6

    def test_orthogonal_embeddings_score_zero(self):
        def embed(image):
            # batch-free deterministic one-hot by mean brightness
            idx = 0 if float(image.mean()) < 0.5 else 1
            v = torch.zeros(4, dtype=torch.float64)
            v[idx] = 1.0
            return v

        scorer = EmbeddingScorer("onehot", embed)
        dark = torch.full((8, 8, 3), 0.1)
        bright = torch.full((8, 8, 3), 0.9)
        assert ism(scorer, dark, bright) == pytest.approx(0.0, abs=1e-12)

    def test_embedding_failure_maps_to_none(self, image16):
        def embed(image):
            raise EmbeddingFailure("no face found")

        assert ism(EmbeddingScorer("fail", embed), image16, image16) is None

    def test_non_unit_embedding_rejected(self, image16):
        scorer = EmbeddingScorer("bad", lambda img: torch.ones(4))
        with pytest.raises(InvariantViolation, match="norm"):
            ism(scorer, image16, image16)

    def test_aggregate_counts_undefined(self):
        mean, undefined = aggregate_ism([0.5, None, 0.7, None])
        assert mean == pytest.approx(0.6)
        assert undefined == 2
        mean, undefined = aggregate_ism([None])
        assert mean is None and undefined == 1


class TestScorerRegistry:
    def test_toy_defaults_registered(self, image16):
        embed = get_embedding_scorer("toy-embed")
        quality = get_quality_scorer("toy-luminance")
        assert ism(embed, image16, image16) == pytest.approx(1.0, abs=1e-9)
        val = quality_score(quality, image16)
        assert 0.0 <= val <= 1.0

    def test_unknown_scorer_message(self):
        with pytest.raises(KeyError, match="scorer unavailable"):
            get_embedding_scorer("arcface")
        with pytest.raises(KeyError, match="scorer unavailable"):
            get_quality_scorer("clip-iqa")

    def test_quality_scorer_wraps_callable(self):
        scorer = QualityScorer("mean", lambda img: float(img.mean()))
        assert quality_score(scorer, torch.full((4, 4, 3), 0.25)) == pytest.approx(0.25)


class TestTransforms:
    def test_parse_spec(self):
        transforms = parse_robustness_spec("jpeg:75, crop:0.9,noise:0.01,identity")
        assert [t.kind for t in transforms] == ["jpeg", "crop", "noise", "identity"]
        assert transforms[0].value == 75.0
        assert transforms[1].value == pytest.approx(0.9)

    def test_parse_rejects_empty(self):
        with pytest.raises(ValueError, match="empty"):
            parse_robustness_spec(" , ")

    @pytest.mark.parametrize(
        "kind,value",
        [("jpeg", 0), ("jpeg", 101), ("crop", 0.0), ("crop", 1.5), ("noise", -0.1), ("color", -1.0), ("blur", 1.0)],
    )
    def test_transform_validation(self, kind, value):
        with pytest.raises(ValueError):
            RobustnessTransform("t", kind, value)

    def test_identity_returns_input(self, image16):
        tr = RobustnessTransform("identity", "identity")
        out = apply_real_transform(image16, tr, np.random.default_rng(0))
        assert out is image16

    def test_jpeg_round_trips_through_codec(self, image32):
        tr = RobustnessTransform("jpeg", "jpeg", 75)
        out = apply_real_transform(image32, tr, np.random.default_rng(0))
        assert out.shape == image32.shape
        assert not torch.equal(out, image32)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0
        # 8-bit quantized output
        assert torch.allclose(out * 255.0, torch.round(out * 255.0), atol=1e-6)

    def test_noise_deterministic_given_rng(self, image16):
        tr = RobustnessTransform("noise", "noise", 0.02)
        a = apply_real_transform(image16, tr, np.random.default_rng(7))
        b = apply_real_transform(image16, tr, np.random.default_rng(7))
        assert torch.equal(a, b)

    def test_color_shifts_channels(self, image16):
        tr = RobustnessTransform("color", "color", 0.2)
        out = apply_real_transform(image16, tr, np.random.default_rng(1))
        assert out.shape == image16.shape
        assert not torch.equal(out, image16)

    def test_crop_preserves_shape(self, image32):
        tr = RobustnessTransform("crop", "crop", 0.8)
        out = apply_real_transform(image32, tr, np.random.default_rng(0))
        assert out.shape == image32.shape


def _short_record(image, schedule, backend, iterations=40):
    budget = NoiseBudget(radius=13.0 / 255.0, step=3e-3, iterations=iterations)
    return pgd_protect(
        image, [backend], (), LossWeights(1.0, (), 0.0), budget, schedule,
        seed=0, eval_interval=None,
    )


@pytest.fixture(scope="module")
def record(schedule, toy_backend):
    return _short_record(seeded_image(31, 16, 16), schedule, toy_backend)


class TestRobustnessSuite:
    def test_identity_retention_is_exactly_one(self, record, schedule, toy_backend):
        report = robustness_suite(
            record,
            parse_robustness_spec("identity"),
            toy_backend,
            schedule,
            seed=5,
            num_samples=8,
        )
        sub = report.sub_reports["identity"]
        assert sub["retention_ratio"] == pytest.approx(1.0, abs=1e-9)
        assert sub["psnr_after"] == report.metrics["psnr"]

    def test_report_fields_and_margin(self, record, schedule, toy_backend):
        report = robustness_suite(
            record,
            parse_robustness_spec("jpeg:75,noise:0.01"),
            toy_backend,
            schedule,
            seed=5,
            num_samples=8,
        )
        assert report.metrics["attack_margin"] == pytest.approx(
            report.metrics["adv_protected"] - report.metrics["adv_clean"]
        )
        assert report.metrics["attack_margin"] > 0
        for name in ("jpeg:75", "noise:0.01"):
            sub = report.sub_reports[name]
            assert set(sub) == {
                "kind",
                "value",
                "adv_transformed",
                "adv_transformed_clean",
                "retention_ratio",
                "psnr_after",
                "ssim_after",
            }
        assert report.metadata["backend_id"] == toy_backend.identifier

    def test_deterministic(self, record, schedule, toy_backend):
        kwargs = dict(
            transforms=parse_robustness_spec("noise:0.02"),
            backend=toy_backend,
            schedule=schedule,
            seed=9,
            num_samples=4,
        )
        a = robustness_suite(record, **kwargs)
        b = robustness_suite(record, **kwargs)
        assert a.to_dict() == b.to_dict()

    def test_zero_margin_yields_none_retention(self, schedule, toy_backend, image16):
        record = ProtectionRecord(
            original=image16,
            perturbation=torch.zeros_like(image16),
            protected=image16.clone(),
            method="encoder",
            seed=0,
            budget=None,
            objective_trace=(),
            backend_ids=(),
        )
        report = robustness_suite(
            record,
            parse_robustness_spec("identity"),
            toy_backend,
            schedule,
            num_samples=4,
        )
        assert report.sub_reports["identity"]["retention_ratio"] is None


class TestEvalReport:
    def test_json_round_trip_with_sentinels(self, tmp_path):
        report = EvalReport(
            metrics={"psnr": math.inf, "gap": math.nan, "count": np.int64(3)},
            sub_reports={"x": {"v": np.float64(0.5)}},
            metadata={"seed": 1},
        )
        path = tmp_path / "report.json"
        report.save(path)
        loaded = json.loads(path.read_text())
        assert loaded["schema_version"] == 1
        assert loaded["metrics"]["psnr"] == "inf"
        assert loaded["metrics"]["gap"] == "nan"
        assert loaded["metrics"]["count"] == 3
        assert loaded["sub_reports"]["x"]["v"] == 0.5

    def test_negative_infinity_sentinel(self):
        report = EvalReport(metrics={"v": -math.inf})
        assert report.to_dict()["metrics"]["v"] == "-inf"


class TestTransferHarness:
    def test_overlapping_backend_rejected(self, schedule, toy_backend, image16):
        record = _short_record(image16, schedule, toy_backend, iterations=2)
        with pytest.raises(ValueError, match="used to build"):
            transfer_harness(record, toy_backend, schedule)

    def test_zero_perturbation_record_shows_no_gap(self, schedule, toy_backend, image16):
        record = ProtectionRecord(
            original=image16,
            perturbation=torch.zeros_like(image16),
            protected=image16.clone(),
            method="encoder",
            seed=0,
            budget=None,
            objective_trace=(),
            backend_ids=("somebody-else",),
        )
        clean, protected = transfer_harness(record, toy_backend, schedule, num_samples=4)
        assert clean == protected

    def test_sibling_sees_elevated_error(self, schedule, toy_backend):
        record = _short_record(seeded_image(32, 16, 16), schedule, toy_backend, iterations=60)
        sibling = make_sibling_backend(toy_backend, jitter_scale=1e-2, seed=3)
        clean, protected = transfer_harness(record, sibling, schedule, num_samples=16)
        assert protected > clean

    def test_deterministic(self, schedule, toy_backend, image16):
        record = _short_record(image16, schedule, toy_backend, iterations=4)
        other = make_toy_backend(404)
        a = transfer_harness(record, other, schedule, seed=2, num_samples=4)
        b = transfer_harness(record, other, schedule, seed=2, num_samples=4)
        assert a == b


@given(offset=st.floats(0.005, 0.3))
def test_psnr_monotone_decreasing_in_offset(offset):
    base = torch.zeros(8, 8, 3, dtype=torch.float64)
    smaller = psnr(base, base + offset)
    larger = psnr(base, base + min(offset * 2, 1.0))
    assert larger < smaller
