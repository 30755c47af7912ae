import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from refguard.core import (
    BALL_TOLERANCE,
    DEFAULT_ITERATIONS,
    DEFAULT_RADIUS,
    DEFAULT_STEP,
    ENCODER_WEIGHTS,
    PGD_WEIGHTS,
    InvariantViolation,
    LossWeights,
    NoiseBudget,
    ProtectionRecord,
    clamp_to_pixel_range,
    linf_norm,
    spawn_generator,
    validate_image,
)

from conftest import seeded_image


class TestNoiseBudget:
    def test_defaults(self):
        b = NoiseBudget()
        assert b.radius == pytest.approx(13.0 / 255.0)
        assert b.step == 1e-3
        assert b.iterations == 300
        assert (DEFAULT_RADIUS, DEFAULT_STEP, DEFAULT_ITERATIONS) == (
            b.radius,
            b.step,
            b.iterations,
        )

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"radius": 0.0},
            {"radius": -0.1},
            {"step": 0.0},
            {"step": -1e-3},
            {"iterations": 0},
            {"iterations": -5},
        ],
    )
    def test_rejects_degenerate_fields(self, kwargs):
        with pytest.raises(ValueError):
            NoiseBudget(**kwargs)


class TestLossWeights:
    def test_known_vectors(self):
        assert PGD_WEIGHTS.w_adv == 3.0
        assert PGD_WEIGHTS.w_con == (5.0, 5.0, 2.0, 2.0)
        assert PGD_WEIGHTS.w_reg == 0.0
        assert ENCODER_WEIGHTS.w_adv == 30.0
        assert ENCODER_WEIGHTS.w_con == (50.0, 60.0, 30.0, 30.0)
        assert ENCODER_WEIGHTS.w_reg == 200.0

    def test_coerces_sequences_to_float_tuples(self):
        w = LossWeights(1, [2, 3], 4)
        assert w.w_con == (2.0, 3.0)
        assert isinstance(w.w_adv, float) and isinstance(w.w_reg, float)

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0, (), 0.0)
        with pytest.raises(ValueError):
            LossWeights(0.0, (1.0, -2.0), 0.0)
        with pytest.raises(ValueError):
            LossWeights(0.0, (), -0.5)

    def test_attack_weight_detection(self):
        assert LossWeights(1.0, (), 0.0).has_attack_weight()
        assert LossWeights(0.0, (0.0, 0.1), 0.0).has_attack_weight()
        # all-regularization vectors are constructible, just flagged
        assert not LossWeights(0.0, (0.0,), 5.0).has_attack_weight()


class TestValidateImage:
    def test_accepts_valid(self, image16):
        assert validate_image(image16) is image16

    @pytest.mark.parametrize(
        "bad",
        [
            torch.rand(16, 16),
            torch.rand(16, 16, 4),
            torch.rand(3, 16, 16) + 2.0,
        ],
    )
    def test_rejects_bad_shapes_and_ranges(self, bad):
        with pytest.raises(ValueError):
            validate_image(bad)

    def test_rejects_nan(self):
        img = torch.rand(8, 8, 3)
        img[0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            validate_image(img)

    def test_error_carries_name(self):
        with pytest.raises(ValueError, match="protected"):
            validate_image(torch.rand(4, 4, 2), "protected")


class TestClampAndNorm:
    def test_clamp_straddles_range(self):
        out = clamp_to_pixel_range(torch.tensor([[-0.5, 0.5, 1.5]]))
        assert out.tolist() == [[0.0, 0.5, 1.0]]

    def test_clamp_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite pixel"):
            clamp_to_pixel_range(torch.tensor([float("inf")]))

    def test_linf_norm(self):
        assert linf_norm(torch.tensor([0.1, -0.4, 0.2])) == pytest.approx(0.4)
        assert linf_norm(torch.zeros(0)) == 0.0

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=32))
    def test_clamp_output_in_unit_range(self, values):
        out = clamp_to_pixel_range(torch.tensor(values, dtype=torch.float64))
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


class TestSpawnGenerator:
    def test_same_key_same_stream(self):
        a = torch.rand(5, generator=spawn_generator(3, 1, 2))
        b = torch.rand(5, generator=spawn_generator(3, 1, 2))
        assert torch.equal(a, b)

    def test_different_keys_decorrelate(self):
        a = torch.rand(5, generator=spawn_generator(3, 1))
        b = torch.rand(5, generator=spawn_generator(3, 2))
        c = torch.rand(5, generator=spawn_generator(4, 1))
        assert not torch.equal(a, b)
        assert not torch.equal(a, c)


def _pgd_record(image, trace_len=None, **overrides):
    budget = overrides.pop("budget", NoiseBudget(iterations=3))
    pert = torch.full_like(image, 0.01)
    protected = clamp_to_pixel_range(image + pert)
    if trace_len is None:
        trace_len = budget.iterations + 1 if budget is not None else 4
    fields = dict(
        original=image,
        perturbation=protected - image,
        protected=protected,
        method="pgd",
        seed=0,
        budget=budget,
        objective_trace=tuple((i, float(i)) for i in range(trace_len)),
        backend_ids=("toy-a",),
        metadata={},
    )
    fields.update(overrides)
    return ProtectionRecord(**fields)


class TestProtectionRecord:
    def test_valid_pgd_record(self, image16):
        rec = _pgd_record(image16)
        assert rec.method == "pgd"
        assert len(rec.objective_trace) == 4

    def test_rejects_unknown_method(self, image16):
        with pytest.raises(ValueError, match="method"):
            _pgd_record(image16, method="magic")

    def test_pgd_requires_budget(self, image16):
        with pytest.raises(ValueError, match="NoiseBudget"):
            _pgd_record(image16, budget=None)

    def test_trace_length_must_match_iterations(self, image16):
        with pytest.raises(InvariantViolation, match="objective_trace"):
            _pgd_record(image16, trace_len=2)

    def test_reconstruction_mismatch_detected(self, image16):
        pert = torch.full_like(image16, 0.01)
        with pytest.raises(InvariantViolation, match="protected"):
            ProtectionRecord(
                original=image16,
                perturbation=pert,
                protected=clamp_to_pixel_range(image16 + 0.02),
                method="pgd",
                seed=0,
                budget=NoiseBudget(iterations=1),
                objective_trace=((0, 0.0), (1, 0.0)),
                backend_ids=(),
            )

    def test_budget_radius_enforced(self, image16):
        image = image16 * 0.5 + 0.25  # interior so the perturbation survives clamping
        pert = torch.full_like(image, 0.2)
        with pytest.raises(InvariantViolation, match="radius"):
            ProtectionRecord(
                original=image,
                perturbation=pert,
                protected=clamp_to_pixel_range(image + pert),
                method="pgd",
                seed=0,
                budget=NoiseBudget(radius=0.05, iterations=1),
                objective_trace=((0, 0.0), (1, 0.0)),
                backend_ids=(),
            )

    def test_encoder_record_needs_no_budget(self, image16):
        rec = ProtectionRecord(
            original=image16,
            perturbation=torch.zeros_like(image16),
            protected=image16.clone(),
            method="encoder",
            seed=0,
            budget=None,
            objective_trace=(),
            backend_ids=(),
        )
        assert rec.budget is None

    def test_ball_tolerance_is_tight(self):
        assert BALL_TOLERANCE == 1e-6


@given(seed=st.integers(0, 2**16), scale=st.floats(0.0, 0.3))
def test_reconstruction_invariant_holds_for_clamped_offsets(seed, scale):
    image = seeded_image(seed, 8, 8)
    pert = (seeded_image(seed + 1, 8, 8) - 0.5) * scale
    protected = clamp_to_pixel_range(image + pert)
    rec = ProtectionRecord(
        original=image,
        perturbation=protected - image,
        protected=protected,
        method="encoder",
        seed=seed,
        budget=None,
        objective_trace=(),
        backend_ids=(),
    )
    assert linf_norm(rec.protected - clamp_to_pixel_range(image + rec.perturbation)) == 0.0
