"""Tests for the finite-difference gradient checker and its suites."""

import numpy as np
import pytest

from app.models.schemas import GradCheckConfig
from app.services.gradcheck import (
    GradCheckError,
    condition_meta_weights,
    grad_check,
    mta_programs,
    mtp_programs,
    op_programs,
    run_suites,
)
from app.services.mta import MtaBlock
from app.services.tensor import Tensor, dense, parameter

TOLERANCE = 1e-4


class TestGradCheck:
    """Relative-error comparison against central differences."""

    def test_affine_program_is_exact(self):
        """An affine program has zero finite-difference error."""
        x = parameter([0.3, -1.2, 2.0])
        w = parameter([[1.5, -2.0, 0.5]])
        bias = parameter([0.7])
        result = grad_check(lambda: (dense(x, w) + bias).sum(), {"x": x, "w": w, "bias": bias})
        assert result.max_error < 1e-8
        assert result.entries == 7
        assert set(result.per_param) == {"x", "w", "bias"}

    def test_nondeterministic_program_rejected(self, rng):
        """A program that changes between calls cannot be checked."""
        x = parameter([1.0])
        with pytest.raises(GradCheckError):
            grad_check(lambda: (x * Tensor([rng.normal()])).sum(), [x])

    def test_entry_sampling(self, rng):
        """max_entries limits how many entries are perturbed."""
        x = parameter(rng.normal(size=(5, 5)))
        result = grad_check(lambda: (x * x).sum(), {"x": x}, max_entries=4)
        assert result.entries == 4
        assert result.max_error < 1e-6

    def test_parameters_restored(self, rng):
        """Perturbed values are put back after the check."""
        values = rng.normal(size=4)
        x = parameter(values.copy())
        grad_check(lambda: (x * x * x).sum(), [x])
        np.testing.assert_array_equal(x.data, values)


class TestSuites:
    """Every differentiable piece of the pipeline passes the check."""

    def test_op_programs(self, rng):
        """Every elementary op program passes."""
        for name, (program, params) in op_programs(rng).items():
            assert grad_check(program, params).max_error < TOLERANCE, name

    @pytest.mark.parametrize("mode", ["meta", "static"])
    def test_attention_programs(self, rng, mode):
        """Spatial, channel and temporal calibration pass in both modes."""
        for name, (program, params) in mta_programs(rng, mode).items():
            result = grad_check(program, params, max_entries=3)
            assert result.max_error < TOLERANCE, name

    def test_attention_gradients_are_well_scaled(self, rng):
        """Generated weights and checked gradients sit far above rounding level."""
        for name, (program, params) in mta_programs(rng, "meta").items():
            for p in params.values():
                p.grad = None
            program().backward()
            for path, p in params.items():
                assert np.abs(p.grad).max() > 1e-4, f"{name}: {path}"

    def test_conditioning_rescales_generator_output_layer(self, rng):
        """Only ``w_meta2`` is redrawn, at the ``1 / sqrt(C)`` bound."""
        block = MtaBlock("channel", 4, 6, 8, 6, rng=rng)
        before = block.state_dict()
        condition_meta_weights(block, rng)
        after = block.state_dict()
        for path, value in after.items():
            if path.endswith("w_meta2"):
                assert np.abs(value).max() > 0.1 * 0.5
                assert np.abs(value).max() <= 0.5
            else:
                np.testing.assert_array_equal(value, before[path])

    def test_pooling_programs(self, rng):
        """Every pooling configuration passes."""
        for name, (program, params) in mtp_programs(rng).items():
            result = grad_check(program, params, max_entries=3)
            assert result.max_error < TOLERANCE, name

    def test_model_suite(self, tiny_run):
        """The whole model program stays under tolerance."""
        errors = run_suites(GradCheckConfig(entries_per_param=1), tiny_run.model, ["model"])
        assert list(errors) == ["model/model"]
        assert errors["model/model"] < TOLERANCE

    def test_unknown_suite(self, tiny_run):
        """An unknown suite name is refused."""
        with pytest.raises(ValueError):
            run_suites(GradCheckConfig(), tiny_run.model, ["everything"])
