import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowrank.calibration import (
    capture_activations,
    dump_activations,
    gram_accumulate,
    stack_of_batch,
)
from lowrank.container import load_container
from lowrank.errors import NumericalError, ShapeError
from lowrank.model import RMS_EPS, gen_synthetic


def one_hot_samples(n, tokens=3):
    """Sample i carries a 1 in column i, so bucket means reveal the partition."""
    out = []
    for i in range(n):
        s = np.zeros((tokens, n))
        s[:, i] = 1.0
        out.append(s)
    return out


class TestStackOfBatch:
    def test_eight_into_four_buckets(self):
        samples = one_hot_samples(8)
        b = stack_of_batch(samples, 4, seed=0)
        assert len(b.buckets) == 4
        assert b.mini_bsz == 2
        assert b.counts == [2, 2, 2, 2]
        # each bucket is the mean of two distinct samples, and together they
        # cover all eight exactly once
        coverage = np.zeros(8)
        for bucket, count in zip(b.buckets, b.counts):
            member_weight = bucket[0]  # row of per-sample indicators / count
            assert np.isclose(member_weight.sum(), 1.0)
            assert np.count_nonzero(member_weight) == 2
            coverage += member_weight * count
        np.testing.assert_allclose(coverage, np.ones(8))

    def test_n_equals_m_is_permutation(self, rng):
        samples = [rng.normal(size=(3, 4)) for _ in range(4)]
        b = stack_of_batch(samples, 4, seed=5)
        assert b.mini_bsz == 1
        matched = set()
        for bucket in b.buckets:
            hits = [i for i, s in enumerate(samples) if np.array_equal(bucket, s)]
            assert len(hits) == 1
            matched.add(hits[0])
        assert matched == {0, 1, 2, 3}

    @pytest.mark.parametrize("m", [1, 2, 3, 4, 8])
    def test_constant_samples_fixed_point(self, m):
        c = 0.7318
        samples = [np.full((2, 3), c) for _ in range(4)]
        b = stack_of_batch(samples, m, seed=m)
        for bucket in b.buckets:
            np.testing.assert_array_equal(bucket, np.full((2, 3), c))

    def test_more_buckets_than_samples(self, rng):
        samples = [rng.normal(size=(2, 2)) for _ in range(3)]
        b = stack_of_batch(samples, 8, seed=1)
        assert len(b.buckets) == 3
        assert b.counts == [1, 1, 1]

    def test_uneven_split_fills_all_buckets(self, rng):
        samples = [rng.normal(size=(2, 2)) for _ in range(5)]
        b = stack_of_batch(samples, 4, seed=1)
        assert len(b.buckets) == 4
        assert b.counts == [2, 1, 1, 1]
        assert b.mini_bsz == 2

    def test_seeded_determinism(self, rng):
        samples = [rng.normal(size=(3, 2)) for _ in range(10)]
        b1 = stack_of_batch(samples, 3, seed=9)
        b2 = stack_of_batch(samples, 3, seed=9)
        for x, y in zip(b1.buckets, b2.buckets):
            np.testing.assert_array_equal(x, y)

    def test_shape_mismatch_rejected(self, rng):
        samples = [rng.normal(size=(3, 2)), rng.normal(size=(2, 3))]
        with pytest.raises(ShapeError):
            stack_of_batch(samples, 2, seed=0)

    @given(n=st.integers(1, 40), m=st.integers(1, 8), seed=st.integers(0, 10))
    @settings(max_examples=80, deadline=None)
    def test_partition_properties(self, n, m, seed):
        b = stack_of_batch(one_hot_samples(n, tokens=1), m, seed=seed)
        assert b.mini_bsz == math.ceil(n / m)
        assert len(b.buckets) == min(n, m)
        assert sum(b.counts) == n
        assert max(b.counts) <= b.mini_bsz
        coverage = sum(bucket[0] * count for bucket, count in zip(b.buckets, b.counts))
        np.testing.assert_allclose(coverage, np.ones(n))


class TestCaptureActivations:
    def test_zero_weights_give_residual_only(self):
        model, calib = gen_synthetic(seed=0, blocks=2, d=6, h=12, n_samples=2, tokens=5)
        for name in model.tensors:
            model.tensors[name] = np.zeros_like(model.tensors[name])
        batch = capture_activations(model, [calib[0], calib[1]])
        x_in, x_out = batch.per_block_io[0]
        np.testing.assert_array_equal(x_in, x_out)
        x_in, x_out = batch.per_block_io[1]
        np.testing.assert_array_equal(x_in, x_out)

    def test_w1_input_is_normalized_block_input(self):
        model, _ = gen_synthetic(seed=1, blocks=1, d=2, h=3, n_samples=1, tokens=1)
        sample = np.array([[3.0, 4.0]])
        batch = capture_activations(model, [sample])
        x = sample.T
        expected = x / np.sqrt(np.mean(x**2) + RMS_EPS)
        np.testing.assert_allclose(batch.per_matrix_inputs["blocks.0.w1"], expected, rtol=0, atol=0)

    def test_w2_input_is_post_activation_state(self):
        model, _ = gen_synthetic(seed=2, blocks=1, d=3, h=5, n_samples=1, tokens=4)
        sample = np.random.default_rng(0).normal(size=(4, 3))
        batch = capture_activations(model, [sample])
        x_norm = batch.per_matrix_inputs["blocks.0.w1"]
        w1 = model.tensors["blocks.0.w1"]
        np.testing.assert_allclose(
            batch.per_matrix_inputs["blocks.0.w2"], np.maximum(w1 @ x_norm, 0.0), atol=1e-15
        )

    def test_capture_is_deterministic(self):
        model, calib = gen_synthetic(seed=3, blocks=3, d=8, h=16, n_samples=4, tokens=6)
        b1 = capture_activations(model, list(calib))
        b2 = capture_activations(model, list(calib))
        for name in b1.per_matrix_inputs:
            np.testing.assert_array_equal(b1.per_matrix_inputs[name], b2.per_matrix_inputs[name])

    def test_columns_are_all_bucket_tokens(self):
        model, calib = gen_synthetic(seed=4, blocks=1, d=8, h=16, n_samples=6, tokens=5)
        bucketed = stack_of_batch(list(calib), 3, seed=0)
        batch = capture_activations(model, bucketed)
        assert batch.per_matrix_inputs["blocks.0.w1"].shape == (8, 3 * 5)
        assert batch.per_block_io[0][0].shape == (8, 15)

    def test_nonfinite_forward_names_block(self):
        model, calib = gen_synthetic(seed=5, blocks=3, d=4, h=8, n_samples=1, tokens=2)
        model.tensors["blocks.1.w2"][0, 0] = np.inf
        with np.errstate(invalid="ignore"):
            with pytest.raises(NumericalError, match="block 1"):
                capture_activations(model, [calib[0]])


class TestGram:
    def test_identity(self):
        np.testing.assert_array_equal(gram_accumulate(np.eye(2)), np.eye(2))

    def test_single_column_outer_product(self):
        g = gram_accumulate(np.array([[1.0], [2.0]]))
        np.testing.assert_array_equal(g, np.array([[1.0, 2.0], [2.0, 4.0]]))
        assert np.linalg.matrix_rank(g) == 1

    def test_random_is_symmetric_psd(self, rng):
        g = gram_accumulate(rng.normal(size=(8, 100)))
        assert np.linalg.norm(g - g.T) <= 1e-12
        assert np.linalg.eigvalsh(g).min() >= -1e-10


def test_dump_activations_tensor_names(tmp_path):
    model, calib = gen_synthetic(seed=6, blocks=2, d=4, h=8, n_samples=2, tokens=3)
    batch = capture_activations(model, list(calib))
    dump_activations(batch, model, tmp_path / "acts.st")
    names = set(load_container(tmp_path / "acts.st"))
    assert names == {
        "block.0.in", "block.0.out", "block.1.in", "block.1.out",
        "slot.blocks.0.w1.x", "slot.blocks.0.w2.x",
        "slot.blocks.1.w1.x", "slot.blocks.1.w2.x",
    }
