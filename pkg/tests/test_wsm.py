import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparse_forge.exceptions import InvalidInputError
from sparse_forge.wsm import (
    CheckpointSeries,
    checkpoints_from_updates,
    GradientWeights,
    MergeWeights,
    decay_to_merge_weights,
    format_weights,
    merge_checkpoints,
    merge_to_gradient_weights,
    parse_weights,
    read_checkpoint,
    simulate_equivalence,
    top_n_average,
    write_checkpoint,
)


def random_schedule(rng, k):
    return np.sort(rng.uniform(0, 1, k))[::-1]


def random_simplex(rng, n):
    c = rng.exponential(size=n)
    return c / c.sum()


class TestConversion:
    def test_no_decay_keeps_latest(self):
        assert decay_to_merge_weights([1, 1, 1]).c == (0.0, 0.0, 0.0, 1.0)

    def test_full_decay_keeps_base(self):
        assert decay_to_merge_weights([0]).c == (1.0, 0.0)

    def test_linear_decay_is_uniform_average(self):
        c = decay_to_merge_weights([1, 2 / 3, 1 / 3]).c
        np.testing.assert_allclose(c, [0, 1 / 3, 1 / 3, 1 / 3], atol=1e-16)

    def test_suffix_sums(self):
        w = merge_to_gradient_weights([0, 1 / 3, 1 / 3, 1 / 3]).w
        np.testing.assert_allclose(w, [1, 2 / 3, 1 / 3], atol=1e-15)
        assert merge_to_gradient_weights([1, 0]).w == (0.0,)

    @pytest.mark.parametrize(
        "w, idx", [([0.5, 0.7], "w[1]"), ([1.2, 0.1], "w[0]"), ([0.5, -0.1], "w[1]")]
    )
    def test_invalid_schedule_names_index(self, w, idx):
        with pytest.raises(InvalidInputError, match=idx.replace("[", r"\[").replace("]", r"\]")):
            decay_to_merge_weights(w)

    @pytest.mark.parametrize("c", [[0.5, 0.6], [-0.1, 1.1], [0.2, 0.2]])
    def test_invalid_merge_weights(self, c):
        with pytest.raises(InvalidInputError):
            merge_to_gradient_weights(c)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 64), st.integers(0, 2**32 - 1))
    def test_roundtrip_from_schedule(self, k, seed):
        w = random_schedule(np.random.default_rng(seed), k)
        c = decay_to_merge_weights(w)
        assert min(c.c) >= 0
        assert abs(sum(c.c) - 1) <= 1e-12
        back = merge_to_gradient_weights(c).w
        assert np.max(np.abs(np.array(back) - w)) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 65), st.integers(0, 2**32 - 1))
    def test_roundtrip_from_simplex(self, n, seed):
        c = random_simplex(np.random.default_rng(seed), n)
        again = decay_to_merge_weights(merge_to_gradient_weights(c)).c
        assert np.max(np.abs(np.array(again) - c)) <= 1e-12


class TestMerge:
    def test_fixed_point(self):
        v = np.array([1.5, -2.0, 3.25])
        series = CheckpointSeries(np.tile(v, (4, 1)))
        out = merge_checkpoints(series, [0.1, 0.2, 0.3, 0.4])
        np.testing.assert_allclose(out, v, rtol=1e-15)

    def test_arithmetic(self):
        out = merge_checkpoints(CheckpointSeries([[0.0], [3.0]]), [1 / 3, 2 / 3])
        assert out[0] == pytest.approx(2.0, abs=1e-15)

    def test_uniform_32_is_mean(self):
        rng = np.random.default_rng(4)
        vecs = rng.standard_normal((32, 100))
        out = merge_checkpoints(CheckpointSeries(vecs), [1 / 32] * 32)
        np.testing.assert_allclose(out, vecs.mean(axis=0), atol=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            merge_checkpoints(CheckpointSeries([[0.0], [1.0]]), [1.0])

    def test_ragged_series_rejected(self):
        with pytest.raises((InvalidInputError, ValueError)):
            CheckpointSeries([[0.0], [1.0, 2.0]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_equivariant_and_linear(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((5, 20))
        b = rng.standard_normal((5, 20))
        c = random_simplex(rng, 5)
        perm = rng.permutation(20)
        m = merge_checkpoints(CheckpointSeries(a), c)
        np.testing.assert_allclose(merge_checkpoints(CheckpointSeries(a[:, perm]), c), m[perm], atol=1e-14)
        lin = merge_checkpoints(CheckpointSeries(2.0 * a + b), c)
        np.testing.assert_allclose(lin, 2.0 * m + merge_checkpoints(CheckpointSeries(b), c), atol=1e-13)


class TestTopN:
    def test_best_single(self):
        ckpts = [([0.0], 0.1), ([1.0], 0.9), ([2.0], 0.5)]
        np.testing.assert_array_equal(top_n_average(ckpts, 1), [1.0])

    def test_all_equal_scores(self):
        ckpts = [([float(i)], 1.0) for i in range(4)]
        np.testing.assert_allclose(top_n_average(ckpts, 4), [1.5])

    def test_tie_break_later_wins(self):
        ckpts = [([0.0], 1), ([10.0], 3), ([20.0], 2), ([30.0], 3)]
        np.testing.assert_allclose(top_n_average(ckpts, 2), [20.0])
        np.testing.assert_allclose(top_n_average(ckpts, 1), [30.0])

    @pytest.mark.parametrize("n", [0, 3])
    def test_out_of_range(self, n):
        with pytest.raises(InvalidInputError):
            top_n_average([([0.0], 1), ([1.0], 2)], n)

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            top_n_average([], 1)


class TestEquivalence:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 64), st.integers(1, 2000), st.integers(0, 2**32 - 1))
    def test_exact(self, k, dim, seed):
        rng = np.random.default_rng(seed)
        res = simulate_equivalence(rng.standard_normal((k, dim)), rng.standard_normal(dim), random_schedule(rng, k))
        assert res.max_abs_diff <= 1e-12

    def test_no_decay_is_last_checkpoint(self):
        rng = np.random.default_rng(0)
        g = rng.standard_normal((6, 10))
        theta = rng.standard_normal(10)
        res = simulate_equivalence(g, theta, [1.0] * 6)
        np.testing.assert_array_equal(res.merged, theta - np.cumsum(g, axis=0)[-1])

    def test_full_decay_is_base(self):
        rng = np.random.default_rng(1)
        theta = rng.standard_normal(10)
        res = simulate_equivalence(rng.standard_normal((6, 10)), theta, [0.0] * 6)
        np.testing.assert_array_equal(res.merged, theta)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            simulate_equivalence(np.zeros((2, 3)), np.zeros(4), [1.0, 0.5])
        with pytest.raises(InvalidInputError):
            simulate_equivalence(np.zeros((2, 3)), np.zeros(3), [1.0])


class TestFormats:
    def test_checkpoint_layout(self, tmp_path):
        path = tmp_path / "v.bin"
        write_checkpoint(path, [1.0, -2.5])
        raw = path.read_bytes()
        assert raw == b"WSM1" + bytes([1, 0, 0, 0]) + bytes([2, 0, 0, 0, 0, 0, 0, 0]) + np.array(
            [1.0, -2.5], dtype="<f8"
        ).tobytes()
        np.testing.assert_array_equal(read_checkpoint(path), [1.0, -2.5])

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, st.integers(0, 50)))
    def test_checkpoint_roundtrip_bit_exact(self, tmp_path_factory, vec):
        path = tmp_path_factory.mktemp("ck") / "v.bin"
        write_checkpoint(path, vec)
        assert read_checkpoint(path).tobytes() == vec.astype("<f8").tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.bin"
        path.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(InvalidInputError):
            read_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "x.bin"
        write_checkpoint(path, [1.0, 2.0])
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(InvalidInputError):
            read_checkpoint(path)

    def test_weights_csv(self):
        assert parse_weights(format_weights([1, 0.5, 0.25])) == [1.0, 0.5, 0.25]
        with pytest.raises(InvalidInputError):
            parse_weights("1,a")


def test_types_validate():
    with pytest.raises(InvalidInputError):
        GradientWeights(())
    with pytest.raises(InvalidInputError):
        MergeWeights(())


@pytest.mark.parametrize("dim", [3, 256, 257, 2000])
def test_checkpoints_from_updates_paths_agree(dim):
    rng = np.random.default_rng(dim)
    g = rng.standard_normal((9, dim))
    theta = rng.standard_normal(dim)
    out = checkpoints_from_updates(theta, g)
    assert out.shape == (10, dim)
    np.testing.assert_array_equal(out[0], theta)
    np.testing.assert_array_equal(out[1:], theta - np.cumsum(g, axis=0))
