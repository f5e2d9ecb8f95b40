import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchcast.data import (
    DataError,
    MultivariateSeries,
    ScalerStats,
    denormalize,
    instance_normalize,
    load_csv,
    pack_batch,
    write_csv,
)


def make_series(values, name="s", valid=None, group_ids=None):
    values = np.asarray(values, dtype=float)
    if valid is None:
        valid = np.ones_like(values, dtype=bool)
    if group_ids is None:
        group_ids = np.zeros(values.shape[0], dtype=int)
    return MultivariateSeries(values=values, group_ids=group_ids, valid_mask=valid, series_name=name)


class TestLoadCsv:
    def test_basic_shapes(self, tmp_path):
        path = tmp_path / "d.csv"
        lines = ["series,variate,timestamp,value"]
        for v in range(2):
            for t in range(8):
                lines.append(f"a,{v},{t},{v + t * 0.5}")
        path.write_text("\n".join(lines) + "\n")
        out = load_csv(path)
        assert len(out) == 1
        assert out[0].values.shape == (2, 8)
        assert out[0].valid_mask.all()

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("")
        assert load_csv(path) == []

    def test_header_only(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("series,variate,timestamp,value\n")
        assert load_csv(path) == []

    def test_non_numeric_value_names_line(self, tmp_path):
        path = tmp_path / "b.csv"
        path.write_text("series,variate,timestamp,value\na,0,0,1.0\na,0,1,oops\n")
        with pytest.raises(DataError, match="line 3"):
            load_csv(path)

    def test_rows_in_any_order(self, tmp_path):
        path = tmp_path / "o.csv"
        path.write_text(
            "series,variate,timestamp,value\n"
            "a,1,1,11\na,0,0,0\na,1,0,10\na,0,1,1\n"
        )
        out = load_csv(path)
        np.testing.assert_array_equal(out[0].values, [[0, 1], [10, 11]])

    def test_gaps_marked_invalid(self, tmp_path):
        path = tmp_path / "g.csv"
        path.write_text(
            "series,variate,timestamp,value\n"
            "a,0,0,1\na,0,1,2\na,1,1,5\n"
        )
        out = load_csv(path)
        np.testing.assert_array_equal(out[0].valid_mask, [[True, True], [False, True]])

    def test_nan_value_is_invalid(self, tmp_path):
        path = tmp_path / "n.csv"
        path.write_text("series,variate,timestamp,value\na,0,0,nan\na,0,1,2\n")
        out = load_csv(path)
        np.testing.assert_array_equal(out[0].valid_mask, [[False, True]])

    def test_duplicate_timestamp_rejected(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("series,variate,timestamp,value\na,0,0,1\na,0,0,2\n")
        with pytest.raises(DataError, match="duplicate"):
            load_csv(path)

    def test_round_trip(self, tmp_path):
        series = make_series(np.arange(12.0).reshape(3, 4), name="rt")
        path = tmp_path / "rt.csv"
        write_csv(path, [series])
        (back,) = load_csv(path)
        np.testing.assert_array_equal(back.values, series.values)
        np.testing.assert_array_equal(back.valid_mask, series.valid_mask)


class TestNormalize:
    def test_two_point_example(self):
        series = make_series([[2.0, 4.0]])
        normalized, stats = instance_normalize(series)
        np.testing.assert_allclose(normalized, [[-1.0, 1.0]], atol=1e-5)
        assert stats.mean[0] == pytest.approx(3.0)
        assert stats.std[0] == pytest.approx(1.0)

    def test_constant_variate_maps_to_zeros(self):
        normalized, _ = instance_normalize(make_series([[5.0, 5.0, 5.0]]))
        np.testing.assert_array_equal(normalized, np.zeros((1, 3)))

    def test_idempotent_on_standardized_input(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 64))
        x = (x - x.mean()) / x.std()
        normalized, stats = instance_normalize(make_series(x))
        # the epsilon guard on std perturbs values by up to |x| * 1e-6
        np.testing.assert_allclose(normalized, x, rtol=2e-6, atol=1e-6)
        assert abs(stats.mean[0]) < 1e-9
        assert stats.std[0] == pytest.approx(1.0, abs=1e-9)

    def test_stats_ignore_invalid_steps(self):
        valid = np.array([[False, True, True]])
        _, stats = instance_normalize(make_series([[99.0, 2.0, 4.0]], valid=valid))
        assert stats.mean[0] == pytest.approx(3.0)

    def test_prefix_stats_rescale_whole_series(self):
        series = make_series([[2.0, 4.0, 10.0, 20.0]])
        normalized, stats = instance_normalize(series, stats_len=2)
        assert stats.mean[0] == pytest.approx(3.0)
        assert stats.std[0] == pytest.approx(1.0)
        np.testing.assert_allclose(normalized, [[-1.0, 1.0, 7.0, 17.0]], rtol=1e-5)

    def test_prefix_stats_len_validated(self):
        with pytest.raises(DataError):
            instance_normalize(make_series([[1.0, 2.0]]), stats_len=0)

    def test_prefix_without_valid_steps_falls_back_to_full_span(self):
        valid = np.array([[False, False, True, True]])
        _, stats = instance_normalize(
            make_series([[9.0, 9.0, 2.0, 4.0]], valid=valid), stats_len=2
        )
        assert stats.mean[0] == pytest.approx(3.0)

    def test_denormalize_example(self):
        stats = ScalerStats(mean=np.array([3.0]), std=np.array([1.0]))
        out = denormalize(np.array([[-1.0, 1.0]]), stats)
        np.testing.assert_allclose(out, [[2.0, 4.0]], rtol=1e-6)

    def test_denormalize_zero_is_mean(self):
        stats = ScalerStats(mean=np.array([7.0, -2.0]), std=np.array([3.0, 0.5]))
        out = denormalize(np.zeros((2, 4)), stats)
        np.testing.assert_allclose(out, [[7.0] * 4, [-2.0] * 4])

    def test_denormalize_shape_mismatch(self):
        stats = ScalerStats(mean=np.array([0.0]), std=np.array([1.0]))
        with pytest.raises(DataError):
            denormalize(np.zeros((2, 4)), stats)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(0, 10, size=(3, 32)) + rng.normal(0, 100, size=(3, 1))
        normalized, stats = instance_normalize(make_series(x))
        back = denormalize(normalized, stats)
        np.testing.assert_allclose(back, x, rtol=1e-5, atol=1e-5 * np.abs(x).max())


class TestPackBatch:
    def test_two_series_share_row(self):
        a = make_series(np.ones((3, 16)) * np.arange(16), name="a")
        b = make_series(np.ones((5, 16)) * np.arange(16), name="b")
        batch = pack_batch([a, b], patch_stride=8, max_variates=8, context_len=16)
        assert batch.num_rows == 1
        np.testing.assert_array_equal(batch.id_mask[0].numpy(), [0, 0, 0, 1, 1, 1, 1, 1])

    def test_left_padding_arithmetic(self):
        series = make_series(np.random.default_rng(0).normal(size=(1, 70)))
        batch = pack_batch([series], patch_stride=32, max_variates=8, context_len=96)
        pad = batch.pad_mask[0, 0].numpy()
        assert not pad[:26].any()
        assert pad[26:].all()

    def test_single_series_degenerate(self):
        series = make_series(np.random.default_rng(1).normal(size=(2, 32)))
        batch = pack_batch([series], patch_stride=8, max_variates=2, context_len=32)
        assert (batch.id_mask[0].numpy() == 0).all()
        assert batch.pad_mask[0].numpy().all()

    def test_wide_series_splits_across_rows(self):
        series = make_series(np.random.default_rng(2).normal(size=(10, 32)), name="wide")
        batch = pack_batch([series], patch_stride=8, max_variates=8, context_len=32)
        assert batch.num_rows == 2
        assert (batch.id_mask[0].numpy() == 0).all()
        assert (batch.id_mask[1, :2].numpy() == 0).all()
        assert (batch.id_mask[1, 2:].numpy() == -1).all()

    def test_context_len_not_divisible(self):
        series = make_series(np.zeros((1, 10)) + np.arange(10))
        with pytest.raises(DataError):
            pack_batch([series], patch_stride=8, max_variates=4, context_len=10)

    def test_padding_mask_monotone(self):
        rng = np.random.default_rng(3)
        series = [make_series(rng.normal(size=(2, n)), name=f"s{n}") for n in (20, 50, 64)]
        batch = pack_batch(series, patch_stride=4, max_variates=8, context_len=64)
        pad = batch.pad_mask.numpy().astype(int)
        assert (np.diff(pad, axis=-1) >= 0).all()

    def test_packing_preserves_values(self):
        rng = np.random.default_rng(4)
        series = make_series(rng.normal(5, 3, size=(2, 32)), name="src")
        batch = pack_batch([series], patch_stride=8, max_variates=4, context_len=32)
        entry = batch.entries[0]
        stats = batch.row_scalers(entry.row)
        sub = batch.values[entry.row, : entry.num_variates].numpy()
        back = sub * (stats.std[: entry.num_variates, None] + stats.epsilon) + stats.mean[
            : entry.num_variates, None
        ]
        np.testing.assert_allclose(back, series.values, rtol=1e-5, atol=1e-5)

    def test_scalers_ignore_padding(self):
        rng = np.random.default_rng(5)
        x = rng.normal(2, 7, size=(1, 40))
        series = make_series(x)
        batch = pack_batch([series], patch_stride=8, max_variates=2, context_len=64)
        _, direct = instance_normalize(series)
        assert batch.scaler_mean[0, 0] == pytest.approx(direct.mean[0])
        assert batch.scaler_std[0, 0] == pytest.approx(direct.std[0])

    def test_truncates_to_recent_context(self):
        x = np.arange(100.0)[None, :]
        batch = pack_batch([make_series(x)], patch_stride=8, max_variates=1, context_len=64)
        stats = batch.row_scalers(0)
        assert stats.mean[0] == pytest.approx(np.arange(36, 100).mean())

    def test_norm_len_uses_window_prefix_stats(self):
        x = np.arange(100.0)[None, :]
        batch = pack_batch(
            [make_series(x)], patch_stride=8, max_variates=1, context_len=64, norm_len=48
        )
        stats = batch.row_scalers(0)
        # window is the last 64 steps (36..99); stats from its first 48
        prefix = np.arange(36.0, 84.0)
        assert stats.mean[0] == pytest.approx(prefix.mean())
        assert stats.std[0] == pytest.approx(prefix.std())
        expected = (np.arange(36.0, 100.0) - prefix.mean()) / (prefix.std() + stats.epsilon)
        np.testing.assert_allclose(batch.values[0, 0].numpy(), expected, rtol=1e-5)

    def test_norm_len_out_of_range_rejected(self):
        series = make_series(np.ones((1, 16)) * np.arange(16))
        with pytest.raises(DataError):
            pack_batch([series], patch_stride=8, max_variates=1, context_len=16, norm_len=17)
        with pytest.raises(DataError):
            pack_batch([series], patch_stride=8, max_variates=1, context_len=16, norm_len=0)


class TestSeriesInvariants:
    def test_requires_valid_step_per_variate(self):
        with pytest.raises(DataError):
            make_series([[1.0, 2.0]], valid=np.zeros((1, 2), dtype=bool))

    def test_group_ids_must_be_contiguous(self):
        with pytest.raises(DataError):
            make_series(np.zeros((3, 4)) + 1, group_ids=np.array([0, 1, 0]))

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            MultivariateSeries(
                values=np.zeros((2, 3)),
                group_ids=np.zeros(2, dtype=int),
                valid_mask=np.ones((2, 4), dtype=bool),
            )
