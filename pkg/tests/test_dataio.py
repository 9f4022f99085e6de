"""CSV loading, normalization, windowing, and stage splitting."""

import numpy as np
import pytest

from stagediff.dataio import (
    ColumnSchema,
    NormStats,
    RawSeries,
    WindowSet,
    denormalize,
    fit_normalize,
    load_csv,
    make_windows,
    read_windows_csv,
    split_stages,
    write_windows_csv,
)
from stagediff.errors import ConfigError, DataError


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def stock_csv(tmp_path):
    rng = np.random.default_rng(0)
    header = ["Open", "High", "Low", "Close", "AdjClose", "Volume"]
    rows = rng.uniform(10, 20, size=(40, 6)).round(4).tolist()
    return write_csv(tmp_path / "stock.csv", header, rows)


class TestLoadCsv:
    def test_all_columns_selected(self, stock_csv):
        raw = load_csv(stock_csv)
        assert raw.D == 6
        assert raw.length == 40
        assert raw.feature_names == ["Open", "High", "Low", "Close", "AdjClose", "Volume"]

    def test_column_subset_preserves_order(self, stock_csv):
        raw = load_csv(stock_csv, ColumnSchema(columns=["Close", "Open"]))
        assert raw.feature_names == ["Close", "Open"]
        assert raw.D == 2

    def test_row_order_preserved(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", ["a"], [[i] for i in range(10)])
        raw = load_csv(path)
        assert raw.values[:, 0].tolist() == list(range(10))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_csv(tmp_path / "nope.csv")

    def test_bad_cell_reject_policy_names_row(self, tmp_path):
        path = write_csv(tmp_path / "bad.csv", ["a", "b"], [[1, 2], [3, "oops"], [5, 6]])
        with pytest.raises(DataError, match="row 1"):
            load_csv(path, ColumnSchema(missing_policy="error"))

    def test_bad_cell_drop_policy(self, tmp_path, caplog):
        path = write_csv(tmp_path / "bad.csv", ["a", "b"], [[1, 2], [3, ""], [5, 6]])
        with caplog.at_level("INFO"):
            raw = load_csv(path, ColumnSchema(columns=["a", "b"]))
        assert raw.length == 2
        assert "dropped 1" in caplog.text

    def test_missing_column_named(self, stock_csv):
        with pytest.raises(DataError, match="Price"):
            load_csv(stock_csv, ColumnSchema(columns=["Price"]))

    def test_short_file_is_windowing_error_not_load_error(self, stock_csv):
        raw = load_csv(stock_csv)  # 40 rows load fine
        with pytest.raises(DataError, match="shorter"):
            make_windows(raw, L_ser=128)

    def test_row_range(self, tmp_path):
        path = write_csv(tmp_path / "t.csv", ["a"], [[i] for i in range(10)])
        raw = load_csv(path, ColumnSchema(row_range=(2, 7)))
        assert raw.values[:, 0].tolist() == [2, 3, 4, 5, 6]


class TestNormalize:
    def test_direct_formula(self):
        raw = RawSeries(values=np.array([[2.0], [4.0], [6.0]]), feature_names=["x"])
        normed, stats = fit_normalize(raw)
        assert normed.values[:, 0] == pytest.approx([0.0, 0.5, 1.0], abs=1e-6)
        assert stats.minimum[0] == 2.0 and stats.maximum[0] == 6.0

    def test_constant_column_guard(self):
        raw = RawSeries(values=np.array([[5.0], [5.0], [5.0]]), feature_names=["x"])
        normed, _ = fit_normalize(raw)
        assert normed.values[:, 0] == pytest.approx([0.0, 0.0, 0.0])

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        values = rng.normal(scale=100, size=(50, 4))
        raw = RawSeries(values=values, feature_names=list("abcd"))
        normed, stats = fit_normalize(raw)
        back = denormalize(normed.values, stats)
        assert np.allclose(back, values, rtol=1e-9)

    def test_range_invariant(self):
        rng = np.random.default_rng(4)
        raw = RawSeries(values=rng.uniform(-5, 5, (30, 3)), feature_names=list("abc"))
        normed, _ = fit_normalize(raw)
        assert normed.values.min() >= 0.0
        assert normed.values.max() < 1.0  # strict: epsilon > 0

    def test_stats_json_round_trip(self, tmp_path):
        stats = NormStats(minimum=np.array([1.0, -2.0]), maximum=np.array([3.0, 2.0]))
        path = tmp_path / "stats.json"
        stats.save(path)
        loaded = NormStats.load(path)
        assert np.array_equal(loaded.minimum, stats.minimum)
        assert np.array_equal(loaded.maximum, stats.maximum)
        assert loaded.epsilon == stats.epsilon


def series(n, d=1):
    return RawSeries(
        values=np.arange(n * d, dtype=np.float64).reshape(n, d) / (n * d),
        feature_names=[f"f{i}" for i in range(d)],
    )


class TestMakeWindows:
    def test_count_formula_stride1(self):
        assert make_windows(series(100), 24, 1).N == 77

    def test_single_window(self):
        ws = make_windows(series(24), 24, 1)
        assert ws.N == 1
        assert np.array_equal(ws.windows[0], series(24).values)

    def test_disjoint_windows(self):
        ws = make_windows(series(256), 64, 64)
        assert ws.N == 4
        flat = ws.windows.reshape(-1, 1)
        assert np.array_equal(flat, series(256).values)

    def test_window_coverage_stride1(self):
        raw = series(30, d=2)
        ws = make_windows(raw, 5, 1)
        for i in range(ws.N):
            for j in range(5):
                assert np.array_equal(ws.windows[i, j], raw.values[i + j])

    def test_too_short(self):
        with pytest.raises(DataError):
            make_windows(series(10), 11)

    def test_bad_params(self):
        with pytest.raises(ConfigError):
            make_windows(series(10), 1)
        with pytest.raises(ConfigError):
            make_windows(series(10), 4, 0)


class TestSplitStages:
    def test_even_split(self):
        window = np.arange(256 * 2, dtype=float).reshape(256, 2)
        view = split_stages(window, 4)
        assert view.M == 4 and view.L_sta == 64
        assert all(s.shape == (64, 2) for s in view.stages)

    def test_single_stage_identity(self):
        window = np.random.default_rng(0).normal(size=(32, 3))
        view = split_stages(window, 1)
        assert np.array_equal(view.stages[0], window)

    def test_concat_identity_over_valid_m(self):
        window = np.random.default_rng(1).normal(size=(24, 2))
        for m in (1, 2, 3, 4, 6, 8, 12, 24):
            view = split_stages(window, m)
            assert np.array_equal(np.concatenate(view.stages), window)

    def test_non_divisible_rejected(self):
        with pytest.raises(ConfigError):
            split_stages(np.zeros((100, 3)), 3)


class TestWindowCsvRoundTrip:
    def test_long_format_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        ws = WindowSet(windows=rng.uniform(size=(3, 6, 2)), L_ser=6, stride=1)
        path = tmp_path / "synth.csv"
        write_windows_csv(ws, ["a", "b"], path)
        loaded, names = read_windows_csv(path, L_ser=6)
        assert names == ["a", "b"]
        assert np.allclose(loaded.windows, ws.windows)

    def test_denormalized_units_and_order(self, tmp_path):
        stats = NormStats(minimum=np.array([0.0, 100.0]), maximum=np.array([1.0, 200.0]))
        ws = WindowSet(windows=np.full((1, 4, 2), 0.5), L_ser=4, stride=1)
        path = tmp_path / "out.csv"
        write_windows_csv(ws, ["small", "big"], path, stats=stats)
        text = path.read_text().splitlines()
        assert text[0] == "window_id,small,big"
        first = [float(v) for v in text[1].split(",")]
        assert first[1] == pytest.approx(0.5 * (1.0 + stats.epsilon), rel=1e-9)
        assert first[2] == pytest.approx(100.0 + 0.5 * (100.0 + stats.epsilon), rel=1e-9)

    def test_one_file_per_window(self, tmp_path):
        ws = WindowSet(windows=np.zeros((2, 3, 1)), L_ser=3, stride=1)
        written = write_windows_csv(ws, ["x"], tmp_path / "w.csv", one_file_per_window=True)
        assert [p.name for p in written] == ["w_w0.csv", "w_w1.csv"]

    def test_empty_set_writes_header(self, tmp_path):
        ws = WindowSet(windows=np.empty((0, 4, 2)), L_ser=4, stride=1)
        path = tmp_path / "empty.csv"
        write_windows_csv(ws, ["a", "b"], path)
        assert path.read_text().splitlines()[0] == "window_id,a,b"
