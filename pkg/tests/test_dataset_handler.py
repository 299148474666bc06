import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from services.errors import CorruptFileError, DimensionError, ParseError
from utils.dataset_handler import (
    BarsSpec,
    DataKind,
    Dataset,
    load_any,
    load_binarized_mnist,
    load_dataset,
    load_matrix,
    make_bars_dictionary,
    make_bsc_bars,
    make_sbn_bars,
    save_dataset,
)


# ---------------------------------------------------------------------------
# Bars
# ---------------------------------------------------------------------------
def test_bars_dictionary_for_default_grid():
    W = make_bars_dictionary(BarsSpec(grid=5, bar_value=10.0))
    assert W.shape == (25, 10)
    np.testing.assert_array_equal(W.sum(axis=0), np.full(10, 50.0))
    # horizontal bar 1 covers pixel row 1; vertical bar 3 covers pixel column 3
    assert W[1 * 5 + 4, 1] == 10.0 and W[4 * 5 + 3, 8] == 10.0


@settings(max_examples=32, deadline=None)
@given(st.integers(1, 32))
def test_bars_geometry(grid):
    W = make_bars_dictionary(BarsSpec(grid=grid, bar_value=10.0))
    on = W > 0
    assert W.shape == (grid * grid, 2 * grid)
    assert np.all(on.sum(axis=1) == 2)
    overlap = on.T.astype(int) @ on.astype(int)
    horizontal, vertical = overlap[:grid, grid:], overlap[grid:, :grid]
    assert np.all(horizontal == 1) and np.all(vertical == 1)
    if grid > 1:
        assert np.all(overlap[:grid, :grid] == grid * np.eye(grid))
    assert set(np.unique(W)) <= {0.0, 10.0}


def test_one_pixel_grid_gives_two_identical_bars():
    W = make_bars_dictionary(BarsSpec(grid=1, bar_value=10.0))
    np.testing.assert_array_equal(W, [[10.0, 10.0]])


def test_bsc_bars_are_seeded_and_carry_truth():
    spec = BarsSpec(n=400, seed=5)
    a, b = make_bsc_bars(spec), make_bsc_bars(spec)
    assert a.Y.shape == (400, 25) and a.kind == DataKind.CONTINUOUS
    np.testing.assert_array_equal(a.Y, b.Y)
    assert a.ground_truth.model_kind == "bsc"
    assert a.ground_truth.params["sigma2"][0] == pytest.approx(4.0)
    assert 0.15 < a.ground_truth.states.mean() < 0.25
    assert not np.array_equal(a.Y, make_bsc_bars(BarsSpec(n=400, seed=6)).Y)


def test_sbn_bars_are_binary():
    ds = make_sbn_bars(BarsSpec(n=300, seed=1))
    assert ds.kind == DataKind.BINARY
    assert set(np.unique(ds.Y)) <= {0.0, 1.0}
    np.testing.assert_array_equal(ds.ground_truth.params["b"], np.full(25, -5.0))


def test_binary_dataset_rejects_other_values():
    with pytest.raises(DimensionError):
        Dataset(np.array([[0.0, 2.0]]), DataKind.BINARY)


def test_head_keeps_truth_aligned():
    ds = make_bsc_bars(BarsSpec(n=50))
    head = ds.head(10)
    assert head.n_points == 10 and head.ground_truth.states.shape == (10, 10)
    assert ds.head(0) is ds


# ---------------------------------------------------------------------------
# Text readers
# ---------------------------------------------------------------------------
def write_rows(path, rows):
    path.write_text("\n".join(" ".join(str(v) for v in row) for row in rows) + "\n")
    return path


def test_mnist_toy_file(tmp_path):
    rows = np.random.default_rng(0).integers(0, 2, (2, 784))
    ds = load_binarized_mnist(write_rows(tmp_path / "mnist.txt", rows))
    assert ds.Y.shape == (2, 784) and ds.kind == DataKind.BINARY
    np.testing.assert_array_equal(ds.Y, rows)


def test_mnist_value_out_of_range_names_the_line(tmp_path):
    rows = np.zeros((3, 784), dtype=int)
    rows[1, 17] = 2
    with pytest.raises(ParseError) as err:
        load_binarized_mnist(write_rows(tmp_path / "bad.txt", rows))
    assert err.value.line == 2
    assert "line 2" in str(err.value)


def test_mnist_short_row_names_the_line(tmp_path):
    path = tmp_path / "short.txt"
    path.write_text(" ".join(["0"] * 784) + "\n" + " ".join(["1"] * 700) + "\n")
    with pytest.raises(ParseError) as err:
        load_binarized_mnist(path)
    assert err.value.line == 2


def test_trailing_blank_lines_are_ignored(tmp_path):
    path = tmp_path / "trailing.txt"
    path.write_text(" ".join(["1"] * 784) + "\n" + " ".join(["0"] * 784) + "\n\n\n")
    ds = load_binarized_mnist(path)
    assert ds.Y.shape == (2, 784)
    assert ds.Y[0].all() and not ds.Y[1].any()


def test_interior_blank_line_names_the_line(tmp_path):
    path = tmp_path / "gap.txt"
    path.write_text("1.0 2.0\n\n3.0 4.0\n\n")
    with pytest.raises(ParseError) as err:
        load_matrix(path)
    assert err.value.line == 2


def test_mnist_long_row_is_a_parse_error(tmp_path):
    path = tmp_path / "long.txt"
    path.write_text(" ".join(["0"] * 784) + "\n" + " ".join(["1"] * 790) + "\n")
    with pytest.raises(ParseError):
        load_binarized_mnist(path)


def test_mnist_wrong_width_is_a_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_binarized_mnist(write_rows(tmp_path / "narrow.txt", np.zeros((2, 10), dtype=int)))


def test_matrix_reader_and_format_sniffing(tmp_path):
    values = np.array([[0.5, -1.25, 3.0], [2.0, 0.0, -7.5]])
    path = write_rows(tmp_path / "patches.txt", values)
    np.testing.assert_array_equal(load_matrix(path).Y, values)
    np.testing.assert_array_equal(load_any(path).Y, values)

    tvsd = save_dataset(Dataset(values), tmp_path / "d.tvsd")
    assert load_any(tvsd).n_points == 2
    with pytest.raises(ParseError):
        load_matrix(write_rows(tmp_path / "text.txt", [["a", "b"]]))


# ---------------------------------------------------------------------------
# TVSD container
# ---------------------------------------------------------------------------
def test_dataset_round_trip_with_truth(tmp_path):
    ds = make_bsc_bars(BarsSpec(n=100, seed=3))
    loaded = load_dataset(save_dataset(ds, tmp_path / "bars.tvsd"))
    np.testing.assert_array_equal(loaded.Y, ds.Y)
    assert loaded.kind == ds.kind
    np.testing.assert_array_equal(loaded.ground_truth.states, ds.ground_truth.states)
    for name, array in ds.ground_truth.params.items():
        np.testing.assert_array_equal(loaded.ground_truth.params[name], array)


def test_empty_dataset_round_trips(tmp_path):
    loaded = load_dataset(save_dataset(Dataset(np.zeros((0, 7)), DataKind.BINARY), tmp_path / "e.tvsd"))
    assert loaded.Y.shape == (0, 7) and loaded.kind == DataKind.BINARY


def test_truncated_dataset_is_corrupt(tmp_path):
    path = save_dataset(make_sbn_bars(BarsSpec(n=20)), tmp_path / "t.tvsd")
    data = path.read_bytes()
    for cut in (3, 10, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CorruptFileError):
            load_dataset(path)


def test_wrong_magic_and_version_are_corrupt(tmp_path):
    path = save_dataset(Dataset(np.ones((2, 2))), tmp_path / "m.tvsd")
    data = path.read_bytes()
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CorruptFileError):
        load_dataset(path)
    path.write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(CorruptFileError):
        load_dataset(path)
