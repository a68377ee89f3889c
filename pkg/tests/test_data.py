import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from divts.data import (
    MAGIC, Dataset, RawSeries, WindowConfig, load_dataset, minmax_normalize, normalize_windows,
    num_windows, partition_id_ood, save_dataset, slide_windows, slide_windows_with_report, split_train_val,
)
from divts.errors import (
    DimensionMismatch, EmptySplit, FormatError, LabelSpanConflict, LengthTooShort, NonFiniteInput, TooFewIDClasses,
)


def make_ds(n=10, n_classes=3, channels=2, window=8, seed=0, with_d=True):
    rng = np.random.default_rng(seed)
    return Dataset(
        rng.random((n, channels, 1, window)).astype(np.float32),
        np.arange(n) % n_classes + 1,
        [f"c{i}" for i in range(1, n_classes + 1)],
        d_planted=rng.integers(0, 3, n) if with_d else None,
    )


@pytest.mark.parametrize("length,expected", [(1000, 9), (200, 1)])
def test_window_counts(length, expected):
    series = RawSeries(np.zeros((1, length)), 1)
    assert len(slide_windows(series, WindowConfig(200, 100))) == expected


def test_window_too_short():
    with pytest.raises(LengthTooShort):
        slide_windows(RawSeries(np.zeros((1, 150)), 1), WindowConfig(200, 100))


def test_window_count_formula_exhaustive():
    # brute-force enumeration of window starts against the closed form
    for window in (1, 3, 7, 16):
        for step in range(1, window + 1):
            for length in range(window, 120):
                starts = [s for s in range(length) if s % step == 0 and s + window <= length]
                assert num_windows(length, window, step) == len(starts)


def test_window_count_formula_long_series():
    for length in range(200, 1001, 37):
        starts = [s for s in range(0, length, 100) if s + 200 <= length]
        assert len(slide_windows(RawSeries(np.zeros((1, length)), 1), WindowConfig(200, 100))) == len(starts)


def test_window_contents_and_spans():
    values = np.arange(30, dtype=float).reshape(2, 15)
    wins = slide_windows(RawSeries(values, 2), WindowConfig(5, 5))
    assert [w.x.shape for w in wins] == [(2, 1, 5)] * 3
    np.testing.assert_array_equal(wins[1].x[0, 0], [5, 6, 7, 8, 9])
    assert all(w.y == 2 for w in wins)


def test_label_boundary_windows_dropped():
    labels = np.r_[np.ones(10, int), np.full(10, 2)]
    insts, dropped = slide_windows_with_report(RawSeries(np.zeros((1, 20)), labels), WindowConfig(5, 5))
    assert [i.y for i in insts] == [1, 1, 2, 2] and dropped == 0
    insts, dropped = slide_windows_with_report(RawSeries(np.zeros((1, 20)), labels), WindowConfig(6, 3))
    assert dropped == 2 and [i.y for i in insts] == [1, 1, 2]
    with pytest.raises(LabelSpanConflict):
        slide_windows_with_report(RawSeries(np.zeros((1, 20)), labels), WindowConfig(6, 3), on_conflict="raise")


@pytest.mark.parametrize("x,expected", [([2, 4, 6], [0, 0.5, 1]), ([5, 5, 5], [0, 0, 0]), ([0, 1], [0, 1])])
def test_minmax_examples(x, expected):
    np.testing.assert_allclose(minmax_normalize(np.array(x, float)), expected)


def test_minmax_rejects_nonfinite():
    with pytest.raises(NonFiniteInput):
        minmax_normalize(np.array([1.0, np.nan]))


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_minmax_bounded_and_idempotent(vals):
    out = minmax_normalize(np.array(vals))
    assert out.min() >= 0 and out.max() <= 1
    if out.max() == 1 and out.min() == 0:
        np.testing.assert_allclose(minmax_normalize(out), out, atol=1e-12)


def test_normalize_windows_per_sample_vs_global():
    x = np.stack([np.full((1, 1, 4), 3.0), np.arange(4.0).reshape(1, 1, 4) * 10])
    per = normalize_windows(x, "sample")
    np.testing.assert_array_equal(per[0], 0)
    np.testing.assert_allclose(per[1].ravel(), [0, 1 / 3, 2 / 3, 1])
    glob = normalize_windows(x, "global")
    np.testing.assert_allclose(glob[0].ravel(), 0.1)


def test_split_sizes_and_determinism():
    ds = make_ds(10)
    a, b = split_train_val(ds, 0.8, seed=3)
    assert (len(a), len(b)) == (8, 2)
    a2, b2 = split_train_val(ds, 0.8, seed=3)
    assert a.equals(a2) and b.equals(b2)


def test_split_invalid_ratio():
    with pytest.raises(EmptySplit):
        split_train_val(make_ds(10), 1.0, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_split_is_partition(n, ratio, seed):
    ds = make_ds(n)
    ds.x[:, 0, 0, 0] = np.arange(n)  # tag rows
    try:
        a, b = split_train_val(ds, ratio, seed)
    except EmptySplit:
        return
    ta, tb = set(a.x[:, 0, 0, 0]), set(b.x[:, 0, 0, 0])
    assert not ta & tb and len(ta | tb) == n


def test_partition_id_ood_relabels():
    ds = make_ds(70, n_classes=7)
    pool, test = partition_id_ood(ds, {3})
    assert pool.num_id_classes == 6 and set(np.unique(pool.y)) == set(range(1, 7))
    assert test.ood_classes == {7} and test.class_names[6] == "c3"
    assert test.is_ood.sum() == 10 and not pool.is_ood.any()
    # relabeled instances keep their data
    orig3 = ds.x[ds.y == 3]
    np.testing.assert_array_equal(test.x[test.y == 7], orig3)


def test_partition_empty_ood_and_too_many():
    ds = make_ds(20, n_classes=3)
    pool, test = partition_id_ood(ds, set())
    assert len(pool) == 20 and not test.is_ood.any()
    with pytest.raises(TooFewIDClasses):
        partition_id_ood(ds, {1, 2, 3})


def test_save_load_roundtrip(tmp_path):
    ds = make_ds(3)
    load = load_dataset(save_dataset(ds, tmp_path / "d"))
    assert load.equals(ds)
    no_d = make_ds(3, with_d=False)
    assert load_dataset(save_dataset(no_d, tmp_path / "e")).equals(no_d)


def test_payload_shorter_than_manifest(tmp_path):
    p = save_dataset(make_ds(10), tmp_path / "d")
    raw = (p / "y.bin").read_bytes()
    (p / "y.bin").write_bytes(raw[:-4])
    with pytest.raises(DimensionMismatch):
        load_dataset(p)


def test_corrupted_magic(tmp_path):
    p = save_dataset(make_ds(3), tmp_path / "d")
    raw = bytearray((p / "x.bin").read_bytes())
    raw[2] = ord("X")
    (p / "x.bin").write_bytes(bytes(raw))
    with pytest.raises(FormatError) as err:
        load_dataset(p)
    assert err.value.offset == 2


def test_binary_layout(tmp_path):
    ds = make_ds(2, channels=1, window=3)
    p = save_dataset(ds, tmp_path / "d")
    raw = (p / "y.bin").read_bytes()
    assert raw[:6] == MAGIC and np.frombuffer(raw[6:], "<i4").tolist() == ds.y.tolist()
    xs = np.frombuffer((p / "x.bin").read_bytes()[6:], "<f4")
    np.testing.assert_array_equal(xs, ds.x.ravel())
