import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsam import dataio as dio
from stsam.dataio import DataError, DatasetMeta, FlowDataset, NormalizationStats, SyntheticSpec


def write_case(tmp_path, rows, n_regions=2, header="time_index,region_index,inflow,outflow"):
    csv_path = tmp_path / "flows.csv"
    meta_path = tmp_path / "meta.json"
    csv_path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
    meta_path.write_text(
        json.dumps({"n_regions": n_regions, "slots_per_day": 48, "interval_minutes": 30, "start_slot_of_week": 0})
    )
    return csv_path, meta_path


def dataset(T, n=2, slots_per_day=48, seed=0):
    g = np.random.default_rng(seed)
    meta = DatasetMeta(n, slots_per_day, 1440 // slots_per_day)
    return FlowDataset(meta, g.uniform(0, 50, (T, n)), g.uniform(0, 50, (T, n)))


# -- meta ---------------------------------------------------------------------
def test_meta_requires_full_day():
    with pytest.raises(DataError):
        DatasetMeta(n_regions=2, slots_per_day=48, interval_minutes=20)
    assert DatasetMeta(200).slots_per_week == 336


# -- csv loading --------------------------------------------------------------
def test_load_small_file(tmp_path):
    rows = ["0,0,1,2", "0,1,3,4", "1,0,5,6", "1,1,7,8"]
    data = dio.load_flow_csv(*write_case(tmp_path, rows))
    assert data.inflow.tolist() == [[1, 3], [5, 7]]
    assert data.outflow.tolist() == [[2, 4], [6, 8]]


def test_load_crlf_and_comments(tmp_path):
    csv_path, meta_path = write_case(tmp_path, [])
    csv_path.write_bytes(b"# provenance\r\ntime_index,region_index,inflow,outflow\r\n0,0,1,2\r\n0,1,3,4\r\n")
    data = dio.load_flow_csv(csv_path, meta_path)
    assert data.inflow.tolist() == [[1, 3]]


def test_header_only_rejected(tmp_path):
    with pytest.raises(DataError, match="T == 0"):
        dio.load_flow_csv(*write_case(tmp_path, []))


def test_missing_cell_zero_filled_with_warning(tmp_path, caplog):
    rows = ["0,0,1,2", "0,1,3,4", "1,1,7,8"]
    with caplog.at_level(logging.WARNING):
        data = dio.load_flow_csv(*write_case(tmp_path, rows))
    assert data.inflow[1, 0] == 0 and data.outflow[1, 0] == 0
    assert data.extra["missing_cells"] == 1
    assert "1 missing" in caplog.text


@pytest.mark.parametrize(
    "row, message",
    [
        ("0,2,1,1", "region_index 2"),
        ("0,0,-1,1", "nonnegative"),
        ("0,0,abc,1", r":3: malformed"),
        ("0,0,1", r":3: malformed"),
    ],
)
def test_bad_rows_rejected(tmp_path, row, message):
    with pytest.raises(DataError, match=message):
        dio.load_flow_csv(*write_case(tmp_path, ["0,1,1,1", row]))


def test_wrong_header_rejected(tmp_path):
    with pytest.raises(DataError, match="header"):
        dio.load_flow_csv(*write_case(tmp_path, ["0,0,1,1"], header="t,r,i,o"))


def test_write_then_load_round_trip(tmp_path):
    data = dataset(7, n=3)
    dio.write_flow_csv(data, tmp_path / "f.csv", tmp_path / "m.json", "seed=1")
    back = dio.load_flow_csv(tmp_path / "f.csv", tmp_path / "m.json")
    assert np.array_equal(back.inflow, data.inflow) and np.array_equal(back.outflow, data.outflow)
    assert back.meta == data.meta


# -- normalization ------------------------------------------------------------
def test_normalizer_basic():
    stats = NormalizationStats(0.0, 100.0)
    assert stats.apply(25.0) == 0.25


def test_normalizer_constant_dataset():
    meta = DatasetMeta(2)
    data = FlowDataset(meta, np.full((4, 2), 7.0), np.full((4, 2), 7.0))
    stats = dio.fit_normalizer(data)
    assert stats.scale == 1.0
    assert not stats.apply(data.inflow).any()


def test_normalizer_fits_both_channels_on_given_slots():
    meta = DatasetMeta(1)
    data = FlowDataset(meta, np.array([[1.0], [2.0], [90.0]]), np.array([[0.5], [3.0], [99.0]]))
    assert dio.fit_normalizer(data, [0, 1]) == NormalizationStats(0.5, 3.0)


def test_normalizer_round_trip_random():
    g = np.random.default_rng(3)
    x = g.uniform(-1e3, 1e3, 1000)
    stats = NormalizationStats(-12.5, 480.0)
    assert np.max(np.abs(stats.invert(stats.apply(x)) - x)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-1e3, 1e3),
    st.floats(0, 1e3),
    st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20),
)
def test_normalizer_round_trip_property(lo, width, xs):
    stats = NormalizationStats(lo, lo + width)
    x = np.array(xs)
    assert np.all(np.abs(stats.invert(stats.apply(x)) - x) <= 1e-12)


# -- windowing ----------------------------------------------------------------
def test_make_samples_count_and_first_window():
    data = dataset(10)
    samples = dio.make_samples(data, 5)
    assert len(samples) == len(range(5, 10))
    first = samples[0]
    assert np.array_equal(first.history_in, data.inflow[0:5].T)
    assert np.array_equal(first.history_out, data.outflow[0:5].T)
    assert first.target_slot == 5 and first.time_index == 4
    assert np.array_equal(first.target_in, data.inflow[5])


def test_make_samples_boundary():
    assert len(dio.make_samples(dataset(6), 5)) == 1
    with pytest.raises(DataError):
        dio.make_samples(dataset(5), 5)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 40), st.integers(1, 6))
def test_targets_reconstruct_series(T, k):
    if T <= k:
        return
    data = dataset(T, n=3, seed=T)
    samples = dio.make_samples(data, k)
    assert np.array_equal(np.stack([s.target_in for s in samples]), data.inflow[k:])
    assert np.array_equal(np.stack([s.target_out for s in samples]), data.outflow[k:])


# -- split ----------------------------------------------------------------------
def test_split_example():
    meta = DatasetMeta(2, slots_per_day=10, interval_minutes=144)
    data = FlowDataset(meta, np.zeros((100, 2)), np.zeros((100, 2)))
    k = 3
    sp = dio.split(data, train_days=8, val_fraction=0.2, k=k)
    assert sp.train.tolist() == list(range(k, 64))
    assert sp.val.tolist() == list(range(64, 80))
    assert sp.test.tolist() == list(range(80, 100))
    assert len(sp.val) == 16


def test_split_nyc_protocol():
    # 40 days of 30-minute slots; 80/20 of the training range
    data = dataset(60 * 48, n=1)
    sp = dio.split(data, train_days=40, val_fraction=0.2, k=5)
    assert sp.val[-1] + 1 == 1920
    assert sp.train[-1] + 1 == 1536
    assert len(sp.val) == 384


def test_split_disallow_overlap_drops_heads():
    meta = DatasetMeta(1, slots_per_day=10, interval_minutes=144)
    data = FlowDataset(meta, np.zeros((100, 1)), np.zeros((100, 1)))
    sp = dio.split(data, 8, 0.2, k=3, disallow_overlap=True)
    assert sp.val[0] == 67 and sp.test[0] == 83


def test_split_errors():
    data = dataset(100, slots_per_day=10)
    with pytest.raises(DataError):
        dio.split(data, train_days=10, val_fraction=0.2)
    with pytest.raises(DataError):
        dio.split(data, train_days=8, val_fraction=1.0)
    with pytest.raises(DataError, match="validation"):
        dio.split(data, train_days=8, val_fraction=0.05, k=5)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 9), st.floats(0.1, 0.5), st.integers(1, 3))
def test_split_partitions_disjoint(train_days, val_fraction, k):
    data = dataset(100, n=1, slots_per_day=10)
    try:
        sp = dio.split(data, train_days, val_fraction, k)
    except DataError:
        return
    parts = [set(sp.train), set(sp.val), set(sp.test)]
    assert not parts[0] & parts[1] and not parts[0] & parts[2] and not parts[1] & parts[2]
    assert max(sp.train) < min(sp.val) and max(sp.val) < min(sp.test)


# -- synthetic ------------------------------------------------------------------
def test_synthetic_constant():
    spec = SyntheticSpec(n_regions=3, days=2, slots_per_day=4, base_level=12.0, daily_amplitude=0.0, noise_std=0.0)
    data = dio.generate_synthetic(spec)
    assert np.all(data.inflow == 12.0) and np.all(data.outflow == 12.0)


def test_synthetic_deterministic():
    spec = SyntheticSpec(n_regions=4, days=3, slots_per_day=8, lag_edges=[(0, 1, 2, 0.5)], seed=5)
    a, b = dio.generate_synthetic(spec), dio.generate_synthetic(spec)
    assert a.inflow.tobytes() == b.inflow.tobytes() and a.outflow.tobytes() == b.outflow.tobytes()
    assert a.extra["rng_algorithm"] == "numpy.PCG64"


def test_synthetic_lag_edge_recomputed():
    spec = SyntheticSpec(
        n_regions=2, days=3, slots_per_day=12, base_level=50.0, daily_amplitude=20.0,
        noise_std=0.0, lag_edges=[(0, 1, 1, 1.0)], seed=2,
    )
    data = dio.generate_synthetic(spec)
    for c, flow in enumerate((data.inflow, data.outflow)):
        phases = data.extra["phases"][c]
        t = np.arange(flow.shape[0])
        own = 50.0 + 20.0 * np.sin(2 * np.pi * (t % 12) / 12 + phases[1])
        shifted = np.concatenate([[0.0], flow[:-1, 0]])
        np.testing.assert_allclose(flow[:, 1], own + shifted, rtol=0, atol=1e-12)
        np.testing.assert_allclose(
            flow[:, 0], 50.0 + 20.0 * np.sin(2 * np.pi * (t % 12) / 12 + phases[0]), rtol=0, atol=1e-12
        )


def test_synthetic_clamped_nonnegative():
    spec = SyntheticSpec(n_regions=5, days=2, slots_per_day=8, base_level=1.0, daily_amplitude=10.0, noise_std=3.0)
    data = dio.generate_synthetic(spec)
    assert data.inflow.min() >= 0 and (data.inflow == 0).any()


def test_synthetic_rejects_bad_edges():
    with pytest.raises(DataError):
        SyntheticSpec(n_regions=2, lag_edges=[(0, 1, 0, 1.0)])
    with pytest.raises(DataError):
        SyntheticSpec(n_regions=2, lag_edges=[(0, 5, 1, 1.0)])
