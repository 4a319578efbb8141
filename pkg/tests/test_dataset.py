import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loopdsse import dataset as ds
from loopdsse import grid_model as grid
from loopdsse.aggregator import season_of

HEADER = "timestamp,customer_id,kw,voltage_pu,quality\n"


def _write(tmp_path, body, header=HEADER):
    p = tmp_path / "ami.csv"
    p.write_text(header + body)
    return p


def test_empty_csv(tmp_path):
    h = ds.load_ami_csv(_write(tmp_path, ""))
    assert h.n_customers == 0


def test_three_rows(tmp_path):
    body = "\n".join(f"2016-01-01T0{i},c1,{i + 1.0},1.0,measured" for i in range(3)) + "\n"
    h = ds.load_ami_csv(_write(tmp_path, body))
    assert h.kw.shape == (1, 3)
    assert np.all(h.quality == ds.MEASURED)


def test_unparsable_cell_flagged(tmp_path):
    body = "2016-01-01T00,c1,1.5,1.0,measured\n2016-01-01T01,c1,abc,1.0,measured\n2016-01-01T02,c1,2.0,1.0,measured\n"
    h = ds.load_ami_csv(_write(tmp_path, body))
    assert h.meta["unparsable_rows"] == 1
    assert list(h.quality[0]) == [ds.MEASURED, ds.MISSING, ds.MEASURED]
    assert h.kw[0, 2] == 2.0


def test_bad_header_and_duplicates(tmp_path):
    with pytest.raises(ds.SchemaError):
        ds.load_ami_csv(_write(tmp_path, "", header="time,id,kw\n"))
    body = "2016-01-01T00,c1,1,1,measured\n2016-01-01T00,c1,2,1,measured\n"
    with pytest.raises(ds.DuplicateRecordError) as info:
        ds.load_ami_csv(_write(tmp_path, body))
    assert info.value.offenders == [("c1", "2016-01-01T00")]


def test_csv_round_trip(tmp_path, feeder):
    h, _ = ds.synthesize_history(feeder, None, 1, hours=48)
    h = ds.mask_missing(h, 0.1, 0)
    p = tmp_path / "a.csv"
    ds.write_ami_csv(h, p, comment="fixture")
    back = ds.load_ami_csv(p)
    assert back.customer_ids == tuple(sorted(h.customer_ids))
    assert np.array_equal(back.quality, h.quality)
    assert np.allclose(back.kw, h.kw, equal_nan=True, rtol=0, atol=0)


def test_synthesis_is_deterministic(feeder):
    a, ta = ds.synthesize_history(feeder, None, 5, hours=200)
    b, tb = ds.synthesize_history(feeder, None, 5, hours=200)
    assert np.array_equal(a.kw, b.kw) and np.array_equal(a.voltage, b.voltage)
    assert np.array_equal(ta.kw, tb.kw)


def test_flat_noise_free_days_repeat(feeder):
    cfg = ds.SynthConfig(flat=True, common_std=0.0, idio_std=0.0)
    h, truth = ds.synthesize_history(feeder, None, 2, cfg, hours=24 * 5)
    days = truth.kw.reshape(truth.kw.shape[0], 5, 24)
    assert np.allclose(days, days[:, :1], rtol=0, atol=1e-12)


def test_voltage_consistent_with_power_flow(feeder):
    h, truth = ds.synthesize_history(feeder, None, 4, hours=6)
    loads = ds.loads_from_kw(feeder, truth.kw, truth.kvar)
    pf = grid.forward_power_flow(feeder, loads)
    assert np.allclose(pf.voltages, truth.voltages, atol=1e-9)


@pytest.fixture(scope="module")
def long_history(feeder):
    return ds.synthesize_history(feeder, 3.0, 11)


def test_seasonality_and_voltage_correlation(long_history, feeder):
    h, truth = long_history
    s = season_of(truth.timestamps)
    summer = truth.kw[:, s == 2].mean(1)
    winter = truth.kw[:, s == 0].mean(1)
    ratio = summer / winter
    assert np.all((ratio >= 1.2) | (ratio <= 0.8))
    big = int(np.argmax(truth.kw.mean(1)))
    rho = np.corrcoef(h.kw[big], h.voltage[big])[0, 1]
    assert abs(rho) >= 0.5


def _series(values):
    v = np.asarray(values, dtype=float)[None, :]
    ts = ds.hour_grid("2016-01-01", v.shape[1])
    return ds.AmiHistory(ts, ("c",), v, np.ones_like(v), np.zeros(v.shape, np.int8), {})


def test_gross_error_single_spike():
    rng = np.random.default_rng(0)
    x = rng.normal(10, 1, 2000)
    x[100] = 20
    cleaned, mask = ds.remove_gross_errors(_series(x))
    assert list(np.flatnonzero(mask[0])) == [100]
    assert cleaned.quality[0, 100] == ds.REMOVED_BAD and np.isnan(cleaned.kw[0, 100])


def test_gross_error_none_within_two_sigma():
    x = 10 + np.tile([-1.9, 1.9, 0.0, 1.0], 50)
    _, mask = ds.remove_gross_errors(_series(x))
    assert not mask.any()


def test_gross_error_five_spikes(long_history):
    h, _ = long_history
    x = h.kw[0].copy()
    idx = np.array([10, 500, 4000, 9000, 20000])
    x[idx] = x.mean() + 8 * x.std()
    _, mask = ds.remove_gross_errors(_series(x))
    assert set(np.flatnonzero(mask[0])) == set(idx.tolist())


def test_gross_error_constant_series():
    _, mask = ds.remove_gross_errors(_series(np.full(10, 3.0)))
    assert not mask.any()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=5, max_size=60), st.integers(0, 2**31))
def test_cleaning_keeps_everything_within_five_sigma(values, seed):
    x = np.asarray(values)
    _, mask = ds.remove_gross_errors(_series(x))
    z = np.abs(x - x.mean()) / (x.std() or 1.0)
    assert not np.any(mask[0] & (z <= 5.0))


def test_normalize_examples():
    sc = ds.Scaling().fit("a", [0.0, 10.0])
    assert sc.apply("a", 5.0) == 0.5
    assert sc.apply("a", 0.0) == 0.0 and sc.apply("a", 10.0) == 1.0
    const = ds.Scaling().fit("c", [3.0, 3.0])
    assert const.constant("c") and const.apply("c", 3.0) == 0.5


def test_normalize_round_trip(long_history, tmp_path):
    h, _ = long_history
    norm, scaling = ds.normalize(h)
    finite = np.isfinite(norm.kw)
    assert norm.kw[finite].min() >= 0 and norm.kw[finite].max() <= 1
    back = ds.denormalize(norm, scaling)
    assert np.nanmax(np.abs(back.kw - h.kw)) < 1e-12
    assert np.nanmax(np.abs(back.voltage - h.voltage)) < 1e-12
    scaling.save(tmp_path / "s.json")
    assert ds.Scaling.load(tmp_path / "s.json").ranges == scaling.ranges


def test_split_examples():
    s = ds.split(10, 2)
    assert list(s.train) == list(range(8)) and list(s.test) == [8, 9]
    s = ds.split(100, 5)
    assert len(s.train) == 80 and len(s.test) == 20 and s.train.max() < s.test.min()
    with pytest.raises(ValueError):
        ds.split(3, 5)


@settings(max_examples=200, deadline=None)
@given(st.integers(13, 5000), st.integers(2, 10))
def test_fold_sizes(n, k):
    s = ds.split(n, k)
    sizes = [len(f) for f in s.folds]
    assert max(sizes) - min(sizes) <= 1
    assert np.array_equal(np.concatenate(s.folds), s.train)


def test_inject_bad_data_examples():
    x = np.arange(1.0, 21.0)
    out, mask = ds.inject_bad_data(x, 0, 1)
    assert np.array_equal(out, x) and not mask.any()
    out, mask = ds.inject_bad_data(x, 20, 1)
    assert mask.all()
    out, mask = ds.inject_bad_data(x, 5, 3)
    assert mask.sum() == 5 and np.array_equal(out[~mask], x[~mask])
    with pytest.raises(ValueError):
        ds.inject_bad_data(x, 21, 0)


def test_inject_bad_data_noise_level():
    vals = np.array([ds.inject_bad_data(np.array([10.0]), 1, s)[0][0] for s in range(10_000)])
    assert abs(vals.std() - 5.0) / 5.0 < 0.05
    assert abs(vals.mean() - 10.0) < 0.2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 50))
def test_corruption_deterministic(seed, n):
    x = np.linspace(1, 2, 50)
    a, ma = ds.inject_bad_data(x, n, seed)
    b, mb = ds.inject_bad_data(x, n, seed)
    assert np.array_equal(a, b) and np.array_equal(ma, mb)


def test_mask_missing_rates():
    h = _series(np.ones(10_000))
    assert not (ds.mask_missing(h, 0.0, 1).quality == ds.MISSING).any()
    assert (ds.mask_missing(h, 1.0, 1).quality == ds.MISSING).all()
    n = int((ds.mask_missing(h, 0.35, 1).quality == ds.MISSING).sum())
    assert 3300 <= n <= 3700
    a = ds.mask_missing(h, 0.35, 9).quality
    assert np.array_equal(a, ds.mask_missing(h, 0.35, 9).quality)


def test_mask_whole_customers(feeder):
    h, _ = ds.synthesize_history(feeder, None, 3, hours=24)
    m = ds.mask_missing(h, 0.0, 0, customers=("T01",), customer_rate=0.25)
    dead = (m.quality == ds.MISSING).all(axis=1)
    assert dead[h.index("T01")] and dead.sum() == 1 + 3


def test_cyclic_encoding():
    s, c = ds.cyclic(0, 24)
    assert (s, c) == (0.0, 1.0)
    s, c = ds.cyclic(np.arange(24), 24)
    assert np.allclose(s**2 + c**2, 1.0)
    # hour 23 sits next to hour 0
    d = lambda a, b: np.hypot(*(np.array(ds.cyclic(a, 24)) - np.array(ds.cyclic(b, 24))))
    assert d(23, 0) < d(12, 0)


@pytest.fixture(scope="module")
def builder(feeder):
    h, _ = ds.synthesize_history(feeder, None, 8, hours=24 * 20)
    h = ds.mask_missing(h, 0.0, 0, customers=("T02", "T03", "T06"))
    b = ds.FeatureBuilder(feeder, h, np.arange(24 * 15))
    return b


def test_feature_open_vs_closed(builder):
    fo = ds.build_features(builder, "n05", 30)
    fc = ds.build_features(builder, "n05", 30, p_tilde=0.4)
    a, b = fo.as_array(), fc.as_array()
    assert len(b) == len(a) + 1 and np.array_equal(b[:-1], a) and b[-1] == 0.4
    assert fo.t == tuple(float(x) for x in ds.cyclic(30 % 24, 24))


def test_feature_ranges(builder):
    builder.fit_dle("T05", np.linspace(0, 100, 10))
    X = builder.matrix("T05", np.arange(24 * 15), p_tilde=np.linspace(-50, 150, 24 * 15))
    own, nbrs = builder.sources("n05")
    nv = int(own is not None) + len(nbrs)
    assert X.shape[1] == builder.dim("n05", True)
    assert X[:, :nv].min() >= 0 and X[:, :nv].max() <= 1
    assert X[:, -1].min() == 0 and X[:, -1].max() == 1
    cyc = X[:, nv:nv + 4]
    assert np.allclose(cyc[:, 0] ** 2 + cyc[:, 1] ** 2, 1) and np.allclose(cyc[:, 2] ** 2 + cyc[:, 3] ** 2, 1)


def test_feature_errors(builder):
    with pytest.raises(KeyError):
        ds.build_features(builder, "nope", 0)
    h = ds.mask_missing(builder.history, 0.0, 0, customers=("T01",))
    b = ds.FeatureBuilder(builder.topology, h, np.arange(24 * 15))
    # imputation keeps the dimension fixed when a neighbour reading is absent
    assert b.matrix("T05", [3]).shape[1] == b.dim("n05", False)
    b2 = ds.FeatureBuilder(builder.topology, builder.history, np.arange(24 * 15))
    b2.bus_v[5, builder.topology.bus_index["n01"]] = np.nan
    with pytest.raises(ds.MissingFeatureError):
        b2.matrix("T01", [5], impute=False)
    assert np.isfinite(b2.matrix("T01", [5])).all()


def test_inject_bad_data_rows():
    x = np.arange(1.0, 31.0).reshape(10, 3)
    out, mask = ds.inject_bad_data(x, 4, 2)
    assert mask.shape == (10,) and mask.sum() == 4
    assert np.array_equal(out[~mask], x[~mask])
    assert np.all(out[mask] != x[mask])
    with pytest.raises(ValueError):
        ds.inject_bad_data(x, 11, 0)
