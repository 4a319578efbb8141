import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loopdsse import aggregator as ag
from oracles import loss_streams, play


def test_seasons():
    ts = np.array(["2016-01-15T00", "2016-12-01T00", "2016-07-04T12", "2016-03-01T00"], dtype="datetime64[h]")
    assert list(ag.season_of(ts)) == [0, 0, 2, 1]
    year = np.datetime64("2015-01-01T00") + np.arange(8760) * np.timedelta64(1, "h")
    parts = ag.season_partition(year)
    assert sum(len(p) for p in parts) == 8760
    assert len(np.unique(np.concatenate(parts))) == 8760
    for p in parts:
        assert abs(len(p) - 8760 / 4) <= 0.04 * 8760 / 4


def test_combine_examples():
    assert ag.combine([2, 4], [1, 1]) == 3
    f = np.array([1.5, 2.5, -3.0, 7.0])
    for j in range(4):
        assert ag.combine(f, np.eye(4)[j]) == f[j]
    with pytest.raises(ValueError):
        ag.combine(f, np.zeros(4))


def test_combine_hull_and_variance_sweep():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        f = rng.normal(size=4) * 10
        v = rng.uniform(0, 5, 4)
        w = rng.dirichlet(np.ones(4))
        p = ag.combine(f, w)
        assert f.min() <= p <= f.max()
        assert ag.combine_variance(v, w) <= v.max()


def test_combine_variance_examples():
    assert ag.combine_variance(np.ones(4), np.ones(4)) == 0.25
    v = np.array([0.3, 0.7, 1.1, 2.0])
    assert ag.combine_variance(v, np.eye(4)[2]) == v[2]
    with pytest.raises(ValueError):
        ag.combine_variance(v, np.zeros(4))


def test_regret_update_examples():
    s = ag.RegretState()
    same = ag.regret_update(s, [1, 1, 1, 1], 1.0, 1.0)
    assert np.all(same.R == 0) and same.t == 1
    s2 = ag.regret_update(s, [1, 1, 1, 1], 2.0, 0.0)
    assert np.all(s2.R == 1.0)
    assert ag.regret_update(s, [1, 1, 1, 1], 2.0, None) is s
    assert ag.regret_update(s, [1, 1, 1, 1], 2.0, float("nan")) is s


def test_blackwell_condition():
    rng = np.random.default_rng(3)
    _, _, _, bw = play(rng.uniform(size=(500, 4)), rng.uniform(size=500))
    assert np.all(bw <= 1e-12)


def test_weights_examples():
    s = ag.RegretState(R=np.full(4, 17.0), t=5)
    assert np.allclose(ag.weights_from_regret(s), 0.25, atol=1e-15)
    assert ag.eta(1, 4) == pytest.approx(3.33022, abs=1e-5)
    big = ag.RegretState(R=np.array([700 / ag.eta(1, 4), 0, 0, 0]), t=1)
    w = ag.weights_from_regret(big)
    assert np.all(np.isfinite(w)) and w[0] == pytest.approx(1.0)
    assert np.allclose(ag.weights_from_regret(ag.RegretState()), 0.25)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), st.integers(1, 10**6), st.floats(-1e3, 1e3))
def test_simplex_and_shift_invariance(R, t, c):
    R = np.asarray(R)
    w = ag.weights_from_regret(ag.RegretState(R=R, t=t))
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-12
    w2 = ag.weights_from_regret(ag.RegretState(R=R + c, t=t))
    assert np.max(np.abs(w - w2)) <= 1e-12


def test_regret_bound_examples():
    assert ag.regret_bound(100, 4) == pytest.approx(17.068, abs=1e-3)
    assert ag.regret_bound(1, 2) == pytest.approx(1.471, abs=1e-3)
    b = [ag.regret_bound(m, 4) for m in range(1, 10_001)]
    assert np.all(np.diff(b) > 0)
    with pytest.raises(ValueError):
        ag.regret_bound(0, 4)


@pytest.mark.parametrize("name", ["adversarial", "alternating", "random", "constant"])
def test_regret_guarantee(name):
    f, y = {n: (a, b) for n, a, b in loss_streams(m=500)}[name]
    state, maxr, _, _ = play(f, y)
    bounds = np.array([ag.regret_bound(m, 4) for m in range(1, 501)])
    assert np.all(maxr <= bounds + 1e-9)
    assert state.aggregate_loss <= state.expert_loss.min() + state.loss_scale * bounds[-1] + 1e-9


def test_state_validation():
    with pytest.raises(ValueError):
        ag.RegretState(M=1)
    with pytest.raises(ValueError):
        ag.RegretState(loss_scale=0)


def test_weight_trace_csv(tmp_path):
    tr = ag.WeightTrace()
    s = ag.RegretState()
    tr.record(s, ag.weights_from_regret(s))
    s = ag.regret_update(s, [0, 1, 2, 3], 1.5, 1.0)
    tr.record(s, ag.weights_from_regret(s))
    tr.write(tmp_path / "w.csv", "abc")
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == "# abc" and lines[1] == ",".join(ag.WEIGHT_TRACE_HEADER)
    assert len(lines) == 4
    assert math.isclose(float(lines[3].split(",")[-1]), ag.regret_bound(1, 4))
