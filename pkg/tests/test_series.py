import numpy as np
import pytest

from tsinterp.series import (
    FAMILIES,
    SHIFT_PULSE_WIDTH,
    DataError,
    Series,
    gen_chirp,
    gen_diagnostic_suite,
    gen_hetero_noise,
    gen_level_shift,
    gen_trend,
    load_csv,
    load_suite,
    make_windows,
    save_suite,
)


def test_trend_generator_definition():
    s = gen_trend(200, slope=0.3, noise=0.0)
    np.testing.assert_allclose(s.values, 0.3 * np.arange(200))
    np.testing.assert_array_equal(s.channels.trend_slope, 0.3)
    np.testing.assert_allclose(np.diff(s.values), s.channels.trend_slope[1:], atol=1e-4)


def test_level_shift_pulse():
    s = gen_level_shift(256, shift_time=100, magnitude=1.5, noise=0.0)
    ind = s.channels.level_shift_indicator
    half = SHIFT_PULSE_WIDTH // 2
    expected = np.zeros(256)
    expected[100 - half : 100 + half] = 1.0
    np.testing.assert_array_equal(ind, expected)
    down = gen_level_shift(256, 100, -0.5).channels.level_shift_indicator
    assert set(np.unique(down)) == {-1.0, 0.0}


def test_chirp_frequency_strictly_increasing():
    s = gen_chirp(256, 0.01, 0.2)
    assert np.all(np.diff(s.channels.instantaneous_frequency) > 0)


def test_hetero_rolling_std_tracks_volatility():
    rng = np.random.default_rng(0)
    s = gen_hetero_noise(2048, [0, 700, 1400, 2047], [0.1, 1.5, 0.2, 1.0], rng=rng)
    w = 32
    roll = np.array([s.values[max(0, t - w // 2) : t + w // 2].std() for t in range(len(s))])
    r = np.corrcoef(roll, s.channels.rolling_volatility)[0, 1]
    assert r > 0.9
    assert np.all(s.channels.rolling_volatility >= 0)


def test_suite_is_deterministic_and_complete():
    a = gen_diagnostic_suite(5, 2, length=160)
    b = gen_diagnostic_suite(5, 2, length=160)
    assert len(a) == 2 * len(FAMILIES)
    assert {s.family for s in a} == set(FAMILIES)
    for x, y in zip(a, b):
        assert x.values.tobytes() == y.values.tobytes()
        for k, v in x.channels.as_dict().items():
            assert v.tobytes() == y.channels.as_dict()[k].tobytes()
            assert len(v) == 160
        assert set(np.unique(x.channels.level_shift_indicator)) <= {-1.0, 0.0, 1.0}
    assert gen_diagnostic_suite(6, 2, length=160)[0].values.tobytes() != a[0].values.tobytes()


def test_suite_length_floor():
    with pytest.raises(ValueError):
        gen_diagnostic_suite(0, 1, length=100)


def test_load_csv_selects_column(tmp_path):
    p = tmp_path / "ett.csv"
    rows = ["date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT"]
    for i in range(5):
        rows.append(f"2016-07-01 0{i}:00:00,{i},1,2,3,4,5,{10 + i}.5")
    p.write_text("\n".join(rows) + "\n")
    s = load_csv(p, "OT")
    np.testing.assert_array_equal(s.values, [10.5, 11.5, 12.5, 13.5, 14.5])
    assert s.channels is None


def test_load_csv_simple_and_errors(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("t,OT\n0,1\n1,2\n2,3\n")
    np.testing.assert_array_equal(load_csv(p, "OT").values, [1, 2, 3])
    bad = tmp_path / "b.csv"
    bad.write_text("t,OT\n0,1\n1,\n2,3\n")
    with pytest.raises(DataError, match="row 3"):
        load_csv(bad, "OT")
    with pytest.raises(DataError, match="column"):
        load_csv(p, "missing")
    with pytest.raises(DataError, match="not found"):
        load_csv(tmp_path / "nope.csv", "OT")


def test_make_windows_offsets():
    s = Series(np.arange(10.0), "s")
    ws = make_windows(s, 4, 2, stride=4)
    assert [w.offset for w in ws] == [0, 4]
    np.testing.assert_array_equal(ws[1].context, [4, 5, 6, 7])
    np.testing.assert_array_equal(ws[1].target, [8, 9])
    assert len(make_windows(Series(np.arange(6.0), "t"), 4, 2)) == 1
    assert len(make_windows(s, 4, 2, max_windows=1)) == 1
    with pytest.raises(DataError):
        make_windows(Series(np.arange(5.0), "u"), 4, 2)


def test_make_windows_deterministic_subsample():
    s = Series(np.arange(500.0), "s")
    a = [w.offset for w in make_windows(s, 20, 5, max_windows=7, seed=3)]
    b = [w.offset for w in make_windows(s, 20, 5, max_windows=7, seed=3)]
    assert a == b and a == sorted(a) and len(set(a)) == 7
    assert all(o + 25 <= 500 for o in a)


def test_windows_do_not_alias():
    s = Series(np.arange(10.0), "s")
    w = make_windows(s, 4, 2)[0]
    w.context[:] = -1
    w.target[:] = -1
    np.testing.assert_array_equal(s.values, np.arange(10.0))


def test_suite_save_load_round_trip(tmp_path):
    suite = gen_diagnostic_suite(1, 1, length=128)
    save_suite(suite, tmp_path / "suite")
    back = load_suite(tmp_path / "suite")
    assert [s.name for s in back] == [s.name for s in suite]
    for a, b in zip(suite, back):
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.channels.noise_amplitude, b.channels.noise_amplitude)
        assert a.family == b.family
