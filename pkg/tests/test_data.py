import numpy as np
import pytest

from fanbeats.data import (
    DataConfigError,
    DataError,
    DomainSpec,
    ParseError,
    Series,
    SeriesCollection,
    build_domain_dataset,
    build_datasets,
    desk_benchmark_spec,
    enumerate_scenarios,
    is_valid_scenario,
    load_series_csv,
    make_scenario,
    make_windows,
    sample_batch,
    save_series_csv,
    split_sizes,
    superdomain_map,
    synth_generate,
)

SUPER = superdomain_map(desk_benchmark_spec())


def _write(tmp_path, text):
    p = tmp_path / "s.csv"
    p.write_text(text)
    return p


# csv --------------------------------------------------------------------------------


def test_csv_header_only_is_empty(tmp_path):
    assert len(load_series_csv(_write(tmp_path, "series_id,domain_id,t,value\n"))) == 0


def test_csv_one_series(tmp_path):
    col = load_series_csv(_write(tmp_path, "series_id,domain_id,t,value\na,x,1,1.5\na,x,2,2.5\na,x,3,-1\n"))
    assert len(col) == 1
    assert np.array_equal(col.series[0].values, [1.5, 2.5, -1.0])


def test_csv_interleaved_series_keep_row_order(tmp_path):
    text = "series_id,domain_id,t,value\na,x,1,1\nb,y,1,10\na,x,2,2\nb,y,2,20\na,x,3,3\n"
    col = load_series_csv(_write(tmp_path, text))
    by_id = {s.series_id: s for s in col.series}
    assert np.array_equal(by_id["a"].values, [1, 2, 3])
    assert np.array_equal(by_id["b"].values, [10, 20])
    assert col.domains() == ["x", "y"]


@pytest.mark.parametrize(
    "body, line",
    [
        ("a,x,1,1\na,x,2\n", 3),
        ("a,x,1,1\na,x,2,abc\n", 3),
        ("a,x,2,1\na,x,1,2\n", 3),
        ("a,x,1,1\na,z,2,2\n", 3),
    ],
)
def test_csv_malformed_rows_report_line(tmp_path, body, line):
    with pytest.raises(ParseError, match=f":{line}:"):
        load_series_csv(_write(tmp_path, "series_id,domain_id,t,value\n" + body))


def test_csv_errors(tmp_path):
    with pytest.raises(DataError, match="non-finite"):
        load_series_csv(_write(tmp_path, "series_id,domain_id,t,value\na,x,1,inf\n"))
    with pytest.raises(ParseError, match="missing columns"):
        load_series_csv(_write(tmp_path, "series_id,t,value\na,1,1\n"))
    with pytest.raises(FileNotFoundError, match="nope.csv"):
        load_series_csv(tmp_path / "nope.csv")


def test_csv_lexicographic_time_keys(tmp_path):
    text = "series_id,domain_id,t,value\na,x,2020-01,1\na,x,2020-02,2\n"
    assert len(load_series_csv(_write(tmp_path, text)).series[0].values) == 2
    with pytest.raises(ParseError):
        load_series_csv(_write(tmp_path, text + "a,x,2019-12,3\n"))


def test_csv_roundtrip(tmp_path):
    col = synth_generate(desk_benchmark_spec(length=60, n_series=2), seed=3)
    back = load_series_csv(save_series_csv(col, tmp_path / "c.csv"))
    assert [s.series_id for s in back.series] == [s.series_id for s in col.series]
    for a, b in zip(col.series, back.series):
        assert a.domain_id == b.domain_id and np.array_equal(a.values, b.values)


# windows ----------------------------------------------------------------------------


def test_window_counts():
    assert len(make_windows(np.arange(5.0), 2, 1)[0]) == 3
    assert len(make_windows(np.arange(3.0), 2, 1)[0]) == 1
    assert len(make_windows(np.arange(2.0), 2, 1)[0]) == 0
    assert make_windows(np.arange(2.0), 2, 1)[0].shape == (0, 2)
    for n, a, b, s in [(20, 3, 2, 1), (20, 3, 2, 3), (17, 4, 4, 5), (9, 4, 5, 2)]:
        X, Y = make_windows(np.arange(float(n)), a, b, s)
        assert len(X) == max(0, (n - a - b) // s + 1)


def test_windows_reassemble_source_slices():
    v = np.random.default_rng(0).normal(size=40)
    X, Y = make_windows(v, 7, 3, stride=2)
    for i in range(len(X)):
        assert np.array_equal(np.concatenate([X[i], Y[i]]), v[2 * i : 2 * i + 10])


# datasets ---------------------------------------------------------------------------


def _col():
    return SeriesCollection([Series("a", "x", np.arange(30.0)), Series("b", "x", 100 + np.arange(25.0))])


def test_split_sizes_seven_one_two():
    assert split_sizes(10) == (7, 1, 2)
    assert sum(split_sizes(2000)) == 2000 and split_sizes(2000) == (1400, 200, 400)


def test_dataset_splits_disjoint_exhaustive_and_seeded():
    ds = build_domain_dataset(_col(), "x", 10, seed=4, alpha=5, beta=2)
    parts = [set(ds.train_idx), set(ds.val_idx), set(ds.test_idx)]
    assert [len(p) for p in parts] == [7, 1, 2]
    assert set.union(*parts) == set(range(10)) and sum(map(len, parts)) == 10
    again = build_domain_dataset(_col(), "x", 10, seed=4, alpha=5, beta=2)
    assert np.array_equal(ds.X, again.X) and np.array_equal(ds.test_idx, again.test_idx)


def test_dataset_windows_are_contiguous_in_source():
    col = _col()
    ds = build_domain_dataset(col, "x", 30, seed=1, alpha=5, beta=2)
    for (pos, off), x, y in zip(ds.origin, ds.X, ds.Y):
        src = col.series[pos].values
        assert np.array_equal(np.concatenate([x, y]), src[off : off + 7])


def test_dataset_shortfall_and_replacement():
    # pool: (30-7+1) + (25-7+1) = 43
    with pytest.raises(DataConfigError, match="shortfall 7"):
        build_domain_dataset(_col(), "x", 50, alpha=5, beta=2)
    ds = build_domain_dataset(_col(), "x", 50, alpha=5, beta=2, replace=True)
    assert ds.with_replacement and len(ds) == 50
    assert not build_domain_dataset(_col(), "x", 43, alpha=5, beta=2, replace=True).with_replacement


def test_dataset_without_windows_is_config_error():
    with pytest.raises(DataConfigError, match="no windows"):
        build_domain_dataset(_col(), "x", 5, alpha=30, beta=5)


def test_split_by_series_has_no_shared_series():
    col = synth_generate(desk_benchmark_spec(length=80, n_series=10), seed=0)
    ds = build_domain_dataset(col, "rain", 300, alpha=10, beta=5, split_by_series=True)
    groups = [set(ds.origin[idx, 0]) for idx in (ds.train_idx, ds.val_idx, ds.test_idx)]
    assert all(groups)
    assert not (groups[0] & groups[1] or groups[0] & groups[2] or groups[1] & groups[2])


def test_sample_batch_membership_and_determinism():
    ds = build_domain_dataset(_col(), "x", 20, seed=0, alpha=5, beta=2)
    Xtr = {tuple(r) for r in ds.split("train")[0]}
    x, _ = sample_batch(ds, "train", 1000, np.random.default_rng(0))
    assert all(tuple(r) in Xtr for r in x.data)
    x2, _ = sample_batch(ds, "train", 1000, np.random.default_rng(0))
    assert np.array_equal(x.data, x2.data)


def test_sample_batch_single_instance_and_empty_split():
    ds = build_domain_dataset(_col(), "x", 10, seed=0, alpha=5, beta=2)
    x, y = sample_batch(ds, "val", 1, np.random.default_rng(0))
    assert np.array_equal(x.data[0], ds.split("val")[0][0])
    ds.val_idx = ds.val_idx[:0]
    with pytest.raises(DataConfigError, match="empty"):
        sample_batch(ds, "val", 4, np.random.default_rng(0))


# scenarios --------------------------------------------------------------------------


def _independent_validity(sc, sup):
    t = sup[sc.target]
    srcs = [sup[s] for s in sc.sources]
    if sc.target in sc.sources:
        return False
    if sc.kind == "ODG":
        return all(s != t for s in srcs) and len(set(srcs)) == 1
    if sc.kind == "IDG":
        return all(s == t for s in srcs)
    return len(set(srcs)) == 2 and sum(s == t for s in srcs) == 1


def test_idg_uses_the_other_three_domains():
    sc = make_scenario(SUPER, "IDG", "wind")
    assert set(sc.sources) == {"pressure", "rain", "temperature"}


def test_odg_commodity_from_weather_sources():
    sc = make_scenario(SUPER, "ODG", "commodity")
    assert all(SUPER[s] == "wx" for s in sc.sources) and is_valid_scenario(sc, SUPER)


def test_cdg_one_same_superdomain_source():
    sc = make_scenario(SUPER, "CDG", "commodity", p=2)
    assert sum(SUPER[s] == "fin" for s in sc.sources) == 1 and len(sc.sources) == 3


@pytest.mark.parametrize("kind, count", [("ODG", 8 * 4), ("IDG", 8), ("CDG", 8 * 3 * 6)])
def test_enumeration_counts_and_validity(kind, count):
    scs = list(enumerate_scenarios(SUPER, kind))
    assert len(scs) == count and len(set(scs)) == count
    assert all(_independent_validity(sc, SUPER) and is_valid_scenario(sc, SUPER) for sc in scs)


def test_scenario_errors():
    with pytest.raises(DataConfigError):
        make_scenario(SUPER, "XDG", "rain")
    with pytest.raises(DataConfigError):
        make_scenario(SUPER, "IDG", "atlantis")
    with pytest.raises(DataConfigError, match="K=4"):
        make_scenario(SUPER, "IDG", "rain", K=4)


# synthetic --------------------------------------------------------------------------


def test_synth_constant_series():
    col = synth_generate([DomainSpec("c", "s", 2, 50, (3.0, 3.0))], seed=0)
    assert all(np.all(s.values == 3.0) for s in col.series)


def test_synth_fft_peak_at_period():
    period = 16.0
    col = synth_generate([DomainSpec("p", "s", 3, 256, (0.0, 0.0), periods=(period,), amplitude_range=(1, 2))], seed=5)
    for s in col.series:
        spec = np.abs(np.fft.rfft(s.values))
        k = int(np.argmax(spec[1:]) + 1)
        assert 256 / k == pytest.approx(period)


def test_synth_seeded_and_empty_spec():
    spec = desk_benchmark_spec(length=60, n_series=2)
    a, b = synth_generate(spec, seed=9), synth_generate(spec, seed=9)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a.series, b.series))
    with pytest.raises(DataConfigError):
        synth_generate([], seed=0)


def test_scale_removal_sanity():
    from fanbeats import numcore as nc
    from fanbeats.align import normalize
    from fanbeats.model import build_model, model_forward_full

    spec = [
        DomainSpec("u", "s", 4, 120, (5, 8), (0.0, 0.01), (12.0,), (0.5, 1.0), 0.1, 1.0),
        DomainSpec("h", "s", 4, 120, (5, 8), (0.0, 0.01), (12.0,), (0.5, 1.0), 0.1, 100.0),
    ]
    ds = build_datasets(synth_generate(spec, seed=0), superdomain_map(spec), 200, 20, 5)
    ratio = ds["h"].X.mean() / ds["u"].X.mean()
    assert 50 < ratio < 200
    model = build_model(20, 5, 16, M=1, L=2, n_layers=2, head_init="uniform")
    with nc.no_grad():
        ranges = []
        for d in ("u", "h"):
            z = normalize(model_forward_full(nc.Tensor(ds[d].X), model).taps[0], "softmax").data
            ranges.append((z.min(), z.max()))
    (lo1, hi1), (lo2, hi2) = ranges
    assert max(lo1, lo2) < min(hi1, hi2)
    assert 0.0 <= min(lo1, lo2) and max(hi1, hi2) <= 1.0
